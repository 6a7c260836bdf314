"""Tests for the variance-swap fair-strike replication."""

import math

import numpy as np
import pytest
from scipy.integrate import quad

from volsurrogate.analytics import bs_call, bs_put
from volsurrogate.exceptions import ConvergenceError, ParameterError
from volsurrogate.varswap import VarSwapInputs, fair_strike, strike_vol
from volsurrogate.volsurface import SviSlice, SurfaceParams, atm_bs_vol

BASELINE = SviSlice(0.01, 0.15, -0.1, 0.2, 0.2)


def fair_strike_quad_oracle(smile, rate, tol=1e-10):
    """Adaptive-quadrature replication, independent of the Simpson path."""

    def put_part(x):
        k = s0 * math.exp(x)
        vol = strike_vol(k, smile, rate, 1.0, s0)
        return bs_put(s0, k, rate, vol, 1.0) / k

    def call_part(x):
        k = s0 * math.exp(x)
        vol = strike_vol(k, smile, rate, 1.0, s0)
        return bs_call(s0, k, rate, vol, 1.0) / k

    s0 = 1.0
    ip = quad(put_part, -10.0, 0.0, epsabs=tol, epsrel=tol, limit=400)[0]
    ic = quad(call_part, 0.0, 10.0, epsabs=tol, epsrel=tol, limit=400)[0]
    growth = math.exp(rate)
    return 2.0 * (rate + 1.0 - growth + growth * (ip + ic))


class TestStrikeVol:
    def test_forward_strike_recovers_atm_vol(self):
        rate = 0.03
        forward = math.exp(rate)
        atm = atm_bs_vol(SurfaceParams(BASELINE, 0.0), 1.0)
        assert strike_vol(forward, BASELINE, rate) == pytest.approx(atm, rel=1e-14)
        assert strike_vol(forward, BASELINE, rate) == pytest.approx(0.16, abs=5e-3)

    def test_flat_slice_gives_constant_vol(self):
        smile = SviSlice(0.04, 0.0, 0.0, 0.0, 0.5)
        for k in (0.1, 0.7, 1.0, 2.5):
            assert strike_vol(k, smile, 0.02) == pytest.approx(0.2, rel=1e-14)

    def test_nonpositive_strike_raises(self):
        with pytest.raises(ParameterError):
            strike_vol(0.0, BASELINE, 0.0)
        with pytest.raises(ParameterError):
            strike_vol(-1.0, BASELINE, 0.0)


class TestFairStrike:
    def test_flat_skew_identity_zero_rate(self):
        smile = SviSlice(0.04, 0.0, 0.0, 0.0, 0.5)
        assert fair_strike(VarSwapInputs(smile, 0.0)) == pytest.approx(0.04, abs=1e-6)

    def test_flat_skew_identity_with_rate(self):
        smile = SviSlice(0.04, 0.0, 0.0, 0.0, 0.5)
        assert fair_strike(VarSwapInputs(smile, 0.05)) == pytest.approx(0.04, abs=1e-6)

    def test_flat_skew_identity_random(self):
        rng = np.random.default_rng(21)
        for _ in range(30):
            a_prime = rng.uniform(0.001, 0.02)
            rate = rng.uniform(0.0, 0.06)
            smile = SviSlice(a_prime, 0.0, 0.0, 0.0, rng.uniform(0.1, 1.0))
            assert fair_strike(VarSwapInputs(smile, rate)) == pytest.approx(a_prime, abs=1e-6)

    def test_against_adaptive_quadrature_oracle(self):
        for smile, rate in (
            (BASELINE, 0.03),
            (SviSlice(0.012, 0.25, 0.5, -0.1, 0.8), 0.01),
            (SviSlice(0.005, 0.08, -0.3, 0.4, 0.3), 0.055),
        ):
            got = fair_strike(VarSwapInputs(smile, rate))
            assert got == pytest.approx(fair_strike_quad_oracle(smile, rate), abs=5e-8)

    def test_refinement_stability(self):
        from volsurrogate.varswap import _kvar_estimate

        inputs = VarSwapInputs(BASELINE, 0.03)
        coarse = _kvar_estimate(inputs, 2**13)
        fine = _kvar_estimate(inputs, 2**14)
        assert abs(fine - coarse) < 1e-8

    def test_baseline_positive_and_smooth_in_each_factor(self):
        base = {"a_prime": 0.01, "b": 0.15, "rho": -0.1, "m": 0.2, "sigma": 0.2, "r": 0.03}
        ranges = {
            "a_prime": (0.001, 0.02),
            "b": (0.0, 0.3),
            "rho": (-0.4, 0.8),
            "m": (-0.2, 0.6),
            "sigma": (0.05, 1.0),
            "r": (0.0, 0.06),
        }
        for factor, (lo, hi) in ranges.items():
            values = np.linspace(lo, hi, 25)
            kvars = []
            for v in values:
                p = base | {factor: v}
                smile = SviSlice(p["a_prime"], p["b"], p["rho"], p["m"], p["sigma"])
                kvars.append(fair_strike(VarSwapInputs(smile, p["r"])))
            kvars = np.array(kvars)
            assert np.all(np.isfinite(kvars)) and np.all(kvars > 0)
            # smooth: adjacent increments never jump an order of magnitude
            steps = np.abs(np.diff(kvars))
            typical = np.median(steps) + 1e-12
            assert steps.max() < 10 * typical + 1e-9
            if factor == "a_prime":
                assert np.all(np.diff(kvars) > 0)

    def test_nonconvergence_raises(self):
        with pytest.raises(ConvergenceError):
            fair_strike(
                VarSwapInputs(BASELINE, 0.03),
                tol=1e-15,
                initial_intervals=4096,
                max_intervals=8192,
            )

    def test_inputs_validation(self):
        with pytest.raises(ParameterError):
            VarSwapInputs(BASELINE, math.inf)
        with pytest.raises(ParameterError):
            VarSwapInputs(BASELINE, 0.0, maturity=0.0)
        with pytest.raises(ParameterError):
            VarSwapInputs(BASELINE, 0.0, spot=-1.0)
