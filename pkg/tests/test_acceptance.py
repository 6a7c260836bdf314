"""Acceptance suite: the ten exit criteria, one printed PASS/FAIL line each.

Criterion 6 trains at full scale (40 x 31 hyperparameter grid on 5,000
training rows shared across four targets) and dominates the runtime; it uses
the pregenerated dataset under data/ when present (seeds recorded in the
manifest) and regenerates it otherwise.
"""

import dataclasses
import json
import math
import sys
import time
from pathlib import Path

import numpy as np
import pytest

import conftest
import volsurrogate.dataset as ds
from volsurrogate.analytics import bs_put
from volsurrogate.fdsolver import GridSpec, PdeProblem, default_grid, solve
from volsurrogate.gpr import GprSurrogate, log_marginal_likelihood, predict_joint
from volsurrogate.varswap import VarSwapInputs, fair_strike
from volsurrogate.volsurface import (
    SurfaceParams,
    SviSlice,
    surface_dk,
    surface_dt,
    total_variance_surface,
)

DATA_DIR = Path(__file__).resolve().parent.parent / "data"
AMPUT_SEED = 20240601
VARSWAP_SEED = 92001


def _report(num: int, name: str, passed: bool, detail: str = ""):
    line = f"ACCEPTANCE {num:02d} {name}: {'PASS' if passed else 'FAIL'}"
    if detail:
        line += f" ({detail})"
    print(line, file=sys.__stdout__, flush=True)
    conftest.acceptance_lines.append(line)
    assert passed, line


def crr_american_put(s0, strike, rate, vol, maturity, steps):
    dt = maturity / steps
    up = math.exp(vol * math.sqrt(dt))
    down = 1.0 / up
    prob = (math.exp(rate * dt) - down) / (up - down)
    disc = math.exp(-rate * dt)
    j = np.arange(steps + 1)
    values = np.maximum(strike - s0 * up**j * down ** (steps - j), 0.0)
    for i in range(steps - 1, -1, -1):
        values = disc * (prob * values[1:i + 2] + (1 - prob) * values[:i + 1])
        stock = s0 * up ** np.arange(i + 1) * down ** (i - np.arange(i + 1))
        values = np.maximum(values, strike - stock)
    return float(values[0])


# ---------------------------------------------------------------- fixtures
@pytest.fixture(scope="session")
def varswap_artifacts(tmp_path_factory):
    """Full variance-swap pipeline: gen -> fit -> eval, with timings."""
    out = tmp_path_factory.mktemp("acc_varswap")
    started = time.perf_counter()
    train_path = out / "varswap_train.csv"
    test_path = out / "varswap_test.csv"
    ds.generate("varswap", "train", 2000, VARSWAP_SEED, train_path)
    ds.generate("varswap", "test", 2000, VARSWAP_SEED + 1, test_path)
    train = ds.read_dataset(train_path)
    test = ds.read_dataset(test_path)
    model = GprSurrogate(noise_level_grid=[0.0]).fit(train.x, train.y[:, 0])
    report = ds.evaluate({"k_var": model}, test)
    elapsed = time.perf_counter() - started
    return {
        "out": out,
        "train_path": train_path,
        "test_path": test_path,
        "train": train,
        "test": test,
        "model": model,
        "report": report,
        "pipeline_seconds": elapsed,
    }


@pytest.fixture(scope="session")
def amput_artifacts(tmp_path_factory):
    """American-put datasets (shipped or regenerated) plus full-scale fit."""
    grid = GridSpec(n_s=200, n_t=200)
    train_path = DATA_DIR / "amput_train.csv"
    test_path = DATA_DIR / "amput_test.csv"
    gen_seconds = 0.0
    if not (train_path.exists() and test_path.exists()):
        out = tmp_path_factory.mktemp("acc_amput")
        train_path = out / "amput_train.csv"
        test_path = out / "amput_test.csv"
        started = time.perf_counter()
        ds.generate("amput", "train", 5000, AMPUT_SEED, train_path, grid=grid, n_jobs=2)
        ds.generate("amput", "test", 2000, AMPUT_SEED + 1, test_path, grid=grid, n_jobs=2)
        gen_seconds = time.perf_counter() - started
    train = ds.read_dataset(train_path)
    test = ds.read_dataset(test_path)

    # integrity spot-check: recomputing a shipped row reproduces it exactly
    for row in (17, 1503):
        values, reason = ds._evaluate_candidate(("amput", train.x[row], grid, 1e-8))
        assert reason is None
        assert np.allclose(values, train.y[row], rtol=0, atol=1e-12)

    fit_started = time.perf_counter()
    model = GprSurrogate().fit(train.x, train.y)
    fit_seconds = time.perf_counter() - fit_started
    singles = {t: model.extract_target(i) for i, t in enumerate(train.target_names)}
    report = ds.evaluate(singles, test)
    return {
        "train": train,
        "test": test,
        "model": model,
        "singles": singles,
        "report": report,
        "gen_seconds": gen_seconds,
        "fit_seconds": fit_seconds,
    }


# --------------------------------------------------------------- criteria
def test_criterion_01_flat_skew_variance_swap_identity():
    rng = np.random.default_rng(101)
    started = time.perf_counter()
    worst = 0.0
    for _ in range(100):
        a_prime = rng.uniform(0.001, 0.02)
        rate = rng.uniform(0.0, 0.06)
        smile = SviSlice(a_prime, 0.0, rng.uniform(-0.4, 0.8),
                         rng.uniform(-0.2, 0.6), rng.uniform(0.1, 1.0))
        k_var = fair_strike(VarSwapInputs(smile, rate))
        worst = max(worst, abs(k_var - a_prime))
    elapsed = time.perf_counter() - started
    _report(
        1, "flat-skew variance-swap identity",
        worst < 1e-6 and elapsed < 10.0,
        f"max |K_var - a'| = {worst:.2e}, {elapsed:.1f}s",
    )


def test_criterion_02_european_consistency_500():
    rng = np.random.default_rng(102)
    grid = default_grid(1.0, n=500)
    started = time.perf_counter()
    worst = 0.0
    for _ in range(50):
        vol = rng.uniform(0.1, 0.5)
        rate = rng.uniform(0.0, 0.06)
        sol = solve(PdeProblem("put", "european", 1.0, rate, vol**2), grid, spot=1.0)
        ref = bs_put(1.0, 1.0, rate, vol, 1.0)
        worst = max(worst, abs(sol.value - ref))
    elapsed = time.perf_counter() - started
    _report(
        2, "European consistency on 500^2",
        worst < 1e-3 and elapsed < 300.0,
        f"max |CN - closed form| = {worst:.2e}, {elapsed:.0f}s",
    )


def test_criterion_03_american_degeneracies():
    grid = default_grid(1.0, n=500)
    started = time.perf_counter()
    call_a = solve(PdeProblem("call", "american", 1.0, 0.05, 0.03), grid).value
    call_e = solve(PdeProblem("call", "european", 1.0, 0.05, 0.03), grid).value
    put_a = solve(PdeProblem("put", "american", 1.0, 0.0, 0.03), grid).value
    put_e = solve(PdeProblem("put", "european", 1.0, 0.0, 0.03), grid).value
    elapsed = time.perf_counter() - started
    call_gap = abs(call_a - call_e)
    put_gap = abs(put_a - put_e)
    _report(
        3, "American degeneracies",
        call_gap < 1e-6 and put_gap < 1e-6 and elapsed < 120.0,
        f"call gap {call_gap:.2e}, r=0 put gap {put_gap:.2e}, {elapsed:.0f}s",
    )


def test_criterion_04_american_put_vs_binomial_oracle():
    grid = default_grid(1.0, n=500)
    sol = solve(PdeProblem("put", "american", 1.0, 0.05, 0.03), grid, spot=1.0)
    oracle = crr_american_put(1.0, 1.0, 0.05, math.sqrt(0.03), 1.0, 5000)
    gap = abs(sol.value - oracle)
    _report(
        4, "American put vs 5000-step binomial oracle",
        gap < 5e-4,
        f"|CN - CRR| = {gap:.2e}",
    )


def test_criterion_05_varswap_surrogate_accuracy(varswap_artifacts):
    err = varswap_artifacts["report"].err["k_var"]
    elapsed = varswap_artifacts["pipeline_seconds"]
    train, test = varswap_artifacts["train"], varswap_artifacts["test"]
    shapes_ok = train.x.shape == (2000, 6) and test.x.shape == (2000, 6)
    # the likelihood landscape peaks strictly inside the search range
    model = varswap_artifacts["model"]
    argmax = int(np.argmax(model.lml_grid_[:, 0, 0]))
    interior = 0 < argmax < model.length_scale_grid_.size - 1
    _report(
        5, "variance-swap surrogate accuracy",
        err <= 0.01 and elapsed <= 600.0 and shapes_ok and interior,
        f"Err(K_var) = {err:.3%}, pipeline {elapsed:.0f}s, "
        f"LML argmax index {argmax}/{model.length_scale_grid_.size - 1}",
    )


def test_criterion_06_american_put_surrogate_accuracy(amput_artifacts):
    err = amput_artifacts["report"].err
    ok = err["V"] <= 0.03 and err["delta"] <= 0.06 and err["theta"] <= 0.06
    ok = ok and amput_artifacts["train"].x.shape == (5000, 8)
    ok = ok and amput_artifacts["test"].x.shape == (2000, 8)
    detail = (
        f"Err(V)={err['V']:.2%}, Err(delta)={err['delta']:.2%}, "
        f"Err(theta)={err['theta']:.2%}, Err(gamma)={err['gamma']:.2%} "
        f"(gamma reported, unconstrained); fit {amput_artifacts['fit_seconds']:.0f}s"
    )
    if amput_artifacts["gen_seconds"]:
        ok = ok and amput_artifacts["gen_seconds"] <= 7200.0
        detail += f", gen {amput_artifacts['gen_seconds']:.0f}s"
    _report(6, "American-put surrogate accuracy", ok, detail)


def test_criterion_07_speedup_reproduction(amput_artifacts):
    test = amput_artifacts["test"]
    ordered = [amput_artifacts["singles"][t] for t in test.target_names]
    started = time.perf_counter()
    predict_joint(ordered, test.x)
    gpr_seconds = time.perf_counter() - started

    # Crank-Nicolson at 500^2, extrapolated from a fixed budget
    template = GridSpec(n_s=500, n_t=500)
    budget = 25.0
    solved = 0
    elapsed = 0.0
    from volsurrogate.volsurface import local_variance_grid

    for x in test.x:
        a_prime, b, rho, m, sigma, lam, strike, rate = x
        t0 = time.perf_counter()
        params = SurfaceParams(SviSlice(a_prime, b, rho, m, sigma), lam)
        grid = dataclasses.replace(template, s_max=3.0 * max(strike, 1.0))
        variance = local_variance_grid(
            params, 1.0, rate, grid.s_axis[1:-1], grid.t_axis(1.0),
            on_violation="clamp",
        )
        solve(PdeProblem("put", "american", strike, rate, variance), grid)
        elapsed += time.perf_counter() - t0
        solved += 1
        if elapsed >= budget:
            break
    cn_total = elapsed / solved * test.x.shape[0]
    speedup = cn_total / gpr_seconds
    _report(
        7, "surrogate speedup vs 500^2 solver",
        speedup >= 500.0,
        f"{speedup:.0f}x (GPR {gpr_seconds:.2f}s, CN est {cn_total:.0f}s "
        f"from {solved} solves)",
    )


def test_criterion_08_gpr_unit_correctness():
    rng = np.random.default_rng(108)
    X = rng.uniform(-2.0, 2.0, size=(30, 2))
    y = np.sin(3.0 * X[:, 0]) + 0.5 * np.cos(2.0 * X[:, 1])
    model = GprSurrogate(noise_level_grid=[0.0]).fit(X, y)
    interp_err = float(np.abs(model.predict(X) - y).max())

    noisy = GprSurrogate().fit(X, y)
    queries = rng.uniform(-5.0, 5.0, size=(10_000, 2))
    _, std = noisy.predict(queries, return_std=True)
    prior_ok = bool(np.all(std <= noisy.y_scale_[0] + 1e-12))

    lml_gap = 0.0
    for _ in range(20):
        X2 = rng.normal(size=(2, 3))
        y2 = rng.normal(size=2)
        scale = rng.uniform(0.3, 3.0)
        noise = rng.uniform(0.0, 0.5)
        jitter = 1e-10
        k01 = math.exp(-float(((X2[0] - X2[1]) ** 2).sum()) / (2 * scale**2))
        d = 1.0 + noise**2 + jitter
        det = d * d - k01 * k01
        quad = (y2[0] ** 2 * d - 2 * y2[0] * y2[1] * k01 + y2[1] ** 2 * d) / det
        oracle = -0.5 * quad - 0.5 * math.log(det) - math.log(2 * math.pi)
        got = log_marginal_likelihood(X2, y2, scale, noise, jitter=jitter)
        lml_gap = max(lml_gap, abs(got - oracle))

    _report(
        8, "GPR unit correctness",
        interp_err < 1e-8 and prior_ok and lml_gap < 1e-10,
        f"interp {interp_err:.1e}, prior bound {prior_ok}, 2x2 gap {lml_gap:.1e}",
    )


def test_criterion_09_surface_correctness():
    rng = np.random.default_rng(109)
    h = 1e-5
    worst_rel = 0.0
    monotone = True
    for _ in range(1000):
        smile = SviSlice(
            rng.uniform(0.0, 0.02), rng.uniform(0.0, 0.3), rng.uniform(-0.4, 0.8),
            rng.uniform(-0.2, 0.6), rng.uniform(0.05, 1.0),
        )
        params = SurfaceParams(smile, rng.uniform(0.0, 1.0))
        k = rng.uniform(-1.0, 1.0)
        t = rng.uniform(0.05, 0.95)
        w = lambda kk, tt: total_variance_surface(kk, tt, params)
        for analytic, fd in (
            (surface_dk(k, t, params), (w(k + h, t) - w(k - h, t)) / (2 * h)),
            (surface_dt(k, t, params), (w(k, t + h) - w(k, t - h)) / (2 * h)),
        ):
            worst_rel = max(worst_rel, abs(analytic - fd) / (abs(fd) + 1e-9))
        t1, t2 = sorted(rng.uniform(0.0, 1.0, size=2))
        if w(k, t1) > w(k, t2) + 1e-15:
            monotone = False
    _report(
        9, "surface derivative and calendar correctness",
        worst_rel < 1e-6 and monotone,
        f"max rel gap {worst_rel:.1e}, calendar monotone {monotone}",
    )


def test_criterion_10_determinism(varswap_artifacts, tmp_path):
    train_again = tmp_path / "varswap_train.csv"
    test_again = tmp_path / "varswap_test.csv"
    ds.generate("varswap", "train", 2000, VARSWAP_SEED, train_again)
    ds.generate("varswap", "test", 2000, VARSWAP_SEED + 1, test_again)
    bytes_equal = (
        train_again.read_bytes() == varswap_artifacts["train_path"].read_bytes()
        and test_again.read_bytes() == varswap_artifacts["test_path"].read_bytes()
    )

    train = ds.read_dataset(train_again)
    test = ds.read_dataset(test_again)
    model = GprSurrogate(noise_level_grid=[0.0]).fit(train.x, train.y[:, 0])
    report = ds.evaluate({"k_var": model}, test)

    def comparable(rep):
        payload = rep.to_json_dict()
        payload.pop("timing_seconds")  # wall clock is the one nondeterministic field
        return json.dumps(payload, sort_keys=True)

    reports_equal = comparable(report) == comparable(varswap_artifacts["report"])
    _report(
        10, "pipeline determinism",
        bytes_equal and reports_equal,
        f"dataset bytes identical {bytes_equal}, reports identical {reports_equal}",
    )
