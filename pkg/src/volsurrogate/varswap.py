"""Variance-swap fair strikes by static replication over OTM options.

The fair strike is the risk-neutral expectation of realized variance,
replicated by a log contract: a continuum of out-of-the-money puts below the
spot and calls above it, weighted by ``1/K^2``, with the option volatilities
read off the slice at each strike's log-moneyness.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from ._validation import as_float_array
from .analytics import bs_call, bs_put
from .exceptions import ConvergenceError, ParameterError
from .volsurface import SviSlice, total_variance_slice

__all__ = ["VarSwapInputs", "strike_vol", "fair_strike"]

#: Integration domain in log-strike ``x = log(K / spot)``; both integrands
#: decay super-polynomially, so [-10, 10] truncates far below 1e-8.
LOG_STRIKE_SPAN = 10.0


@dataclass(frozen=True)
class VarSwapInputs:
    """Inputs of one fair-strike computation.

    The dataset pipeline fixes ``maturity = spot = 1``; the API accepts
    general values.
    """

    smile: SviSlice
    rate: float
    maturity: float = 1.0
    spot: float = 1.0

    def __post_init__(self):
        for name in ("rate", "maturity", "spot"):
            value = float(getattr(self, name))
            if not math.isfinite(value):
                raise ParameterError(f"{name} must be finite, got {value!r}")
            object.__setattr__(self, name, value)
        if self.maturity <= 0:
            raise ParameterError(f"maturity must be > 0, got {self.maturity}")
        if self.spot <= 0:
            raise ParameterError(f"spot must be > 0, got {self.spot}")


def strike_vol(strike, smile: SviSlice, rate: float, maturity: float = 1.0,
               spot: float = 1.0):
    """Black-Scholes volatility at a strike, read off the slice.

    The strike maps to forward log-moneyness ``k = log(K / (spot *
    exp(rate * maturity)))`` and the volatility is ``sqrt(w(k) / maturity)``.
    """
    strike = as_float_array(strike, "strike")
    if np.any(strike <= 0):
        raise ParameterError("strike must be > 0")
    if maturity <= 0:
        raise ParameterError(f"maturity must be > 0, got {maturity}")
    k = np.log(strike / spot) - rate * maturity
    w = total_variance_slice(k, smile)
    out = np.sqrt(np.asarray(w) / maturity)
    return float(out) if strike.ndim == 0 else out


def _simpson(values: np.ndarray, h: float) -> float:
    odd = values[1:-1:2].sum()
    even = values[2:-1:2].sum()
    return (h / 3.0) * (values[0] + 4.0 * odd + 2.0 * even + values[-1])


def _kvar_estimate(inputs: VarSwapInputs, n_intervals: int) -> float:
    spot, rate, maturity = inputs.spot, inputs.rate, inputs.maturity
    half = n_intervals // 2
    h = LOG_STRIKE_SPAN / half

    x_put = np.linspace(-LOG_STRIKE_SPAN, 0.0, half + 1)
    strikes = spot * np.exp(x_put)
    vols = strike_vol(strikes, inputs.smile, rate, maturity, spot)
    put_integral = _simpson(bs_put(spot, strikes, rate, vols, maturity) / strikes, h)

    x_call = np.linspace(0.0, LOG_STRIKE_SPAN, half + 1)
    strikes = spot * np.exp(x_call)
    vols = strike_vol(strikes, inputs.smile, rate, maturity, spot)
    call_integral = _simpson(bs_call(spot, strikes, rate, vols, maturity) / strikes, h)

    growth = math.exp(rate * maturity)
    return (2.0 / maturity) * (
        rate * maturity + 1.0 - growth + growth * (put_integral + call_integral)
    )


def fair_strike(
    inputs: VarSwapInputs,
    *,
    tol: float = 1e-8,
    initial_intervals: int = 4096,
    max_intervals: int = 262144,
) -> float:
    """Variance-swap fair strike (annualized variance units).

    Composite Simpson quadrature in log-strike on each side of the spot (the
    split point of the put and call integrals), doubling the node count until
    two successive estimates differ by less than ``tol``.

    Raises
    ------
    ConvergenceError
        If the estimates have not settled at ``max_intervals``.
    """
    n = int(initial_intervals)
    if n < 4 or n % 4:
        raise ValueError("initial_intervals must be a multiple of 4, at least 4")
    previous = None
    while n <= max_intervals:
        estimate = _kvar_estimate(inputs, n)
        if previous is not None and abs(estimate - previous) < tol:
            return estimate
        previous = estimate
        n *= 2
    raise ConvergenceError(
        f"fair-strike quadrature did not converge to {tol:g} "
        f"within {max_intervals} intervals"
    )
