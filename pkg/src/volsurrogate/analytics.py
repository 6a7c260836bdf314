"""Closed-form European option prices under flat lognormal volatility."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy.special import erfc

from ._validation import as_float_array

__all__ = ["norm_cdf", "bs_call", "bs_put", "EuropeanQuote"]

_SQRT2 = math.sqrt(2.0)


def norm_cdf(x):
    """Standard normal CDF, ``0.5 * erfc(-x / sqrt(2))``; vectorized."""
    x = np.asarray(x, dtype=float)
    out = 0.5 * erfc(-x / _SQRT2)
    return float(out) if x.ndim == 0 else out


def _bs_price(spot, strike, rate, vol, maturity, sign: int):
    spot = as_float_array(spot, "spot")
    strike = as_float_array(strike, "strike")
    rate = as_float_array(rate, "rate")
    vol = as_float_array(vol, "vol")
    maturity = as_float_array(maturity, "maturity")
    scalar = all(a.ndim == 0 for a in (spot, strike, rate, vol, maturity))
    if np.any(spot <= 0):
        raise ValueError("spot must be > 0")
    if np.any(strike <= 0):
        raise ValueError("strike must be > 0")
    if np.any(vol < 0):
        raise ValueError("vol must be >= 0")
    if np.any(maturity < 0):
        raise ValueError("maturity must be >= 0")

    spot, strike, rate, vol, maturity = np.broadcast_arrays(
        spot, strike, rate, vol, maturity
    )
    discount = np.exp(-rate * maturity)
    srt = vol * np.sqrt(maturity)
    with np.errstate(divide="ignore", invalid="ignore"):
        d1 = (np.log(spot / strike) + (rate + 0.5 * vol**2) * maturity) / srt
        d2 = d1 - srt
        live = sign * (
            spot * norm_cdf(sign * d1) - strike * discount * norm_cdf(sign * d2)
        )
    # vol*sqrt(T) == 0 is the deterministic-forward limit: discounted intrinsic
    intrinsic = np.maximum(sign * (spot - strike * discount), 0.0)
    price = np.where(srt > 0, live, intrinsic)
    return float(price) if scalar else price


def bs_call(spot, strike, rate, vol, maturity):
    """Black-Scholes European call price; vectorized over all arguments."""
    return _bs_price(spot, strike, rate, vol, maturity, +1)


def bs_put(spot, strike, rate, vol, maturity):
    """Black-Scholes European put price; vectorized over all arguments."""
    return _bs_price(spot, strike, rate, vol, maturity, -1)


@dataclass(frozen=True)
class EuropeanQuote:
    """A single European option pricing request.

    Rates are continuously compounded per year, the volatility is per
    square-root year and the maturity is in years.
    """

    spot: float
    strike: float
    rate: float
    vol: float
    maturity: float

    def __post_init__(self):
        for name in ("spot", "strike", "rate", "vol", "maturity"):
            value = float(getattr(self, name))
            if not math.isfinite(value):
                raise ValueError(f"{name} must be finite, got {value!r}")
            object.__setattr__(self, name, value)
        if self.spot <= 0:
            raise ValueError(f"spot must be > 0, got {self.spot}")
        if self.strike <= 0:
            raise ValueError(f"strike must be > 0, got {self.strike}")
        if self.vol < 0:
            raise ValueError(f"vol must be >= 0, got {self.vol}")
        if self.maturity < 0:
            raise ValueError(f"maturity must be >= 0, got {self.maturity}")

    def call_price(self) -> float:
        return bs_call(self.spot, self.strike, self.rate, self.vol, self.maturity)

    def put_price(self) -> float:
        return bs_put(self.spot, self.strike, self.rate, self.vol, self.maturity)
