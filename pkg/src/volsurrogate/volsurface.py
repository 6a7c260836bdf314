"""SVI total-variance surfaces and the Dupire local-variance transform.

A single maturity slice of total implied variance is described by the
5-parameter SVI form in log-moneyness, reparameterized so that admissibility
reduces to box bounds on the inputs. A one-factor multiplicative term
structure extends the slice to maturities in ``[0, 1]``, and the Dupire
transform turns the surface into the local-variance diffusion coefficient
consumed by the PDE solver.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from ._validation import as_float_array, check_increasing_axis
from .exceptions import ButterflyArbitrageError, ParameterError

__all__ = [
    "DEGENERATE_VARIANCE_FLOOR",
    "LOCAL_VARIANCE_BOUNDS",
    "MAX_MATURITY",
    "SviSlice",
    "SurfaceParams",
    "LocalVarianceGrid",
    "total_variance_slice",
    "slice_dk",
    "slice_dkk",
    "term_factor",
    "term_factor_dt",
    "total_variance_surface",
    "surface_dk",
    "surface_dkk",
    "surface_dt",
    "local_variance",
    "local_variance_grid",
    "atm_bs_vol",
]

#: Total variance below which the Dupire ratio is replaced by its flat limit
#: (the time derivative alone); the ratio's 1/w terms are singular there.
DEGENERATE_VARIANCE_FLOOR = 1e-10

#: Clamp range applied to local-variance grids fed to the PDE solver.
LOCAL_VARIANCE_BOUNDS = (1e-8, 4.0)

#: Largest maturity the surface covers; the term-structure decay must lie in
#: ``[0, 1 / MAX_MATURITY]``.
MAX_MATURITY = 1.0


@dataclass(frozen=True)
class SviSlice:
    """Parameters of one total-variance slice.

    The slice evaluates to ``w(k) = a + b * (rho * (k - m) + sqrt((k - m)**2
    + sigma**2))`` with the vertical offset ``a = a_prime - b * sigma *
    sqrt(1 - rho**2)`` derived so that ``min_k w(k) = a_prime``; requiring
    ``a_prime >= 0`` therefore guarantees ``w >= 0`` everywhere.

    Roles of the parameters: ``a_prime`` shifts the smile vertically, ``b``
    opens and closes it, ``rho`` rotates it, ``m`` translates it horizontally
    and ``sigma`` sets the at-the-money curvature.
    """

    a_prime: float
    b: float
    rho: float
    m: float
    sigma: float

    def __post_init__(self):
        for name in ("a_prime", "b", "rho", "m", "sigma"):
            value = float(getattr(self, name))
            if not math.isfinite(value):
                raise ParameterError(f"{name} must be finite, got {value!r}")
            object.__setattr__(self, name, value)
        if self.a_prime < 0:
            raise ParameterError(f"a_prime must be >= 0, got {self.a_prime}")
        if self.b < 0:
            raise ParameterError(f"b must be >= 0, got {self.b}")
        if not -1.0 < self.rho < 1.0:
            raise ParameterError(f"rho must lie in (-1, 1), got {self.rho}")
        if self.sigma <= 0:
            raise ParameterError(f"sigma must be > 0, got {self.sigma}")

    @property
    def min_shift(self) -> float:
        """``b * sigma * sqrt(1 - rho**2)``, the gap between ``a_prime`` and ``a``."""
        return self.b * self.sigma * math.sqrt((1.0 - self.rho) * (1.0 + self.rho))

    @property
    def a(self) -> float:
        """Raw vertical offset of the slice."""
        return self.a_prime - self.min_shift


@dataclass(frozen=True)
class SurfaceParams:
    """A slice plus the one-factor term-structure decay rate."""

    smile: SviSlice
    lam: float = 0.0

    def __post_init__(self):
        if not isinstance(self.smile, SviSlice):
            raise ParameterError(f"smile must be an SviSlice, got {type(self.smile)!r}")
        lam = float(self.lam)
        if not math.isfinite(lam):
            raise ParameterError(f"lam must be finite, got {lam!r}")
        if not 0.0 <= lam <= 1.0 / MAX_MATURITY:
            raise ParameterError(
                f"lam must lie in [0, {1.0 / MAX_MATURITY:g}], got {lam}"
            )
        object.__setattr__(self, "lam", lam)


@dataclass(frozen=True)
class LocalVarianceGrid:
    """Local variance tabulated on a rectangular (stock price, time) grid.

    ``values[i, j]`` is the local variance at ``(s_values[i], t_values[j])``.
    """

    s_values: np.ndarray
    t_values: np.ndarray
    values: np.ndarray

    def __post_init__(self):
        s = check_increasing_axis(self.s_values, "s_values")
        t = check_increasing_axis(self.t_values, "t_values")
        v = as_float_array(self.values, "values")
        if v.shape != (s.size, t.size):
            raise ValueError(
                f"values must have shape {(s.size, t.size)}, got {v.shape}"
            )
        if np.any(v < 0):
            raise ValueError("local variance values must be non-negative")
        object.__setattr__(self, "s_values", s)
        object.__setattr__(self, "t_values", t)
        object.__setattr__(self, "values", v)


def _return_like(arr, scalar_input: bool):
    return float(arr) if scalar_input else np.asarray(arr)


def _slice_terms(k: np.ndarray, smile: SviSlice):
    """Array-native ``(w, dw/dk, d2w/dk2)`` of one slice."""
    x = k - smile.m
    root = np.hypot(x, smile.sigma)
    core = smile.rho * x + root
    core = core - smile.sigma * math.sqrt((1.0 - smile.rho) * (1.0 + smile.rho))
    w = np.maximum(smile.a_prime + smile.b * core, 0.0)
    w_k = smile.b * (smile.rho + x / root)
    w_kk = smile.b * smile.sigma**2 / root**3
    return w, w_k, w_kk


def total_variance_slice(k, smile: SviSlice):
    """Total variance ``w(k)`` of one slice; vectorized over log-moneyness.

    The shifted form ``w = a_prime + b * (rho*(k-m) + hypot(k-m, sigma)
    - sigma*sqrt(1-rho**2))`` is used so the bracket vanishes identically at
    the slice minimum and the ``b == 0`` case returns ``a_prime`` exactly.
    """
    k = as_float_array(k, "k")
    return _return_like(_slice_terms(k, smile)[0], k.ndim == 0)


def slice_dk(k, smile: SviSlice):
    """First derivative of the slice total variance in log-moneyness."""
    k = as_float_array(k, "k")
    return _return_like(_slice_terms(k, smile)[1], k.ndim == 0)


def slice_dkk(k, smile: SviSlice):
    """Second derivative of the slice total variance in log-moneyness."""
    k = as_float_array(k, "k")
    return _return_like(_slice_terms(k, smile)[2], k.ndim == 0)


def _check_maturity(t) -> np.ndarray:
    t = as_float_array(t, "maturity")
    if np.any(t < 0) or np.any(t > MAX_MATURITY):
        raise ParameterError(f"maturity must lie in [0, {MAX_MATURITY:g}]")
    return t


def term_factor(maturity, lam: float):
    """Term-structure factor ``f(T) = T * exp(lam * (1 - T))``.

    ``f(0) = 0``, ``f(1) = 1`` and ``f`` is non-decreasing on ``[0, 1]`` for
    any admissible decay rate, so multiplying a non-negative slice by ``f``
    can never create calendar arbitrage.
    """
    t = _check_maturity(maturity)
    lam = float(lam)
    if not 0.0 <= lam <= 1.0 / MAX_MATURITY:
        raise ParameterError(f"lam must lie in [0, {1.0 / MAX_MATURITY:g}], got {lam}")
    return _return_like(t * np.exp(lam * (1.0 - t)), t.ndim == 0)


def term_factor_dt(maturity, lam: float):
    """Maturity derivative of :func:`term_factor`."""
    t = _check_maturity(maturity)
    lam = float(lam)
    if not 0.0 <= lam <= 1.0 / MAX_MATURITY:
        raise ParameterError(f"lam must lie in [0, {1.0 / MAX_MATURITY:g}], got {lam}")
    return _return_like(np.exp(lam * (1.0 - t)) * (1.0 - lam * t), t.ndim == 0)


def total_variance_surface(k, maturity, params: SurfaceParams):
    """Surface total variance ``w(k, T) = w_slice(k) * f(T)``."""
    k = as_float_array(k, "k")
    t = _check_maturity(maturity)
    scalar = k.ndim == 0 and t.ndim == 0
    w = total_variance_slice(k, params.smile) * term_factor(t, params.lam)
    return _return_like(np.asarray(w), scalar)


def surface_dk(k, maturity, params: SurfaceParams):
    """Log-moneyness derivative of the surface total variance."""
    k = as_float_array(k, "k")
    t = _check_maturity(maturity)
    scalar = k.ndim == 0 and t.ndim == 0
    out = slice_dk(k, params.smile) * term_factor(t, params.lam)
    return _return_like(np.asarray(out), scalar)


def surface_dkk(k, maturity, params: SurfaceParams):
    """Second log-moneyness derivative of the surface total variance."""
    k = as_float_array(k, "k")
    t = _check_maturity(maturity)
    scalar = k.ndim == 0 and t.ndim == 0
    out = slice_dkk(k, params.smile) * term_factor(t, params.lam)
    return _return_like(np.asarray(out), scalar)


def surface_dt(k, maturity, params: SurfaceParams):
    """Maturity derivative of the surface total variance (never negative)."""
    k = as_float_array(k, "k")
    t = _check_maturity(maturity)
    scalar = k.ndim == 0 and t.ndim == 0
    out = total_variance_slice(k, params.smile) * term_factor_dt(t, params.lam)
    return _return_like(np.asarray(out), scalar)


def _dupire_pieces(k, t, params: SurfaceParams):
    """Return ``(w_t, denom, degenerate)`` for the Dupire ratio.

    ``denom`` is only meaningful where ``degenerate`` is False; degenerate
    points (total variance below :data:`DEGENERATE_VARIANCE_FLOOR`) fall back
    to ``w_t`` directly, the continuous flat-slice limit.
    """
    k = np.asarray(k, dtype=float)
    t = np.asarray(t, dtype=float)
    lam = params.lam
    w_slice, wk_slice, wkk_slice = _slice_terms(k, params.smile)
    f = t * np.exp(lam * (1.0 - t))
    f_t = np.exp(lam * (1.0 - t)) * (1.0 - lam * t)
    w = w_slice * f
    w_k = wk_slice * f
    w_kk = wkk_slice * f
    w_t = w_slice * f_t

    degenerate = w < DEGENERATE_VARIANCE_FLOOR
    with np.errstate(divide="ignore", invalid="ignore", over="ignore"):
        inv_w = 1.0 / w
        denom = (
            1.0
            - (k * inv_w) * w_k
            - 0.25 * (0.25 + inv_w - (k * inv_w) ** 2) * w_k**2
            + 0.5 * w_kk
        )
    return np.asarray(w_t), np.asarray(denom), np.asarray(degenerate)


def local_variance(k, maturity, params: SurfaceParams):
    """Dupire local variance at log-moneyness ``k`` and maturity ``T``.

    Computed as the maturity derivative of total variance divided by the
    standard denominator ``1 - (k/w) w_k - (1/4)(1/4 + 1/w - k^2/w^2) w_k^2
    + (1/2) w_kk``, with all derivatives taken in closed form. Note the
    curvature enters as half the *second log-moneyness derivative* of ``w``.

    Raises
    ------
    ButterflyArbitrageError
        If the denominator is non-positive anywhere on the requested points.
    """
    k = as_float_array(k, "k")
    t = _check_maturity(maturity)
    scalar = k.ndim == 0 and t.ndim == 0
    k, t = np.broadcast_arrays(k, t)

    w_t, denom, degenerate = _dupire_pieces(k, t, params)
    bad = ~degenerate & (denom <= 0)
    if np.any(bad):
        idx = np.unravel_index(np.argmax(bad), np.shape(bad)) if bad.ndim else ()
        raise ButterflyArbitrageError(
            "non-positive local-variance denominator at "
            f"k={np.asarray(k)[idx]:.6g}, T={np.asarray(t)[idx]:.6g}"
        )
    with np.errstate(divide="ignore", invalid="ignore"):
        out = np.where(degenerate, w_t, w_t / denom)
    return _return_like(out, scalar)


def local_variance_grid(
    params: SurfaceParams,
    spot: float,
    rate: float,
    s_values,
    t_values,
    *,
    on_violation: str = "clamp",
) -> LocalVarianceGrid:
    """Tabulate local variance on a (stock price, time) grid for the PDE solver.

    Each node maps to surface coordinates ``k = log(S / (spot * exp(rate*t)))``
    and ``T = t``. Values are clamped into :data:`LOCAL_VARIANCE_BOUNDS`;
    nodes violating the denominator-positivity condition are clamped to the
    upper bound when ``on_violation="clamp"`` or raise
    :class:`ButterflyArbitrageError` when ``on_violation="raise"``.
    """
    if on_violation not in ("clamp", "raise"):
        raise ValueError(f"on_violation must be 'clamp' or 'raise', got {on_violation!r}")
    spot = float(spot)
    if spot <= 0:
        raise ParameterError(f"spot must be > 0, got {spot}")
    rate = float(rate)
    s = check_increasing_axis(s_values, "s_values")
    if s[0] <= 0:
        raise ParameterError("s_values must be strictly positive")
    t = check_increasing_axis(t_values, "t_values")
    _check_maturity(t)

    k = np.log(s / spot)[:, None] - rate * t[None, :]
    t2d = np.broadcast_to(t[None, :], k.shape)
    w_t, denom, degenerate = _dupire_pieces(k, t2d, params)
    bad = ~degenerate & (denom <= 0)
    if np.any(bad):
        if on_violation == "raise":
            i, j = np.unravel_index(np.argmax(bad), bad.shape)
            raise ButterflyArbitrageError(
                f"non-positive local-variance denominator at S={s[i]:.6g}, t={t[j]:.6g}"
            )
    with np.errstate(divide="ignore", invalid="ignore"):
        values = np.where(degenerate, w_t, w_t / denom)
    values = np.where(bad, LOCAL_VARIANCE_BOUNDS[1], values)
    values = np.clip(values, *LOCAL_VARIANCE_BOUNDS)
    return LocalVarianceGrid(s_values=s, t_values=t, values=values)


def atm_bs_vol(params: SurfaceParams, maturity: float) -> float:
    """At-the-money Black-Scholes volatility ``sqrt(w(0, T) / T)``."""
    maturity = float(maturity)
    if maturity <= 0:
        raise ParameterError(f"maturity must be > 0, got {maturity}")
    w = total_variance_surface(0.0, maturity, params)
    return math.sqrt(w / maturity)
