"""Small input-validation helpers shared across the package."""

from __future__ import annotations

import math

import numpy as np


def as_float_array(values, name: str, *, require_finite: bool = True) -> np.ndarray:
    """Coerce to a float64 ndarray, optionally rejecting NaN/inf entries."""
    arr = np.asarray(values, dtype=float)
    if require_finite and not np.all(np.isfinite(arr)):
        raise ValueError(f"{name} must contain only finite values")
    return arr


def check_finite_scalar(value, name: str) -> float:
    value = float(value)
    if not math.isfinite(value):
        raise ValueError(f"{name} must be finite, got {value!r}")
    return value


def check_increasing_axis(values, name: str) -> np.ndarray:
    """Validate a strictly increasing 1-D coordinate axis."""
    arr = as_float_array(values, name)
    if arr.ndim != 1 or arr.size < 2:
        raise ValueError(f"{name} must be a 1-D axis with at least two points")
    if not np.all(np.diff(arr) > 0):
        raise ValueError(f"{name} must be strictly increasing")
    return arr
