"""Small input validation helpers used across modules."""

from __future__ import annotations

import numpy as np

from .errors import DataError, DimensionMismatchError


def as_float_vector(x, name: str = "array") -> np.ndarray:
    """Coerce to a 1-D float64 array."""
    arr = np.asarray(x, dtype=np.float64)
    if arr.ndim != 1:
        raise DimensionMismatchError(f"{name} must be 1-D, got shape {arr.shape}")
    return arr


def as_float_matrix(x, name: str = "array") -> np.ndarray:
    """Coerce to a 2-D float64 array."""
    arr = np.asarray(x, dtype=np.float64)
    if arr.ndim != 2:
        raise DimensionMismatchError(f"{name} must be 2-D, got shape {arr.shape}")
    return arr


def check_columns(arr: np.ndarray, expected: int, name: str = "array") -> np.ndarray:
    if arr.shape[1] != expected:
        raise DimensionMismatchError(
            f"{name} has {arr.shape[1]} columns, expected {expected}"
        )
    return arr


def check_finite(arr: np.ndarray, name: str = "array") -> np.ndarray:
    if not np.all(np.isfinite(arr)):
        raise DataError(f"{name} contains NaN or Inf")
    return arr
