"""Input checks shared by the public entry points."""

from __future__ import annotations

import numpy as np

from .exceptions import DegenerateInputError, NumericalError


def check_weight_array(x, name: str = "weights") -> np.ndarray:
    """Coerce to a float64 array; reject empty or non-finite input."""
    arr = np.asarray(x, dtype=np.float64)
    if arr.size == 0:
        raise DegenerateInputError(f"{name} is empty")
    if not np.all(np.isfinite(arr)):
        raise NumericalError(f"{name} contains non-finite values")
    return arr


def check_positive(value, name: str) -> float:
    v = float(value)
    if not np.isfinite(v) or v <= 0:
        raise DegenerateInputError(f"{name} must be positive, got {value}")
    return v


def check_token_stream(x, name: str = "tokens") -> np.ndarray:
    arr = np.asarray(x)
    if arr.ndim != 1:
        raise DegenerateInputError(f"{name} must be one-dimensional")
    if arr.size and not np.issubdtype(arr.dtype, np.integer):
        raise DegenerateInputError(f"{name} must be integers")
    return arr.astype(np.int64)
