"""Small input-validation helpers shared by the estimators."""

from __future__ import annotations

import numpy as np
from sklearn.utils.validation import check_array

from .exceptions import DataError


def as_1d(x, name: str, dtype=float) -> np.ndarray:
    arr = np.asarray(x, dtype=dtype)
    if arr.ndim != 1:
        arr = arr.reshape(-1)
    return arr


def check_finite(arr: np.ndarray, name: str) -> np.ndarray:
    if not np.all(np.isfinite(arr)):
        raise DataError(f"{name} contains non-finite values")
    return arr


def check_binary(x, name: str = "treat") -> np.ndarray:
    arr = np.asarray(x)
    vals = np.unique(arr)
    if not np.all(np.isin(vals, (0, 1))):
        raise DataError(f"{name} must be binary 0/1, got values {vals[:5]}")
    return arr.astype(np.int8)


def check_same_length(**arrays) -> int:
    lengths = {k: len(v) for k, v in arrays.items()}
    if len(set(lengths.values())) > 1:
        raise DataError(f"length mismatch: {lengths}")
    return next(iter(lengths.values()))


def check_matrix(X, name: str = "X") -> np.ndarray:
    X = check_array(X, dtype=np.float64, ensure_all_finite=True)
    return X


def check_fraction(value: float, name: str, *, closed: bool = False) -> float:
    lo_ok = value >= 0 if closed else value > 0
    hi_ok = value <= 1 if closed else value < 1
    if not (lo_ok and hi_ok):
        bounds = "[0, 1]" if closed else "(0, 1)"
        raise ValueError(f"{name} must lie in {bounds}, got {value}")
    return float(value)


def standardize(X: np.ndarray) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Column-wise z-scores (population sd). Returns (Z, mean, sd)."""
    mean = X.mean(axis=0)
    sd = X.std(axis=0)
    if np.any(sd == 0):
        raise DataError("cannot standardize a constant column")
    return (X - mean) / sd, mean, sd
