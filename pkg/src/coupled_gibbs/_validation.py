"""Small input-validation helpers shared by the public API."""

import numbers

import numpy as np


def as_vector(x, name="x", dtype=float):
    arr = np.asarray(x, dtype=dtype)
    if arr.ndim == 0:
        arr = arr.reshape(1)
    if arr.ndim != 1:
        raise ValueError(f"{name} must be one-dimensional, got shape {arr.shape}")
    return arr


def as_square(a, name="matrix"):
    arr = np.asarray(a, dtype=float)
    if arr.ndim != 2 or arr.shape[0] != arr.shape[1]:
        raise ValueError(f"{name} must be a square matrix, got shape {arr.shape}")
    return arr


def check_finite(x, name="value"):
    if not np.all(np.isfinite(x)):
        raise ValueError(f"{name} contains non-finite entries")
    return x


def check_positive(value, name):
    if not isinstance(value, numbers.Real) or not np.isfinite(value) or value <= 0:
        raise ValueError(f"{name} must be a positive finite number, got {value!r}")
    return float(value)


def check_int(value, name, minimum=None):
    if isinstance(value, bool) or not isinstance(value, numbers.Integral):
        raise TypeError(f"{name} must be an integer, got {type(value).__name__}")
    if minimum is not None and value < minimum:
        raise ValueError(f"{name} must be >= {minimum}, got {value}")
    return int(value)


def check_choice(value, name, choices):
    if value not in choices:
        raise ValueError(f"{name} must be one of {sorted(choices)}, got {value!r}")
    return value


def check_rng(rng):
    """Return a numpy Generator; accepts None, an int seed or a Generator."""
    if isinstance(rng, np.random.Generator):
        return rng
    if rng is None or isinstance(rng, (numbers.Integral, np.random.SeedSequence)):
        return np.random.default_rng(rng)
    raise TypeError("rng must be a numpy Generator, a SeedSequence, an int or None")


def check_lower_factor(chol, dim=None, name="chol"):
    """Validate a covariance factor.

    A 1-d array is read as the diagonal of a diagonal factor; a 2-d array must
    be lower triangular. In both cases the diagonal has to be strictly positive.
    """
    arr = np.asarray(chol, dtype=float)
    if arr.ndim == 1:
        diag = arr
    elif arr.ndim == 2:
        if arr.shape[0] != arr.shape[1]:
            raise ValueError(f"{name} must be square")
        if np.any(np.triu(arr, 1) != 0):
            raise ValueError(f"{name} must be lower triangular")
        diag = np.diag(arr)
    else:
        raise ValueError(f"{name} must be 1-d (diagonal) or 2-d")
    if dim is not None and diag.shape[0] != dim:
        raise ValueError(f"{name} has dimension {diag.shape[0]}, expected {dim}")
    if not np.all(np.isfinite(arr)) or np.any(diag <= 0):
        raise ValueError("degenerate covariance")
    return arr
