"""Input validation helpers shared by the estimators and the free functions."""

import numbers

import numpy as np

from .exceptions import StructuralError

ROW_SUM_TOL = 1e-12


def check_random_state(seed):
    """Turn ``seed`` into a ``np.random.Generator``.

    Generators pass through untouched so that callers can thread one stream
    through several operations.
    """
    if isinstance(seed, np.random.Generator):
        return seed
    if seed is None or isinstance(seed, (numbers.Integral, np.random.SeedSequence)):
        return np.random.default_rng(seed)
    raise StructuralError(f"cannot build a random generator from {seed!r}")


def as_float_array(x, ndim, name):
    arr = np.asarray(x, dtype=np.float64)
    if arr.ndim != ndim:
        raise StructuralError(f"{name} must have {ndim} dimensions, got shape {arr.shape}")
    if not np.all(np.isfinite(arr)):
        raise StructuralError(f"{name} contains non-finite entries")
    return arr


def check_stochastic(table, name, tol=ROW_SUM_TOL):
    """Last axis of ``table`` must be a probability vector."""
    if np.any(table < -tol):
        raise StructuralError(f"{name} has negative entries (min {table.min():.3e})")
    err = np.max(np.abs(table.sum(axis=-1) - 1.0)) if table.size else 0.0
    if err > tol:
        raise StructuralError(f"{name} rows do not sum to 1 (max deviation {err:.3e})")


def check_probability_vector(p, name="p", tol=1e-9):
    p = np.asarray(p, dtype=np.float64)
    if p.ndim != 1:
        raise StructuralError(f"{name} must be one-dimensional")
    if np.any(p < -tol) or abs(p.sum() - 1.0) > tol:
        raise StructuralError(f"{name} is not a probability vector")
    return p


def check_index(value, upper, name):
    if not isinstance(value, numbers.Integral) or not 0 <= value < upper:
        raise StructuralError(f"{name}={value!r} outside [0, {upper})")
    return int(value)


def check_dims(mdp, other, name):
    """``other`` must be an (H, S, K, ...) table matching ``mdp``."""
    if other.shape[:3] != (mdp.H, mdp.S, mdp.K):
        raise StructuralError(
            f"{name} has shape {other.shape[:3]}, expected {(mdp.H, mdp.S, mdp.K)}"
        )
