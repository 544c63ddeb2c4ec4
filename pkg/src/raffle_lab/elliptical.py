"""Elliptical potential of a sequence of PSD increments."""

import numpy as np
from scipy import linalg

from .exceptions import StructuralError

__all__ = ["elliptical_potential", "elliptical_bound", "random_psd_sequence"]


def elliptical_potential(increments, lam0):
    """``sum_n tr(X_n M_{n-1}^{-1})`` with ``M_0 = lam0 I`` and ``M_n = M_{n-1} + X_n``."""
    X = np.asarray(increments, dtype=np.float64)
    if X.ndim != 3 or X.shape[1] != X.shape[2]:
        raise StructuralError("increments must be an (N, d, d) stack")
    if lam0 <= 0:
        raise StructuralError("lam0 must be positive")
    M = lam0 * np.eye(X.shape[1])
    total = 0.0
    for Xn in X:
        total += float(np.trace(linalg.solve(M, Xn, assume_a="pos")))
        M = M + Xn
    return total


def elliptical_bound(d, N, lam0):
    return 2.0 * d * np.log(1.0 + N / (d * lam0))


def random_psd_sequence(d, N, rng, max_trace=1.0):
    """``N`` random PSD matrices of random rank with trace uniform in ``(0, max_trace]``."""
    out = np.empty((N, d, d))
    for n in range(N):
        G = rng.standard_normal((d, int(rng.integers(1, d + 1))))
        X = G @ G.T
        out[n] = X * (max_trace * (1.0 - rng.random()) / np.trace(X))
    return out
