"""Finite realizable model classes and the exact maximum-likelihood oracle."""

from dataclasses import dataclass, field
from functools import cached_property

import numpy as np
from sklearn.base import BaseEstimator
from sklearn.exceptions import NotFittedError

from ._validation import as_float_array
from .exceptions import ConfigurationError, ContractViolation, StructuralError
from .mdp import EpisodicMDP, LowRankFactorization

__all__ = [
    "ModelClass",
    "TransitionDataset",
    "MLEFit",
    "validate_pair",
    "log_likelihood",
    "mle_fit",
    "LowRankMLE",
]

PROB_FLOOR = 1e-300
ENTRY_TOL = 1e-12
PAIR_ROW_TOL = 1e-10


def _pair_kernel(phi, mu):
    # works for full (H, S, K, d)/(H, S, d) candidates and single-step slices
    if phi.ndim == 4:
        return np.einsum("hsad,htd->hsat", phi, mu)
    return np.einsum("sad,td->sat", phi, mu)


def validate_pair(phi_candidate, mu_candidate):
    """True iff every induced row is a probability vector (up to tolerance)."""
    phi = np.asarray(phi_candidate, dtype=np.float64)
    mu = np.asarray(mu_candidate, dtype=np.float64)
    if phi.shape[-1] != mu.shape[-1] or phi.ndim != mu.ndim + 1:
        raise StructuralError(f"phi {phi.shape} and mu {mu.shape} disagree")
    P = _pair_kernel(phi, mu)
    if P.min() < -ENTRY_TOL or P.max() > 1 + ENTRY_TOL:
        return False
    return bool(np.max(np.abs(P.sum(axis=-1) - 1.0)) <= PAIR_ROW_TOL)


def log_likelihood(phi_h, mu_h, dataset_h):
    """Sum of ``log <phi_h(s,a), mu_h(s')>`` over the triples of one step.

    ``phi_h`` is (S, K, d) and ``mu_h`` is (S, d).
    """
    phi_h = np.asarray(phi_h, dtype=np.float64)
    mu_h = np.asarray(mu_h, dtype=np.float64)
    if not validate_pair(phi_h, mu_h):
        raise ContractViolation("log-likelihood of an invalid (phi, mu) pair")
    total = 0.0
    for s, a, s_next in dataset_h:
        p = float(phi_h[s, a] @ mu_h[s_next])
        total += np.log(max(p, PROB_FLOOR))
    return float(total)


@dataclass(frozen=True, eq=False)
class ModelClass:
    """Candidate embeddings ``phis`` (each (H, S, K, d)) and ``mus`` (each (H, S, d)).

    Every (phi, mu) combination is a candidate model; ``valid[i, j]`` records
    whether pair (i, j) induces a proper kernel at every step.
    """

    phis: tuple
    mus: tuple
    valid: np.ndarray = field(init=False, repr=False)

    def __post_init__(self):
        if not self.phis or not self.mus:
            raise ConfigurationError("model class needs at least one phi and one mu")
        phis = tuple(as_float_array(p, 4, "phi candidate") for p in self.phis)
        mus = tuple(as_float_array(m, 3, "mu candidate") for m in self.mus)
        shape_phi, shape_mu = phis[0].shape, mus[0].shape
        if any(p.shape != shape_phi for p in phis) or any(m.shape != shape_mu for m in mus):
            raise StructuralError("candidates must share shapes")
        if shape_phi[0] != shape_mu[0] or shape_phi[1] != shape_mu[1] or shape_phi[3] != shape_mu[2]:
            raise StructuralError("phi and mu candidates disagree on H, S or d")
        for p in phis:
            for m in mus:
                # norm bounds of a factorization; raises on violation
                LowRankFactorization(p, m)
        for arr in phis + mus:
            arr.flags.writeable = False
        valid = np.array([[validate_pair(p, m) for m in mus] for p in phis])
        if not valid.any():
            raise ConfigurationError("model class contains no valid (phi, mu) pair")
        valid.flags.writeable = False
        object.__setattr__(self, "phis", phis)
        object.__setattr__(self, "mus", mus)
        object.__setattr__(self, "valid", valid)

    @property
    def n_phi(self):
        return len(self.phis)

    @property
    def n_mu(self):
        return len(self.mus)

    @property
    def d(self):
        return self.phis[0].shape[3]

    @property
    def shape(self):
        """(H, S, K)"""
        return self.phis[0].shape[:3]

    @cached_property
    def log_probs(self):
        """``log max(P, floor)`` per pair, shape (n_phi, n_mu, H, S, K, S); zero for invalid pairs."""
        H, S, K = self.shape
        out = np.zeros((self.n_phi, self.n_mu, H, S, K, S))
        for i, p in enumerate(self.phis):
            for j, m in enumerate(self.mus):
                if self.valid[i, j]:
                    out[i, j] = np.log(np.maximum(_pair_kernel(p, m), PROB_FLOOR))
        return out

    def kernel(self, i, j):
        return _pair_kernel(self.phis[i], self.mus[j])

    def assemble(self, phi_index, mu_index, initial_state=0):
        """Model whose step-h factors are ``phis[phi_index[h]][h]`` and ``mus[mu_index[h]][h]``."""
        H = self.shape[0]
        phi = np.stack([self.phis[phi_index[h]][h] for h in range(H)])
        mu = np.stack([self.mus[mu_index[h]][h] for h in range(H)])
        return EpisodicMDP.from_factorization(
            LowRankFactorization(phi, mu), initial_state, row_tol=PAIR_ROW_TOL
        )

    def index_of(self, phi, mu):
        """(i, j) of the candidate pair equal to (phi, mu), or None."""
        i = next((k for k, p in enumerate(self.phis) if np.array_equal(p, phi)), None)
        j = next((k for k, m in enumerate(self.mus) if np.array_equal(m, mu)), None)
        return None if i is None or j is None else (i, j)

    def to_dict(self):
        H, S, K = self.shape
        return {
            "H": H,
            "S": S,
            "K": K,
            "d": self.d,
            "phis": [p.reshape(H, S * K, self.d).tolist() for p in self.phis],
            "mus": [m.tolist() for m in self.mus],
        }

    @classmethod
    def from_dict(cls, data):
        H, S, K, d = (int(data[k]) for k in ("H", "S", "K", "d"))
        phis = tuple(np.asarray(p, dtype=np.float64).reshape(H, S, K, d) for p in data["phis"])
        mus = tuple(np.asarray(m, dtype=np.float64).reshape(H, S, d) for m in data["mus"])
        return cls(phis, mus)


class TransitionDataset:
    """Append-only per-step lists of (s, a, s') triples."""

    def __init__(self, H, S, K):
        self.H, self.S, self.K = H, S, K
        self.triples = [[] for _ in range(H)]
        self._counts = np.zeros((H, S, K, S))

    def add(self, h, s, a, s_next):
        if not (0 <= h < self.H and 0 <= s < self.S and 0 <= a < self.K and 0 <= s_next < self.S):
            raise StructuralError(f"triple {(h, s, a, s_next)} out of bounds")
        self.triples[h].append((int(s), int(a), int(s_next)))
        self._counts[h, s, a, s_next] += 1

    def __len__(self):
        return sum(len(t) for t in self.triples)

    def size(self, h):
        return len(self.triples[h])

    def counts(self):
        """Transition counts of shape (H, S, K, S)."""
        return self._counts.copy()

    @classmethod
    def from_triples(cls, H, S, K, triples_per_step):
        ds = cls(H, S, K)
        for h, triples in enumerate(triples_per_step):
            for s, a, s_next in triples:
                ds.add(h, s, a, s_next)
        return ds


@dataclass(frozen=True)
class MLEFit:
    phi_index: tuple
    mu_index: tuple
    loglik: tuple

    def model(self, model_class, initial_state=0):
        return model_class.assemble(self.phi_index, self.mu_index, initial_state)


def _mle_from_counts(counts, model_class):
    ll = np.einsum("hsat,ijhsat->ijh", counts, model_class.log_probs)
    ll[~model_class.valid] = -np.inf
    H = counts.shape[0]
    flat = ll.reshape(-1, H)
    best = np.argmax(flat, axis=0)  # first maximum = lowest (phi, mu) index
    phi_idx, mu_idx = np.unravel_index(best, ll.shape[:2])
    return MLEFit(
        tuple(int(i) for i in phi_idx),
        tuple(int(j) for j in mu_idx),
        tuple(float(flat[best[h], h]) for h in range(H)),
    )


def mle_fit(datasets, model_class):
    """Per-step argmax of the log-likelihood over valid candidate pairs.

    Ties, including the empty-dataset case, go to the lowest (phi, mu) index.
    """
    if not model_class.valid.any():
        raise ConfigurationError("model class contains no valid pair")
    if (datasets.H, datasets.S, datasets.K) != tuple(model_class.shape):
        raise StructuralError("dataset and model class disagree on (H, S, K)")
    return _mle_from_counts(datasets._counts, model_class)


class LowRankMLE(BaseEstimator):
    """Estimator wrapper around :func:`mle_fit`.

    ``fit`` takes a :class:`TransitionDataset` (or an (n, 4) array of
    ``h, s, a, s'`` rows) plus the model class; ``predict_proba`` returns the
    fitted next-state distribution for rows of ``h, s, a``.
    """

    def __init__(self, model_class=None, initial_state=0):
        self.model_class = model_class
        self.initial_state = initial_state

    def fit(self, X, y=None):
        if self.model_class is None:
            raise ConfigurationError("LowRankMLE needs a model_class")
        H, S, K = self.model_class.shape
        if not isinstance(X, TransitionDataset):
            X = np.asarray(X, dtype=int).reshape(-1, 4)
            ds = TransitionDataset(H, S, K)
            for h, s, a, s_next in X:
                ds.add(h, s, a, s_next)
            X = ds
        self.fit_ = mle_fit(X, self.model_class)
        self.model_ = self.fit_.model(self.model_class, self.initial_state)
        return self

    def predict_proba(self, X):
        if not hasattr(self, "model_"):
            raise NotFittedError("LowRankMLE is not fitted")
        X = np.asarray(X, dtype=int).reshape(-1, 3)
        return self.model_.kernels[X[:, 0], X[:, 1], X[:, 2]]

    def score(self, X, y=None):
        """Average log-likelihood of (h, s, a, s') rows under the fitted model."""
        X = np.asarray(X, dtype=int).reshape(-1, 4)
        p = self.predict_proba(X[:, :3])[np.arange(len(X)), X[:, 3]]
        return float(np.mean(np.log(np.maximum(p, PROB_FLOOR))))
