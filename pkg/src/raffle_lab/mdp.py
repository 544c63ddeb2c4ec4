"""Finite episodic MDPs: exact dynamic programming, occupancy and sampling.

Conventions: steps are 0-based (``h = 0 .. H-1``), kernels are stored densely
as ``kernels[h, s, a, s']`` and policies/rewards as ``(H, S, K)`` tables.
"""

from dataclasses import dataclass, field
from functools import cached_property
from typing import Optional

import numpy as np

from ._validation import (
    ROW_SUM_TOL,
    as_float_array,
    check_dims,
    check_index,
    check_probability_vector,
    check_random_state,
    check_stochastic,
)
from .exceptions import StructuralError

__all__ = [
    "LowRankFactorization",
    "EpisodicMDP",
    "RewardFunction",
    "Policy",
    "Trajectory",
    "OccupancyMeasure",
    "policy_q_values",
    "evaluate_policy",
    "optimal_policy",
    "occupancy",
    "sample_trajectory",
    "tv_distance",
    "simulation_gap",
    "uniform_policy",
    "deterministic_policy",
]


def _freeze(arr):
    arr = np.array(arr, dtype=np.float64, copy=True)
    arr.flags.writeable = False
    return arr


@dataclass(frozen=True, eq=False)
class LowRankFactorization:
    """Per-step embeddings with ``P_h(s'|s,a) = <phi[h,s,a], mu[h,s']>``.

    ``phi`` has shape (H, S, K, d) and ``mu`` has shape (H, S, d).
    """

    phi: np.ndarray
    mu: np.ndarray

    def __post_init__(self):
        phi = as_float_array(self.phi, 4, "phi")
        mu = as_float_array(self.mu, 3, "mu")
        if phi.shape[0] != mu.shape[0] or phi.shape[1] != mu.shape[1] or phi.shape[3] != mu.shape[2]:
            raise StructuralError(f"phi {phi.shape} and mu {mu.shape} disagree")
        d = phi.shape[3]
        if np.max(np.linalg.norm(phi, axis=-1)) > 1 + 1e-12:
            raise StructuralError("feature norm exceeds 1")
        if np.max(np.linalg.norm(mu, axis=-1)) > np.sqrt(d) + 1e-9:
            raise StructuralError("mu(s') norm exceeds sqrt(d)")
        if np.max(np.linalg.norm(mu.sum(axis=1), axis=-1)) > np.sqrt(d) + 1e-9:
            raise StructuralError("sum of mu exceeds sqrt(d)")
        object.__setattr__(self, "phi", _freeze(phi))
        object.__setattr__(self, "mu", _freeze(mu))

    @property
    def d(self):
        return self.phi.shape[3]

    def kernels(self):
        return np.einsum("hsad,htd->hsat", self.phi, self.mu)


@dataclass(frozen=True, eq=False)
class EpisodicMDP:
    """Time-inhomogeneous finite MDP started from a fixed state."""

    kernels: np.ndarray
    initial_state: int = 0
    factorization: Optional[LowRankFactorization] = None
    row_tol: float = field(default=ROW_SUM_TOL, repr=False)

    def __post_init__(self):
        P = as_float_array(self.kernels, 4, "kernels")
        H, S, K, S2 = P.shape
        if S != S2 or min(H, S, K) < 1:
            raise StructuralError(f"kernels must be (H, S, K, S), got {P.shape}")
        check_stochastic(P, "kernel", tol=self.row_tol)
        check_index(self.initial_state, S, "initial_state")
        if self.factorization is not None:
            f = self.factorization
            if f.phi.shape[:3] != (H, S, K):
                raise StructuralError("factorization does not match kernel dimensions")
            err = np.max(np.abs(f.kernels() - P))
            if err > self.row_tol:
                raise StructuralError(f"factorization misses the kernel by {err:.3e}")
        object.__setattr__(self, "kernels", _freeze(P))
        object.__setattr__(self, "initial_state", int(self.initial_state))

    @property
    def H(self):
        return self.kernels.shape[0]

    @property
    def S(self):
        return self.kernels.shape[1]

    @property
    def K(self):
        return self.kernels.shape[2]

    @cached_property
    def _cumulative(self):
        return np.cumsum(self.kernels, axis=-1)

    def next_state(self, h, s, a, rng):
        row = self._cumulative[h, s, a]
        return min(int(np.searchsorted(row, rng.random() * row[-1], side="right")), self.S - 1)

    @classmethod
    def from_factorization(cls, factorization, initial_state=0, row_tol=ROW_SUM_TOL):
        return cls(factorization.kernels(), initial_state, factorization, row_tol)

    def to_dict(self):
        H, S, K = self.H, self.S, self.K
        out = {
            "H": H,
            "S": S,
            "K": K,
            "initial_state": self.initial_state,
            "kernels": self.kernels.reshape(H, S * K, S).tolist(),
        }
        if self.factorization is not None:
            f = self.factorization
            out["d"] = f.d
            out["phi"] = f.phi.reshape(H, S * K, f.d).tolist()
            out["mu"] = f.mu.tolist()
        return out

    @classmethod
    def from_dict(cls, data):
        H, S, K = int(data["H"]), int(data["S"]), int(data["K"])
        try:
            P = np.asarray(data["kernels"], dtype=np.float64).reshape(H, S, K, S)
            fac = None
            if data.get("phi") is not None:
                phi = np.asarray(data["phi"], dtype=np.float64)
                d = phi.shape[-1]
                fac = LowRankFactorization(
                    phi.reshape(H, S, K, d), np.asarray(data["mu"], dtype=np.float64).reshape(H, S, d)
                )
        except ValueError as exc:
            raise StructuralError(str(exc)) from exc
        return cls(P, int(data.get("initial_state", 0)), fac)


@dataclass(frozen=True, eq=False)
class RewardFunction:
    """Deterministic rewards ``r[h, s, a]`` in [0, 1] with sum_h max r_h <= 1."""

    r: np.ndarray

    def __post_init__(self):
        r = as_float_array(self.r, 3, "reward")
        if r.size and (r.min() < 0.0 or r.max() > 1.0):
            raise StructuralError("reward entries must lie in [0, 1]")
        total = r.reshape(r.shape[0], -1).max(axis=1).sum()
        if total > 1 + 1e-12:
            raise StructuralError(f"sum over steps of max reward is {total:.6g} > 1")
        object.__setattr__(self, "r", _freeze(r))

    @classmethod
    def zeros(cls, H, S, K):
        return cls(np.zeros((H, S, K)))

    def to_dict(self):
        H, S, K = self.r.shape
        return {"H": H, "S": S, "K": K, "r": self.r.tolist()}

    @classmethod
    def from_dict(cls, data):
        return cls(np.asarray(data["r"], dtype=np.float64).reshape(data["H"], data["S"], data["K"]))


@dataclass(frozen=True, eq=False)
class Policy:
    """Markov policy ``pi[h, s, a]``; each (h, s) row is a distribution."""

    pi: np.ndarray

    def __post_init__(self):
        pi = as_float_array(self.pi, 3, "policy")
        check_stochastic(pi, "policy")
        object.__setattr__(self, "pi", _freeze(pi))

    @cached_property
    def _cumulative(self):
        return np.cumsum(self.pi, axis=-1)

    def act(self, h, s, rng):
        row = self._cumulative[h, s]
        return min(int(np.searchsorted(row, rng.random() * row[-1], side="right")), len(row) - 1)

    def to_dict(self):
        H, S, K = self.pi.shape
        return {"H": H, "S": S, "K": K, "pi": self.pi.tolist()}

    @classmethod
    def from_dict(cls, data):
        return cls(np.asarray(data["pi"], dtype=np.float64).reshape(data["H"], data["S"], data["K"]))


def uniform_policy(H, S, K):
    return Policy(np.full((H, S, K), 1.0 / K))


def deterministic_policy(actions, K):
    """Policy from an (H, S) table of action indices."""
    actions = np.asarray(actions, dtype=int)
    pi = np.zeros(actions.shape + (K,))
    np.put_along_axis(pi, actions[..., None], 1.0, axis=-1)
    return Policy(pi)


@dataclass(frozen=True)
class Trajectory:
    """States ``s_1 .. s_{k+1}`` and actions ``a_1 .. a_k`` (0-based storage)."""

    states: tuple
    actions: tuple

    def __post_init__(self):
        if len(self.states) != len(self.actions) + 1:
            raise StructuralError("a trajectory has one more state than actions")

    @property
    def length(self):
        return len(self.actions)


@dataclass(frozen=True, eq=False)
class OccupancyMeasure:
    """``dist[h, s, a]``: probability of visiting (s, a) at step h."""

    dist: np.ndarray

    def state_marginal(self):
        return self.dist.sum(axis=-1)


def _check_policy(mdp, policy):
    check_dims(mdp, policy.pi, "policy")


def _check_reward(mdp, reward):
    check_dims(mdp, reward.r, "reward")


def policy_q_values(mdp, policy, reward):
    """Backward induction. Returns ``Q`` of shape (H, S, K) and ``V`` of shape (H+1, S)."""
    _check_policy(mdp, policy)
    _check_reward(mdp, reward)
    H, S, K = mdp.H, mdp.S, mdp.K
    Q = np.zeros((H, S, K))
    V = np.zeros((H + 1, S))
    for h in range(H - 1, -1, -1):
        Q[h] = reward.r[h] + mdp.kernels[h] @ V[h + 1]
        V[h] = np.sum(policy.pi[h] * Q[h], axis=-1)
    return Q, V


def evaluate_policy(mdp, policy, reward):
    """Exact value of ``policy`` from the initial state, plus the (H+1, S) value table."""
    _, V = policy_q_values(mdp, policy, reward)
    return float(V[0, mdp.initial_state]), V


def optimal_policy(mdp, reward):
    """Greedy backward induction; ties go to the lowest action index."""
    _check_reward(mdp, reward)
    H, S, K = mdp.H, mdp.S, mdp.K
    V = np.zeros((H + 1, S))
    greedy = np.zeros((H, S), dtype=int)
    for h in range(H - 1, -1, -1):
        Q = reward.r[h] + mdp.kernels[h] @ V[h + 1]
        greedy[h] = np.argmax(Q, axis=-1)
        V[h] = Q[np.arange(S), greedy[h]]
    return deterministic_policy(greedy, K), float(V[0, mdp.initial_state])


def occupancy(mdp, policy):
    """Forward propagation of the state-action distribution from ``s_1``."""
    _check_policy(mdp, policy)
    dist = np.zeros((mdp.H, mdp.S, mdp.K))
    state = np.zeros(mdp.S)
    state[mdp.initial_state] = 1.0
    for h in range(mdp.H):
        dist[h] = state[:, None] * policy.pi[h]
        state = np.einsum("sa,sat->t", dist[h], mdp.kernels[h])
    return OccupancyMeasure(dist)


def sample_trajectory(mdp, policy, stop_step, rng_seed=None):
    """Roll ``policy`` for ``stop_step`` actions from ``s_1``."""
    _check_policy(mdp, policy)
    if not 1 <= stop_step <= mdp.H:
        raise StructuralError(f"stop_step={stop_step} outside [1, {mdp.H}]")
    rng = check_random_state(rng_seed)
    s = mdp.initial_state
    states, actions = [s], []
    for h in range(stop_step):
        a = policy.act(h, s, rng)
        s = mdp.next_state(h, s, a, rng)
        actions.append(a)
        states.append(s)
    return Trajectory(tuple(states), tuple(actions))


def tv_distance(p, q):
    """Total variation distance between two probability rows."""
    p = check_probability_vector(p, "p")
    q = check_probability_vector(q, "q")
    if p.shape != q.shape:
        raise StructuralError("rows differ in length")
    return float(min(1.0, 0.5 * np.abs(p - q).sum()))


def simulation_gap(P1, r1, P2, r2, policy):
    """Value gap ``V(P1, r1) - V(P2, r2)`` and its two telescoping decompositions.

    ``rhs_form1`` weights the per-step discrepancy with the occupancy of P2 and
    propagates P1's values; ``rhs_form2`` swaps the roles.
    """
    if (P1.H, P1.S, P1.K) != (P2.H, P2.S, P2.K):
        raise StructuralError("models must share H, S and K")
    if P1.initial_state != P2.initial_state:
        raise StructuralError("models must share the initial state")
    _, V1 = policy_q_values(P1, policy, r1)
    _, V2 = policy_q_values(P2, policy, r2)
    lhs = V1[0, P1.initial_state] - V2[0, P2.initial_state]

    dP = P1.kernels - P2.kernels
    dr = r1.r - r2.r
    occ1 = occupancy(P1, policy).dist
    occ2 = occupancy(P2, policy).dist
    form1 = form2 = 0.0
    for h in range(P1.H):
        form1 += np.sum(occ2[h] * (dr[h] + dP[h] @ V1[h + 1]))
        form2 += np.sum(occ1[h] * (dr[h] + dP[h] @ V2[h + 1]))
    return float(lhs), float(form1), float(form2)
