"""Tree-structured hard instances for reward-free exploration in low-rank MDPs.

State layout (``S = 3 + 2**D``, also the feature dimension):

    0                 waiting state s_w
    2**(i-1) + j - 1  tree node s^{i,j}, layer i in 1..D, branch j in 1..2**(i-1)
    S - 3             outlier state s_o
    S - 2             good state s_g
    S - 1             bad state s_b

Actions: 0 is the waiting action, 1 and 2 descend to the left/right child,
the remaining ``K - 3`` actions leave the tree for s_o.

Family members are indexed by ``(h_star, leaf, action)`` with a 1-based step
``h_star`` in ``D+1 .. H_bar+D``, a 1-based leaf in ``1 .. 2**(D-1)`` and a
0-based action.
"""

from dataclasses import dataclass
from typing import Optional

import numpy as np

from .exceptions import StructuralError
from .mdp import EpisodicMDP, LowRankFactorization, RewardFunction

__all__ = [
    "HardInstanceParams",
    "HardInstance",
    "build_reference",
    "build_perturbed",
    "canonical_reward",
    "enumerate_family",
    "WAIT",
]

WAIT, LEFT, RIGHT = 0, 1, 2


@dataclass(frozen=True)
class HardInstanceParams:
    H: int
    D: int
    K: int
    epsilon0: float
    H_bar: Optional[int] = None

    def __post_init__(self):
        if self.H_bar is None:
            object.__setattr__(self, "H_bar", self.H // 3)
        if self.D < 1:
            raise StructuralError("tree depth D must be >= 1")
        if self.K < 3:
            raise StructuralError("need K >= 3 actions")
        if self.H_bar < 1:
            raise StructuralError("waiting horizon H_bar must be >= 1")
        if self.H < self.H_bar + self.D + 1:
            raise StructuralError("need H >= H_bar + D + 1 so the reward step follows the tree")
        if not 0 < self.epsilon0 <= 0.25:
            raise StructuralError("epsilon0 must lie in (0, 1/4]")

    @property
    def S(self):
        return 3 + 2**self.D

    @property
    def n_leaves(self):
        return 2 ** (self.D - 1)

    def node(self, i, j):
        return 2 ** (i - 1) + j - 1

    @property
    def outlier(self):
        return self.S - 3

    @property
    def good(self):
        return self.S - 2

    @property
    def bad(self):
        return self.S - 1


@dataclass(frozen=True, eq=False)
class HardInstance:
    params: HardInstanceParams
    mdp: EpisodicMDP
    reward: RewardFunction
    perturbation: Optional[tuple] = None

    @property
    def d(self):
        return self.mdp.factorization.d

    def to_dict(self):
        p = self.params
        return {
            "params": {"H": p.H, "D": p.D, "K": p.K, "H_bar": p.H_bar, "epsilon0": p.epsilon0},
            "perturbation": None if self.perturbation is None else list(self.perturbation),
            "mdp": self.mdp.to_dict(),
            "reward": self.reward.to_dict(),
        }


def _reference_features(p):
    H, S, K = p.H, p.S, p.K
    eye = np.eye(S)
    phi = np.zeros((H, S, K, S))
    mu = np.zeros((H, S, S))
    for t in range(H):
        step = t + 1
        waiting = 1.0 if step <= p.H_bar else 0.0
        mu[t, 0] = waiting * eye[0]
        mu[t, p.node(1, 1)] = (1.0 - waiting) * eye[0] + eye[1]
        for i in range(2, p.D + 1):
            for j in range(1, 2 ** (i - 1) + 1):
                mu[t, p.node(i, j)] = eye[p.node(i, j)]
        for s in (p.outlier, p.good, p.bad):
            mu[t, s] = eye[s]

        phi[t, 0, :] = eye[1]
        phi[t, 0, WAIT] = eye[0]
        for i in range(1, p.D):
            for j in range(1, 2 ** (i - 1) + 1):
                s = p.node(i, j)
                phi[t, s, :] = eye[p.outlier]
                phi[t, s, LEFT] = eye[p.node(i + 1, 2 * j - 1)]
                phi[t, s, RIGHT] = eye[p.node(i + 1, 2 * j)]
        for j in range(1, p.n_leaves + 1):
            phi[t, p.node(p.D, j), :] = 0.5 * (eye[p.good] + eye[p.bad])
        for s in (p.outlier, p.good, p.bad):
            phi[t, s, :] = eye[s]
    return phi, mu


def canonical_reward(params):
    """Reward 1 in s_g and 1/2 in s_o, both only at the last step."""
    r = np.zeros((params.H, params.S, params.K))
    r[-1, params.good, :] = 1.0
    r[-1, params.outlier, :] = 0.5
    return RewardFunction(r)


def build_reference(params):
    """Unperturbed instance: every leaf splits evenly between s_g and s_b."""
    phi, mu = _reference_features(params)
    mdp = EpisodicMDP.from_factorization(LowRankFactorization(phi, mu), initial_state=0)
    return HardInstance(params, mdp, canonical_reward(params))


def _check_member(params, h_star, leaf, action):
    if not params.D + 1 <= h_star <= params.H_bar + params.D:
        raise StructuralError(f"h_star={h_star} outside [{params.D + 1}, {params.H_bar + params.D}]")
    if not 1 <= leaf <= params.n_leaves:
        raise StructuralError(f"leaf={leaf} outside [1, {params.n_leaves}]")
    if not 0 <= action < params.K:
        raise StructuralError(f"action={action} outside [0, {params.K})")


def build_perturbed(params, h_star, leaf, action):
    """Family member where ``action`` at ``leaf`` on step ``h_star`` favours s_g by epsilon0."""
    _check_member(params, h_star, leaf, action)
    phi, mu = _reference_features(params)
    eps = params.epsilon0
    vec = np.zeros(params.S)
    vec[params.good] = 0.5 + eps
    vec[params.bad] = 0.5 - eps
    phi[h_star - 1, params.node(params.D, leaf), action] = vec
    mdp = EpisodicMDP.from_factorization(LowRankFactorization(phi, mu), initial_state=0)
    return HardInstance(params, mdp, canonical_reward(params), (h_star, leaf, action))


def enumerate_family(params):
    """All ``(h_star, leaf, action)`` indices in lexicographic order."""
    return [
        (h, leaf, a)
        for h in range(params.D + 1, params.H_bar + params.D + 1)
        for leaf in range(1, params.n_leaves + 1)
        for a in range(params.K)
    ]
