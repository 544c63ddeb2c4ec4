import itertools

import numpy as np
import pytest
from hypothesis import HealthCheck, settings

settings.register_profile(
    "repo", deadline=None, max_examples=40, suppress_health_check=[HealthCheck.too_slow]
)
settings.load_profile("repo")


def enumerate_trajectories(mdp, policy, reward):
    """Brute-force ``sum_tau Pr(tau) R(tau)`` over every full state-action path."""
    H, S, K = mdp.H, mdp.S, mdp.K
    total = 0.0
    for actions in itertools.product(range(K), repeat=H):
        for states in itertools.product(range(S), repeat=H):
            if states[0] != mdp.initial_state:
                continue
            prob, ret = 1.0, 0.0
            for h in range(H):
                s, a = states[h], actions[h]
                prob *= policy.pi[h, s, a]
                ret += reward.r[h, s, a]
                if h + 1 < H:
                    prob *= mdp.kernels[h, s, a, states[h + 1]]
            total += prob * ret
    return total


def all_deterministic_actions(H, S, K):
    for flat in itertools.product(range(K), repeat=H * S):
        yield np.reshape(flat, (H, S))


@pytest.fixture
def rng():
    return np.random.default_rng(12345)
