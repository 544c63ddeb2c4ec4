"""Random realizable low-rank environments with perturbed decoy candidates.

Each step's kernel is a mixture of ``d`` latent next-state distributions:
``phi(s, a)`` is a point of the probability simplex and the columns of ``mu``
are distributions over states (each anchored on its own state). Any simplex
feature map paired with any such ``mu`` is a valid kernel, so decoys only
need to be renormalized after perturbation.
"""

import numpy as np

from ._validation import check_random_state
from .exceptions import ConfigurationError, StructuralError
from .mdp import EpisodicMDP, LowRankFactorization, Policy, RewardFunction
from .model_class import ModelClass

__all__ = ["make_synthetic_env", "random_mdp", "random_reward", "random_policy", "max_row_tv"]

NOISE = 0.5
MAX_ATTEMPTS = 100


def _true_factors(d, S, K, H, rng, anchor_weight):
    phi = rng.dirichlet(np.ones(d), size=(H, S, K))
    mu = np.zeros((H, S, d))
    for h in range(H):
        anchors = rng.choice(S, size=d, replace=False)
        latent = (1.0 - anchor_weight) * rng.dirichlet(np.ones(S), size=d)
        latent[np.arange(d), anchors] += anchor_weight
        mu[h] = latent.T
    return phi, mu


def max_row_tv(P, Q):
    """Per-step maximum over (s, a) of the TV distance between two (H, S, K, S) kernels."""
    return 0.5 * np.abs(P - Q).sum(axis=-1).reshape(P.shape[0], -1).max(axis=1)


def _kernel(phi, mu):
    return np.einsum("hsad,htd->hsat", phi, mu)


def _perturb_phi(phi, rng):
    noisy = np.clip(phi + rng.uniform(-NOISE, NOISE, size=phi.shape), 0.0, None)
    noisy += 1e-3  # keep every row strictly inside the simplex
    return noisy / noisy.sum(axis=-1, keepdims=True)


def _perturb_mu(mu, rng):
    latent = np.swapaxes(mu, 1, 2)  # (H, d, S)
    noisy = np.clip(latent + rng.uniform(-NOISE, NOISE, size=latent.shape) * latent.max(), 0.0, None)
    noisy += 1e-3
    noisy /= noisy.sum(axis=-1, keepdims=True)
    return np.swapaxes(noisy, 1, 2)


def make_synthetic_env(
    d, S, K, H, n_phi_decoys=0, n_mu_decoys=0, rng_seed=None, min_tv=0.02, anchor_weight=0.5
):
    """Return ``(env, model_class)`` with the true pair hidden at a random index.

    Every non-true pair of the class differs from the truth by at least
    ``min_tv`` in TV on some (s, a) row at every step. ``anchor_weight`` is
    the mass each latent next-state distribution puts on its own state;
    larger values separate the latent factors more.
    """
    if not 0.0 <= anchor_weight <= 1.0:
        raise StructuralError("anchor_weight must lie in [0, 1]")
    if d > S:
        raise StructuralError("need d <= S")
    if min(d, S, K, H) < 1 or n_phi_decoys < 0 or n_mu_decoys < 0:
        raise StructuralError("dimensions must be positive and decoy counts non-negative")
    rng = check_random_state(rng_seed)
    phi, mu = _true_factors(d, S, K, H, rng, anchor_weight)
    truth = _kernel(phi, mu)

    phis, mus = [phi], [mu]
    for _ in range(n_phi_decoys):
        for _attempt in range(MAX_ATTEMPTS):
            cand = _perturb_phi(phi, rng)
            if all(np.all(max_row_tv(_kernel(cand, m), truth) >= min_tv) for m in mus):
                phis.append(cand)
                break
        else:
            raise ConfigurationError("could not draw a distinguishable phi decoy")
    for _ in range(n_mu_decoys):
        for _attempt in range(MAX_ATTEMPTS):
            cand = _perturb_mu(mu, rng)
            if all(np.all(max_row_tv(_kernel(p, cand), truth) >= min_tv) for p in phis):
                mus.append(cand)
                break
        else:
            raise ConfigurationError("could not draw a distinguishable mu decoy")

    phi_order = rng.permutation(len(phis))
    mu_order = rng.permutation(len(mus))
    model_class = ModelClass(tuple(phis[i] for i in phi_order), tuple(mus[j] for j in mu_order))
    env = EpisodicMDP.from_factorization(LowRankFactorization(phi, mu), initial_state=0)
    return env, model_class


def random_reward(H, S, K, rng):
    """Uniform entries rescaled so the per-step maxima sum to one."""
    r = rng.random((H, S, K))
    r /= r.reshape(H, -1).max(axis=1).sum()
    return RewardFunction(np.minimum(r, 1.0))


def random_policy(H, S, K, rng):
    return Policy(rng.dirichlet(np.ones(K), size=(H, S)))


def random_mdp(H, S, K, rng, initial_state=0):
    """Unstructured MDP with Dirichlet kernel rows."""
    return EpisodicMDP(rng.dirichlet(np.ones(S), size=(H, S, K)), initial_state=initial_state)
