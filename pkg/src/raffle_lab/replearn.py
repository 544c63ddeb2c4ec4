"""Representation recovery from a learned model by multi-task Q regression.

With the reward switched off at step h, ``Q_h(s, a) = <phi*_h(s, a), w>`` for
some weight vector ``w``; regressing simulated Q-values of several reward
and policy pairs onto each candidate feature map singles out a map spanning
the true features. The divergence ``D_q(phi, phi')`` measures what remains of
``phi'`` after projecting it onto ``phi`` under the distribution ``q``.
"""

import logging
from dataclasses import dataclass
from typing import Optional

import numpy as np
from sklearn.base import BaseEstimator, TransformerMixin
from sklearn.exceptions import NotFittedError

from ._validation import check_random_state, check_stochastic
from .exceptions import ConfigurationError, ContractViolation, NumericalError, StructuralError
from .mdp import RewardFunction, deterministic_policy, occupancy, policy_q_values

logger = logging.getLogger(__name__)

__all__ = [
    "SamplingDistribution",
    "RewardDesign",
    "RepLearnOutput",
    "uniform_sampling",
    "occupancy_sampling",
    "sample_pairs",
    "target_q",
    "target_q_table",
    "compute_w_star",
    "design_rewards",
    "check_diversity",
    "check_reachability",
    "reachability_diagnostics",
    "fit_representation",
    "covariance",
    "divergence",
    "divergence_score",
    "replearn",
    "RepLearn",
]

PINV_RCOND = 1e-10
PSD_FLOOR = -1e-9


@dataclass(frozen=True, eq=False)
class SamplingDistribution:
    """``q[h, s, a]``: where simulated regression inputs are drawn at step h."""

    q: np.ndarray

    def __post_init__(self):
        q = np.asarray(self.q, dtype=np.float64)
        if q.ndim != 3:
            raise StructuralError("sampling distribution must be (H, S, K)")
        check_stochastic(q.reshape(q.shape[0], -1), "sampling distribution")
        object.__setattr__(self, "q", q)


def uniform_sampling(H, S, K):
    return SamplingDistribution(np.full((H, S, K), 1.0 / (S * K)))


def occupancy_sampling(mdp, policy):
    dist = occupancy(mdp, policy).dist
    return SamplingDistribution(dist / dist.reshape(mdp.H, -1).sum(axis=1)[:, None, None])


@dataclass(frozen=True, eq=False)
class RewardDesign:
    h: int
    rewards: tuple
    policies: tuple
    w_star: Optional[np.ndarray] = None
    sigma_d_sq: Optional[float] = None
    diverse: Optional[bool] = None

    @property
    def T(self):
        return len(self.rewards)


@dataclass(frozen=True, eq=False)
class RepLearnOutput:
    phi_index: tuple
    phi: np.ndarray  # (H, S, K, d), assembled from the selected candidates
    weights: np.ndarray  # (H, T, d)
    loss: np.ndarray  # (H,)
    candidate_loss: np.ndarray  # (H, n_candidates)
    ambiguous: tuple


def sample_pairs(q_h, N_f, rng_seed=None):
    """``N_f`` i.i.d. (s, a) draws from the (S, K) table ``q_h``."""
    if N_f < 1:
        raise StructuralError("N_f must be >= 1")
    q_h = np.asarray(q_h, dtype=np.float64)
    rng = check_random_state(rng_seed)
    flat = rng.choice(q_h.size, size=N_f, p=q_h.ravel() / q_h.sum())
    return np.stack(np.unravel_index(flat, q_h.shape), axis=1)


def target_q_table(model, policy, reward, h):
    """``Q^pi_h`` under ``model`` for a reward that is zero at step ``h``; shape (S, K)."""
    if np.any(reward.r[h] != 0):
        raise ContractViolation(f"reward must vanish at step {h}")
    Q, _ = policy_q_values(model, policy, reward)
    return Q[h]


def target_q(model, policy, reward, h, s, a):
    return float(target_q_table(model, policy, reward, h)[s, a])


def compute_w_star(true_model, policy, reward, h):
    """``sum_s' mu*_h(s') V^pi_{h+1}(s')``: the weight making Q linear in phi*."""
    if true_model.factorization is None:
        raise ContractViolation("true model carries no factorization")
    if np.any(reward.r[h] != 0):
        raise ContractViolation(f"reward must vanish at step {h}")
    _, V = policy_q_values(true_model, policy, reward)
    return true_model.factorization.mu[h].T @ V[h + 1]


def check_diversity(W_star, C_D, T, d):
    """Squared d-th singular value of the (d, T) weight matrix and the test against ``C_D T / d``."""
    if T < d:
        raise StructuralError(f"need T >= d, got T={T}, d={d}")
    W = np.asarray(W_star, dtype=np.float64)
    if W.shape != (d, T):
        raise StructuralError(f"W_star has shape {W.shape}, expected {(d, T)}")
    sigma = np.linalg.svd(W, compute_uv=False)
    sigma_d_sq = float(sigma[d - 1] ** 2)
    return sigma_d_sq, bool(sigma_d_sq >= C_D * T / d)


def _random_task(H, S, K, h, rng):
    # 0/1 entries on one uniformly chosen later step: values close to indicators
    # keep the weight columns spread out
    r = np.zeros((H, S, K))
    r[rng.integers(h + 1, H)] = rng.integers(2, size=(S, K))
    pi = deterministic_policy(rng.integers(K, size=(H, S)), K)
    return RewardFunction(r), pi


def design_rewards(reference_model, h, T, rng_seed=None, C_D=0.1, max_attempts=20):
    """``T`` (reward, policy) tasks whose rewards vanish up to and including step ``h``.

    When ``reference_model`` carries a factorization, the weight matrix is
    computed and the whole battery is redrawn (up to ``max_attempts`` times)
    until it passes the diversity test; tasks with a numerically zero weight
    column are always redrawn.
    """
    H, S, K = reference_model.H, reference_model.S, reference_model.K
    if not 0 <= h < H - 1:
        raise ContractViolation(f"no later step can carry reward for h={h}")
    rng = check_random_state(rng_seed)
    fac = reference_model.factorization
    design = None
    for _ in range(max_attempts):
        tasks, cols = [], []
        for _t in range(T):
            for _retry in range(100):
                reward, pi = _random_task(H, S, K, h, rng)
                if fac is None:
                    break
                w = compute_w_star(reference_model, pi, reward, h)
                if np.linalg.norm(w) > 1e-12:
                    break
            tasks.append((reward, pi))
            if fac is not None:
                cols.append(w)
        rewards, policies = tuple(t[0] for t in tasks), tuple(t[1] for t in tasks)
        if fac is None:
            return RewardDesign(h, rewards, policies)
        W = np.stack(cols, axis=1)
        sigma_d_sq, ok = check_diversity(W, C_D, T, fac.d)
        design = RewardDesign(h, rewards, policies, W, sigma_d_sq, ok)
        if ok:
            return design
    logger.warning("reward battery at step %d failed the diversity test after %d attempts", h, max_attempts)
    return design


def check_reachability(true_model, probe_policy):
    """Smallest state-visitation probability over all steps and states."""
    return float(occupancy(true_model, probe_policy).state_marginal().min())


def _max_ratio(num, den):
    if np.any((num > 0) & (den <= 0)):
        return float("inf")
    with np.errstate(divide="ignore", invalid="ignore"):
        return float(np.where(num > 0, num / den, 0.0).max())


def reachability_diagnostics(true_model, probe_policy, sampling):
    """Coverage constants of ``sampling`` relative to ``probe_policy``.

    ``C_B`` bounds ``q_h(s, a) / pi0_h(a|s)``, ``eta_min`` is the smallest
    state-visitation probability and ``C_min = C_B / eta_min`` then bounds
    ``q_h / P^pi0_h``; ``direct_ratio`` is the tightest such bound.
    Unbounded constants come back as ``inf``.
    """
    occ = occupancy(true_model, probe_policy).dist
    eta_min = float(occ.sum(axis=-1).min())
    c_b = _max_ratio(sampling.q, probe_policy.pi)
    c_min = c_b / eta_min if eta_min > 0 else float("inf")
    return {"eta_min": eta_min, "C_B": c_b, "C_min": c_min, "direct_ratio": _max_ratio(sampling.q, occ)}


def fit_representation(pairs, targets, feature_class):
    """Per step, pick the candidate with the smallest summed least-squares loss.

    ``pairs[h]`` is an int array (T, N_f, 2) of (s, a) rows, ``targets[h]`` a
    (T, N_f) array and ``feature_class`` a sequence of (H, S, K, d) maps. Each
    task gets its own weight vector via the pseudo-inverse.
    """
    if len(feature_class) == 0:
        raise ConfigurationError("feature class is empty")
    H = len(pairs)
    n_cand = len(feature_class)
    T = np.asarray(pairs[0]).shape[0]
    d = np.asarray(feature_class[0]).shape[-1]
    cand_loss = np.zeros((H, n_cand))
    cand_w = np.zeros((H, n_cand, T, d))
    for h in range(H):
        P = np.asarray(pairs[h])
        Y = np.asarray(targets[h], dtype=np.float64)
        if not np.all(np.isfinite(Y)):
            raise StructuralError("targets must be finite")
        for c, phi in enumerate(feature_class):
            X_all = np.asarray(phi)[h][P[..., 0], P[..., 1]]  # (T, N_f, d)
            for t in range(T):
                w = np.linalg.pinv(X_all[t], rcond=PINV_RCOND) @ Y[t]
                resid = Y[t] - X_all[t] @ w
                cand_w[h, c, t] = w
                cand_loss[h, c] += float(resid @ resid)
    best = np.argmin(cand_loss, axis=1)
    ambiguous = tuple(
        bool(np.sum(cand_loss[h] <= cand_loss[h, best[h]] + 1e-12) > 1) for h in range(H)
    )
    phi = np.stack([np.asarray(feature_class[best[h]])[h] for h in range(H)])
    return RepLearnOutput(
        phi_index=tuple(int(b) for b in best),
        phi=phi,
        weights=np.stack([cand_w[h, best[h]] for h in range(H)]),
        loss=cand_loss[np.arange(H), best],
        candidate_loss=cand_loss,
        ambiguous=ambiguous,
    )


def covariance(q_h, phi, phi_prime):
    """``E_q[phi(s,a) phi'(s,a)^T]`` over an (S, K) distribution."""
    return np.einsum("sa,sai,saj->ij", np.asarray(q_h), np.asarray(phi), np.asarray(phi_prime))


def divergence(q_h, phi, phi_prime):
    """Residual second moment of ``phi_prime`` after projection onto ``phi``."""
    s_pp = covariance(q_h, phi_prime, phi_prime)
    s_pf = covariance(q_h, phi_prime, phi)
    s_ff = covariance(q_h, phi, phi)
    D = s_pp - s_pf @ np.linalg.pinv(s_ff, rcond=PINV_RCOND, hermitian=True) @ s_pf.T
    return 0.5 * (D + D.T)


def divergence_score(q_h, phi_star, phi_tilde):
    """Trace of ``D_q(phi*, phi~)``, i.e. the squared Frobenius norm of its square root."""
    D = divergence(q_h, phi_star, phi_tilde)
    lo = float(np.linalg.eigvalsh(D).min()) if D.size else 0.0
    if lo < PSD_FLOOR:
        raise NumericalError(f"divergence has eigenvalue {lo:.3e} below the PSD floor")
    return float(max(np.trace(D), 0.0))


def replearn(model, feature_class, T, N_f, sampling=None, rng_seed=None, reference_model=None, C_D=0.1):
    """Build tasks, simulate targets under ``model`` and run the regression.

    The last step has no later reward to carry, so its targets are all zero
    and its selection is reported as ambiguous.
    Returns ``(RepLearnOutput, designs)``.
    """
    H, S, K = model.H, model.S, model.K
    rng = check_random_state(rng_seed)
    sampling = sampling if sampling is not None else uniform_sampling(H, S, K)
    reference = reference_model if reference_model is not None else model
    pairs, targets, designs = [], [], []
    for h in range(H):
        P = np.stack([sample_pairs(sampling.q[h], N_f, rng) for _ in range(T)])
        if h < H - 1:
            design = design_rewards(reference, h, T, rng, C_D=C_D)
            Y = np.stack(
                [
                    target_q_table(model, pi, r, h)[P[t, :, 0], P[t, :, 1]]
                    for t, (r, pi) in enumerate(zip(design.rewards, design.policies))
                ]
            )
        else:
            design = None
            Y = np.zeros((T, N_f))
        pairs.append(P)
        targets.append(Y)
        designs.append(design)
    return fit_representation(pairs, targets, feature_class), designs


class RepLearn(TransformerMixin, BaseEstimator):
    """Transformer that learns a per-step feature map from a model.

    ``fit(model, feature_class)`` runs the regression; ``transform`` maps rows
    of ``(h, s, a)`` to the selected features.
    """

    def __init__(self, n_tasks=4, n_samples=2000, sampling=None, C_D=0.1, reference_model=None, random_state=None):
        self.n_tasks = n_tasks
        self.n_samples = n_samples
        self.sampling = sampling
        self.C_D = C_D
        self.reference_model = reference_model
        self.random_state = random_state

    def fit(self, X, y=None):
        if y is None:
            raise ConfigurationError("RepLearn.fit needs the candidate feature class as its second argument")
        out, designs = replearn(
            X,
            y,
            self.n_tasks,
            self.n_samples,
            sampling=self.sampling,
            rng_seed=self.random_state,
            reference_model=self.reference_model,
            C_D=self.C_D,
        )
        self.output_ = out
        self.designs_ = designs
        self.phi_ = out.phi
        return self

    def transform(self, X):
        if not hasattr(self, "phi_"):
            raise NotFittedError("RepLearn is not fitted")
        X = np.asarray(X, dtype=int).reshape(-1, 3)
        return self.phi_[X[:, 0], X[:, 1], X[:, 2]]
