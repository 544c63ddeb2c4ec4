"""Reward-free exploration with elliptical bonuses, and its planning phase.

Exploration alternates between collecting one short episode per step,
refitting the per-step MLE model, building bonus rewards from the empirical
feature covariance, and planning greedily against a clipped bonus value.
It stops once twice that value plus the MLE slack ``sqrt(K * zeta_n)`` falls
below ``epsilon``.
"""

import logging
from dataclasses import dataclass, field

import numpy as np
from scipy import linalg
from sklearn.base import BaseEstimator
from sklearn.exceptions import NotFittedError

from ._validation import check_random_state
from .exceptions import ContractViolation, StructuralError
from .mdp import (
    Trajectory,
    deterministic_policy,
    occupancy,
    optimal_policy,
    uniform_policy,
)
from .model_class import TransitionDataset, _mle_from_counts

logger = logging.getLogger(__name__)

__all__ = [
    "BonusParams",
    "ExplorationState",
    "IterationLog",
    "RaffleOutput",
    "collect_episode",
    "update_covariance",
    "bonus",
    "bonus_table",
    "plan_truncated",
    "should_terminate",
    "run_exploration",
    "plan_for_reward",
    "system_identification_error",
    "Raffle",
]


@dataclass(frozen=True)
class BonusParams:
    """Confidence schedule for iteration ``n`` of a run on a given class."""

    beta3: float
    delta: float
    n_phi: int
    n_mu: int
    H: int
    K: int
    d: int

    def __post_init__(self):
        if self.beta3 <= 0:
            raise StructuralError("beta3 must be positive")
        if not 0 < self.delta < 1:
            raise StructuralError("delta must lie in (0, 1)")

    def zeta(self, n):
        return np.log(2 * self.n_phi * self.n_mu * n * self.H / self.delta) / n

    def lam(self, n):
        return self.beta3 * self.d * np.log(2 * n * self.H * self.n_phi / self.delta)

    def alpha_hat(self, n):
        return 5.0 * np.sqrt(2 * self.beta3 * n * self.zeta(n) * (self.K + self.d**2))


@dataclass(frozen=True)
class IterationLog:
    n: int
    loglik: tuple
    v_hat: float
    zeta_n: float
    alpha_hat_n: float
    lambda_n: float
    terminated: bool


@dataclass
class ExplorationState:
    """Everything the loop carries from iteration ``n`` to ``n + 1``."""

    n: int
    datasets: TransitionDataset
    cov_counts: np.ndarray  # (H, S, K) visit counts behind each covariance
    policy: object
    model: object = None
    covariances: np.ndarray = None
    bonus: np.ndarray = None
    params: BonusParams = None
    trajectory_count: int = 0


@dataclass
class RaffleOutput:
    model: object
    bonus: np.ndarray
    policy: object
    n_iterations: int
    trajectory_count: int
    terminated: bool
    log: list = field(default_factory=list)
    datasets: TransitionDataset = None
    params: BonusParams = None
    bonus_scale: float = 1.0
    covariances: np.ndarray = None  # (H, d, d) at the returned iteration
    cov_counts: np.ndarray = None  # (H, S, K) visits behind the covariances

    def to_dict(self):
        return {
            "terminated": self.terminated,
            "n_iterations": self.n_iterations,
            "trajectory_count": self.trajectory_count,
            "bonus_scale": self.bonus_scale,
            "model": self.model.to_dict(),
            "bonus": self.bonus.tolist(),
            "policy": self.policy.to_dict(),
            "log": [
                {
                    "n": row.n,
                    "loglik": list(row.loglik),
                    "v_hat": row.v_hat,
                    "zeta_n": row.zeta_n,
                    "alpha_hat_n": row.alpha_hat_n,
                    "lambda_n": row.lambda_n,
                    "terminated": row.terminated,
                }
                for row in self.log
            ],
        }


def collect_episode(env, rollin_policy, h, rng_seed=None):
    """One exploration episode for step ``h`` (0-based).

    Actions before ``h - 1`` follow ``rollin_policy``; the actions at ``h - 1``
    and ``h`` are uniform. The episode stops after ``s_{h+1}`` is observed.
    At ``h = 0`` only the first action is drawn, uniformly at ``s_1``.
    """
    if not 0 <= h < env.H:
        raise StructuralError(f"h={h} outside [0, {env.H})")
    rng = check_random_state(rng_seed)
    s = env.initial_state
    states, actions = [s], []
    for t in range(h + 1):
        a = rollin_policy.act(t, s, rng) if t < h - 1 else int(rng.integers(env.K))
        s = env.next_state(t, s, a, rng)
        actions.append(a)
        states.append(s)
    return Trajectory(tuple(states), tuple(actions)), (states[h], actions[h], states[h + 1])


def _covariance_from_counts(counts_sa, phi_h, lambda_n):
    d = phi_h.shape[-1]
    gram = np.einsum("sa,sai,saj->ij", counts_sa, phi_h, phi_h)
    return lambda_n * np.eye(d) + 0.5 * (gram + gram.T)


def update_covariance(pairs, phi_hat_h, lambda_n):
    """``lambda_n * I + sum phi(s,a) phi(s,a)^T`` over all recorded (s, a) pairs.

    The current feature map is applied to every past pair, so the matrix is
    rebuilt rather than updated whenever the features change.
    """
    phi_hat_h = np.asarray(phi_hat_h, dtype=np.float64)
    S, K, _ = phi_hat_h.shape
    counts = np.zeros((S, K))
    for pair in pairs:
        counts[pair[0], pair[1]] += 1
    return _covariance_from_counts(counts, phi_hat_h, lambda_n)


def _quadratic_forms(phi_h, U):
    try:
        factor = linalg.cho_factor(U)
    except linalg.LinAlgError as exc:
        raise ContractViolation("covariance is not positive definite") from exc
    flat = phi_h.reshape(-1, phi_h.shape[-1])
    solved = linalg.cho_solve(factor, flat.T).T
    quad = np.einsum("ij,ij->i", flat, solved)
    return np.maximum(quad, 0.0).reshape(phi_h.shape[:-1])


def bonus(phi_hat_h, U_hat_h, alpha_hat_n, s, a):
    """``min(alpha * ||phi(s,a)||_{U^-1}, 1)`` for a single pair."""
    phi = np.asarray(phi_hat_h, dtype=np.float64)[s, a][None, None, :]
    return float(min(alpha_hat_n * np.sqrt(_quadratic_forms(phi, np.asarray(U_hat_h))[0, 0]), 1.0))


def bonus_table(phi_hat, covariances, alpha):
    """Bonus for every (h, s, a); ``phi_hat`` is (H, S, K, d), ``covariances`` (H, d, d)."""
    return np.stack(
        [np.minimum(alpha * np.sqrt(_quadratic_forms(phi_hat[h], covariances[h])), 1.0) for h in range(len(phi_hat))]
    )


def plan_truncated(model, bonus_values):
    """Greedy policy for ``Q_h = min(1, b_h + P_h V_{h+1})``, ``V_h = max_a Q_h``.

    Returns the deterministic policy and its clipped value from ``s_1``.
    """
    b = np.asarray(bonus_values, dtype=np.float64)
    if b.shape != (model.H, model.S, model.K):
        raise StructuralError(f"bonus table has shape {b.shape}")
    if b.size and (b.min() < 0 or b.max() > 1):
        raise ContractViolation("bonus entries must lie in [0, 1]")
    V = np.zeros(model.S)
    greedy = np.zeros((model.H, model.S), dtype=int)
    for h in range(model.H - 1, -1, -1):
        Q = np.minimum(1.0, b[h] + model.kernels[h] @ V)
        greedy[h] = np.argmax(Q, axis=-1)
        V = Q[np.arange(model.S), greedy[h]]
    return deterministic_policy(greedy, model.K), float(V[model.initial_state])


def should_terminate(V_hat, K, zeta_n, epsilon):
    if epsilon <= 0:
        raise StructuralError("epsilon must be positive")
    return bool(2.0 * V_hat + 2.0 * np.sqrt(K * zeta_n) <= epsilon)


def run_exploration(
    env,
    model_class,
    epsilon,
    delta,
    beta3=1.0,
    max_iterations=1000,
    rng_seed=None,
    bonus_scale=1.0,
):
    """Exploration phase. Returns a :class:`RaffleOutput`.

    ``bonus_scale`` multiplies the theoretical ``alpha_hat_n`` inside the
    bonus; the log always records the unscaled value. When the budget runs
    out the output carries ``terminated=False`` and the last iterate.
    """
    if not (0 < epsilon < 1 and 0 < delta < 1):
        raise StructuralError("epsilon and delta must lie in (0, 1)")
    if max_iterations < 1:
        raise StructuralError("max_iterations must be >= 1")
    if (env.H, env.S, env.K) != tuple(model_class.shape):
        raise StructuralError("environment and model class disagree on (H, S, K)")
    rng = check_random_state(rng_seed)
    H, S, K = env.H, env.S, env.K
    params = BonusParams(beta3, delta, model_class.n_phi, model_class.n_mu, H, K, model_class.d)
    state = ExplorationState(
        n=0,
        datasets=TransitionDataset(H, S, K),
        cov_counts=np.zeros((H, S, K)),
        policy=uniform_policy(H, S, K),
        params=params,
    )
    log = []
    terminated = False
    for n in range(1, max_iterations + 1):
        for h in range(H):
            traj, (s, a, s_next) = collect_episode(env, state.policy, h, rng)
            state.datasets.add(h, s, a, s_next)
            if h >= 1:
                # step h-1 of this episode: s from the roll-in, a uniform
                state.cov_counts[h - 1, traj.states[h - 1], traj.actions[h - 1]] += 1
            if h == H - 1:
                state.cov_counts[h, s, a] += 1
        state.trajectory_count += H
        state.n = n

        fit = _mle_from_counts(state.datasets._counts, model_class)
        model = fit.model(model_class, env.initial_state)
        phi_hat = model.factorization.phi
        lam = params.lam(n)
        covs = np.stack([_covariance_from_counts(state.cov_counts[h], phi_hat[h], lam) for h in range(H)])
        alpha = params.alpha_hat(n)
        b = bonus_table(phi_hat, covs, bonus_scale * alpha)
        policy, v_hat = plan_truncated(model, b)
        zeta = params.zeta(n)
        done = should_terminate(v_hat, K, zeta, epsilon)

        state.model, state.covariances, state.bonus, state.policy = model, covs, b, policy
        log.append(IterationLog(n, fit.loglik, v_hat, float(zeta), float(alpha), float(lam), done))
        if done:
            terminated = True
            break

    if not terminated:
        logger.info("exploration budget of %d iterations exhausted", max_iterations)
    return RaffleOutput(
        model=state.model,
        bonus=state.bonus,
        policy=state.policy,
        n_iterations=state.n,
        trajectory_count=state.trajectory_count,
        terminated=terminated,
        log=log,
        datasets=state.datasets,
        params=params,
        bonus_scale=bonus_scale,
        covariances=state.covariances,
        cov_counts=state.cov_counts.copy(),
    )


def plan_for_reward(model, reward):
    """Planning for a revealed reward: optimal policy of the learned model."""
    policy, _ = optimal_policy(model, reward)
    return policy


def system_identification_error(P_hat, P_star, policy):
    """Per-step expected TV error under the true occupancy of ``policy``, and its max."""
    if (P_hat.H, P_hat.S, P_hat.K) != (P_star.H, P_star.S, P_star.K):
        raise StructuralError("models must share H, S and K")
    occ = occupancy(P_star, policy).dist
    tv = 0.5 * np.abs(P_hat.kernels - P_star.kernels).sum(axis=-1)
    per_h = np.einsum("hsa,hsa->h", occ, np.minimum(tv, 1.0))
    return per_h, float(per_h.max())


class Raffle(BaseEstimator):
    """Estimator front-end for the exploration phase and the planning options.

    >>> est = Raffle(epsilon=0.3, bonus_scale=0.01, random_state=0)  # doctest: +SKIP
    >>> est.fit(env, model_class).plan(reward)                        # doctest: +SKIP
    """

    def __init__(
        self,
        epsilon=0.1,
        delta=0.1,
        beta3=1.0,
        bonus_scale=1.0,
        max_iterations=1000,
        random_state=None,
    ):
        self.epsilon = epsilon
        self.delta = delta
        self.beta3 = beta3
        self.bonus_scale = bonus_scale
        self.max_iterations = max_iterations
        self.random_state = random_state

    def fit(self, env, model_class):
        out = run_exploration(
            env,
            model_class,
            self.epsilon,
            self.delta,
            beta3=self.beta3,
            max_iterations=self.max_iterations,
            rng_seed=self.random_state,
            bonus_scale=self.bonus_scale,
        )
        self.output_ = out
        self.model_ = out.model
        self.policy_ = out.policy
        self.n_iterations_ = out.n_iterations
        self.terminated_ = out.terminated
        return self

    def _check_fitted(self):
        if not hasattr(self, "model_"):
            raise NotFittedError("Raffle is not fitted")

    def plan(self, reward):
        self._check_fitted()
        return plan_for_reward(self.model_, reward)

    def system_identification_error(self, true_env, policy):
        self._check_fitted()
        return system_identification_error(self.model_, true_env, policy)
