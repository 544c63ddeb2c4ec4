"""Seeded property checks over every module, grouped into named suites."""

import itertools
from dataclasses import dataclass

import numpy as np

from .elliptical import elliptical_bound, elliptical_potential, random_psd_sequence
from .exceptions import ConfigurationError
from .hard_instances import HardInstanceParams, build_perturbed, build_reference, enumerate_family
from .mdp import (
    RewardFunction,
    deterministic_policy,
    evaluate_policy,
    occupancy,
    optimal_policy,
    simulation_gap,
)
from .model_class import TransitionDataset, mle_fit
from .raffle import BonusParams, bonus_table, run_exploration, update_covariance
from .replearn import compute_w_star, divergence, divergence_score, target_q_table, uniform_sampling
from .synthetic import make_synthetic_env, max_row_tv, random_mdp, random_policy, random_reward

__all__ = ["CheckResult", "SUITES", "run_suite"]

SEED = 20240601


@dataclass(frozen=True)
class CheckResult:
    name: str
    passed: bool
    detail: str = ""


def _trajectory_value(mdp, policy, reward):
    # enumerate every (s, a) path and add up reward times probability
    H, S, K = mdp.H, mdp.S, mdp.K
    total = 0.0

    def walk(h, s, prob):
        nonlocal total
        if h == H or prob == 0.0:
            return
        for a in range(K):
            pa = prob * policy.pi[h, s, a]
            total += pa * reward.r[h, s, a]
            for t in range(S):
                walk(h + 1, t, pa * mdp.kernels[h, s, a, t])

    walk(0, mdp.initial_state, 1.0)
    return total


def check_mdp_core():
    rng = np.random.default_rng(SEED)
    out = []
    worst_eval, worst_occ, opt_ok = 0.0, 0.0, True
    for _ in range(20):
        H, S, K = (int(x) for x in rng.integers(1, 4, size=3))
        mdp = random_mdp(H, S, K, rng)
        reward = random_reward(H, S, K, rng)
        pi = random_policy(H, S, K, rng)
        value, _ = evaluate_policy(mdp, pi, reward)
        worst_eval = max(worst_eval, abs(value - _trajectory_value(mdp, pi, reward)))
        occ = occupancy(mdp, pi).dist
        worst_occ = max(worst_occ, float(np.abs(occ.reshape(H, -1).sum(axis=1) - 1).max()))
        _, v_star = optimal_policy(mdp, reward)
        for actions in itertools.islice(itertools.product(range(K), repeat=H * S), 500):
            det = deterministic_policy(np.reshape(actions, (H, S)), K)
            if evaluate_policy(mdp, det, reward)[0] > v_star + 1e-12:
                opt_ok = False
    out.append(CheckResult("policy value matches path enumeration", worst_eval <= 1e-12, f"max err {worst_eval:.2e}"))
    out.append(CheckResult("occupancy sums to one per step", worst_occ <= 1e-12, f"max err {worst_occ:.2e}"))
    out.append(CheckResult("optimal value dominates deterministic policies", opt_ok))
    env, _ = make_synthetic_env(2, 4, 3, 3, rng_seed=SEED)
    fac = env.factorization
    rows = np.abs(fac.kernels().sum(axis=-1) - 1).max()
    out.append(CheckResult("synthetic factorization yields stochastic rows", rows <= 1e-12, f"max err {rows:.2e}"))
    return out


def check_model_class():
    out = []
    hits = 0
    for seed in range(5):
        env, mc = make_synthetic_env(2, 4, 3, 3, 2, 2, rng_seed=seed, min_tv=0.05)
        rng = np.random.default_rng(seed)
        ds = TransitionDataset(env.H, env.S, env.K)
        for h in range(env.H):
            for _ in range(1000):
                s, a = int(rng.integers(env.S)), int(rng.integers(env.K))
                ds.add(h, s, a, env.next_state(h, s, a, rng))
        fit = mle_fit(ds, mc)
        model = fit.model(mc)
        hits += bool(np.allclose(model.kernels, env.kernels, atol=1e-12))
    out.append(CheckResult("MLE selects the true pair", hits >= 4, f"{hits}/5 seeds"))
    _, mc = make_synthetic_env(2, 3, 2, 2, 1, 1, rng_seed=0)
    empty = mle_fit(TransitionDataset(2, 3, 2), mc)
    out.append(CheckResult("empty data falls back to the lowest index", empty.phi_index == (0, 0) and empty.mu_index == (0, 0)))
    dmax = min(float(max_row_tv(mc.kernel(i, j), mc.kernel(0, 0)).min()) for i in range(2) for j in range(2) if (i, j) != (0, 0))
    out.append(CheckResult("decoys stay distinguishable", dmax >= 0.02, f"min TV {dmax:.3f}"))
    return out


def check_raffle():
    out = []
    env, mc = make_synthetic_env(2, 4, 3, 3, 1, 1, rng_seed=SEED)
    res = run_exploration(env, mc, 0.3, 0.1, max_iterations=30, rng_seed=SEED, bonus_scale=0.01)
    p = BonusParams(1.0, 0.1, mc.n_phi, mc.n_mu, env.H, env.K, mc.d)
    zeta_err = max(abs(r.zeta_n - np.log(2 * mc.n_phi * mc.n_mu * r.n * env.H / 0.1) / r.n) for r in res.log)
    out.append(CheckResult("logged zeta_n matches the closed form", zeta_err <= 1e-12, f"max err {zeta_err:.2e}"))
    out.append(CheckResult("trajectory count equals iterations times H", res.trajectory_count == res.n_iterations * env.H))
    again = run_exploration(env, mc, 0.3, 0.1, max_iterations=30, rng_seed=SEED, bonus_scale=0.01)
    out.append(CheckResult("exploration is deterministic under a seed", again.log == res.log))
    b = res.bonus
    out.append(CheckResult("bonus stays in [0, 1]", bool(b.min() >= 0 and b.max() <= 1)))
    rng = np.random.default_rng(SEED)
    phi = rng.dirichlet(np.ones(3), size=(4, 2))
    pairs = [(int(rng.integers(4)), int(rng.integers(2))) for _ in range(50)]
    naive = 2.0 * np.eye(3) + sum(np.outer(phi[s, a], phi[s, a]) for s, a in pairs)
    err = float(np.abs(update_covariance(pairs, phi, 2.0) - naive).max())
    out.append(CheckResult("covariance equals the naive outer-product sum", err <= 1e-12, f"max err {err:.2e}"))
    alpha = p.alpha_hat(5)
    table = bonus_table(phi[None], naive[None], alpha)
    inv = np.linalg.inv(naive)
    direct = np.minimum(alpha * np.sqrt(np.einsum("sai,ij,saj->sa", phi, inv, phi)), 1.0)
    err = float(np.abs(table[0] - direct).max())
    out.append(CheckResult("bonus matches an explicit inverse", err <= 1e-10, f"max err {err:.2e}"))
    return out


def check_replearn():
    out = []
    rng = np.random.default_rng(SEED)
    worst = 0.0
    for _ in range(10):
        env, _ = make_synthetic_env(2, 4, 3, 3, rng_seed=rng)
        h = int(rng.integers(env.H - 1))
        r = random_reward(env.H, env.S, env.K, rng).r.copy()
        r[: h + 1] = 0.0
        reward = RewardFunction(r)
        pi = random_policy(env.H, env.S, env.K, rng)
        w = compute_w_star(env, pi, reward, h)
        Q = target_q_table(env, pi, reward, h)
        worst = max(worst, float(np.abs(env.factorization.phi[h] @ w - Q).max()))
    out.append(CheckResult("targets are linear in the true features", worst <= 1e-10, f"max err {worst:.2e}"))
    env, _ = make_synthetic_env(2, 4, 3, 3, rng_seed=SEED)
    q = uniform_sampling(env.H, env.S, env.K).q[0]
    score = divergence_score(q, env.factorization.phi[0], env.factorization.phi[0])
    out.append(CheckResult("self divergence vanishes", score <= 1e-9, f"score {score:.2e}"))
    return out


def check_hard_instances():
    params = HardInstanceParams(H=9, D=2, K=4, epsilon0=0.1, H_bar=2)
    ref = build_reference(params)
    _, v0 = optimal_policy(ref.mdp, ref.reward)
    out = [CheckResult("reference value is 1/2", abs(v0 - 0.5) <= 1e-12, f"V* = {v0!r}")]
    worst = 0.0
    for idx in enumerate_family(params):
        inst = build_perturbed(params, *idx)
        _, v = optimal_policy(inst.mdp, inst.reward)
        worst = max(worst, abs(v - 0.6))
    out.append(CheckResult("every member has value 1/2 + epsilon0", worst <= 1e-12, f"max err {worst:.2e}"))
    out.append(CheckResult("feature dimension equals the state count", ref.d == params.S == 7))
    return out


def simulation_identity_errors(n_tuples=100, seed=SEED):
    rng = np.random.default_rng(seed)
    worst = 0.0
    for _ in range(n_tuples):
        H, S, K = (int(x) for x in rng.integers(1, 5, size=3))
        P1, P2 = random_mdp(H, S, K, rng), random_mdp(H, S, K, rng)
        r1, r2 = random_reward(H, S, K, rng), random_reward(H, S, K, rng)
        pi = random_policy(H, S, K, rng)
        lhs, f1, f2 = simulation_gap(P1, r1, P2, r2, pi)
        worst = max(worst, abs(lhs - f1), abs(lhs - f2))
    return worst


def check_simulation():
    worst = simulation_identity_errors()
    return [CheckResult("both telescoping forms equal the value gap", worst <= 1e-10, f"max err {worst:.2e}")]


def elliptical_cases(n_sequences=100, seed=0):
    """``(d, N, lam0, potential, bound)`` for the pre-committed random sequences."""
    rng = np.random.default_rng(seed)
    cases = []
    for _ in range(n_sequences):
        d = int(rng.integers(1, 6))
        N = int(rng.integers(1, 201))
        lam0 = float(rng.choice([0.1, 1.0]))
        X = random_psd_sequence(d, N, rng)
        cases.append((d, N, lam0, elliptical_potential(X, lam0), elliptical_bound(d, N, lam0)))
    return cases


def check_elliptical():
    cases = elliptical_cases()
    bad = [c for c in cases if c[3] > c[4]]
    detail = f"{len(cases) - len(bad)}/{len(cases)} within bound"
    if bad:
        detail += "; violations at lam0 in " + str(sorted({c[2] for c in bad}))
    return [CheckResult("potential stays below 2d log(1 + N/(d lam0))", not bad, detail)]


def divergence_cases(n_triples=200, seed=SEED):
    """Minimum eigenvalue of ``D_q(phi, phi')`` and the self score for random triples."""
    rng = np.random.default_rng(seed)
    out = []
    for _ in range(n_triples):
        S, K, d = (int(x) for x in rng.integers(1, 6, size=3))
        q = rng.dirichlet(np.ones(S * K)).reshape(S, K)
        if rng.random() < 0.3:
            q = np.where(rng.random((S, K)) < 0.5, 0.0, q)
            q = q / q.sum() if q.sum() > 0 else np.full((S, K), 1.0 / (S * K))
        phi = rng.standard_normal((S, K, d))
        if d > 1 and rng.random() < 0.3:
            phi[..., -1] = phi[..., 0]  # rank-deficient candidate
        phi_p = rng.standard_normal((S, K, d))
        lo = float(np.linalg.eigvalsh(divergence(q, phi, phi_p)).min())
        out.append((lo, divergence_score(q, phi, phi)))
    return out


def check_divergence():
    cases = divergence_cases()
    lo = min(c[0] for c in cases)
    hi = max(c[1] for c in cases)
    return [
        CheckResult("divergence is PSD", lo >= -1e-9, f"min eigenvalue {lo:.2e}"),
        CheckResult("self divergence score vanishes", hi <= 1e-9, f"max score {hi:.2e}"),
    ]


SUITES = {
    "mdp_core": check_mdp_core,
    "model_class": check_model_class,
    "raffle": check_raffle,
    "replearn": check_replearn,
    "hard-instances": check_hard_instances,
    "simulation": check_simulation,
    "elliptical": check_elliptical,
    "divergence": check_divergence,
}


def run_suite(name):
    """Results of one suite, or of all of them for ``"all"``."""
    if name == "all":
        return {k: fn() for k, fn in SUITES.items()}
    if name not in SUITES:
        raise ConfigurationError(f"unknown suite {name!r}; choose from {sorted(SUITES) + ['all']}")
    return {name: SUITES[name]()}
