import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from scipy import linalg

from raffle_lab.exceptions import ContractViolation, StructuralError
from raffle_lab.hard_instances import HardInstanceParams, build_perturbed
from raffle_lab.mdp import EpisodicMDP, RewardFunction, deterministic_policy, evaluate_policy, optimal_policy, uniform_policy
from raffle_lab.model_class import ModelClass
from raffle_lab.raffle import (
    BonusParams,
    Raffle,
    bonus,
    bonus_table,
    collect_episode,
    plan_for_reward,
    plan_truncated,
    run_exploration,
    should_terminate,
    system_identification_error,
    update_covariance,
)
from raffle_lab.synthetic import make_synthetic_env, random_mdp, random_policy, random_reward

from conftest import all_deterministic_actions


def clipped_value(model, b, actions):
    V = np.zeros(model.S)
    for h in range(model.H - 1, -1, -1):
        Q = np.minimum(1.0, b[h] + model.kernels[h] @ V)
        V = Q[np.arange(model.S), actions[h]]
    return V[model.initial_state]


class TestBonusParams:
    def test_closed_forms(self):
        p = BonusParams(beta3=0.7, delta=0.05, n_phi=3, n_mu=4, H=5, K=2, d=3)
        n = 17
        zeta = np.log(2 * 3 * 4 * n * 5 / 0.05) / n
        assert p.zeta(n) == pytest.approx(zeta, rel=1e-15)
        assert p.lam(n) == pytest.approx(0.7 * 3 * np.log(2 * n * 5 * 3 / 0.05), rel=1e-15)
        assert p.alpha_hat(n) == pytest.approx(5 * np.sqrt(2 * 0.7 * n * zeta * (2 + 9)), rel=1e-15)

    def test_positive(self):
        p = BonusParams(1.0, 0.1, 1, 1, 1, 1, 1)
        assert p.zeta(1) > 0 and p.lam(1) > 0 and p.alpha_hat(1) > 0

    def test_invalid(self):
        with pytest.raises(StructuralError):
            BonusParams(0.0, 0.1, 1, 1, 1, 1, 1)
        with pytest.raises(StructuralError):
            BonusParams(1.0, 1.0, 1, 1, 1, 1, 1)


class TestCollectEpisode:
    def test_first_step(self, rng):
        env = random_mdp(3, 3, 2, rng)
        traj, (s, a, s2) = collect_episode(env, uniform_policy(3, 3, 2), 0, rng)
        assert len(traj.actions) == 1 and len(traj.states) == 2
        assert s == env.initial_state and (s, a, s2) == (traj.states[0], traj.actions[0], traj.states[1])

    def test_stops_after_next_state(self, rng):
        env = random_mdp(4, 3, 2, rng)
        traj, triple = collect_episode(env, uniform_policy(4, 3, 2), 2, rng)
        assert len(traj.actions) == 3 and triple == (traj.states[2], traj.actions[2], traj.states[3])

    def test_last_step(self, rng):
        env = random_mdp(3, 3, 2, rng)
        traj, (_, _, s_next) = collect_episode(env, uniform_policy(3, 3, 2), 2, rng)
        assert len(traj.states) == 4 and 0 <= s_next < 3

    def test_out_of_range(self, rng):
        env = random_mdp(2, 2, 2, rng)
        with pytest.raises(StructuralError):
            collect_episode(env, uniform_policy(2, 2, 2), 2, rng)

    def test_deterministic_env(self):
        P = np.zeros((3, 2, 2, 2))
        P[:, :, 0, 0] = 1.0
        P[:, :, 1, 1] = 1.0
        env = EpisodicMDP(P)
        traj, _ = collect_episode(env, uniform_policy(3, 2, 2), 2, 0)
        assert traj.states[1:] == traj.actions

    def test_rollin_and_uniform_actions(self):
        rng = np.random.default_rng(1)
        H, S, K = 4, 2, 3
        env = EpisodicMDP(np.full((H, S, K, S), 0.5))
        rollin = deterministic_policy(np.full((H, S), 2), K)
        counts = np.zeros((2, K))
        for _ in range(10_000):
            traj, _ = collect_episode(env, rollin, 3, rng)
            assert traj.actions[:2] == (2, 2)
            counts[0, traj.actions[2]] += 1
            counts[1, traj.actions[3]] += 1
        freq = counts / 10_000
        assert np.all(0.5 * np.abs(freq - 1 / K).sum(axis=1) <= 0.03)


class TestCovarianceAndBonus:
    def test_no_data(self):
        phi = np.random.default_rng(0).dirichlet(np.ones(3), size=(2, 2))
        assert np.array_equal(update_covariance([], phi, 2.5), 2.5 * np.eye(3))

    def test_rank_one(self):
        phi = np.zeros((1, 1, 3))
        phi[0, 0, 0] = 1.0
        assert np.array_equal(update_covariance([(0, 0)], phi, 1.0), np.diag([2.0, 1.0, 1.0]))

    def test_naive_sum(self, rng):
        phi = rng.standard_normal((3, 2, 4)) / 3
        pairs = [(int(rng.integers(3)), int(rng.integers(2))) for _ in range(5)]
        naive = 0.3 * np.eye(4)
        for s, a in pairs:
            naive += np.outer(phi[s, a], phi[s, a])
        assert np.max(np.abs(update_covariance(pairs, phi, 0.3) - naive)) <= 1e-14

    def test_bonus_examples(self):
        phi = np.array([[[1.0, 0.0]]])
        assert bonus(phi, np.eye(2), 0.0, 0, 0) == 0.0
        assert bonus(phi, np.eye(2), 0.5, 0, 0) == pytest.approx(0.5)
        assert bonus(phi, np.diag([2.0, 1.0]), 1.0, 0, 0) == pytest.approx(1 / np.sqrt(2), abs=1e-15)
        assert bonus(phi, np.eye(2), 10.0, 0, 0) == 1.0

    def test_singular_covariance(self):
        with pytest.raises(ContractViolation):
            bonus(np.array([[[1.0, 0.0]]]), np.zeros((2, 2)), 1.0, 0, 0)

    def test_table_matches_pointwise(self, rng):
        phi = rng.dirichlet(np.ones(3), size=(2, 3, 2))
        covs = np.stack([update_covariance([(0, 0), (1, 1)], phi[h], 0.5) for h in range(2)])
        table = bonus_table(phi, covs, 0.8)
        for h in range(2):
            for s in range(3):
                for a in range(2):
                    assert table[h, s, a] == pytest.approx(bonus(phi[h], covs[h], 0.8, s, a), abs=1e-14)

    @given(seed=st.integers(0, 10_000), n=st.integers(0, 30))
    def test_bonus_shrinks_with_data(self, seed, n):
        rng = np.random.default_rng(seed)
        phi = rng.dirichlet(np.ones(3), size=(3, 2))
        pairs = [(int(rng.integers(3)), int(rng.integers(2))) for _ in range(n + 1)]
        before = bonus_table(phi[None], update_covariance(pairs[:n], phi, 1.0)[None], 2.0)
        after = bonus_table(phi[None], update_covariance(pairs, phi, 1.0)[None], 2.0)
        assert np.all(after <= before + 1e-10)


class TestPlanTruncated:
    def test_zero_bonus(self, rng):
        model = random_mdp(3, 3, 2, rng)
        _, v = plan_truncated(model, np.zeros((3, 3, 2)))
        assert v == 0.0

    def test_unit_bonus(self, rng):
        model = random_mdp(3, 3, 2, rng)
        _, v = plan_truncated(model, np.ones((3, 3, 2)))
        assert v == 1.0

    def test_exhaustive(self, rng):
        for _ in range(5):
            model = random_mdp(2, 2, 2, rng)
            b = rng.random((2, 2, 2)) * 0.7
            pi, v = plan_truncated(model, b)
            best = max(clipped_value(model, b, acts) for acts in all_deterministic_actions(2, 2, 2))
            assert v == pytest.approx(best, abs=1e-14)
            assert clipped_value(model, b, pi.pi.argmax(axis=-1)) == pytest.approx(v, abs=1e-14)

    def test_exhaustive_larger(self, rng):
        model = random_mdp(3, 2, 3, rng)
        b = rng.random((3, 2, 3)) * 0.4
        _, v = plan_truncated(model, b)
        best = max(clipped_value(model, b, acts) for acts in all_deterministic_actions(3, 2, 3))
        assert v == pytest.approx(best, abs=1e-14)

    @given(seed=st.integers(0, 10_000))
    def test_monotone_in_bonus(self, seed):
        rng = np.random.default_rng(seed)
        model = random_mdp(3, 3, 2, rng)
        b = rng.random((3, 3, 2)) * 0.5
        bigger = np.minimum(1.0, b + rng.random((3, 3, 2)) * 0.2)
        v1, v2 = plan_truncated(model, b)[1], plan_truncated(model, bigger)[1]
        assert 0.0 <= v1 <= v2 + 1e-15 <= 1.0 + 1e-15

    def test_rejects_bad_bonus(self, rng):
        model = random_mdp(2, 2, 2, rng)
        with pytest.raises(ContractViolation):
            plan_truncated(model, np.full((2, 2, 2), 1.5))
        with pytest.raises(StructuralError):
            plan_truncated(model, np.zeros((2, 2, 3)))


class TestTermination:
    def test_examples(self):
        assert should_terminate(0.0, 1, 0.04**2, 0.1)
        assert not should_terminate(0.5, 3, 0.0, 0.1)
        assert should_terminate(0.025, 1, 0.025**2, 0.1)  # equality is inclusive

    def test_invalid_epsilon(self):
        with pytest.raises(StructuralError):
            should_terminate(0.0, 1, 0.0, 0.0)


class TestRunExploration:
    def test_singleton_class_terminates(self):
        env, mc = make_synthetic_env(2, 3, 2, 2, rng_seed=0)
        # with V_hat = 0 termination needs 2 sqrt(K zeta_n) <= eps: find that n from the closed form
        p = BonusParams(1.0, 0.1, 1, 1, 2, 2, 2)
        bound = next(n for n in range(1, 10_000) if 2 * np.sqrt(2 * p.zeta(n)) <= 0.5)
        out = run_exploration(env, mc, 0.5, 0.1, max_iterations=20 * bound, rng_seed=0, bonus_scale=0.01)
        assert out.terminated and out.n_iterations >= bound
        assert np.allclose(out.model.kernels, env.kernels)

    def test_terminates_at_analytic_iteration(self):
        env, mc = make_synthetic_env(2, 3, 2, 2, rng_seed=0)
        p = BonusParams(1.0, 0.1, 1, 1, 2, 2, 2)
        bound = next(n for n in range(1, 10_000) if 2 * np.sqrt(2 * p.zeta(n)) <= 0.9)
        out = run_exploration(env, mc, 0.9, 0.1, max_iterations=bound, rng_seed=0, bonus_scale=0.0)
        assert out.terminated and out.n_iterations == bound

    def test_budget_exhausted(self):
        env, mc = make_synthetic_env(2, 3, 2, 2, rng_seed=0)
        out = run_exploration(env, mc, 0.01, 0.1, max_iterations=1, rng_seed=0)
        assert not out.terminated and out.n_iterations == 1 and len(out.log) == 1

    def test_state_invariants(self):
        env, mc = make_synthetic_env(2, 4, 3, 3, 1, 1, rng_seed=3)
        out = run_exploration(env, mc, 0.3, 0.1, max_iterations=25, rng_seed=4, bonus_scale=0.05)
        n = out.n_iterations
        assert out.trajectory_count == n * env.H
        assert all(out.datasets.size(h) == n for h in range(env.H))
        assert np.all(out.cov_counts.reshape(env.H, -1).sum(axis=1) == n)
        assert [row.n for row in out.log] == list(range(1, n + 1))
        lam = out.params.lam(n)
        for U in out.covariances:
            assert np.array_equal(U, U.T)
            assert np.linalg.eigvalsh(U).min() >= lam - 1e-9
        assert np.all((out.bonus >= 0) & (out.bonus <= 1))

    def test_logged_schedule(self):
        env, mc = make_synthetic_env(2, 4, 3, 3, 1, 1, rng_seed=3)
        out = run_exploration(env, mc, 0.3, 0.1, beta3=0.5, max_iterations=15, rng_seed=4)
        for row in out.log:
            z = np.log(2 * mc.n_phi * mc.n_mu * row.n * env.H / 0.1) / row.n
            assert abs(row.zeta_n - z) <= 1e-12
            assert row.lambda_n == pytest.approx(0.5 * mc.d * np.log(2 * row.n * env.H * mc.n_phi / 0.1))
            assert row.alpha_hat_n == pytest.approx(5 * np.sqrt(2 * 0.5 * row.n * z * (env.K + mc.d**2)))

    def test_termination_postcondition(self):
        env, mc = make_synthetic_env(2, 3, 2, 2, 1, 1, rng_seed=2)
        out = run_exploration(env, mc, 0.6, 0.1, max_iterations=5000, rng_seed=1, bonus_scale=0.01)
        assert out.terminated
        last = out.log[-1]
        assert last.terminated and 2 * last.v_hat + 2 * np.sqrt(env.K * last.zeta_n) <= 0.6
        assert not any(row.terminated for row in out.log[:-1])

    def test_deterministic(self):
        env, mc = make_synthetic_env(2, 4, 3, 3, 1, 1, rng_seed=3)
        a = run_exploration(env, mc, 0.3, 0.1, max_iterations=20, rng_seed=9)
        b = run_exploration(env, mc, 0.3, 0.1, max_iterations=20, rng_seed=9)
        assert a.log == b.log and np.array_equal(a.bonus, b.bonus)

    def test_covariance_uses_current_features(self):
        env, mc = make_synthetic_env(2, 4, 3, 3, 2, 0, rng_seed=3)
        out = run_exploration(env, mc, 0.3, 0.1, max_iterations=12, rng_seed=2, bonus_scale=0.1)
        phi = out.model.factorization.phi
        n = out.n_iterations
        lam = out.params.lam(n)
        for h in range(env.H):
            naive = lam * np.eye(mc.d)
            for s in range(env.S):
                for a in range(env.K):
                    naive += out.cov_counts[h, s, a] * np.outer(phi[h, s, a], phi[h, s, a])
            assert np.max(np.abs(out.covariances[h] - naive)) <= 1e-10
        alpha = 0.1 * out.params.alpha_hat(n)
        direct = np.stack(
            [
                np.minimum(alpha * np.sqrt(np.einsum("sai,ij,saj->sa", phi[h], linalg.inv(out.covariances[h]), phi[h])), 1.0)
                for h in range(env.H)
            ]
        )
        assert np.max(np.abs(out.bonus - direct)) <= 1e-10

    def test_invalid_arguments(self):
        env, mc = make_synthetic_env(2, 3, 2, 2, rng_seed=0)
        with pytest.raises(StructuralError):
            run_exploration(env, mc, 1.5, 0.1)
        with pytest.raises(StructuralError):
            run_exploration(env, mc, 0.1, 0.1, max_iterations=0)


class TestPlanning:
    def test_zero_reward(self, rng):
        model = random_mdp(2, 3, 2, rng)
        pi = plan_for_reward(model, RewardFunction.zeros(2, 3, 2))
        assert np.all(pi.pi.sum(axis=-1) == 1)

    def test_hard_instance_true_model(self):
        params = HardInstanceParams(H=9, D=2, K=4, epsilon0=0.1, H_bar=2)
        inst = build_perturbed(params, 4, 2, 3)
        pi = plan_for_reward(inst.mdp, inst.reward)
        assert evaluate_policy(inst.mdp, pi, inst.reward)[0] == pytest.approx(0.6, abs=1e-12)

    def test_matches_exhaustive(self, rng):
        model = random_mdp(2, 2, 2, rng)
        reward = random_reward(2, 2, 2, rng)
        value = evaluate_policy(model, plan_for_reward(model, reward), reward)[0]
        best = max(evaluate_policy(model, deterministic_policy(a, 2), reward)[0] for a in all_deterministic_actions(2, 2, 2))
        assert value == pytest.approx(best, abs=1e-12)


class TestSystemIdentification:
    def test_identical(self, rng):
        P = random_mdp(3, 3, 2, rng)
        per_h, worst = system_identification_error(P, P, random_policy(3, 3, 2, rng))
        assert np.all(per_h == 0) and worst == 0.0

    def test_unreachable_difference(self):
        P = np.zeros((2, 2, 1, 2))
        P[:, 0, 0, 0] = 1.0
        P[:, 1, 0] = [0.5, 0.5]
        Q = P.copy()
        Q[:, 1, 0] = [0.9, 0.1]
        pi = uniform_policy(2, 2, 1)
        assert system_identification_error(EpisodicMDP(Q), EpisodicMDP(P), pi)[1] == 0.0

    def test_hand_propagated(self):
        # two states, one action; s0 -> (0.5, 0.5) at step 1; the estimate is wrong on s1 at step 2
        P = np.zeros((2, 2, 1, 2))
        P[0, :, 0] = [0.5, 0.5]
        P[1, :, 0] = [0.5, 0.5]
        Q = P.copy()
        Q[1, 1, 0] = [0.8, 0.2]
        per_h, worst = system_identification_error(EpisodicMDP(Q), EpisodicMDP(P), uniform_policy(2, 2, 1))
        assert per_h[0] == 0.0 and per_h[1] == pytest.approx(0.5 * 0.3, abs=1e-15)
        assert worst == per_h[1]


class TestEstimator:
    def test_params_and_fit(self):
        env, mc = make_synthetic_env(2, 3, 2, 2, rng_seed=0)
        est = Raffle(epsilon=0.5, bonus_scale=0.01, max_iterations=3000, random_state=0)
        assert est.get_params()["epsilon"] == 0.5
        est.fit(env, mc)
        assert est.terminated_
        reward = random_reward(2, 3, 2, np.random.default_rng(0))
        pi = est.plan(reward)
        assert evaluate_policy(env, pi, reward)[0] == pytest.approx(optimal_policy(env, reward)[1])
        assert est.system_identification_error(env, pi)[1] == 0.0

    def test_unfitted(self):
        from sklearn.exceptions import NotFittedError

        with pytest.raises(NotFittedError):
            Raffle().plan(None)


def test_two_candidate_class_recovers_truth():
    env, mc = make_synthetic_env(2, 3, 2, 2, 1, 0, rng_seed=6, min_tv=0.1)
    out = run_exploration(env, mc, 0.5, 0.1, max_iterations=4000, rng_seed=0, bonus_scale=0.01)
    assert out.terminated
    assert np.allclose(out.model.kernels, env.kernels)
    assert isinstance(mc, ModelClass)


def test_extended_budget_reaches_target():
    # the certified stopping rule needs roughly 1e4 iterations at eps = 0.15 on this fixture
    for seed in range(3):
        env, mc = make_synthetic_env(2, 4, 3, 3, 2, 3, rng_seed=seed)
        out = run_exploration(env, mc, 0.15, 0.1, max_iterations=20000, rng_seed=seed, bonus_scale=0.003)
        assert out.terminated
        rng = np.random.default_rng(seed)
        for _ in range(5):
            r = random_reward(3, 4, 3, rng)
            v_pi, _ = evaluate_policy(env, plan_for_reward(out.model, r), r)
            assert optimal_policy(env, r)[1] - v_pi <= 0.15
            assert system_identification_error(out.model, env, random_policy(3, 4, 3, rng))[1] <= 0.15
