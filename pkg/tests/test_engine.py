import itertools
import math

import numpy as np
import pytest
from scipy import stats

from seqrerand.budget import BudgetPlan, allocate, complete_threshold
from seqrerand.engine import (
    OutcomeModel,
    SequentialState,
    _draw_masks,
    pairwise_walk,
    random_balanced_assignment,
    recompute_M_sequence,
    run_complete,
    run_pairwise_qin,
    run_sequential,
    simulate_outcomes,
    tau_hat,
    treated_count,
    variance_reduction,
)
from seqrerand.errors import DomainError, ShapeMismatch
from seqrerand.linalg import (
    CovariateDataset,
    Mode,
    mahalanobis_homogeneous,
    sample_covariance,
    standardized_diff,
)


def normal_dataset(seed, p, sizes, mode=Mode.HOMOGENEOUS):
    X = np.random.default_rng(seed).standard_normal((p, 2 * sum(sizes)))
    return CovariateDataset(X, tuple(sizes), 0.5, mode)


def pattern_counts(rows):
    index = {c: i for i, c in enumerate(itertools.combinations(range(6), 3))}
    counts = np.zeros(len(index))
    for row in rows:
        counts[index[tuple(np.flatnonzero(row))]] += 1
    return counts


class TestBalancedAssignment:
    def test_two_units(self):
        rng = np.random.default_rng(0)
        first = sum(int(random_balanced_assignment(2, 0.5, rng)[0]) for _ in range(10**5))
        assert abs(first - 5 * 10**4) < 3 * math.sqrt(10**5 / 4)

    def test_six_units_uniform(self):
        rng = np.random.default_rng(1)
        rows = [random_balanced_assignment(6, 0.5, rng) for _ in range(10**5)]
        assert stats.chisquare(pattern_counts(rows)).pvalue > 1e-3

    def test_batched_masks_uniform(self):
        masks = _draw_masks(np.random.default_rng(2), 10**5, 6, 3)
        assert np.all(masks.sum(axis=1) == 3)
        assert stats.chisquare(pattern_counts(masks)).pvalue > 1e-3

    def test_unequal_split(self):
        W = random_balanced_assignment(8, 0.25, np.random.default_rng(3))
        assert W.sum() == 2 and W.size == 8

    def test_non_integral_split(self):
        with pytest.raises(DomainError):
            treated_count(6, 0.25)


class TestSequential:
    def test_outcome_invariants(self):
        ds = normal_dataset(4, 3, (20, 20, 30))
        plan = allocate(300, 3, ds.group_sizes)
        out = run_sequential(ds, plan, np.random.default_rng(5))
        assert out.assignments.size == ds.n_units
        for k in range(ds.K):
            a, b = ds.bounds[k]
            assert out.assignments[a:b].sum() == ds.group_sizes[k]
            assert 1 <= out.attempts[k] <= plan.cap(k)
            if not out.fallback_flags[k]:
                assert out.M_sequence[k] < out.thresholds[k]
        assert out.final_M == pytest.approx(mahalanobis_homogeneous(ds.data, out.assignments), rel=1e-10)

    @pytest.mark.parametrize("mode", [Mode.HOMOGENEOUS, Mode.HETEROGENEOUS])
    def test_sequence_recomputes(self, mode):
        ds = normal_dataset(6, 4, (15, 15, 15), mode)
        out = run_sequential(ds, allocate(500, 4, ds.group_sizes), np.random.default_rng(7))
        np.testing.assert_allclose(recompute_M_sequence(ds, out.assignments), out.M_sequence, rtol=1e-10)

    def test_accumulator_recomputes(self):
        ds = normal_dataset(8, 3, (12, 12), Mode.HETEROGENEOUS)
        state = SequentialState(3, 0.5, Mode.HETEROGENEOUS)
        rng = np.random.default_rng(9)
        total = np.zeros(3)
        for k, s in enumerate((20, 80)):
            state.step(ds.group(k), s, rng)
            total = total + math.sqrt(12) * standardized_diff(ds.group(k), state.assignments[k]).z
            np.testing.assert_allclose(state.z_accumulator, total, rtol=1e-10, atol=1e-12)

    def test_complement_has_equal_distance(self):
        ds = normal_dataset(10, 3, (10, 10))
        out = run_sequential(ds, allocate(100, 3, ds.group_sizes), np.random.default_rng(11))
        flipped = recompute_M_sequence(ds, 1 - out.assignments)
        np.testing.assert_allclose(flipped, out.M_sequence, rtol=1e-12)

    def test_modes_agree_with_shared_covariance(self):
        ds = normal_dataset(12, 3, (20, 20, 20))
        cov = sample_covariance(ds.data)
        plan = allocate(400, 3, ds.group_sizes)
        finals = []
        for mode in (Mode.HOMOGENEOUS, Mode.HETEROGENEOUS):
            state = SequentialState(3, 0.5, mode)
            rng = np.random.default_rng(13)
            for k in range(3):
                state.step(ds.group(k), plan.per_group[k], rng, cov=cov)
            finals.append(state.outcome())
        np.testing.assert_array_equal(finals[0].assignments, finals[1].assignments)
        assert finals[1].final_M == pytest.approx(finals[0].final_M, rel=1e-8)

    def test_single_draw_budget_is_complete_randomization(self):
        ds = normal_dataset(14, 2, (50, 50))
        plan = BudgetPlan.explicit((1, 1))
        rng = np.random.default_rng(15)
        M = []
        for _ in range(10**4):
            out = run_sequential(ds, plan, rng)
            assert out.attempts == (1, 1)
            M.append(out.final_M)
        assert stats.kstest(M, stats.chi2(2).cdf).statistic < 0.02

    def test_same_seed_same_outcome(self):
        ds = normal_dataset(16, 2, (10, 10))
        plan = allocate(100, 2, ds.group_sizes)
        a = run_sequential(ds, plan, np.random.default_rng(17))
        b = run_sequential(ds, plan, np.random.default_rng(17))
        np.testing.assert_array_equal(a.assignments, b.assignments)
        assert a.M_sequence == b.M_sequence and a.attempts == b.attempts

    def test_plan_mismatch(self):
        with pytest.raises(ShapeMismatch):
            run_sequential(normal_dataset(0, 2, (5, 5)), BudgetPlan.explicit((10,)), np.random.default_rng(0))

    def test_fallback_keeps_minimum(self):
        # tiny groups cannot reach the quantile of a huge budget
        ds = normal_dataset(18, 2, (2,))
        out = run_sequential(ds, BudgetPlan.explicit((10**6,), 1), np.random.default_rng(19))
        best = min(
            mahalanobis_homogeneous(ds.data, np.isin(np.arange(4), c).astype(int))
            for c in itertools.combinations(range(4), 2)
        )
        assert out.fallback_flags == (True,)
        assert out.final_M == pytest.approx(best, rel=1e-12)


class TestComplete:
    def test_matches_single_group_sequential(self):
        ds = normal_dataset(20, 3, (10, 15))
        a = run_complete(ds, 200, np.random.default_rng(21))
        whole = ds.regroup((25,))
        b = run_sequential(whole, BudgetPlan.explicit((200,)), np.random.default_rng(21))
        np.testing.assert_array_equal(a.assignments, b.assignments)
        assert a.final_M == b.final_M
        assert a.thresholds[0] == pytest.approx(complete_threshold(3, 200))

    def test_unit_budget_mean_is_p(self):
        ds = normal_dataset(22, 3, (20,))
        rng = np.random.default_rng(23)
        M = np.array([run_complete(ds, 1, rng).final_M for _ in range(10**4)])
        # averaging over all balanced assignments gives exactly p
        assert abs(M.mean() - 3) < 4 * M.std() / math.sqrt(M.size)


class TestPairwise:
    def pairs(self, seed=30, p=3, N=40):
        return normal_dataset(seed, p, (1,) * N)

    def test_deterministic_at_one(self):
        ds = self.pairs()
        a = run_pairwise_qin(ds, 1.0, None, np.random.default_rng(1))
        b = run_pairwise_qin(ds, 1.0, None, np.random.default_rng(2))
        np.testing.assert_array_equal(a.assignments, b.assignments)

    def test_final_distance(self):
        ds = self.pairs()
        out = run_pairwise_qin(ds, 0.8, None, np.random.default_rng(3))
        assert out.final_M == pytest.approx(mahalanobis_homogeneous(ds.data, out.assignments), rel=1e-10)
        for k in range(ds.K):
            assert out.assignments[2 * k] + out.assignments[2 * k + 1] == 1

    def test_greedy_choice(self):
        ds = self.pairs(p=2, N=6)
        cov = sample_covariance(ds.data)
        out = run_pairwise_qin(ds, 1.0, cov, np.random.default_rng(0))
        W = out.assignments
        for k in range(1, ds.K + 1):
            stop = 2 * k
            alt = W.copy()
            alt[stop - 2:stop] = 1 - alt[stop - 2:stop]
            def dist(V):
                D = ds.data[:, :stop] @ (2 * V[:stop] - 1.0)
                return cov.quad_form(D)
            assert dist(W) <= dist(alt) + 1e-12

    def test_fair_coin_is_complete_randomization(self):
        ds = self.pairs(p=3, N=40)
        Y = sample_covariance(ds.data).whiten(ds.data)
        rng = np.random.default_rng(4)
        R = 20000
        orders = np.tile(np.arange(80), (R, 1))
        W = pairwise_walk(Y, orders, rng.random((R, 40)), 0.5 + 1e-6).astype(float)
        M = np.sum((Y @ (2 * W.T - 1)) ** 2, axis=0) / 80
        # independent pair signs: E(M) is the mean squared within-pair difference
        exact = np.sum((Y[:, 0::2] - Y[:, 1::2]) ** 2) / 80
        assert abs(M.mean() - exact) < 4 * M.std() / math.sqrt(R)

    def test_domain(self):
        with pytest.raises(DomainError):
            run_pairwise_qin(normal_dataset(0, 2, (2, 2)), 0.9, None, np.random.default_rng(0))
        for q in (0.5, 1.2):
            with pytest.raises(DomainError):
                run_pairwise_qin(self.pairs(), q, None, np.random.default_rng(0))


class TestEstimation:
    def test_tau_hat_examples(self):
        W = np.array([1, 0, 1, 0, 0, 1])
        assert tau_hat(np.full(6, 3.2), W) == 0.0
        assert tau_hat(W.astype(float), W) == 1.0
        Y = np.random.default_rng(0).standard_normal(6)
        assert tau_hat(Y, W) == pytest.approx(Y[W == 1].mean() - Y[W == 0].mean(), abs=1e-12)

    def test_tau_hat_shapes(self):
        with pytest.raises(ShapeMismatch):
            tau_hat(np.ones(4), np.array([1, 0, 1]))
        with pytest.raises(DomainError):
            tau_hat(np.ones(4), np.array([1, 1, 1, 0]))

    def test_constant_model(self):
        X = np.random.default_rng(1).standard_normal((2, 6))
        model = OutcomeModel(2.5, np.zeros(2), 0.0, np.zeros(6))
        np.testing.assert_array_equal(simulate_outcomes(model, X, np.array([1, 0, 1, 0, 1, 0])), 2.5)

    def test_additive_effect(self):
        rng = np.random.default_rng(2)
        X = rng.standard_normal((3, 10))
        model = OutcomeModel.synthetic(X, [1.0, -0.5, 2.0], 1.7, 0.6, rng)
        y1 = simulate_outcomes(model, X, np.ones(10))
        y0 = simulate_outcomes(model, X, np.zeros(10))
        np.testing.assert_allclose(y1 - y0, 1.7)

    def test_residuals_orthogonal(self):
        rng = np.random.default_rng(3)
        X = rng.standard_normal((4, 50))
        y0 = X[0] * 2 + rng.standard_normal(50) ** 3
        model = OutcomeModel.from_control_outcomes(X, y0, 0.0)
        design = np.column_stack([np.ones(50), X.T])
        np.testing.assert_allclose(design.T @ model.noise, 0.0, atol=1e-8)
        np.testing.assert_allclose(model.control(X), y0, atol=1e-10)

    def test_synthetic_r2(self):
        rng = np.random.default_rng(4)
        X = rng.standard_normal((5, 1000))
        model = OutcomeModel.synthetic(X, rng.standard_normal(5), 0.0, 0.45, rng)
        y = model.control(X)
        design = np.column_stack([np.ones(1000), X.T])
        fit = design @ np.linalg.lstsq(design, y, rcond=None)[0]
        r2 = 1 - np.sum((y - fit) ** 2) / np.sum((y - y.mean()) ** 2)
        assert r2 == pytest.approx(0.45, abs=0.02)
        assert model.r2(X) == pytest.approx(0.45, abs=1e-10)

    def test_model_shape(self):
        model = OutcomeModel(0.0, np.zeros(2), 0.0, np.zeros(4))
        with pytest.raises(ShapeMismatch):
            simulate_outcomes(model, np.zeros((3, 4)), np.zeros(4))

    def test_variance_reduction(self):
        assert variance_reduction(1.0, 0.7) == 0.0
        assert variance_reduction(0.5, 0.8) == pytest.approx(0.4)
