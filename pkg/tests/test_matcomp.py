import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from matbandit import env, matcomp
from matbandit.streams import substream


class TestSampleMask:
    def test_full_sampling(self):
        mask = matcomp.sample_mask(range(3), range(4), 1.0, substream(0, "m"))
        assert mask.num_entries == 12
        assert mask.row_max_count == 4
        assert mask.entries() == {(u, i) for u in range(3) for i in range(4)}

    def test_binomial_moment(self):
        sizes = []
        rng = substream(1, "m")
        for _ in range(200):
            mask = matcomp.sample_mask(range(100), range(150), 0.5, rng)
            sizes.append(mask.num_entries)
        tol = 3 * np.sqrt(100 * 150 * 0.25)
        assert abs(np.mean(sizes) - 7500) < tol

    def test_near_zero_probability(self):
        mask = matcomp.sample_mask(range(2), range(2), 1e-9, substream(2, "m"))
        assert mask.num_entries == 0
        assert mask.row_max_count == 0

    def test_probability_bounds(self):
        rng = substream(3, "m")
        for bad in (0.0, -0.1, 1.5):
            with pytest.raises(ValueError):
                matcomp.sample_mask(range(2), range(2), bad, rng)

    def test_row_max_matches_recount(self):
        rng = substream(4, "m")
        mask = matcomp.sample_mask(range(20), range(30), 0.3, rng)
        assert mask.row_max_count == mask.selected.sum(axis=1).max()


class TestCollectRounds:
    def test_noiseless_full_mask_averages_exactly(self):
        model = env.build_rank_r_env(
            [[1.0, 0.0], [0.0, 1.0]], [[1.0, 3.0], [2.0, 4.0]], noise_kind="none"
        )
        # expected_rewards == [[1, 2], [3, 4]]
        assert np.array_equal(model.expected_rewards, [[1.0, 2.0], [3.0, 4.0]])
        mask = matcomp.full_mask(range(2), range(2))
        acc, log = matcomp.collect_rounds(model, mask, 4, 2, substream(0, "c"))
        z, observed = acc.dense_averaged()
        assert observed.all()
        assert np.array_equal(z, model.expected_rewards)
        assert np.array_equal(acc.counts, np.full((2, 2), 2))
        assert log.shape == (4, 2)

    def test_filler_path_logged_but_not_accumulated(self):
        model = env.build_rank1_gap_env(2, 3, gap=1.0, seed=0, noise_kind="none")
        selected = np.zeros((2, 3), dtype=bool)
        selected[0, 1] = True
        mask = matcomp.ObservationMask(np.arange(2), np.arange(3), selected, 0.5)
        acc, log = matcomp.collect_rounds(model, mask, 1, 1, substream(1, "c"))
        assert log.shape == (1, 2)
        assert acc.counts[0, 1] == 1
        assert acc.counts[1].sum() == 0  # user 2 got a filler only
        assert (0, 1) in acc.averaged and len(acc.averaged) == 1

    def test_pass_covers_each_masked_item_once(self):
        model = env.build_rank1_gap_env(3, 5, gap=1.0, seed=1, noise_kind="none")
        rng = substream(2, "c")
        mask = matcomp.sample_mask(range(3), range(5), 0.8, rng)
        b = mask.row_max_count
        acc, log = matcomp.collect_rounds(model, mask, 3 * b, b, rng)
        assert np.array_equal(acc.counts > 0, mask.selected)
        masked_counts = acc.counts[mask.selected]
        assert (masked_counts == 3).all()

    def test_variance_of_mean(self):
        model = env.build_rank_r_env(
            [[1.0], [1.0]], [[0.2], [0.4]], noise_variance_proxy=0.1
        )
        s = 4
        rng = substream(3, "c")
        cells = []
        for _ in range(500):
            mask = matcomp.full_mask(range(2), range(2))
            acc, _ = matcomp.collect_rounds(model, mask, 2 * s, 2, rng)
            z, _ = acc.dense_averaged()
            cells.append(z[0, 0])
        var = np.var(cells)
        assert abs(var - 0.1 / s) < 0.25 * 0.1 / s

    def test_rejects_short_pass(self):
        model = env.build_rank1_gap_env(2, 4, gap=1.0, seed=0)
        mask = matcomp.full_mask(range(2), range(4))
        with pytest.raises(ValueError):
            matcomp.collect_rounds(model, mask, 4, 2, substream(0, "c"))


class TestPartition:
    def test_desk_scale_splits_items_in_two(self):
        part = matcomp.partition_near_square(range(100), range(150), substream(0, "p"))
        assert part.num_blocks == 2
        assert part.axis == "items"
        assert sum(b.size for b in part.blocks()) == 150

    def test_square_is_single_block(self):
        part = matcomp.partition_near_square(range(5), range(5), substream(1, "p"))
        assert part.num_blocks == 1
        assert part.blocks()[0].size == 5

    def test_tall_matrix_splits_users(self):
        part = matcomp.partition_near_square(range(300), range(100), substream(2, "p"))
        assert part.num_blocks == 3
        assert part.axis == "users"
        assert sum(b.size for b in part.blocks()) == 300


class TestSvt:
    def test_diagonal_shrinkage(self):
        out = matcomp.svt(np.diag([3.0, 1.0]), 2.0)
        assert np.allclose(out, np.diag([1.0, 0.0]), atol=1e-12)

    def test_zero_threshold_is_identity(self):
        rng = substream(0, "svt")
        a = rng.normal(size=(4, 6))
        assert np.abs(matcomp.svt(a, 0.0) - a).max() <= 1e-10

    def test_nuclear_norm_after_shrinkage(self):
        rng = substream(1, "svt")
        a = rng.normal(size=(4, 6))
        out = matcomp.svt(a, 0.5)
        sing_in = np.linalg.svd(a, compute_uv=False)
        expected = np.maximum(sing_in - 0.5, 0.0).sum()
        got = np.linalg.svd(out, compute_uv=False).sum()
        assert abs(got - expected) <= 1e-8

    def test_rank_never_increases(self):
        rng = substream(2, "svt")
        a = rng.normal(size=(5, 5))
        out = matcomp.svt(a, 0.3)
        tol = 1e-10
        assert (np.linalg.svd(out, compute_uv=False) > tol).sum() <= (
            np.linalg.svd(a, compute_uv=False) > tol
        ).sum()

    def test_rejects_bad_input(self):
        with pytest.raises(ValueError):
            matcomp.svt(np.asarray([[np.inf, 0.0]]), 0.1)
        with pytest.raises(ValueError):
            matcomp.svt(np.eye(2), -1.0)


@settings(max_examples=30, deadline=None)
@given(
    a=arrays(
        np.float64,
        (5, 5),
        elements=st.floats(min_value=-3.0, max_value=3.0, allow_nan=False),
    ),
    tau=st.floats(min_value=1e-3, max_value=2.0),
)
def test_svt_satisfies_prox_optimality(a, tau):
    # x = svt(a, tau) minimizes 1/2 ||x - a||_F^2 + tau ||x||_*, i.e.
    # (a - x) / tau must be a nuclear-norm subgradient at x.
    x = matcomp.svt(a, tau)
    g = (a - x) / tau
    assert np.linalg.svd(g, compute_uv=False)[0] <= 1.0 + 1e-6
    u, s, vt = np.linalg.svd(x, full_matrices=False)
    support = s > 1e-9
    if support.any():
        u1, v1t = u[:, support], vt[support]
        # On the support of x the subgradient is exactly u1 v1t.
        proj = u1 @ u1.T @ g @ v1t.T @ v1t
        assert np.abs(proj - u1 @ v1t).max() <= 1e-6


class TestSolveBlock:
    def test_fully_observed_reduces_to_one_svt_step(self):
        q, diag = matcomp.solve_block(np.diag([3.0, 1.0]), None, matcomp.CompletionConfig(1.0))
        assert np.allclose(q, np.diag([2.0, 0.0]), atol=1e-9)
        assert diag.converged

    def test_unregularized_interpolation(self):
        z = np.outer([1.0, 2.0], [0.5, 1.0, 1.5])
        q, diag = matcomp.solve_block(z, None, matcomp.CompletionConfig(0.0))
        assert np.abs(q - z).max() <= 1e-6
        assert diag.converged

    def test_masked_rank1_recovery_against_tighter_reference(self):
        model = env.build_rank1_gap_env(20, 20, gap=2.0, seed=4, noise_kind="none")
        p_true = model.expected_rewards
        rng = substream(5, "sb")
        mask = (rng.random((20, 20)) < 0.6) | np.eye(20, dtype=bool)
        z = np.where(mask, p_true, 0.0)
        q, diag = matcomp.solve_block(z, mask, matcomp.CompletionConfig(0.1))
        assert np.abs(q - p_true).max() <= 0.05
        assert (np.diff(diag.objective_trace) <= 1e-9).all()
        ref_cfg = matcomp.CompletionConfig(0.1, rel_tolerance=1e-8, max_iterations=50_000)
        q_ref, _ = matcomp.solve_block(z, mask, ref_cfg)
        assert np.abs(q - q_ref).max() <= 5e-3

    def test_empty_block_returns_zero_converged(self):
        q, diag = matcomp.solve_block(
            np.zeros((3, 4)), np.zeros((3, 4), dtype=bool), matcomp.CompletionConfig(0.5)
        )
        assert np.array_equal(q, np.zeros((3, 4)))
        assert diag.converged and diag.iterations == 0

    def test_objective_monotone_on_noisy_problem(self):
        rng = substream(6, "sb")
        z = rng.normal(size=(15, 15))
        mask = rng.random((15, 15)) < 0.5
        _, diag = matcomp.solve_block(z, mask, matcomp.CompletionConfig(0.7))
        assert (np.diff(diag.objective_trace) <= 1e-9).all()

    def test_step_size_validation(self):
        with pytest.raises(ValueError):
            matcomp.CompletionConfig(1.0, step_size=2.0)
        with pytest.raises(ValueError):
            matcomp.CompletionConfig(-1.0)


class TestEstimate:
    def test_full_observation_near_zero_regularizer(self):
        model = env.build_rank1_gap_env(10, 10, gap=1.0, seed=6, noise_kind="none")
        est, log, rounds = matcomp.estimate(
            model, range(10), range(10), 1.0, 1, 1e-6, substream(7, "e")
        )
        assert rounds == 10
        assert log.shape == (10, 10)
        assert np.abs(est.estimate - model.expected_rewards).max() <= 1e-3

    def test_round_accounting(self):
        model = env.build_rank1_gap_env(6, 9, gap=1.0, seed=8, noise_kind="none")
        rng = substream(9, "e")
        est, log, rounds = matcomp.estimate(model, range(6), range(9), 0.7, 3, 0.01, rng)
        assert log.shape[0] == rounds
        assert log.size == 6 * rounds  # one recommendation per user per round

    def test_zero_padding_outside_active_sets(self):
        model = env.build_rank1_gap_env(8, 10, gap=1.0, seed=10, noise_kind="none")
        users = [1, 3, 5]
        items = [0, 2, 4, 6]
        est, _, _ = matcomp.estimate(model, users, items, 1.0, 1, 1e-6, substream(11, "e"))
        outside = np.ones((8, 10), dtype=bool)
        outside[np.ix_(users, items)] = False
        assert (est.estimate[outside] == 0.0).all()

    def test_degenerate_mask_flagged(self):
        model = env.build_rank1_gap_env(2, 2, gap=1.0, seed=12)
        est, log, rounds = matcomp.estimate(
            model, range(2), range(2), 1e-12, 1, 0.1, substream(13, "e")
        )
        assert est.degenerate
        assert rounds == 0 and log.shape == (0, 2)

    def test_repetitions_shrink_error(self):
        sigma = np.sqrt(0.1)
        errs = {1: [], 4: []}
        for trial in range(10):
            model = env.build_rank1_gap_env(
                30, 30, gap=1.0, noise_variance_proxy=0.1, seed=100 + trial
            )
            for s in (1, 4):
                lam = matcomp.default_regularizer(sigma / np.sqrt(s), 30, 0.5)
                est, _, _ = matcomp.estimate(
                    model, range(30), range(30), 0.5, s, lam, substream(trial, "rep", s)
                )
                errs[s].append(np.abs(est.estimate - model.expected_rewards).max())
        assert np.median(errs[4]) < np.median(errs[1])

    def test_rectangular_error_close_to_square(self):
        # Splitting the wide matrix into near-square blocks keeps per-entry
        # error within a factor 2 of the square sub-problem at the same p, s.
        sigma = np.sqrt(0.1)
        p = 0.6
        lam = matcomp.default_regularizer(sigma, 40, p)
        err_rect, err_square = [], []
        for trial in range(10):
            model = env.build_rank1_gap_env(
                40, 120, gap=1.0, noise_variance_proxy=0.1, seed=200 + trial
            )
            est, _, _ = matcomp.estimate(
                model, range(40), range(120), p, 1, lam, substream(trial, "rect")
            )
            err_rect.append(np.abs(est.estimate - model.expected_rewards).max())

            sq = env.build_rank_r_env(
                model.user_factors,
                model.item_factors[:40],
                noise_variance_proxy=0.1,
            )
            est_sq, _, _ = matcomp.estimate(
                sq, range(40), range(40), p, 1, lam, substream(trial, "sq")
            )
            err_square.append(np.abs(est_sq.estimate - sq.expected_rewards).max())
        assert np.median(err_rect) <= 2.0 * np.median(err_square)


class TestMedian:
    def _wrap(self, matrix):
        return matcomp.CompletionEstimate(matrix, np.arange(matrix.shape[0]), np.arange(matrix.shape[1]))

    def test_identical_inputs(self):
        a = np.arange(6, dtype=float).reshape(2, 3)
        merged = matcomp.median_of_estimates([self._wrap(a)] * 3)
        assert np.array_equal(merged.estimate, a)

    def test_outlier_rejection(self):
        mats = [np.full((1, 1), v) for v in (1.0, 5.0, 100.0)]
        merged = matcomp.median_of_estimates([self._wrap(m) for m in mats])
        assert merged.estimate[0, 0] == 5.0

    def test_even_count_rejected(self):
        a = self._wrap(np.zeros((2, 2)))
        with pytest.raises(ValueError):
            matcomp.median_of_estimates([a, a])

    def test_shape_mismatch_rejected(self):
        with pytest.raises(ValueError):
            matcomp.median_of_estimates(
                [self._wrap(np.zeros((2, 2))), self._wrap(np.zeros((2, 3))), self._wrap(np.zeros((2, 2)))]
            )

    def test_median_boosts_success_probability(self):
        # Each pass errs beyond eta with probability 0.3; the 5-way median's
        # per-cell failure rate must come out below the single-pass rate.
        eta = 0.1
        rng = substream(21, "boost")
        single_fail, median_fail = [], []
        for _ in range(200):
            truth = rng.normal(size=(6, 6))
            passes = []
            for _ in range(5):
                est = truth + rng.uniform(-eta / 3, eta / 3, size=truth.shape)
                if rng.random() < 0.3:
                    est = est + 10 * eta
                passes.append(self._wrap(est))
            merged = matcomp.median_of_estimates(passes)
            single_fail.append((np.abs(passes[0].estimate - truth) > eta).mean())
            median_fail.append((np.abs(merged.estimate - truth) > eta).mean())
        assert np.mean(median_fail) < np.mean(single_fail)


class TestParameterRules:
    def test_boundary_gives_single_repetition(self):
        sigma, mu, d2 = 0.5, 1.0, 100
        eta = sigma * np.sqrt(mu) / np.log(d2)
        _, s = matcomp.theory_params(eta, sigma, 1, mu, d2)
        assert s == 1

    def test_halving_accuracy_quadruples_repetitions(self):
        sigma, mu, d2 = 0.5, 1.0, 100
        eta = sigma * np.sqrt(mu) / np.log(d2)
        _, s_half = matcomp.theory_params(eta / 2, sigma, 1, mu, d2)
        assert s_half == 4

    def test_direct_probability_formula(self):
        p, _ = matcomp.theory_params(0.1, 0.3, 1, 1.0, 100)
        assert p == pytest.approx(np.log(100) ** 3 / 100)
        assert 0 < p <= 1

    def test_probability_clamped(self):
        p, _ = matcomp.theory_params(0.1, 0.3, 1, 4.0, 10)
        assert p == 1.0

    def test_large_target_flagged(self):
        with pytest.warns(UserWarning):
            matcomp.theory_params(2.0, 0.3, 1, 1.0, 100, max_abs_reward=0.5)

    def test_repetitions_for_is_odd(self):
        f = matcomp.repetitions_for(100, 150, 0.1)
        assert f % 2 == 1
        assert f >= np.log(100 * 150 / 0.1) - 1
