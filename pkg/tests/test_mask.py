from fractions import Fraction

import numpy as np
import pytest

from pyrattn import (PRESET_CUTPOINTS, LevelThresholds, QuantileCutpoints,
                     SimThresholds, ValidationError, assign_quantile,
                     assign_threshold, binary_mask, build_pyramid,
                     causal_premask, combine_mask, level_cap_from_similarity,
                     make_layout, report_from_counts, sparsity_report)

from oracles import threshold_levels_row


class TestThresholdAssignment:
    def test_hand_trace(self):
        s = np.array([[0.5, 0.3, 0.15, 0.05]])
        t = LevelThresholds((0.6, 0.8, 0.95, 0.95))
        assert assign_threshold(s, t).tolist() == [[1, 2, 3, 0]]

    def test_all_ones_keeps_everything_fine(self, rng):
        s = rng.random((6, 12))
        t = LevelThresholds((1.0, 1.0, 1.0, 1.0))
        assert (assign_threshold(s, t) == 1).all()

    def test_first_threshold_one_dominates(self, rng):
        s = rng.random((4, 9))
        t = LevelThresholds((1.0, 1.0))
        assert (assign_threshold(s, t) == 1).all()

    def test_zero_row_becomes_uniform(self):
        m = assign_threshold(np.zeros((1, 4)), LevelThresholds((0.5, 1.0)))
        assert m.tolist() == [[1, 1, 2, 2]]

    def test_unsorted_row_assigned_through_permutation(self):
        s = np.array([[0.05, 0.5, 0.15, 0.3]])
        t = LevelThresholds((0.6, 0.8, 0.95, 0.95))
        assert assign_threshold(s, t).tolist() == [[0, 1, 3, 2]]

    def test_levels_nondecreasing_in_sorted_order(self, rng):
        s = rng.random((50, 16))
        t = LevelThresholds((0.4, 0.6, 0.85, 0.97))
        m = assign_threshold(s, t)
        order = np.argsort(-s, axis=1, kind="stable")
        sorted_levels = np.take_along_axis(m, order, axis=1)
        as_rank = np.where(sorted_levels == 0, 99, sorted_levels)
        assert (np.diff(as_rank, axis=1) >= 0).all()

    def test_matches_independent_rule_on_random_rows(self, rng):
        taus = (0.35, 0.6, 0.8, 0.92)
        s = rng.random((200, 12)) * rng.integers(0, 2, size=(200, 12))
        m = assign_threshold(s, LevelThresholds(taus))
        for i in range(s.shape[0]):
            expected, _ = threshold_levels_row(s[i].tolist(), taus)
            assert m[i].tolist() == expected, f"row {i}"

    def test_monotone_budget_in_thresholds(self, rng):
        s = rng.random((10, 16))
        lo = assign_threshold(s, LevelThresholds((0.3, 0.5, 0.7, 0.85)))
        hi = assign_threshold(s, LevelThresholds((0.4, 0.6, 0.8, 0.95)))
        assert (sparsity_report(hi, 4).rho_bar
                >= sparsity_report(lo, 4).rho_bar)

    def test_monotone_budget_in_single_threshold(self, rng):
        # Raising one tau (monotonicity preserved) never lowers the budget.
        s = rng.random((10, 16))
        base = (0.3, 0.5, 0.7, 0.85)
        for t in range(4):
            raised = list(base)
            raised[t] = min(raised[t] + 0.08,
                            base[t + 1] if t + 1 < 4 else 1.0)
            lo = assign_threshold(s, LevelThresholds(base))
            hi = assign_threshold(s, LevelThresholds(tuple(raised)))
            assert (sparsity_report(hi, 4).rho_bar
                    >= sparsity_report(lo, 4).rho_bar), t

    def test_invalid_thresholds_rejected(self):
        with pytest.raises(ValidationError):
            LevelThresholds((0.8, 0.6))
        with pytest.raises(ValidationError):
            LevelThresholds((0.2, 1.1))
        with pytest.raises(ValidationError):
            assign_threshold(np.array([[-0.1, 0.2]]), LevelThresholds((1.0,)))


class TestBinaryMask:
    def test_tau_one_keeps_all(self, rng):
        s = rng.random((3, 8))
        assert (binary_mask(s, 1.0) == 1).all()

    def test_tau_zero_drops_all_on_positive_scores(self, rng):
        s = rng.random((3, 8)) + 0.1
        assert (binary_mask(s, 0.0) == 0).all()

    def test_hand_trace(self):
        s = np.array([[0.5, 0.3, 0.15, 0.05]])
        assert binary_mask(s, 0.85).tolist() == [[1, 1, 0, 0]]

    def test_equals_uniform_threshold_assignment(self, rng):
        s = rng.random((20, 10))
        for tau in (0.3, 0.62, 0.9):
            direct = binary_mask(s, tau)
            via = assign_threshold(s, LevelThresholds((tau, tau, tau)))
            assert np.array_equal(direct, via)
            assert set(np.unique(direct)) <= {0, 1}


class TestQuantileAssignment:
    @pytest.mark.parametrize("name,counts,rho,cov", [
        ("psa-1", {1: 5, 0: 15}, 0.25, 0.25),
        ("psa-2", {3: 20}, 0.25, 1.00),
        ("psa-3", {1: 3, 2: 2, 3: 4, 0: 11}, 0.25, 0.45),
        ("psa-4", {1: 2, 2: 4, 3: 4, 0: 10}, 0.25, 0.50),
        ("psa-5", {1: 2, 2: 2, 3: 8, 0: 8}, 0.25, 0.60),
    ])
    def test_presets_on_twenty_blocks(self, rng, name, counts, rho, cov):
        s = rng.random((4, 20))
        m = assign_quantile(s, PRESET_CUTPOINTS[name])
        got = {h: int((m[0] == h).sum()) for h in np.unique(m[0])}
        assert got == counts
        rep = sparsity_report(m, levels=4)
        assert rep.rho_bar == rho
        assert rep.kv_coverage == cov

    def test_all_ones_cutpoints(self, rng):
        s = rng.random((2, 8))
        m = assign_quantile(s, QuantileCutpoints((1.0, 1.0, 1.0, 1.0)))
        assert (m == 1).all()

    def test_ranks_follow_importance(self):
        s = np.array([[0.1, 0.9, 0.5, 0.7, 0.3, 0.2, 0.05, 0.0]])
        m = assign_quantile(s, QuantileCutpoints((0.25, 0.5, 0.75, 0.75)))
        # ranks: block1 (0.9), block3 (0.7) -> level 1; block2, block4 -> 2;
        # block5, block0 -> 3; rest dropped
        assert m.tolist() == [[3, 1, 2, 1, 2, 3, 0, 0]]

    def test_invalid_cutpoints_rejected(self):
        with pytest.raises(ValidationError):
            QuantileCutpoints((0.5, 0.4))
        with pytest.raises(ValidationError):
            QuantileCutpoints((-0.1, 0.5))


class TestSimilarityCap:
    def layout(self):
        return make_layout(64, 8, 16, 16, 3)

    def test_constant_blocks_reach_top_level(self, rng):
        layout = self.layout()
        k = np.tile(rng.normal(size=8), (64, 1))
        pyr = build_pyramid(k, k, layout)
        caps = level_cap_from_similarity(pyr, SimThresholds((0.9, 0.9)))
        assert (caps == 3).all()

    def test_threshold_one_forces_level_one(self, rng):
        layout = self.layout()
        k = np.tile(rng.normal(size=8), (64, 1))
        pyr = build_pyramid(k, k, layout)
        caps = level_cap_from_similarity(pyr, SimThresholds((1.0, 1.0)))
        assert (caps == 1).all()

    def test_threshold_minus_one_disables_cap(self, rng):
        layout = self.layout()
        k = rng.normal(size=(64, 8))
        pyr = build_pyramid(k, k, layout)
        caps = level_cap_from_similarity(pyr, SimThresholds((-1.0, -1.0)))
        assert (caps == 3).all()

    def test_raw_keys_match_pyramid_input(self, rng):
        layout = self.layout()
        k = rng.normal(size=(64, 8))
        pyr = build_pyramid(k, k, layout)
        taus = SimThresholds((0.2, 0.1))
        assert np.array_equal(
            level_cap_from_similarity(pyr, taus),
            level_cap_from_similarity(k, taus, layout=layout),
        )

    def test_threshold_count_checked(self, rng):
        layout = self.layout()
        k = rng.normal(size=(64, 8))
        with pytest.raises(ValidationError):
            level_cap_from_similarity(k, SimThresholds((0.5,)), layout=layout)

    def test_block_heterogeneity_limits_level(self, rng):
        # First block constant (poolable), second block alternating sign at
        # stride 2 (kills level 2's stride-2 similarity).
        layout = make_layout(32, 4, 16, 16, 2)
        row = rng.normal(size=4)
        first = np.tile(row, (16, 1))
        second = np.tile(row, (16, 1))
        second[2::4] *= -1.0
        second[3::4] *= -1.0
        k = np.vstack([first, second])
        caps = level_cap_from_similarity(k, SimThresholds((0.5,)), layout=layout)
        assert caps.tolist() == [2, 1]


class TestCombineMask:
    def test_min_rule(self):
        m = np.array([[3, 0, 2, 1]])
        caps = np.array([2, 3, 1, 3])
        assert combine_mask(m, caps).tolist() == [[2, 0, 1, 1]]

    def test_zeros_stay_zero(self, rng):
        m = np.zeros((3, 4), dtype=int)
        caps = np.array([1, 2, 3, 1])
        assert (combine_mask(m, caps) == 0).all()

    def test_full_caps_are_noop(self, rng):
        m = rng.integers(0, 4, size=(5, 6))
        caps = np.full(6, 3)
        assert np.array_equal(combine_mask(m, caps), m)

    def test_idempotent(self, rng):
        m = rng.integers(0, 5, size=(4, 7))
        caps = rng.integers(1, 5, size=7)
        once = combine_mask(m, caps)
        assert np.array_equal(combine_mask(once, caps), once)

    def test_never_increases(self, rng):
        m = rng.integers(0, 5, size=(4, 7))
        caps = rng.integers(1, 5, size=7)
        assert (combine_mask(m, caps) <= m).all()

    def test_shape_mismatch_rejected(self):
        with pytest.raises(ValidationError):
            combine_mask(np.ones((2, 3), dtype=int), np.ones(4, dtype=int))


class TestSparsityReport:
    def test_all_level_one(self):
        rep = sparsity_report(np.ones((4, 8), dtype=int), levels=3)
        assert rep.rho_bar == 1.0
        assert rep.sparsity == 0.0
        assert rep.kv_coverage == 1.0

    def test_quarter_coverage_binary(self):
        m = np.zeros((4, 20), dtype=int)
        m[:, :5] = 1
        rep = sparsity_report(m, levels=1)
        assert rep.rho_bar == 0.25
        assert rep.kv_coverage == 0.25

    def test_mixed_levels_hand_value(self):
        # 15% L1 + 10% L2 + 20% L3 of 20 blocks -> exactly 1/4 budget
        m = np.zeros((1, 20), dtype=int)
        m[0, :3] = 1
        m[0, 3:5] = 2
        m[0, 5:9] = 3
        rep = sparsity_report(m, levels=3)
        assert rep.rho_bar == 0.25
        assert rep.kv_coverage == 0.45

    def test_identities_exact_from_counts(self, rng):
        for _ in range(25):
            m = rng.integers(0, 5, size=(rng.integers(1, 9), rng.integers(1, 33)))
            rep = sparsity_report(m, levels=4)
            total = rep.total
            counts = rep.level_counts
            rho = sum(Fraction(c, total) / (1 << (h - 1))
                      for h, c in enumerate(counts) if h >= 1)
            assert rep.rho_bar == float(rho)
            assert rep.sparsity == float(1 - rho)
            assert rep.kv_coverage == float(Fraction(total - counts[0], total))
            assert rep.level_histogram == tuple(
                float(Fraction(c, total)) for c in counts
            )
            assert sum(counts) == total

    def test_report_from_counts_validates(self):
        with pytest.raises(ValidationError):
            report_from_counts((1, 2), 5)

    def test_mask_exceeding_levels_rejected(self):
        with pytest.raises(ValidationError):
            sparsity_report(np.full((2, 2), 5), levels=4)


class TestCausalPremask:
    def test_square_blocks(self):
        layout = make_layout(64, 8, 16, 16, 2)
        m = causal_premask(np.full((4, 4), 2), layout)
        assert (m[np.triu_indices(4, 1)] == 0).all()
        assert all(m[i, i] == 1 for i in range(4))
        assert (m[np.tril_indices(4, -1)] == 2).all()

    def test_rectangular_blocks(self):
        layout = make_layout(64, 8, 32, 16, 2)  # 2 query blocks, 4 kv blocks
        m = causal_premask(np.full((2, 4), 2), layout)
        # query block 0 covers tokens 0..31: kv blocks 0,1 straddle, 2,3 future
        assert m[0].tolist() == [1, 1, 0, 0]
        # query block 1 covers 32..63: kv 0,1 fully visible, 2,3 straddle
        assert m[1].tolist() == [2, 2, 1, 1]

    def test_dropped_visible_blocks_stay_dropped(self):
        layout = make_layout(64, 8, 16, 16, 2)
        m = np.zeros((4, 4), dtype=int)
        out = causal_premask(m, layout)
        assert (out[np.tril_indices(4, -1)] == 0).all()
        assert all(out[i, i] == 1 for i in range(4))
