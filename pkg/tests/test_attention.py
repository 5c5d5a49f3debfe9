import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from oracles import masked_dense_attention
from swakv.attention import (
    AttentionState,
    LocalAttentionSum,
    SparsityConfig,
    attend,
    attention_sparsity,
    dense_attention,
    local_attention_mask,
    score_distribution_correlation,
    select_for_step,
    select_positions,
    selection_counts,
    sparse_k,
    strided_attention_mask,
    swa_attention,
    swa_select,
)
from swakv.mathops import ContractViolation


def filled_state(rng, heads=2, d=4, n=10):
    state = AttentionState(heads, d, capacity=4)
    state.append(rng.standard_normal((heads, n, d)), rng.standard_normal((heads, n, d)))
    return state


class TestDenseAttention:
    def test_single_key_returns_its_value(self):
        attn, aw = dense_attention([[0.3, -0.2]], [[1.0, 2.0]], [[4.0, 5.0]])
        np.testing.assert_array_equal(aw, [[1.0]])
        np.testing.assert_allclose(attn, [[4.0, 5.0]])

    def test_causal_square_is_lower_triangular(self, rng):
        q = rng.standard_normal((5, 4))
        _, aw = dense_attention(q, q, q, mask_causal=True)
        assert np.all(np.triu(aw, 1) == 0.0)
        np.testing.assert_allclose(aw.sum(axis=1), 1.0)

    def test_causal_single_query_sees_all_keys(self, rng):
        q, k = rng.standard_normal((1, 4)), rng.standard_normal((6, 4))
        _, aw = dense_attention(q, k, k, mask_causal=True)
        assert np.all(aw > 0)

    def test_matches_numpy_formula(self, rng):
        q, k, v = rng.standard_normal((3, 4)), rng.standard_normal((5, 4)), rng.standard_normal((5, 4))
        logits = q @ k.T / 2.0
        w = np.exp(logits - logits.max(axis=1, keepdims=True))
        w /= w.sum(axis=1, keepdims=True)
        attn, aw = dense_attention(q, k, v)
        np.testing.assert_allclose(aw, w, atol=1e-14)
        np.testing.assert_allclose(attn, w @ v, atol=1e-14)

    def test_shape_errors(self):
        with pytest.raises(ContractViolation):
            dense_attention(np.ones((1, 3)), np.ones((2, 4)), np.ones((2, 4)))
        with pytest.raises(ContractViolation):
            dense_attention(np.ones((3, 2)), np.ones((2, 2)), np.ones((2, 2)), mask_causal=True)


class TestSwaSelect:
    def test_worked_example(self):
        # n=10, r=0.4 -> k=2: local {8, 9}; global = top-2 of scores over 0..7
        scores = [0.1, 0.9, 0.0, 0.5, 0.2, 0.8, 0.3, 0.05, 10.0]
        sel = swa_select(scores, 10, 0.4)
        assert sel.k == 2
        assert sel.local_indices == (8, 9)
        assert sel.global_indices == (1, 5)
        assert sel.indices == [1, 5, 8, 9]

    def test_local_window_excluded_from_global_candidates(self):
        scores = [0.0] * 7 + [100.0, 100.0]
        sel = swa_select(scores, 10, 0.4)
        assert set(sel.global_indices).isdisjoint(sel.local_indices)

    def test_short_sequence_keeps_everything(self):
        sel = swa_select([0.3, 0.1, 0.2], 4, 0.8)
        assert sel.indices == [0, 1, 2, 3]

    @pytest.mark.parametrize("n", [2, 3, 7, 9, 33])
    def test_ratio_one_keeps_all(self, n):
        assert swa_select(np.zeros(n - 1), n, 1.0).indices == list(range(n))

    def test_single_token(self):
        assert swa_select([], 1, 0.5).indices == [0]

    def test_bad_inputs(self):
        with pytest.raises(ContractViolation):
            swa_select([0.0, 0.0], 4, 0.5)
        with pytest.raises(ContractViolation):
            swa_select([0.0], 2, 0.0)

    @settings(max_examples=100, deadline=None)
    @given(st.integers(2, 60), st.floats(0.05, 1.0), st.integers(0, 2**32 - 1))
    def test_size_and_membership(self, n, r, seed):
        scores = np.random.default_rng(seed).random(n - 1)
        sel = swa_select(scores, n, r)
        k = sparse_k(n, r)
        assert sel.local_indices == tuple(range(n - k, n))
        assert len(sel.indices) == len(set(sel.indices)) == selection_counts(SparsityConfig("swa", r), n)[0]
        assert n - 1 in sel.indices
        if 2 * k < n and r < 1:
            outside = [scores[i] for i in range(n - k) if i not in sel.global_indices]
            if outside:
                assert min(scores[i] for i in sel.global_indices) >= max(outside)


class TestBaselineMasks:
    def test_strided_example(self):
        assert strided_attention_mask(6, 2) == [1, 3, 5]

    def test_local_example(self):
        assert local_attention_mask(6, 2) == [4, 5]
        assert local_attention_mask(3, 10) == [0, 1, 2]

    @pytest.mark.parametrize("fn", [local_attention_mask, strided_attention_mask])
    def test_zero_parameter_rejected(self, fn):
        with pytest.raises(ContractViolation):
            fn(5, 0)

    def test_derived_stride_never_dense_below_ratio_one(self):
        assert SparsityConfig("strided", 0.8).effective_stride == 2
        assert SparsityConfig("strided", 0.2).effective_stride == 5
        assert SparsityConfig("strided", 1.0).effective_stride == 1
        assert SparsityConfig("strided", 0.8, stride=3).effective_stride == 3

    @pytest.mark.parametrize("variant", ["dense", "swa", "local", "strided"])
    @pytest.mark.parametrize("n", [1, 2, 5, 17])
    def test_counts_match_selection(self, variant, n):
        cfg = SparsityConfig(variant, 0.4)
        sel = select_positions(cfg, n, np.zeros(max(0, n - 1)))
        selected, local = selection_counts(cfg, n)
        assert len(sel) == selected
        assert len(sel.local_indices) == local
        assert n - 1 in sel.indices

    def test_config_validation(self):
        with pytest.raises(ContractViolation):
            SparsityConfig("sliding")
        with pytest.raises(ContractViolation):
            SparsityConfig("swa", 1.5)
        with pytest.raises(ContractViolation):
            SparsityConfig("strided", 0.5, stride=0)


class TestGatheredAttention:
    @settings(max_examples=120, deadline=None)
    @given(st.integers(1, 24), st.integers(0, 2**32 - 1), st.data())
    def test_equals_masked_dense(self, n, seed, data):
        rng = np.random.default_rng(seed)
        state = filled_state(rng, n=n)
        selected = sorted(data.draw(st.sets(st.integers(0, n - 1), min_size=1)))
        q = rng.standard_normal((2, 4))
        attn, aw = attend(state, q, selected)
        ref_attn, ref_aw = masked_dense_attention(q, state.keys[:, :n], state.values[:, :n], selected)
        np.testing.assert_allclose(attn, ref_attn, atol=1e-9, rtol=0)
        np.testing.assert_allclose(aw, ref_aw, atol=1e-9, rtol=0)

    def test_unselected_weights_are_exact_zeros(self, rng):
        state = filled_state(rng)
        _, aw = attend(state, rng.standard_normal((2, 4)), [0, 9])
        assert np.count_nonzero(aw[:, 1:9]) == 0

    def test_gather_of_deleted_position_fails(self, rng):
        state = filled_state(rng)
        state.drop([3])
        assert np.isnan(state.keys[0, 3]).all()
        with pytest.raises(ContractViolation):
            attend(state, rng.standard_normal((2, 4)), [2, 3])

    def test_restore_brings_back_exact_rows(self, rng):
        state = filled_state(rng)
        k, v = state.keys[:, 3].copy(), state.values[:, 3].copy()
        state.drop([3])
        state.restore(3, k, v)
        keys, _ = state.gather([3])
        assert np.array_equal(keys[:, 0], k)

    def test_gather_out_of_range(self, rng):
        with pytest.raises(ContractViolation):
            filled_state(rng).gather([10])

    def test_state_grows_past_capacity(self, rng):
        state = filled_state(rng, n=3)
        state.append(rng.standard_normal((2, 4)), rng.standard_normal((2, 4)))
        assert state.length == 4 and state.capacity >= 4


class TestLocalAttentionSum:
    def test_window_sum_of_last_rows(self):
        acc = LocalAttentionSum()
        acc.push([1.0])
        acc.push([0.5, 0.5])
        acc.push([0.2, 0.3, 0.5])
        np.testing.assert_allclose(acc.window_sum(2, 3), [0.7, 0.8, 0.5])
        np.testing.assert_allclose(acc.window_sum(3, 2), [1.7, 0.8])

    def test_trim_bounds_memory(self):
        acc = LocalAttentionSum()
        for i in range(10):
            acc.push(np.ones(i + 1))
        acc.trim(3)
        assert len(acc) == 3

    def test_swa_trims_window_during_decode(self, rng):
        state = filled_state(rng, n=20)
        cfg = SparsityConfig("swa", 0.4)
        for _ in range(20):
            state.local_sum.push(rng.random(state.length))
        swa_attention(state, rng.standard_normal((2, 4)), cfg)
        assert len(state.local_sum) <= 2 * sparse_k(20, 0.4) + 2

    def test_selection_covers_top_entries_of_accumulator(self, rng):
        state = filled_state(rng, n=30)
        for i in range(30):
            state.local_sum.push(rng.random(i + 1))
        cfg = SparsityConfig("swa", 0.4)
        acc = state.local_sum_for(30, 0.4)
        sel = select_for_step(state, cfg)
        k = sel.k
        top = np.argsort(-acc[: 30 - k], kind="stable")[:k]
        assert set(int(t) for t in top) <= set(sel.indices)


class TestSparsityMetric:
    @pytest.mark.parametrize("w", [1, 2, 5, 16])
    def test_one_hot_rows(self, w):
        aw = np.zeros((3, w))
        aw[np.arange(3), np.arange(3) % w] = 1.0
        assert attention_sparsity(aw) == (w - 1) / w

    @settings(max_examples=60, deadline=None)
    @given(st.integers(0, 2**32 - 1), st.floats(1e-3, 1e3))
    def test_scale_invariant_per_row(self, seed, c):
        rng = np.random.default_rng(seed)
        aw = rng.random((4, 9)) ** 6
        scales = c * (1 + rng.random((4, 1)))
        assert attention_sparsity(aw * scales) == attention_sparsity(aw)

    def test_value_in_unit_interval(self, rng):
        assert 0.0 <= attention_sparsity(rng.random((5, 5)), causal=True) <= 1.0

    def test_causal_excludes_future_entries(self):
        aw = np.array([[1.0, 0.0, 0.0], [0.5, 0.5, 0.0], [0.98, 0.01, 0.01]])
        # only the 6 causal entries count and none is below 1% of its row max
        assert attention_sparsity(aw, causal=True) == 0.0
        assert attention_sparsity(aw) == pytest.approx(3 / 9)

    def test_uniform_is_dense(self):
        assert attention_sparsity(np.full((2, 8), 1 / 8)) == 0.0


class TestCorrelation:
    def test_dense_against_itself(self, rng):
        x = rng.standard_normal(16)
        assert score_distribution_correlation(x, x) == 1.0

    def test_uses_magnitudes(self):
        assert score_distribution_correlation([1.0, -2.0, 3.0], [1.0, 2.0, 3.0]) == pytest.approx(1.0)

    def test_sparse_keeping_largest_weights_correlates_better(self, rng):
        state = filled_state(rng, n=40)
        q = rng.standard_normal((2, 4)) * 3
        dense, aw = attend(state, q, range(40))
        mass = aw.sum(axis=0)
        best = sorted(np.argsort(-mass)[:12].tolist())
        worst = sorted(np.argsort(mass)[:12].tolist())
        good, _ = attend(state, q, best)
        bad, _ = attend(state, q, worst)
        assert score_distribution_correlation(dense.ravel(), good.ravel()) > score_distribution_correlation(
            dense.ravel(), bad.ravel()
        )


def test_sparse_k_rounds_half_even():
    assert sparse_k(10, 0.5) == round(2.5) == 2
    assert sparse_k(3, 0.1) == 1
    assert sparse_k(100, 0.4) == 20
    assert math.isclose(sparse_k(7, 1.0), 4)
