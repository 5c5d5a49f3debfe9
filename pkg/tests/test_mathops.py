import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays
from scipy.special import softmax as scipy_softmax
from scipy.stats import spearmanr

from oracles import triple_loop_matmul
from swakv.mathops import (
    ContractViolation,
    UndefinedCorrelation,
    as_matrix,
    make_rng,
    matmul,
    softmax_rows,
    spearman,
    top_k_indices,
)

finite = st.floats(-1e3, 1e3, allow_nan=False, allow_infinity=False)


class TestMatmul:
    def test_small_known_product(self):
        a = [[1.0, 2.0], [3.0, 4.0]]
        b = [[5.0, 6.0], [7.0, 8.0]]
        np.testing.assert_array_equal(matmul(a, b), [[19.0, 22.0], [43.0, 50.0]])

    @settings(max_examples=60, deadline=None)
    @given(st.integers(1, 5), st.integers(1, 6), st.integers(1, 5), st.integers(0, 2**32 - 1))
    def test_bitwise_equal_to_triple_loop(self, m, k, n, seed):
        rng = np.random.default_rng(seed)
        a, b = rng.standard_normal((m, k)), rng.standard_normal((k, n))
        assert np.array_equal(matmul(a, b), triple_loop_matmul(a, b))

    def test_shape_mismatch(self):
        with pytest.raises(ContractViolation):
            matmul(np.ones((2, 3)), np.ones((2, 3)))

    def test_vector_promoted_to_row(self):
        assert as_matrix([1.0, 2.0]).shape == (1, 2)
        with pytest.raises(ContractViolation):
            as_matrix(np.ones((2, 2, 2)))


class TestSoftmax:
    @settings(max_examples=60, deadline=None)
    @given(arrays(np.float64, (3, 7), elements=finite))
    def test_matches_scipy_and_rows_sum_to_one(self, m):
        out = softmax_rows(m)
        np.testing.assert_allclose(out, scipy_softmax(m, axis=1), rtol=1e-12, atol=1e-300)
        np.testing.assert_allclose(out.sum(axis=1), 1.0, atol=1e-12)

    def test_shift_invariance(self):
        m = np.array([[0.5, -1.0, 2.0]])
        np.testing.assert_allclose(softmax_rows(m), softmax_rows(m + 1e4), atol=1e-15)

    def test_masked_entries_are_exact_zeros(self):
        out = softmax_rows([[1.0, -np.inf, 0.0]])
        assert out[0, 1] == 0.0
        assert out[0].sum() == pytest.approx(1.0)

    def test_fully_masked_row_rejected(self):
        with pytest.raises(ContractViolation):
            softmax_rows([[-np.inf, -np.inf]])

    def test_empty_rejected(self):
        with pytest.raises(ContractViolation):
            softmax_rows(np.zeros((0, 3)))


class TestTopK:
    def test_ties_go_to_lower_index(self):
        assert top_k_indices([1.0, 3.0, 3.0, 3.0, 0.0], 2) == [1, 2]

    def test_sorted_ascending(self):
        assert top_k_indices([5.0, 1.0, 9.0, 7.0], 3) == [0, 2, 3]

    @pytest.mark.parametrize("k", [-1, 5])
    def test_out_of_range(self, k):
        with pytest.raises(ContractViolation):
            top_k_indices([1.0, 2.0, 3.0, 4.0], k)

    @settings(max_examples=60, deadline=None)
    @given(st.lists(finite, min_size=1, max_size=20), st.data())
    def test_selected_dominate_rest(self, values, data):
        k = data.draw(st.integers(0, len(values)))
        chosen = top_k_indices(values, k)
        assert len(chosen) == k == len(set(chosen))
        rest = [v for i, v in enumerate(values) if i not in chosen]
        if chosen and rest:
            assert min(values[i] for i in chosen) >= max(rest)


class TestSpearman:
    def test_self_correlation(self):
        assert spearman([3.0, 1.0, 2.0], [3.0, 1.0, 2.0]) == 1.0

    def test_reversed(self):
        assert spearman([1.0, 2.0, 3.0], [3.0, 2.0, 1.0]) == pytest.approx(-1.0)

    @settings(max_examples=80, deadline=None)
    @given(st.lists(st.integers(-3, 3), min_size=3, max_size=12), st.data())
    def test_matches_scipy_with_ties(self, a, data):
        b = data.draw(st.lists(st.integers(-3, 3), min_size=len(a), max_size=len(a)))
        if len(set(a)) < 2 or len(set(b)) < 2:
            with pytest.raises(UndefinedCorrelation):
                spearman(a, b)
            return
        assert spearman(a, b) == pytest.approx(spearmanr(a, b).statistic, abs=1e-12)

    def test_constant_input_undefined(self):
        with pytest.raises(UndefinedCorrelation):
            spearman([1.0, 1.0, 1.0], [1.0, 2.0, 3.0])

    @pytest.mark.parametrize("a,b", [([1.0], [1.0]), ([1.0, 2.0], [1.0, 2.0, 3.0])])
    def test_bad_lengths(self, a, b):
        with pytest.raises(ContractViolation):
            spearman(a, b)


def test_rng_is_reproducible():
    assert np.array_equal(make_rng(5).standard_normal(4), make_rng(5).standard_normal(4))
    assert not np.array_equal(make_rng(5).standard_normal(4), make_rng(6).standard_normal(4))
