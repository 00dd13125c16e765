import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from lcron.diffsort import (
    OPERATORS,
    hard_sort_desc,
    neural_sort,
    permutation_matrix,
    pullback,
    soft_permutation,
    soft_sort,
    sort_operator,
)
from lcron.numerics import InvalidArgument, central_difference, grad_check

scores_strategy = arrays(np.float64, st.integers(1, 12), elements=st.floats(-20, 20, allow_nan=False))


def distinct_scores(rng, n, gap=1e-2):
    """Scores whose pairwise gaps are at least ``gap``."""
    base = np.arange(n) * gap * 3 + rng.uniform(0, gap, size=n)
    return rng.permutation(base) * rng.uniform(0.5, 20)


class TestNeuralSort:
    def test_two_items(self):
        np.testing.assert_allclose(neural_sort([2.0, 1.0], 1.0), [[0.7311, 0.2689], [0.2689, 0.7311]], atol=1e-4)

    def test_single_item(self):
        np.testing.assert_array_equal(neural_sort([5.0], 3.0), [[1.0]])

    def test_hard_limit(self):
        assert neural_sort([1.0, 2.0, 3.0], 1e-4).argmax(axis=1).tolist() == [2, 1, 0]

    def test_shift_invariance(self, rng):
        s = rng.normal(size=9)
        np.testing.assert_allclose(neural_sort(s + 7.5, 0.7), neural_sort(s, 0.7), atol=1e-9)

    def test_rejects_bad_input(self):
        with pytest.raises(InvalidArgument):
            neural_sort([1.0, 2.0], 0.0)
        with pytest.raises(InvalidArgument):
            neural_sort([1.0, float("nan")], 1.0)


class TestSoftSort:
    def test_two_items(self):
        np.testing.assert_allclose(soft_sort([2.0, 1.0], 1.0), [[0.7311, 0.2689], [0.2689, 0.7311]], atol=1e-4)

    def test_single_item(self):
        np.testing.assert_array_equal(soft_sort([7.0], 0.3), [[1.0]])

    def test_ties_give_symmetric_rows(self):
        np.testing.assert_allclose(soft_sort([3.0, 3.0], 1.0), [[0.5, 0.5], [0.5, 0.5]])

    def test_shift_invariance(self, rng):
        s = rng.normal(size=9)
        np.testing.assert_allclose(soft_sort(s - 4.0, 0.7), soft_sort(s, 0.7), atol=1e-9)

    def test_unknown_kind(self):
        with pytest.raises(InvalidArgument):
            sort_operator("bitonic", [1.0], 1.0)


class TestHardSort:
    @pytest.mark.parametrize("s, order", [([3, 1, 2], [0, 2, 1]), ([1, 1], [0, 1]), ([-5], [0])])
    def test_examples(self, s, order):
        assert hard_sort_desc(s).tolist() == order

    @given(scores_strategy)
    def test_is_sorted_permutation(self, s):
        order = hard_sort_desc(s)
        assert sorted(order.tolist()) == list(range(s.size))
        assert np.all(np.diff(s[order]) <= 0)

    def test_permutation_matrix(self):
        P = permutation_matrix([2, 0, 1])
        np.testing.assert_array_equal(P @ np.array([10.0, 20.0, 30.0]), [30.0, 10.0, 20.0])


@pytest.mark.parametrize("kind", OPERATORS)
class TestOperatorProperties:
    @given(s=scores_strategy, t=st.sampled_from([0.1, 1.0, 10.0, 100.0]))
    def test_row_stochastic(self, kind, s, t):
        P = sort_operator(kind, s, t)
        np.testing.assert_allclose(P.sum(axis=1), 1.0, atol=1e-9)
        assert P.min() >= 0.0 and P.max() <= 1.0

    def test_hard_limit_agrees_with_hard_sort(self, kind, rng):
        for n in (2, 5, 16, 40):
            s = distinct_scores(rng, n)
            assert np.array_equal(sort_operator(kind, s, 1e-4).argmax(axis=1), hard_sort_desc(s))

    def test_permutation_equivariance(self, kind, rng):
        s = rng.normal(size=10)
        perm = rng.permutation(10)
        np.testing.assert_allclose(sort_operator(kind, s[perm], 0.8), sort_operator(kind, s, 0.8)[:, perm],
                                   atol=1e-12)

    def test_batched_equals_rowwise(self, kind, rng):
        S = rng.normal(size=(4, 6))
        batched = sort_operator(kind, S, 0.5)
        for b in range(4):
            np.testing.assert_allclose(batched[b], sort_operator(kind, S[b], 0.5), atol=1e-15)

    def test_soft_permutation_record(self, kind):
        sp = soft_permutation([1.0, 2.0], 0.5, kind)
        assert sp.operator_kind == kind and sp.temperature == 0.5 and sp.matrix.shape == (2, 2)


@pytest.mark.parametrize("kind", OPERATORS)
class TestPullback:
    def test_zero_upstream(self, kind, rng):
        s = rng.normal(size=5)
        np.testing.assert_array_equal(pullback(kind, s, 1.0, np.zeros((5, 5))), np.zeros(5))

    def test_shape_mismatch(self, kind):
        with pytest.raises(InvalidArgument):
            pullback(kind, [1.0, 2.0], 1.0, np.zeros((3, 3)))

    def test_identity_upstream_two_items(self, kind):
        s = np.array([2.0, 1.0])
        g = pullback(kind, s, 1.0, np.eye(2))
        fd = central_difference(lambda v: float(np.trace(sort_operator(kind, v, 1.0))), s)
        np.testing.assert_allclose(g, fd, atol=1e-6)

    def test_random_instances(self, kind, rng):
        worst = 0.0
        for n in (2, 4, 8, 16):
            for _ in range(50):
                s = rng.normal(size=n) * rng.uniform(0.2, 3.0)
                t = float(rng.choice([0.5, 1.0, 10.0]))
                G = rng.normal(size=(n, n))
                worst = max(worst, grad_check(lambda v: float((sort_operator(kind, v, t) * G).sum()),
                                              lambda v: pullback(kind, v, t, G), s))
        assert worst <= 1e-5

    def test_batched(self, kind, rng):
        S = rng.normal(size=(3, 5))
        G = rng.normal(size=(3, 5, 5))
        batched = pullback(kind, S, 0.7, G)
        for b in range(3):
            np.testing.assert_allclose(batched[b], pullback(kind, S[b], 0.7, G[b]), atol=1e-12)
