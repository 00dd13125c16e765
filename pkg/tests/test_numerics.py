import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from lcron.numerics import (
    DEFAULT_EPS,
    GradCheckError,
    InvalidArgument,
    central_difference,
    clamped_log,
    clamped_log_grad,
    grad_check,
    row_softmax,
    sigmoid,
    softmax_backward,
    softplus,
)

finite = st.floats(-50, 50, allow_nan=False)


class TestRowSoftmax:
    def test_uniform_row(self):
        np.testing.assert_allclose(row_softmax([[0.0, 0.0]]), [[0.5, 0.5]], atol=1e-15)

    def test_hand_value(self):
        e = math.e
        np.testing.assert_allclose(row_softmax([[1.0, 0.0]]), [[e / (1 + e), 1 / (1 + e)]], atol=1e-15)
        np.testing.assert_allclose(row_softmax([[1.0, 0.0]]), [[0.7311, 0.2689]], atol=1e-4)

    def test_extreme_logits_do_not_overflow(self):
        with np.errstate(over="raise"):
            out = row_softmax([[1000.0, 0.0]])
        assert out[0, 0] == pytest.approx(1.0)
        assert out[0, 1] == pytest.approx(0.0, abs=1e-300)

    @pytest.mark.parametrize("t", [0.0, -1.0, float("nan"), float("inf")])
    def test_bad_temperature(self, t):
        with pytest.raises(InvalidArgument):
            row_softmax([[1.0, 2.0]], t)

    @given(arrays(np.float64, (3, 5), elements=finite), st.floats(1e-3, 1e3))
    def test_rows_sum_to_one(self, x, t):
        np.testing.assert_allclose(row_softmax(x, t).sum(axis=1), 1.0, atol=1e-12)

    @given(arrays(np.float64, (2, 4), elements=finite), st.floats(1e-3, 1e3))
    def test_temperature_is_a_rescaling(self, x, t):
        np.testing.assert_allclose(row_softmax(x, t), row_softmax(x / t, 1.0), atol=1e-12)

    def test_backward_matches_differences(self, rng):
        z = rng.normal(size=6)
        g = rng.normal(size=6)
        analytic = softmax_backward(row_softmax(z), g)
        fd = central_difference(lambda v: float(row_softmax(v) @ g), z)
        np.testing.assert_allclose(analytic, fd, atol=1e-9)


class TestClampedLog:
    def test_values(self):
        assert clamped_log(0.5) == pytest.approx(-0.6931, abs=1e-4)
        assert clamped_log(0.0) == math.log(1e-7)
        assert clamped_log(1.0) == math.log(1 - 1e-7)

    def test_array_and_scalar_forms(self):
        assert isinstance(clamped_log(0.3), float)
        out = clamped_log(np.array([0.0, 0.5, 1.0]))
        assert out.shape == (3,)

    @pytest.mark.parametrize("eps", [0.0, 0.5, -1e-3])
    def test_epsilon_range(self, eps):
        with pytest.raises(InvalidArgument):
            clamped_log(0.3, eps)

    @given(st.floats(DEFAULT_EPS, 1 - DEFAULT_EPS), st.floats(DEFAULT_EPS, 1 - DEFAULT_EPS))
    def test_monotone_inside_clip(self, a, b):
        lo, hi = min(a, b), max(a, b)
        assert clamped_log(lo) <= clamped_log(hi)

    def test_gradient_is_zero_where_clipped(self):
        g = clamped_log_grad(np.array([0.0, 0.25, 1.0]))
        np.testing.assert_allclose(g, [0.0, 4.0, 0.0])


class TestStableTransforms:
    def test_sigmoid_extremes(self):
        with np.errstate(over="raise"):
            out = sigmoid(np.array([-800.0, 0.0, 800.0]))
        np.testing.assert_allclose(out, [0.0, 0.5, 1.0], atol=1e-300)

    def test_softplus_extremes(self):
        out = softplus(np.array([-800.0, 0.0, 800.0]))
        np.testing.assert_allclose(out, [0.0, math.log(2.0), 800.0])

    @given(arrays(np.float64, 7, elements=finite))
    def test_sigmoid_symmetry(self, x):
        np.testing.assert_allclose(sigmoid(x) + sigmoid(-x), 1.0, atol=1e-12)


class TestGradCheck:
    def test_quadratic(self):
        err = grad_check(lambda x: float(x @ x), lambda x: 2 * x, np.array([1.0, 2.0]), step=1e-5)
        assert err <= 1e-8

    @given(arrays(np.float64, 3, elements=st.floats(-3, 3)), arrays(np.float64, (3, 3), elements=st.floats(-2, 2)))
    def test_polynomials_of_degree_two(self, x, a):
        b = np.array([0.5, -1.0, 2.0])

        def f(v):
            return float(v @ a @ v + b @ v + 3.0)

        err = grad_check(f, lambda v: (a + a.T) @ v + b, x, step=1e-4)
        assert err <= 1e-7

    @pytest.mark.parametrize("step", [1e-8, 1e-2])
    def test_step_range(self, step):
        with pytest.raises(InvalidArgument):
            grad_check(lambda x: float(x.sum()), np.ones_like, np.zeros(2), step=step)

    def test_nonfinite_value_names_coordinate(self):
        def f(x):
            return float("nan") if x[1] > 0.5 else float(x.sum())

        with pytest.raises(GradCheckError, match=r"\(1,\)"):
            grad_check(f, np.ones_like, np.array([0.0, 0.5]), step=1e-3)

    def test_detects_wrong_gradient(self):
        err = grad_check(lambda x: float(x @ x), lambda x: 3 * x, np.array([1.0, 2.0]))
        assert err > 0.1
