import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from superattr import numerics as nm
from superattr.numerics import (
    NonFiniteError,
    NumericsError,
    Parameter,
    ShapeError,
    Tensor,
    backward,
    clamp_min,
    matmul,
    sigmoid,
    sigmoid_t,
    softmax_rows,
)


def finite_diff_check(build_loss, params, eps=1e-5, tol=1e-4):
    """Run analytic backward and compare against central differences."""
    nm.zero_grad(params)
    backward(build_loss())
    numeric = nm.finite_difference(lambda: float(build_loss().data), params, eps=eps)
    worst = 0.0
    for p, n in zip(params, numeric):
        worst = max(worst, nm.max_relative_error(p.grad, n))
    assert worst < tol, f"max rel err {worst}"


class TestMatmul:
    def test_identity(self):
        a = np.array([[1.0, 2.0], [3.0, 4.0]])
        out = matmul(np.eye(2), a)
        np.testing.assert_array_equal(out.data, a)

    def test_selector_row(self):
        out = matmul(np.array([[1.0, 0.0]]), np.array([[5.0], [7.0]]))
        np.testing.assert_array_equal(out.data, [[5.0]])

    def test_matches_triple_loop_oracle(self):
        rng = np.random.default_rng(0)
        a = rng.normal(size=(3, 4))
        b = rng.normal(size=(4, 2))
        expected = np.zeros((3, 2))
        for i in range(3):
            for j in range(2):
                for k in range(4):
                    expected[i, j] += a[i, k] * b[k, j]
        np.testing.assert_allclose(matmul(a, b).data, expected, atol=1e-12, rtol=0)

    def test_shape_mismatch(self):
        with pytest.raises(ShapeError):
            matmul(np.ones((2, 3)), np.ones((2, 3)))

    def test_rejects_vectors(self):
        with pytest.raises(ShapeError):
            matmul(np.ones(3), np.ones((3, 2)))

    def test_batched_matches_loop(self):
        rng = np.random.default_rng(1)
        a = rng.normal(size=(4, 3, 5))
        b = rng.normal(size=(5, 2))
        out = matmul(a, b)
        for i in range(4):
            np.testing.assert_allclose(out.data[i], a[i] @ b, atol=1e-12)

    def test_gradient(self):
        rng = np.random.default_rng(2)
        a = Parameter(rng.normal(size=(3, 4)), "a")
        b = Parameter(rng.normal(size=(4, 2)), "b")
        finite_diff_check(lambda: nm.tsum(matmul(a, b) * matmul(a, b)), [a, b])

    def test_batched_gradient(self):
        rng = np.random.default_rng(3)
        a = Parameter(rng.normal(size=(2, 3, 4)), "a")
        b = Parameter(rng.normal(size=(4, 3)), "b")
        finite_diff_check(lambda: nm.tsum(matmul(a, b) * matmul(a, b)), [a, b])


class TestSoftmax:
    def test_equal_logits(self):
        out = softmax_rows(np.array([[0.0, 0.0]]))
        np.testing.assert_allclose(out.data, [[0.5, 0.5]], atol=1e-15)

    def test_large_logits_no_overflow(self):
        out = softmax_rows(np.array([[1000.0, 0.0]])).data
        assert out[0, 0] == pytest.approx(1.0, abs=1e-12)
        assert out[0, 1] == pytest.approx(0.0, abs=1e-12)

    def test_high_precision_oracle(self):
        # exp-normalize of [1,2,3] evaluated at 50 decimal digits
        expected = [0.090030573170380457998, 0.24472847105479765247, 0.66524095577482188953]
        out = softmax_rows(np.array([[1.0, 2.0, 3.0]])).data
        np.testing.assert_allclose(out[0], expected, rtol=1e-14)

    @given(st.lists(st.floats(-50, 50), min_size=2, max_size=6))
    @settings(max_examples=50, deadline=None)
    def test_rows_sum_to_one(self, row):
        out = softmax_rows(np.array([row])).data
        assert abs(out.sum() - 1.0) < 1e-9
        assert (out >= 0).all()

    @given(st.lists(st.floats(-20, 20), min_size=2, max_size=6), st.floats(-100, 100))
    @settings(max_examples=50, deadline=None)
    def test_shift_invariance(self, row, const):
        base = softmax_rows(np.array([row])).data
        shifted = softmax_rows(np.array([row]) + const).data
        np.testing.assert_allclose(base, shifted, atol=1e-12)

    def test_gradient(self):
        rng = np.random.default_rng(4)
        x = Parameter(rng.normal(size=(3, 5)), "x")
        w = rng.normal(size=(3, 5))
        finite_diff_check(lambda: nm.tsum(softmax_rows(x) * w), [x])


class TestSigmoid:
    def test_zero(self):
        assert sigmoid(0.0) == 0.5

    def test_symmetry(self):
        for x in [-3.0, -0.7, 0.1, 2.5, 40.0]:
            assert sigmoid(x) + sigmoid(-x) == pytest.approx(1.0, abs=1e-12)

    def test_extended_precision_value(self):
        # logistic at 0.4, evaluated at 50 decimal digits
        assert sigmoid(0.4) == pytest.approx(0.59868766011245200037, rel=1e-15)

    def test_monotone(self):
        xs = np.linspace(-10, 10, 101)
        ys = [sigmoid(x) for x in xs]
        assert all(b > a for a, b in zip(ys, ys[1:]))
        assert all(0.0 < y < 1.0 for y in ys)

    def test_non_finite_rejected(self):
        with pytest.raises(NonFiniteError):
            sigmoid(float("nan"))

    def test_tensor_version_matches_scalar(self):
        xs = np.array([-5.0, -0.3, 0.0, 0.9, 7.0])
        out = sigmoid_t(xs).data
        np.testing.assert_allclose(out, [sigmoid(x) for x in xs], rtol=1e-15)

    def test_gradient(self):
        x = Parameter(np.array([[-1.2, 0.3, 2.0]]), "x")
        finite_diff_check(lambda: nm.tsum(sigmoid_t(x) * sigmoid_t(x)), [x])


class TestBackward:
    def test_quadratic(self):
        p = Parameter(np.array([1.0, 2.0]), "p")
        backward(nm.tsum(p * p))
        np.testing.assert_array_equal(p.grad, [2.0, 4.0])

    def test_unrelated_parameter_gets_zero(self):
        p = Parameter(np.array([1.0, 2.0]), "p")
        q = Parameter(np.array([3.0]), "q")
        backward(nm.tsum(p * p))
        np.testing.assert_array_equal(q.grad, [0.0])

    def test_additive_accumulation(self):
        p = Parameter(np.array([1.0, 2.0]), "p")
        backward(nm.tsum(p * p))
        once = p.grad.copy()
        backward(nm.tsum(p * p))
        np.testing.assert_array_equal(p.grad, 2.0 * once)

    def test_zero_grad_resets(self):
        p = Parameter(np.array([1.0, 2.0]), "p")
        backward(nm.tsum(p * p))
        p.zero_grad()
        np.testing.assert_array_equal(p.grad, [0.0, 0.0])

    def test_non_scalar_rejected(self):
        p = Parameter(np.array([1.0, 2.0]), "p")
        with pytest.raises(NumericsError):
            backward(p * p)

    def test_parameter_reused_in_graph(self):
        p = Parameter(np.array([[1.0, 2.0], [3.0, 4.0]]), "p")
        finite_diff_check(lambda: nm.tsum(matmul(p, p)), [p])


class TestElementwiseGradients:
    """Analytic gradients match central differences on random small tensors."""

    def _param(self, seed, shape=(2, 3), low=0.2, high=2.0):
        rng = np.random.default_rng(seed)
        return Parameter(rng.uniform(low, high, size=shape), "x")

    def test_add_sub_mul_div(self):
        a = self._param(10)
        b = self._param(11)
        finite_diff_check(lambda: nm.tsum((a + b) * (a - b) / b), [a, b])

    def test_broadcast_add_mul(self):
        a = self._param(12, shape=(4, 3))
        b = self._param(13, shape=(3,))
        finite_diff_check(lambda: nm.tsum((a + b) * b), [a, b])

    def test_exp_log_sqrt_pow(self):
        a = self._param(14)
        finite_diff_check(
            lambda: nm.tsum(nm.texp(a) + nm.tlog(a) + nm.tsqrt(a) + nm.pow_const(a, 3.0)), [a]
        )

    def test_pow_zero_exponent_is_constant(self):
        a = self._param(15)
        backward(nm.tsum(nm.pow_const(a, 0.0)))
        np.testing.assert_array_equal(a.grad, np.zeros_like(a.data))

    def test_relu_abs_away_from_kink(self):
        rng = np.random.default_rng(16)
        vals = rng.uniform(0.5, 2.0, size=(2, 3)) * rng.choice([-1.0, 1.0], size=(2, 3))
        a = Parameter(vals, "x")
        finite_diff_check(lambda: nm.tsum(nm.relu(a) + nm.tabs(a)), [a])

    def test_clamp_min(self):
        a = Parameter(np.array([0.1, 0.9, 2.0]), "x")
        out = clamp_min(a, 0.5)
        np.testing.assert_array_equal(out.data, [0.5, 0.9, 2.0])
        backward(nm.tsum(out))
        np.testing.assert_array_equal(a.grad, [0.0, 1.0, 1.0])

    def test_mean_axes(self):
        a = self._param(17, shape=(3, 4))
        finite_diff_check(lambda: nm.tsum(nm.tmean(a, axis=-1, keepdims=True) * a), [a])

    def test_reshape_transpose(self):
        a = self._param(18, shape=(2, 6))
        finite_diff_check(
            lambda: nm.tsum(matmul(nm.reshape(a, (3, 4)), nm.transpose_last(nm.reshape(a, (3, 4))))),
            [a],
        )


class TestFiniteness:
    def test_nan_input_rejected(self):
        with pytest.raises(NonFiniteError):
            Tensor(np.array([1.0, np.nan]))

    def test_overflow_detected(self):
        big = Tensor(np.array([1e308]))
        with pytest.raises(NonFiniteError):
            big * big

    def test_log_zero_detected(self):
        with pytest.raises(NonFiniteError):
            nm.tlog(np.array([0.0]))
