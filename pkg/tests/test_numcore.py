import math

import numpy as np
import pytest

from ancorlab.errors import DegenerateVectorError, DimensionError, NumericsError
from ancorlab.numcore import (
    finite_diff_check,
    l2_normalize,
    l2_normalize_grad,
    l2_normalize_rows,
    l2_normalize_rows_grad,
    matmul,
    softmax_cross_entropy,
    softmax_cross_entropy_batch,
)


def matmul_oracle(a, b):
    """Naive triple loop, independent of numpy's matmul."""
    out = np.zeros((a.shape[0], b.shape[1]))
    for i in range(a.shape[0]):
        for j in range(b.shape[1]):
            s = 0.0
            for k in range(a.shape[1]):
                s += a[i, k] * b[k, j]
            out[i, j] = s
    return out


class TestMatmul:
    def test_identity(self):
        m = np.array([[1.0, 2.0], [3.0, 4.0]])
        assert np.array_equal(matmul(np.eye(2), m), m)

    def test_hand_computed(self):
        out = matmul(np.array([[1.0, 2.0]]), np.array([[3.0], [4.0]]))
        assert out.shape == (1, 1)
        assert out[0, 0] == 11.0

    def test_against_triple_loop_oracle(self):
        rng = np.random.default_rng(7)
        a = rng.standard_normal((5, 7))
        b = rng.standard_normal((7, 3))
        assert np.max(np.abs(matmul(a, b) - matmul_oracle(a, b))) < 1e-12

    def test_shape_mismatch(self):
        with pytest.raises(DimensionError):
            matmul(np.ones((2, 3)), np.ones((2, 3)))

    def test_associativity(self):
        rng = np.random.default_rng(11)
        for _ in range(20):
            a = rng.standard_normal((4, 6))
            b = rng.standard_normal((6, 5))
            c = rng.standard_normal((5, 3))
            left = matmul(matmul(a, b), c)
            right = matmul(a, matmul(b, c))
            assert np.max(np.abs(left - right)) < 1e-9


class TestL2Normalize:
    def test_three_four_five(self):
        assert np.allclose(l2_normalize(np.array([3.0, 4.0])), [0.6, 0.8], atol=1e-15)

    def test_unit_vector_fixed_point(self):
        v = np.array([0.0, 1.0, 0.0])
        assert np.array_equal(l2_normalize(v), v)

    def test_output_norm_is_one(self):
        rng = np.random.default_rng(3)
        for _ in range(50):
            v = rng.standard_normal(8) * rng.uniform(0.1, 100)
            assert abs(np.linalg.norm(l2_normalize(v)) - 1.0) < 1e-12

    def test_scale_invariance(self):
        rng = np.random.default_rng(4)
        v = rng.standard_normal(6)
        for alpha in (1e-6, 0.5, 3.0, 1e6):
            assert np.max(np.abs(l2_normalize(alpha * v) - l2_normalize(v))) < 1e-12

    def test_degenerate_error(self):
        with pytest.raises(DegenerateVectorError):
            l2_normalize(np.zeros(4))

    def test_gradient_matches_finite_differences(self):
        x = np.array([1.0, 1.0])
        g_up = np.array([0.3, -0.7])  # arbitrary downstream gradient

        def f(v):
            return float(l2_normalize(v.ravel()) @ g_up)

        analytic = l2_normalize_grad(x, g_up)
        assert finite_diff_check(f, x, analytic, h=1e-6) < 1e-6

    def test_rows_match_single(self):
        rng = np.random.default_rng(5)
        X = rng.standard_normal((4, 7))
        unit, norms = l2_normalize_rows(X)
        for i in range(4):
            assert np.allclose(unit[i], l2_normalize(X[i]), atol=1e-15)
            assert abs(norms[i] - np.linalg.norm(X[i])) < 1e-12

    def test_rows_grad_matches_single(self):
        rng = np.random.default_rng(6)
        X = rng.standard_normal((4, 7))
        G = rng.standard_normal((4, 7))
        unit, norms = l2_normalize_rows(X)
        batch = l2_normalize_rows_grad(unit, norms, G)
        for i in range(4):
            assert np.allclose(batch[i], l2_normalize_grad(X[i], G[i]), atol=1e-14)


class TestSoftmaxCrossEntropy:
    def test_uniform_logits(self):
        loss, _ = softmax_cross_entropy(np.zeros(4), 2)
        assert abs(loss - math.log(4)) < 1e-12

    def test_two_class_closed_form(self):
        loss, _ = softmax_cross_entropy(np.array([1.0, 0.0]), 0)
        assert abs(loss - math.log(1 + math.exp(-1))) < 1e-12
        assert abs(loss - 0.313262) < 1e-6

    def test_saturated_no_overflow(self):
        loss, grad = softmax_cross_entropy(np.array([100.0, 0.0]), 0)
        assert 0.0 <= loss < 1e-10
        assert np.all(np.isfinite(grad))

    def test_label_out_of_range(self):
        with pytest.raises(IndexError):
            softmax_cross_entropy(np.zeros(3), 3)

    def test_nonnegative_and_zero_iff_concentrated(self):
        rng = np.random.default_rng(8)
        for _ in range(50):
            logits = rng.standard_normal(5) * 3
            label = int(rng.integers(5))
            loss, _ = softmax_cross_entropy(logits, label)
            assert loss >= 0.0
        loss, _ = softmax_cross_entropy(np.array([50.0, 0.0, 0.0]), 0)
        assert loss < 1e-12

    def test_gradient_is_softmax_minus_onehot(self):
        logits = np.array([0.2, -1.0, 0.5])
        _, grad = softmax_cross_entropy(logits, 1)
        p = np.exp(logits) / np.exp(logits).sum()
        expected = p - np.array([0.0, 1.0, 0.0])
        assert np.allclose(grad, expected, atol=1e-12)

    def test_batch_matches_single(self):
        rng = np.random.default_rng(9)
        logits = rng.standard_normal((6, 4))
        labels = rng.integers(0, 4, 6)
        losses, grads = softmax_cross_entropy_batch(logits, labels)
        for i in range(6):
            loss_i, grad_i = softmax_cross_entropy(logits[i], int(labels[i]))
            assert abs(losses[i] - loss_i) < 1e-12
            assert np.allclose(grads[i], grad_i, atol=1e-12)


class TestFiniteDiffCheck:
    def test_quadratic_exact(self):
        x = np.array([[1.0, -2.0], [0.5, 3.0]])
        err = finite_diff_check(lambda v: float(np.sum(v * v)), x, 2 * x, h=1e-5)
        assert err < 1e-8

    def test_composite_ce_of_matmul(self):
        rng = np.random.default_rng(10)
        x = rng.standard_normal((3, 4))
        w = rng.standard_normal((4, 1))

        def f(v):
            logits = (v @ w).ravel()
            loss, _ = softmax_cross_entropy(logits, 1)
            return loss

        _, g_logits = softmax_cross_entropy((x @ w).ravel(), 1)
        analytic = np.outer(g_logits, w.ravel())
        assert finite_diff_check(f, x, analytic, h=1e-6) < 1e-6

    def test_detects_five_percent_error(self):
        x = np.array([0.7, -1.3, 2.1])
        err = finite_diff_check(lambda v: float(np.sum(v * v)), x, 2.1 * x, h=1e-5)
        assert err > 0.04

    def test_nonfinite_function_raises(self):
        x = np.array([1.0])
        with pytest.raises(NumericsError):
            finite_diff_check(lambda v: float(np.log(-1.0)), x, x)

    def test_does_not_mutate_input(self):
        x = np.array([1.0, 2.0])
        x_before = x.copy()
        finite_diff_check(lambda v: float(np.sum(v * v)), x, 2 * x)
        assert np.array_equal(x, x_before)


def test_module_gradients_pass_fd_on_100_seeds():
    """Every analytic gradient exposed here stays below 1e-5 relative error."""
    for seed in range(100):
        rng = np.random.default_rng(seed)
        x = rng.standard_normal(5) * rng.uniform(0.2, 3.0)
        g_up = rng.standard_normal(5)
        err = finite_diff_check(
            lambda v: float(l2_normalize(v.ravel()) @ g_up),
            x,
            l2_normalize_grad(x, g_up),
            h=1e-6,
        )
        assert err < 1e-5, f"l2_normalize grad failed at seed {seed}: {err}"

        logits = rng.standard_normal(4) * 2
        label = int(rng.integers(4))
        _, grad = softmax_cross_entropy(logits, label)
        err = finite_diff_check(
            lambda v: softmax_cross_entropy(v.ravel(), label)[0], logits, grad, h=1e-6
        )
        assert err < 1e-5, f"softmax_ce grad failed at seed {seed}: {err}"
