"""Unit tests for the tensor ops and the reverse-mode engine.

Expected values come from independent oracles: triple-loop matmul, math.erf,
explicit window enumeration for pooling, and central finite differences.
"""

import math

import numpy as np
import pytest

from crossbrain import numerics as nm
from crossbrain import precision
from crossbrain.errors import DimensionError, ParameterError, UsageError
from crossbrain.numerics import (Var, adaptive_max_pool, adaptive_max_pool_array, affine,
                                 dropout, finite_diff_check, gelu, layer_norm,
                                 pool_windows, reverse_pass)


def matmul_oracle(x, w):
    n, k = x.shape
    k2, m = w.shape
    out = np.zeros((n, m), dtype=np.float64)
    for i in range(n):
        for j in range(m):
            for p in range(k):
                out[i, j] += float(x[i, p]) * float(w[p, j])
    return out


def max_pool_oracle(v, m):
    """Brute-force window enumeration with the floor/ceil bounds."""
    length = len(v)
    out = np.empty(m, dtype=v.dtype)
    for i in range(m):
        start = math.floor(i * length / m)
        end = math.ceil((i + 1) * length / m)
        best = v[start]
        for j in range(start + 1, end):
            if v[j] > best:
                best = v[j]
        out[i] = best
    return out


# -- affine -------------------------------------------------------------------


class TestAffine:
    def test_identity(self):
        eye = np.eye(2)
        out = affine(eye, np.eye(2), np.zeros(2))
        np.testing.assert_array_equal(out.value, eye)

    def test_hand_sum(self):
        out = affine(np.array([[1.0, 2.0]]), np.array([[1.0], [1.0]]), np.array([3.0]))
        np.testing.assert_allclose(out.value, [[6.0]])

    def test_against_triple_loop_oracle(self, rng):
        x = rng.standard_normal((3, 4))
        w = rng.standard_normal((4, 2))
        b = rng.standard_normal(2)
        out = affine(x, w, b)
        expected = matmul_oracle(x, w) + b
        np.testing.assert_allclose(out.value, expected, rtol=1e-6)

    def test_shape_mismatch(self, rng):
        with pytest.raises(DimensionError):
            affine(rng.standard_normal((3, 4)), rng.standard_normal((5, 2)), np.zeros(2))

    def test_gradients(self, rng):
        precision.set_precision("f64")
        x = Var(rng.standard_normal((3, 4)))
        w = Var(rng.standard_normal((4, 2)))
        b = Var(rng.standard_normal(2))
        err = finite_diff_check(lambda: nm.vsum(gelu(affine(x, w, b))), [x, w, b])
        assert err < 1e-6


# -- gelu ---------------------------------------------------------------------


class TestGelu:
    def test_zero(self):
        assert float(gelu(np.zeros(1)).value[0]) == 0.0

    def test_unit_point_matches_erf_oracle(self):
        expected = 1.0 * 0.5 * (1.0 + math.erf(1.0 / math.sqrt(2.0)))
        out = float(gelu(np.array([1.0])).value[0])
        assert out == pytest.approx(expected, abs=1e-12)
        assert out == pytest.approx(0.84134, abs=1e-5)

    def test_saturation(self):
        assert float(gelu(np.array([10.0])).value[0]) == pytest.approx(10.0, abs=1e-6)

    def test_gradient(self, rng):
        precision.set_precision("f64")
        x = Var(rng.standard_normal(17))
        err = finite_diff_check(lambda: nm.vsum(gelu(x) * gelu(x)), [x], max_coords_per_param=None)
        assert err < 1e-6


# -- layer_norm ---------------------------------------------------------------


class TestLayerNorm:
    def test_constant_row_is_zero(self):
        x = np.full((2, 5), 3.7)
        out = layer_norm(x, np.ones(5), np.zeros(5))
        np.testing.assert_allclose(out.value, 0.0, atol=1e-12)

    def test_two_point_row(self):
        out = layer_norm(np.array([[1.0, 3.0]]), np.ones(2), np.zeros(2), eps=1e-12)
        np.testing.assert_allclose(out.value, [[-1.0, 1.0]], atol=1e-6)

    def test_normalization_contract(self, rng):
        eps = 1e-5
        x = rng.standard_normal((8, 64))
        out = layer_norm(x, np.ones(64), np.zeros(64), eps=eps).value
        assert np.all(np.abs(out.mean(axis=1)) < 1e-6)
        assert np.all(np.abs(out.var(axis=1) - 1.0) < 10 * eps)

    def test_gradient(self, rng):
        precision.set_precision("f64")
        x = Var(rng.standard_normal((4, 6)))
        gamma = Var(rng.standard_normal(6))
        beta = Var(rng.standard_normal(6))
        err = finite_diff_check(
            lambda: nm.vsum(layer_norm(x, gamma, beta) ** 2.0), [x, gamma, beta],
            max_coords_per_param=None,
        )
        assert err < 1e-6


# -- dropout ------------------------------------------------------------------


class TestDropout:
    def test_inference_identity(self, rng):
        x = rng.standard_normal((3, 3))
        out = dropout(x, 0.7, training=False)
        np.testing.assert_array_equal(out.value, x)

    def test_p_zero_identity(self, rng):
        x = rng.standard_normal((3, 3))
        out = dropout(x, 0.0, training=True, rng=rng)
        np.testing.assert_array_equal(out.value, x)

    def test_law_of_large_numbers(self):
        gen = np.random.default_rng(99)
        x = np.ones(1_000_000)
        out = dropout(x, 0.5, training=True, rng=gen).value
        kept = np.count_nonzero(out) / x.size
        assert abs(kept - 0.5) < 0.005
        assert abs(out.mean() - x.mean()) < 0.01 * abs(x.mean())

    def test_invalid_probability(self, rng):
        with pytest.raises(ParameterError):
            dropout(np.ones(4), 1.0, training=True, rng=rng)
        with pytest.raises(ParameterError):
            dropout(np.ones(4), -0.1, training=True, rng=rng)

    def test_identical_seed_identical_mask(self):
        x = np.ones((50, 50))
        a = dropout(x, 0.4, training=True, rng=np.random.default_rng(7)).value
        b = dropout(x, 0.4, training=True, rng=np.random.default_rng(7)).value
        np.testing.assert_array_equal(a, b)

    def test_backward_routes_through_mask(self):
        x = Var(np.ones((4, 4)))
        out = dropout(x, 0.5, training=True, rng=np.random.default_rng(3))
        nm.vsum(out).backward()
        np.testing.assert_array_equal(x.grad, np.where(out.value != 0.0, 2.0, 0.0))


# -- adaptive max pooling ------------------------------------------------------


class TestAdaptiveMaxPool:
    def test_hand_example(self):
        out = adaptive_max_pool(np.array([1.0, 3.0, 2.0, 5.0, 4.0, 6.0]), 3)
        np.testing.assert_array_equal(out.value, [3.0, 5.0, 6.0])

    def test_m_equals_length_is_identity(self, rng):
        v = rng.standard_normal(17)
        np.testing.assert_array_equal(adaptive_max_pool(v, 17).value, v)

    def test_constant_vector(self):
        v = np.full(10, 2.5)
        np.testing.assert_array_equal(adaptive_max_pool(v, 4).value, np.full(4, 2.5))

    def test_invalid_sizes(self):
        with pytest.raises(ParameterError):
            adaptive_max_pool(np.ones(4), 5)
        with pytest.raises(ParameterError):
            adaptive_max_pool(np.ones(4), 0)

    def test_matches_enumeration_oracle(self):
        gen = np.random.default_rng(42)
        for _ in range(150):
            length = int(gen.integers(1, 512))
            m = int(gen.integers(1, length + 1))
            v = gen.standard_normal(length)
            np.testing.assert_array_equal(adaptive_max_pool_array(v, m), max_pool_oracle(v, m))

    def test_batched_matches_rowwise(self, rng):
        x = rng.standard_normal((5, 37))
        pooled = adaptive_max_pool_array(x, 9)
        for i in range(5):
            np.testing.assert_array_equal(pooled[i], max_pool_oracle(x[i], 9))

    def test_backward_one_entry_per_window(self, rng):
        v = Var(rng.standard_normal(31))
        out = adaptive_max_pool(v, 7)
        nm.vsum(out).backward()
        starts, ends = pool_windows(31, 7)
        total = 0.0
        for s, e in zip(starts, ends):
            window_grad = v.grad[s:e]
            assert np.count_nonzero(window_grad) >= 1
            total += window_grad.sum()
        # every window routes exactly its upstream gradient (sum preserved)
        assert v.grad.sum() == pytest.approx(7.0)

    def test_tie_breaks_to_first_index(self):
        v = Var(np.array([2.0, 2.0, 2.0, 2.0]))
        out = adaptive_max_pool(v, 2)
        nm.vsum(out).backward()
        np.testing.assert_array_equal(v.grad, [1.0, 0.0, 1.0, 0.0])


# -- reverse pass --------------------------------------------------------------


class TestReversePass:
    def test_linear_case(self, rng):
        x_val = rng.standard_normal((4, 3))
        w = Var(rng.standard_normal((3, 2)))
        loss = nm.vsum(nm.matmul(Var(x_val), w))
        loss.backward()
        # d(sum(xW))/dW[p, j] = sum_i x[i, p]
        np.testing.assert_allclose(w.grad, np.tile(x_val.sum(axis=0)[:, None], (1, 2)))

    def test_unused_parameter_gets_zero(self, rng):
        used = Var(rng.standard_normal(3))
        unused = Var(rng.standard_normal(3))
        nm.vsum(used * used).backward()
        assert unused.grad is None
        np.testing.assert_array_equal(unused.grad_or_zero(), np.zeros(3))

    def test_non_scalar_loss_rejected(self, rng):
        with pytest.raises(UsageError):
            reverse_pass(Var(rng.standard_normal(3)))

    def test_multi_path_accumulation(self):
        x = Var(np.array(2.0))
        y = Var(np.array(5.0))
        loss = x * y + x
        loss.backward()
        assert float(x.grad) == pytest.approx(6.0)
        assert float(y.grad) == pytest.approx(2.0)

    def test_composite_mlp_against_finite_differences(self, rng):
        precision.set_precision("f64")
        w1 = Var(rng.standard_normal((5, 4)) * 0.5)
        b1 = Var(rng.standard_normal(4) * 0.1)
        w2 = Var(rng.standard_normal((4, 2)) * 0.5)
        b2 = Var(rng.standard_normal(2) * 0.1)
        g = Var(np.ones(4))
        be = Var(np.zeros(4))
        x = rng.standard_normal((6, 5))

        def f():
            h = gelu(layer_norm(affine(x, w1, b1), g, be))
            return nm.mean_all(affine(h, w2, b2) ** 2.0)

        err = finite_diff_check(f, [w1, b1, w2, b2, g, be], max_coords_per_param=None)
        assert err < 1e-4

    def test_broadcast_backward(self, rng):
        precision.set_precision("f64")
        a = Var(rng.standard_normal((3, 4)))
        b = Var(rng.standard_normal(4))
        err = finite_diff_check(lambda: nm.vsum((a + b) * b), [a, b], max_coords_per_param=None)
        assert err < 1e-6


# -- finite difference harness -------------------------------------------------


class TestFiniteDiffCheck:
    def test_quadratic_is_exact(self, rng):
        precision.set_precision("f64")
        theta = Var(rng.standard_normal(20) + 1.0)
        err = finite_diff_check(lambda: nm.vsum(theta * theta), [theta], max_coords_per_param=None)
        assert err < 1e-8

    def test_reference_defaults(self):
        import inspect

        sig = inspect.signature(finite_diff_check)
        assert sig.parameters["eps"].default == 1e-5


class TestScalarOps:
    def test_elementwise_chain_gradients(self, rng):
        precision.set_precision("f64")
        x = Var(np.abs(rng.standard_normal((3, 4))) + 0.5)
        y = Var(np.abs(rng.standard_normal((3, 4))) + 0.5)

        def f():
            z = nm.vexp(nm.vlog(x) * 0.5) / nm.vsqrt(y) - x**1.5
            return nm.mean_all(z * z)

        err = finite_diff_check(f, [x, y], max_coords_per_param=None)
        assert err < 1e-6

    def test_logsumexp_matches_direct(self, rng):
        x = rng.standard_normal((4, 6)) * 20.0  # large logits: needs stabilization
        got = nm.logsumexp(Var(x), axis=1, keepdims=False).value
        expected = np.log(np.exp(x - x.max(1, keepdims=True)).sum(1)) + x.max(1)
        np.testing.assert_allclose(got, expected, rtol=1e-12)

    def test_logsumexp_gradient(self, rng):
        precision.set_precision("f64")
        x = Var(rng.standard_normal((3, 5)))
        err = finite_diff_check(lambda: nm.vsum(nm.logsumexp(x, axis=1)), [x],
                                max_coords_per_param=None)
        assert err < 1e-6

    def test_detach_stops_gradient(self, rng):
        x = Var(rng.standard_normal(4))
        nm.vsum(nm.detach(x) * x).backward()
        np.testing.assert_allclose(x.grad, x.value)  # only the live branch contributes


class TestFiniteGuard:
    def test_overflow_raises_when_enabled(self):
        nm.set_check_finite(True)
        try:
            with pytest.raises(Exception) as exc_info:
                with np.errstate(over="ignore"):
                    nm.vexp(Var(np.array([1000.0], dtype=np.float32)))
            from crossbrain.errors import NumericalError

            assert isinstance(exc_info.value, NumericalError)
        finally:
            nm.set_check_finite(False)

    def test_disabled_by_default(self):
        with np.errstate(over="ignore"):
            out = nm.vexp(Var(np.array([1000.0], dtype=np.float32)))
        assert np.isinf(out.value[0])
