"""Tangent propagation checks: every dual primitive against central
finite differences of its value path."""

import numpy as np
import pytest

from hesslens import dual as D
from hesslens.linalg import Rng, gaussian


def _fd_tangent(f, x, v, h=1e-6):
    return (f(x + h * v) - f(x - h * v)) / (2 * h)


def _check(f, shape, seed, atol=1e-7):
    rng = Rng(seed)
    x = gaussian(rng, int(np.prod(shape))).reshape(shape)
    v = gaussian(rng, int(np.prod(shape))).reshape(shape)
    out = f(D.Dual(x, v))
    np.testing.assert_allclose(out.t, _fd_tangent(f, x, v), atol=atol)
    np.testing.assert_array_equal(out.v, f(x))


class TestPrimitives:
    def test_add_mul_div(self):
        c = np.array([2.0, -3.0, 0.5])
        _check(lambda x: (x * c + 1.5) / (x * x + 2.0), (3,), 1)

    def test_exp_log_sqrt(self):
        _check(lambda x: D.log(D.exp(x) + 1.0), (4,), 2)
        _check(lambda x: D.sqrt(x * x + 1.0), (4,), 3)

    def test_tanh_relu(self):
        _check(lambda x: D.tanh(x), (5,), 4)
        # keep FD probes away from the relu kink
        rng = Rng(5)
        x = gaussian(rng, 6)
        x[np.abs(x) < 0.1] += 0.5
        v = gaussian(rng, 6)
        out = D.relu(D.Dual(x, v))
        np.testing.assert_allclose(out.t, _fd_tangent(D.relu, x, v), atol=1e-7)

    def test_matmul_both_sides(self):
        rng = Rng(6)
        a = gaussian(rng, 12).reshape(3, 4)
        _check(lambda x: x @ a.T, (2, 4), 7)
        _check(lambda x: a @ x, (4, 2), 8)

    def test_reductions(self):
        _check(lambda x: D.asum(x, axis=0), (3, 4), 9)
        _check(lambda x: D.amean(x * x, axis=1, keepdims=True), (3, 4), 10)

    def test_transpose_reshape_gather(self):
        idx = np.array([1, 0, 2])
        _check(lambda x: D.take_per_row(x.T @ x, idx), (3, 3), 11)
        _check(lambda x: D.reshape(x, (6,)), (2, 3), 12)

    def test_rowmax_is_constant(self):
        x = D.Dual(np.array([[1.0, 2.0], [3.0, 0.0]]), np.ones((2, 2)))
        m = D.rowmax_const(x)
        assert isinstance(m, np.ndarray)
        np.testing.assert_array_equal(m, [[2.0], [3.0]])

    def test_reflected_ops_with_ndarray(self):
        # ndarray on the left must defer to Dual, not elementwise-object
        x = D.Dual(np.ones(3), np.ones(3))
        out = np.array([1.0, 2.0, 3.0]) + x
        assert isinstance(out, D.Dual)
        np.testing.assert_array_equal(out.v, [2.0, 3.0, 4.0])
        out = np.array([2.0, 2.0, 2.0]) / x
        np.testing.assert_array_equal(out.t, [-2.0, -2.0, -2.0])

    def test_broadcast_tangent_shape(self):
        bias = D.Dual(np.ones(4), np.ones(4))
        batch = np.zeros((5, 4))
        out = batch + bias
        assert out.v.shape == (5, 4) and out.t.shape == (5, 4)


class TestComposition:
    def test_two_layer_composition_vs_fd(self):
        rng = Rng(42)
        w1 = gaussian(rng, 12).reshape(4, 3)
        x = gaussian(rng, 8).reshape(2, 4)
        v = gaussian(rng, 12).reshape(4, 3)

        def f(w):
            h = D.tanh(x @ w)
            z = D.exp(D.amean(h * h, axis=0))
            return D.asum(D.log(z + 1.0))

        out = f(D.Dual(w1, v))
        fd = _fd_tangent(lambda w: f(w), w1, v, h=1e-6)
        np.testing.assert_allclose(out.t, fd, rtol=1e-6, atol=1e-8)
