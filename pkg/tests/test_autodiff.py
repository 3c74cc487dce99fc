"""
Tests for forward-mode duals, nested second derivatives and the reverse tape.
"""

import numpy as np
import pytest

from latent_accel import autodiff as ad
from latent_accel.errors import ErrorType, LatentSimError
from latent_accel.systems.linear import LINEAR_MATRIX, linear_rhs

W = np.array([[0.5, -1.0, 0.3], [0.2, 0.1, -0.7], [1.1, 0.4, 0.0]])


def smooth_map(x):
    return ad.mul(ad.tanh(ad.matmul(W, x)), ad.exp(ad.sin(x)))


def central_difference(f, x, v, h=1e-6):
    return (f(x + h * v) - f(x - h * v)) / (2 * h)


class TestForwardMode:
    """J v from dual numbers"""

    def test_linear_map_gives_matrix_column(self):
        x = np.array([0.3, -0.2, 0.5])
        out = ad.jvp(linear_rhs, x, np.array([1.0, 0.0, 0.0]))
        np.testing.assert_allclose(out, [33.0, 42.0, 37.0])

    def test_batched_linear_map(self):
        x = np.ones((4, 3))
        v = np.tile([0.0, 1.0, 0.0], (4, 1))
        out = ad.jvp(linear_rhs, x, v)
        np.testing.assert_allclose(out, np.tile(LINEAR_MATRIX[:, 1], (4, 1)))

    def test_identity(self):
        x = np.array([1.0, 2.0])
        v = np.array([-3.0, 0.5])
        np.testing.assert_array_equal(ad.jvp(lambda u: u, x, v), v)

    def test_matches_central_difference(self, rng):
        x = rng.normal(size=3)
        v = rng.normal(size=3)
        np.testing.assert_allclose(ad.jvp(smooth_map, x, v),
                                   central_difference(smooth_map, x, v), atol=1e-7)

    def test_value_is_returned(self, rng):
        x = rng.normal(size=3)
        value, _ = ad.value_and_jvp(smooth_map, x, np.ones(3))
        np.testing.assert_allclose(value, smooth_map(x))

    def test_linear_in_direction(self, rng):
        x, v, w = rng.normal(size=(3, 3))
        combined = ad.jvp(smooth_map, x, 2.0 * v - 0.5 * w)
        separate = 2.0 * ad.jvp(smooth_map, x, v) - 0.5 * ad.jvp(smooth_map, x, w)
        np.testing.assert_allclose(combined, separate, atol=1e-12)

    def test_constant_function_has_zero_tangent(self):
        out = ad.jvp(lambda x: np.ones(3), np.zeros(3), np.ones(3))
        np.testing.assert_array_equal(out, np.zeros(3))

    def test_direction_shape_mismatch(self):
        with pytest.raises(ValueError):
            ad.jvp(smooth_map, np.zeros(3), np.zeros(2))

    def test_solve_and_concat(self, rng):
        M = np.eye(3) * 3.0 + 0.1 * rng.normal(size=(3, 3))

        def f(x):
            return ad.concat([ad.solve(M, x), ad.getitem(x, slice(0, 1))], axis=-1)

        x, v = rng.normal(size=(2, 3))
        np.testing.assert_allclose(ad.jvp(f, x, v), central_difference(f, x, v), atol=1e-8)


class TestSecondOrder:
    """Nested duals"""

    def test_cube_second_derivative(self):
        seed = ad.Dual2(np.array(2.0), np.array(1.0), np.array(1.0))
        x = seed.variable
        value, d1, d2, d1d2 = seed.parts(x * x * x)
        assert float(value) == pytest.approx(8.0)
        assert float(d1) == pytest.approx(12.0)
        assert float(d2) == pytest.approx(12.0)
        assert float(d1d2) == pytest.approx(12.0)

    def test_second_directional_matches_difference_of_jvps(self, rng):
        x, v, w = rng.normal(size=(3, 3))
        h = 1e-5
        expected = (ad.jvp(smooth_map, x + h * w, v) - ad.jvp(smooth_map, x - h * w, v)) / (2 * h)
        np.testing.assert_allclose(ad.second_directional(smooth_map, x, v, w), expected,
                                   atol=1e-6)

    def test_second_derivative_of_linear_map_vanishes(self, rng):
        x, v, w = rng.normal(size=(3, 3))
        np.testing.assert_allclose(ad.second_directional(linear_rhs, x, v, w), np.zeros(3),
                                   atol=1e-12)


class TestReverseMode:
    """Tape gradients"""

    def test_half_squared_norm(self, rng):
        p = rng.normal(size=5)
        value, g = ad.value_and_grad(lambda q: ad.mul(0.5, ad.sum_(ad.mul(q, q))), p)
        assert value == pytest.approx(0.5 * np.dot(p, p))
        np.testing.assert_allclose(g, p)

    def test_constant_loss_has_zero_gradient(self):
        value, g = ad.value_and_grad(lambda q: 3.0, np.ones(4))
        assert value == 3.0
        np.testing.assert_array_equal(g, np.zeros(4))

    def test_agrees_with_forward_mode(self, rng):
        def loss(p):
            return ad.sum_(ad.mul(ad.tanh(ad.matmul(W, p)), p))

        p, v = rng.normal(size=(2, 3))
        g = ad.grad(loss, p)
        assert np.dot(g, v) == pytest.approx(float(ad.jvp(loss, p, v)), rel=1e-10)

    def test_reverse_over_forward(self, rng):
        x0, v = rng.normal(size=(2, 3))

        def loss(p):
            tangent = ad.jvp(lambda x: ad.tanh(ad.mul(x, p)), x0, v)
            return ad.sum_(ad.mul(tangent, tangent))

        p = rng.normal(size=3)
        g = ad.grad(loss, p)
        h = 1e-6
        fd = np.array([(loss(p + h * e) - loss(p - h * e)) / (2 * h) for e in np.eye(3)])
        np.testing.assert_allclose(g, fd, rtol=1e-5, atol=1e-8)

    def test_solve_gradient(self, rng):
        M = np.eye(3) * 4.0 + 0.2 * rng.normal(size=(3, 3))
        b = rng.normal(size=3)

        def loss(p):
            return ad.sum_(ad.solve(ad.add(M, ad.mul(np.eye(3), p)), b))

        p = 0.1 * rng.normal(size=3)
        h = 1e-6
        fd = np.array([(loss(p + h * e) - loss(p - h * e)) / (2 * h) for e in np.eye(3)])
        np.testing.assert_allclose(ad.grad(loss, p), fd, rtol=1e-6, atol=1e-9)

    def test_repeated_index_accumulates(self):
        g = ad.grad(lambda p: ad.sum_(ad.getitem(p, np.array([0, 0, 1]))), np.zeros(3))
        np.testing.assert_array_equal(g, [2.0, 1.0, 0.0])

    def test_log_at_zero_names_primitive(self):
        with np.errstate(divide="ignore", invalid="ignore"):
            with pytest.raises(LatentSimError) as info:
                ad.value_and_grad(lambda p: ad.sum_(ad.log(p)), np.array([0.0, 1.0]))
        assert info.value.error_type == ErrorType.NON_FINITE
        assert info.value.context['primitive'] == "log"

    def test_variables_from_two_tapes_do_not_mix(self):
        a = ad.Tape().variable(np.ones(2))
        b = ad.Tape().variable(np.ones(2))
        with pytest.raises(ValueError):
            ad.add(a, b)
