"""
Tests for the linear, decay and point-vortex benchmark systems.
"""

import numpy as np
import pytest

from latent_accel.errors import ErrorType, LatentSimError
from latent_accel.solvers import SolverSpec, integrate
from latent_accel.systems import (LINEAR_MATRIX, SYSTEM_NAMES, VortexConfig, leapfrog_config,
                                  linear_exact, make_system, vortex_invariants, vortex_rhs,
                                  vortex_system)


class TestLinearSystem:
    """Three-state linear benchmark"""

    def test_matrix_entries(self):
        np.testing.assert_array_equal(LINEAR_MATRIX, [[33, 17, -70], [42, 18, -80], [37, 18, -75]])

    def test_eigenvalues(self):
        eig = np.sort_complex(np.linalg.eigvals(LINEAR_MATRIX))
        np.testing.assert_allclose(eig, [-20.0, -2.0 - 1.0j, -2.0 + 1.0j], atol=1e-9)

    def test_exact_solution_satisfies_ode(self, rng):
        x0 = rng.uniform(-1, 1, size=3)
        h = 1e-6
        derivative = (linear_exact(x0, 0.5 + h) - linear_exact(x0, 0.5 - h)) / (2 * h)
        np.testing.assert_allclose(derivative, LINEAR_MATRIX @ linear_exact(x0, 0.5),
                                   rtol=1e-6, atol=1e-6)

    def test_exact_solution_starts_at_x0(self, rng):
        x0 = rng.uniform(-1, 1, size=3)
        np.testing.assert_allclose(linear_exact(x0, 0.0), x0, atol=1e-12)

    def test_exact_solution_on_a_grid(self, rng):
        x0 = rng.uniform(-1, 1, size=3)
        times = np.linspace(0, 2, 7)
        states = linear_exact(x0, times)
        assert states.shape == (7, 3)
        np.testing.assert_allclose(states[3], linear_exact(x0, times[3]))

    def test_batch_rhs(self, linear, rng):
        x = rng.normal(size=(4, 3))
        np.testing.assert_allclose(linear.rhs(x), x @ LINEAR_MATRIX.T)

    def test_horizon_and_box(self, linear):
        assert linear.horizon == (0.0, 2.0)
        np.testing.assert_array_equal(linear.lower, -np.ones(3))
        np.testing.assert_array_equal(linear.upper, np.ones(3))


class TestDecaySystem:

    def test_exact_solution(self, decay):
        np.testing.assert_allclose(decay.exact(np.array([0.5]), 0.1), [0.5 * np.exp(-2.0)])

    def test_rhs(self, decay):
        np.testing.assert_allclose(decay.rhs(np.array([0.5])), [-10.0])


class TestFunctionCounter:
    """Evaluations of f are counted per state row"""

    def test_single_and_batch_calls(self, linear):
        system = linear.with_counter()
        system(np.zeros(3))
        system(np.zeros((5, 3)))
        assert system.counter.count == 6

    def test_with_counter_starts_fresh(self, linear):
        linear(np.zeros(3))
        assert linear.with_counter().counter.count == 0

    def test_reset_returns_previous(self, linear):
        system = linear.with_counter()
        system(np.zeros((2, 3)))
        assert system.counter.reset() == 2
        assert system.counter.count == 0

    def test_integrator_calls_match_counter(self, linear):
        system = linear.with_counter()
        result = integrate(system, np.ones(3), 0.0, 1.0, SolverSpec.rk4(0.1))
        assert system.counter.count == result.n_fcalls == 40

    def test_scaled_box(self, linear):
        lower, upper = linear.scaled_box(1.5)
        np.testing.assert_allclose(lower, -1.5 * np.ones(3))
        np.testing.assert_allclose(upper, 1.5 * np.ones(3))


class TestPointVortices:
    """Induced velocities and conserved quantities"""

    def test_co_rotating_pair_speed(self):
        cfg = VortexConfig(n_particles=2, circulations=(1.0, 1.0), core_radius=0.0)
        u = vortex_rhs(np.array([0.0, 0.0, 1.0, 0.0]), cfg)
        np.testing.assert_allclose(u, [0.0, -1 / (2 * np.pi), 0.0, 1 / (2 * np.pi)], atol=1e-15)

    def test_counter_rotating_pair_translates(self):
        cfg = VortexConfig(n_particles=2, circulations=(1.0, -1.0), core_radius=0.0)
        u = vortex_rhs(np.array([0.0, 0.0, 1.0, 0.0]), cfg)
        np.testing.assert_allclose(u[:2], u[2:], atol=1e-15)
        assert u[1] == pytest.approx(1 / (2 * np.pi))

    def test_batch_matches_rows(self, vortex, rng):
        x = rng.uniform(-1, 1, size=(3, 8))
        batch = vortex.rhs(x)
        for i in range(3):
            np.testing.assert_allclose(batch[i], vortex.rhs(x[i]), atol=1e-14)

    def test_invariants_are_conserved(self):
        cfg, x0 = leapfrog_config()
        system = vortex_system(cfg)
        result = integrate(system.rhs, x0, 0.0, 2.0, SolverSpec.dopri5(1e-10, n_output=5))
        start = vortex_invariants(x0, cfg)
        end = vortex_invariants(result.final_state, cfg)
        for key in ('impulse_x', 'impulse_y', 'hamiltonian'):
            assert end[key] == pytest.approx(start[key], abs=1e-7)

    def test_invariants_hold_over_default_horizon(self):
        cfg, x0 = leapfrog_config()
        system = vortex_system(cfg)
        t0, tf = system.horizon
        result = integrate(system.rhs, x0, t0, tf, SolverSpec.dopri5(1e-12, n_output=25))
        start = vortex_invariants(x0, cfg)
        along = vortex_invariants(result.states, cfg)
        for key in ('impulse_x', 'impulse_y', 'hamiltonian'):
            scale = max(1.0, abs(start[key]))
            assert np.max(np.abs(along[key] - start[key])) <= 1e-6 * scale

    def test_invariants_on_batches(self):
        cfg, x0 = leapfrog_config()
        values = vortex_invariants(np.stack([x0, x0]), cfg)
        assert values['hamiltonian'].shape == (2,)

    def test_circulation_count_is_checked(self):
        with pytest.raises(ValueError):
            VortexConfig(n_particles=3, circulations=(1.0, 1.0))

    def test_default_box(self, vortex):
        assert vortex.dim == 8
        assert vortex.horizon == (0.0, 12.0)


class TestMakeSystem:
    """Lookup by name"""

    @pytest.mark.parametrize("name", ["linear", "decay", "vortex"])
    def test_known_names(self, name):
        assert make_system(name).name == name
        assert name in SYSTEM_NAMES

    def test_unknown_name(self):
        with pytest.raises(LatentSimError) as info:
            make_system("lorenz")
        assert info.value.error_type == ErrorType.CONFIGURATION

    def test_bad_parameters(self):
        with pytest.raises(LatentSimError) as info:
            make_system("vortex", {"n_particles": 1})
        assert info.value.error_type == ErrorType.CONFIGURATION

    def test_unexpected_keyword(self):
        with pytest.raises(LatentSimError) as info:
            make_system("linear", {"stiffness": 3})
        assert info.value.error_type == ErrorType.CONFIGURATION

    def test_horizon_override(self):
        system = make_system("decay", {"rate": 5.0, "horizon": [0.0, 3.0]})
        assert system.horizon == (0.0, 3.0)
        np.testing.assert_allclose(system.rhs(np.array([1.0])), [-5.0])
