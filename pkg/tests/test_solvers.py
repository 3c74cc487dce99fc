"""
Tests for the fixed-step and adaptive integrators and the MSE metric.
"""

import math

import numpy as np
import pytest

from latent_accel.errors import ErrorType, LatentSimError
from latent_accel.solvers import SolveResult, SolverKind, SolverSpec, integrate, mse
from latent_accel.systems import (VlmConfig, leapfrog_config, make_system, trim_state,
                                  vortex_system)


def minus_x(x):
    return -x


class TestFixedStep:
    """Euler and RK4"""

    def test_single_euler_step(self):
        result = integrate(minus_x, [1.0], 0.0, 0.1, SolverSpec.euler(0.1, n_output=2))
        assert result.final_state[0] == pytest.approx(0.9)
        assert result.n_fcalls == 1

    @pytest.mark.parametrize("dt,steps", [(0.1, 10), (0.05, 20), (0.025, 40)])
    def test_euler_call_count(self, dt, steps):
        result = integrate(minus_x, [1.0], 0.0, 1.0, SolverSpec.euler(dt))
        assert result.n_steps == steps
        assert result.n_fcalls == steps

    def test_rk4_uses_four_calls_per_step(self):
        result = integrate(minus_x, [1.0], 0.0, 1.0, SolverSpec.rk4(0.1))
        assert result.n_fcalls == 40

    def test_last_step_is_clipped(self):
        result = integrate(minus_x, [1.0], 0.0, 1.0, SolverSpec.euler(0.3))
        assert result.n_steps == 4
        assert result.times[-1] == 1.0
        assert result.final_state[0] == pytest.approx(0.7 ** 3 * 0.9)

    def test_rk4_is_fourth_order(self):
        errors = []
        for dt in (0.1, 0.05):
            result = integrate(minus_x, [1.0], 0.0, 1.0, SolverSpec.rk4(dt))
            errors.append(abs(result.final_state[0] - math.exp(-1.0)))
        assert 13.0 < errors[0] / errors[1] < 19.0

    def test_output_grid_hits_euler_nodes(self):
        result = integrate(minus_x, [1.0], 0.0, 1.0, SolverSpec.euler(0.1, n_output=11))
        np.testing.assert_allclose(result.states[:, 0], 0.9 ** np.arange(11), atol=1e-12)

    def test_dense_output_between_nodes(self):
        result = integrate(minus_x, [1.0], 0.0, 1.0, SolverSpec.rk4(0.01, n_output=37))
        np.testing.assert_allclose(result.states[:, 0], np.exp(-result.times), atol=1e-6)

    def test_last_interval_dense_output_is_fourth_order(self):
        errors = []
        for dt in (0.1, 0.05):
            result = integrate(minus_x, [1.0], 0.0, 2.0, SolverSpec.rk4(dt, n_output=201))
            inside = (result.times > 2.0 - dt + 1e-9) & (result.times < 2.0 - 1e-9)
            exact = np.exp(-result.times[inside])
            errors.append(np.max(np.abs(result.states[inside, 0] - exact)))
        assert errors[0] / errors[1] > 12.0

    def test_last_interval_after_clipped_step(self):
        result = integrate(minus_x, [1.0], 0.0, 1.0, SolverSpec.rk4(0.03, n_output=1001))
        np.testing.assert_allclose(result.states[:, 0], np.exp(-result.times), atol=1e-8)

    def test_euler_is_first_order(self):
        errors = []
        for dt in (0.01, 0.005):
            result = integrate(minus_x, [1.0], 0.0, 1.0, SolverSpec.euler(dt))
            errors.append(abs(result.final_state[0] - math.exp(-1.0)))
        assert 0.9 <= math.log2(errors[0] / errors[1]) <= 1.1

    def test_blow_up_is_reported(self):
        with np.errstate(over="ignore", invalid="ignore"):
            with pytest.raises(LatentSimError) as info:
                integrate(lambda x: x * x, [10.0], 0.0, 2.0, SolverSpec.euler(0.1))
        assert info.value.error_type == ErrorType.NON_FINITE
        assert 'time' in info.value.context

    def test_step_limit(self):
        with pytest.raises(LatentSimError) as info:
            integrate(minus_x, [1.0], 0.0, 2.0, SolverSpec.euler(1e-3, max_steps=100))
        assert info.value.error_type == ErrorType.MAX_STEPS


class TestDopri5:
    """Adaptive Dormand-Prince 5(4)"""

    def test_exponential_decay_accuracy(self):
        result = integrate(minus_x, [1.0], 0.0, 1.0, SolverSpec.dopri5(1e-10))
        assert abs(result.final_state[0] - math.exp(-1.0)) <= 1e-7

    def test_dense_output_accuracy(self):
        result = integrate(minus_x, [1.0], 0.0, 1.0, SolverSpec.dopri5(1e-10, n_output=51))
        np.testing.assert_allclose(result.states[:, 0], np.exp(-result.times), atol=1e-7)

    @pytest.mark.parametrize("tol", [1e-3, 1e-6, 1e-9])
    def test_first_same_as_last_call_count(self, tol):
        x0 = np.array([1.0, -0.5])
        result = integrate(lambda x: np.array([x[1], -4.0 * x[0]]), x0, 0.0, 3.0,
                           SolverSpec.dopri5(tol))
        assert result.n_fcalls == 1 + 6 * (result.n_steps + result.n_rejected)

    def test_tighter_tolerance_costs_more(self):
        loose = integrate(minus_x, [1.0], 0.0, 5.0, SolverSpec.dopri5(1e-4))
        tight = integrate(minus_x, [1.0], 0.0, 5.0, SolverSpec.dopri5(1e-10))
        assert tight.n_fcalls > loose.n_fcalls

    def test_tolerance_sweep_order(self):
        # rotation whose angular speed grows with radius; exact solution is a rotation
        def rhs(x):
            r2 = x[0] ** 2 + x[1] ** 2
            return np.array([-x[1] * r2, x[0] * r2])

        x0 = np.array([1.0, 0.0])
        exact = np.array([math.cos(20.0), math.sin(20.0)])
        calls, errors = [], []
        for tol in (1e-6, 1e-7, 1e-8, 1e-9, 1e-10):
            result = integrate(rhs, x0, 0.0, 20.0, SolverSpec.dopri5(tol))
            calls.append(result.n_fcalls)
            errors.append(np.max(np.abs(result.final_state - exact)))
        slope = np.polyfit(np.log(calls), np.log(errors), 1)[0]
        assert -slope >= 4.5

    @pytest.mark.parametrize("name", ["linear", "vortex", "vlm"])
    def test_final_error_within_tolerance_envelope(self, name):
        tol = 1e-6
        if name == "linear":
            system, x0 = make_system("linear"), np.array([1.0, -0.5, 0.5])
        elif name == "vortex":
            cfg, x0 = leapfrog_config()
            system = vortex_system(cfg)
        else:
            cfg = VlmConfig(wing_panels=20, tail_panels=5)
            system = make_system("vlm", {"wing_panels": 20, "tail_panels": 5})
            x0 = trim_state(cfg) + np.array([1.0, -0.5, 0.02, 0.01])
        t0, tf = system.horizon
        result = integrate(system, x0, t0, tf, SolverSpec.dopri5(tol))
        if system.exact is not None:
            reference = system.exact(x0, np.array([tf]))[-1]
        else:
            reference = integrate(system, x0, t0, tf, SolverSpec.dopri5(1e-12)).final_state
        scale = max(1.0, np.max(np.abs(reference)))
        assert np.max(np.abs(result.final_state - reference)) <= 100 * tol * scale

    def test_finite_time_singularity(self):
        with pytest.raises(LatentSimError) as info:
            integrate(lambda x: x * x, [1.0], 0.0, 2.0, SolverSpec.dopri5(1e-8, max_steps=100000))
        assert info.value.error_type in (ErrorType.STEP_UNDERFLOW, ErrorType.MAX_STEPS)
        assert info.value.recoverable

    def test_step_limit(self):
        with pytest.raises(LatentSimError) as info:
            integrate(minus_x, [1.0], 0.0, 10.0, SolverSpec.dopri5(1e-12, max_steps=3))
        assert info.value.error_type == ErrorType.MAX_STEPS


class TestIntegrateArguments:
    """Validation of spans, states and specs"""

    def test_empty_span(self):
        with pytest.raises(LatentSimError) as info:
            integrate(minus_x, [1.0], 1.0, 1.0, SolverSpec.euler(0.1))
        assert info.value.error_type == ErrorType.CONFIGURATION

    def test_non_finite_initial_state(self):
        with pytest.raises(LatentSimError) as info:
            integrate(minus_x, [np.nan], 0.0, 1.0, SolverSpec.euler(0.1))
        assert info.value.error_type == ErrorType.NON_FINITE

    @pytest.mark.parametrize("kwargs", [
        {'kind': 'euler', 'dt': 0.0},
        {'kind': 'rk4', 'dt': -1.0},
        {'kind': 'rk4'},
        {'kind': 'dopri5', 'rtol': 0.0},
        {'kind': 'euler', 'dt': 0.1, 'n_output': 1},
        {'kind': 'euler', 'dt': 0.1, 'max_steps': 0},
    ])
    def test_invalid_specs(self, kwargs):
        with pytest.raises(LatentSimError) as info:
            SolverSpec(**kwargs)
        assert info.value.error_type == ErrorType.CONFIGURATION

    def test_unknown_kind(self):
        with pytest.raises(ValueError):
            SolverSpec("midpoint", dt=0.1)

    def test_setting_is_dt_or_tolerance(self):
        assert SolverSpec.euler(0.05).setting == 0.05
        assert SolverSpec.dopri5(1e-7).setting == 1e-7
        assert SolverSpec.dopri5(1e-7).kind == SolverKind.DOPRI5

    def test_output_grid(self):
        result = integrate(minus_x, [2.0], 0.5, 1.5, SolverSpec.rk4(0.1, n_output=5))
        np.testing.assert_allclose(result.times, [0.5, 0.75, 1.0, 1.25, 1.5])
        assert result.states[0, 0] == 2.0


def _result(states, times=None):
    states = np.asarray(states, dtype=np.float64)
    times = np.linspace(0.0, 1.0, len(states)) if times is None else times
    return SolveResult(times, states, n_fcalls=1, n_steps=1)


class TestMse:
    """Trajectory error against a reference"""

    def test_identical_is_zero(self):
        ref = _result(np.ones((5, 2)))
        assert mse(_result(np.ones((5, 2))), ref) == 0.0

    def test_constant_offset(self):
        ref = _result(np.zeros((5, 2)))
        assert mse(_result(np.full((5, 2), 0.1)), ref) == pytest.approx(0.01)

    def test_endpoint_only(self):
        states = np.zeros((5, 1))
        states[-1] = 2.0
        assert mse(_result(states), _result(np.zeros((5, 1))), endpoint_only=True) == 4.0

    def test_non_finite_is_infinite(self):
        states = np.zeros((3, 1))
        states[1] = np.nan
        assert mse(_result(states), _result(np.zeros((3, 1)))) == math.inf

    def test_grid_mismatch(self):
        with pytest.raises(LatentSimError) as info:
            mse(_result(np.zeros((5, 1))), _result(np.zeros((6, 1))))
        assert info.value.error_type == ErrorType.GRID_MISMATCH
