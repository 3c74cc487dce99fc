"""
Explicit integrators with exact right-hand-side call accounting.

Euler and RK4 march with a fixed step (the last one clipped to tf); Dopri5 is the
Dormand-Prince 5(4) pair with FSAL reuse and step-size control. Every solver
reports its states on a uniform output grid: fixed-step solvers through Hermite
interpolation on their step nodes, Dopri5 through its continuous extension.
No interpolation costs an extra right-hand-side call. Right-hand sides are
autonomous, f(x), so stage times never enter.
"""

import logging
import math
import time
from dataclasses import dataclass, field
from enum import Enum
from typing import Callable, Optional

import numpy as np
from typing_extensions import Self

from .errors import ErrorType, LatentSimError

logger = logging.getLogger(__name__)


class SolverKind(str, Enum):
    EULER = "euler"
    RK4 = "rk4"
    DOPRI5 = "dopri5"


UNDERFLOW_FRACTION = 1e-14

# Dormand-Prince 5(4) tableau
_A = [
    [],
    [1 / 5],
    [3 / 40, 9 / 40],
    [44 / 45, -56 / 15, 32 / 9],
    [19372 / 6561, -25360 / 2187, 64448 / 6561, -212 / 729],
    [9017 / 3168, -355 / 33, 46732 / 5247, 49 / 176, -5103 / 18656],
]
_B = np.array([35 / 384, 0.0, 500 / 1113, 125 / 192, -2187 / 6784, 11 / 84, 0.0])
# fifth minus fourth order weights
_E = np.array([71 / 57600, 0.0, -71 / 16695, 71 / 1920, -17253 / 339200, 22 / 525, -1 / 40])
# continuous extension (Hairer, contd5)
_D = np.array([
    -12715105075 / 11282082432, 0.0, 87487479700 / 32700410799,
    -10690763975 / 1880347072, 701980252875 / 199316789632,
    -1453857185 / 822651844, 69997945 / 29380423,
])

SAFETY = 0.9
FACTOR_MIN = 0.2
FACTOR_MAX = 5.0


@dataclass(frozen=True)
class SolverSpec:
    """Solver choice plus its step or tolerance settings."""

    kind: SolverKind
    dt: Optional[float] = None
    rtol: float = 1e-6
    atol: float = 1e-6
    max_steps: int = 1_000_000
    n_output: int = 201

    def __post_init__(self):
        object.__setattr__(self, "kind", SolverKind(self.kind))
        problems = []
        if self.kind in (SolverKind.EULER, SolverKind.RK4):
            if self.dt is None or not self.dt > 0:
                problems.append(f"dt must be positive for {self.kind.value}, got {self.dt}")
        if not (self.rtol > 0 and self.atol > 0):
            problems.append(f"rtol and atol must be positive, got {self.rtol}, {self.atol}")
        if self.max_steps < 1:
            problems.append("max_steps must be at least 1")
        if self.n_output < 2:
            problems.append("output grid needs at least 2 points")
        if problems:
            raise LatentSimError(
                message="; ".join(problems),
                error_type=ErrorType.CONFIGURATION,
                context={'kind': self.kind.value},
            )

    @property
    def setting(self) -> float:
        """The swept quantity: dt for fixed-step solvers, tolerance for Dopri5."""
        return float(self.dt) if self.kind != SolverKind.DOPRI5 else float(self.rtol)

    @classmethod
    def euler(cls, dt: float, **kwargs) -> Self:
        return cls(SolverKind.EULER, dt=dt, **kwargs)

    @classmethod
    def rk4(cls, dt: float, **kwargs) -> Self:
        return cls(SolverKind.RK4, dt=dt, **kwargs)

    @classmethod
    def dopri5(cls, tol: float, atol: Optional[float] = None, **kwargs) -> Self:
        return cls(SolverKind.DOPRI5, rtol=tol, atol=tol if atol is None else atol, **kwargs)


@dataclass
class SolveResult:
    times: np.ndarray
    states: np.ndarray
    n_fcalls: int
    n_steps: int
    n_rejected: int = 0
    wall_time: float = 0.0
    kind: Optional[SolverKind] = None
    extras: dict = field(default_factory=dict)

    @property
    def final_state(self) -> np.ndarray:
        return self.states[-1]


def output_grid(t0: float, tf: float, n_output: int) -> np.ndarray:
    return np.linspace(t0, tf, n_output)


def _check_state(x: np.ndarray, t: float, n_fcalls: int) -> None:
    if not np.all(np.isfinite(x)):
        raise LatentSimError(
            message="Non-finite state during integration",
            error_type=ErrorType.NON_FINITE,
            context={'time': t, 'n_fcalls': n_fcalls},
        )


def _hermite(nodes: np.ndarray, states: np.ndarray, derivs: np.ndarray,
             grid: np.ndarray) -> np.ndarray:
    """Cubic Hermite through step nodes.

    derivs[i] = f(states[i]) is known for every node but the last one, so the
    last interval takes the cubic through the two nodes before it, its end node
    and the slope at its start. A single step falls back to a quadratic.
    """
    n_intervals = len(nodes) - 1
    idx = np.clip(np.searchsorted(nodes, grid, side="right") - 1, 0, n_intervals - 1)
    h = nodes[idx + 1] - nodes[idx]
    s = ((grid - nodes[idx]) / h).reshape((-1,) + (1,) * (states.ndim - 1))
    hb = h.reshape(s.shape)

    x0, x1, f0 = states[idx], states[idx + 1], derivs[idx]
    last = idx == n_intervals - 1
    f1 = derivs[np.minimum(idx + 1, n_intervals - 1)]

    cubic = ((2 * s ** 3 - 3 * s ** 2 + 1) * x0 + (s ** 3 - 2 * s ** 2 + s) * hb * f0
             + (-2 * s ** 3 + 3 * s ** 2) * x1 + (s ** 3 - s ** 2) * hb * f1)
    if n_intervals == 1:
        tail = x0 + hb * f0 * s + (x1 - x0 - hb * f0) * s ** 2
    else:
        h_prev = nodes[-2] - nodes[-3]
        h_last = nodes[-1] - nodes[-2]
        ratio = h_last / h_prev
        x_prev, x_mid, x_end, f_mid = states[-3], states[-2], states[-1], derivs[-1]
        # p(s) = x_mid + s h f_mid + c2 s^2 + c3 s^3 with p(1) = x_end, p(-1/ratio) = x_prev
        r_end = x_end - x_mid - h_last * f_mid
        r_prev = (x_prev - x_mid + h_prev * f_mid) * ratio ** 2
        c2 = (r_end + r_prev * ratio) / (1.0 + ratio)
        c3 = r_end - c2
        tail = x_mid + s * h_last * f_mid + c2 * s ** 2 + c3 * s ** 3
    out = np.where(last.reshape(s.shape), tail, cubic)
    # exact node values where the grid hits a node
    on_node = np.isclose(s, 0.0, atol=1e-12)
    return np.where(on_node, x0, out)


def _fixed_step(rhs: Callable, x0: np.ndarray, t0: float, tf: float,
                spec: SolverSpec, grid: np.ndarray) -> SolveResult:
    span = tf - t0
    n_steps = max(1, int(math.ceil(span / spec.dt - 1e-9)))
    if n_steps > spec.max_steps:
        raise LatentSimError(
            message="Fixed step would exceed the step limit",
            error_type=ErrorType.MAX_STEPS,
            context={'n_steps': n_steps, 'max_steps': spec.max_steps},
        )
    nodes = np.minimum(t0 + spec.dt * np.arange(n_steps + 1), tf)
    nodes[-1] = tf
    states = np.empty((n_steps + 1,) + x0.shape)
    derivs = np.empty((n_steps,) + x0.shape)
    states[0] = x0
    x = x0
    n_fcalls = 0
    per_step = 1 if spec.kind == SolverKind.EULER else 4

    for i in range(n_steps):
        h = nodes[i + 1] - nodes[i]
        k1 = np.asarray(rhs(x))
        if spec.kind == SolverKind.EULER:
            x = x + h * k1
        else:
            k2 = np.asarray(rhs(x + 0.5 * h * k1))
            k3 = np.asarray(rhs(x + 0.5 * h * k2))
            k4 = np.asarray(rhs(x + h * k3))
            x = x + (h / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4)
        n_fcalls += per_step
        _check_state(x, float(nodes[i + 1]), n_fcalls)
        derivs[i] = k1
        states[i + 1] = x

    dense = _hermite(nodes, states, derivs, grid)
    dense[-1] = states[-1]
    return SolveResult(grid, dense, n_fcalls, n_steps, 0, kind=spec.kind)


def _rms(v: np.ndarray) -> float:
    return float(np.sqrt(np.mean(v * v)))


def _dopri5(rhs: Callable, x0: np.ndarray, t0: float, tf: float,
            spec: SolverSpec, grid: np.ndarray) -> SolveResult:
    span = tf - t0
    h_min = UNDERFLOW_FRACTION * span
    out = np.empty((len(grid),) + x0.shape)
    out[0] = x0
    next_out = 1

    t, x = t0, x0
    k = [None] * 7
    k[0] = np.asarray(rhs(x))
    n_fcalls = 1

    # first step from the initial slope only, no extra call
    scale = spec.atol + spec.rtol * np.abs(x)
    d0, d1 = _rms(x / scale), _rms(k[0] / scale)
    h = 1e-6 if (d0 < 1e-5 or d1 < 1e-5) else 0.01 * d0 / d1
    h = min(h, span)

    n_steps = n_rejected = 0
    rejected_last = False
    while t < tf:
        if n_steps + n_rejected >= spec.max_steps:
            raise LatentSimError(
                message="Dopri5 exceeded the step limit",
                error_type=ErrorType.MAX_STEPS,
                context={'time': t, 'max_steps': spec.max_steps, 'n_fcalls': n_fcalls},
            )
        if h < h_min:
            raise LatentSimError(
                message="Dopri5 step size underflow",
                error_type=ErrorType.STEP_UNDERFLOW,
                context={'time': t, 'step': h, 'n_fcalls': n_fcalls},
            )
        if t + h >= tf - h_min:
            h = tf - t

        for s in range(1, 6):
            inc = sum(a * k[j] for j, a in enumerate(_A[s]))
            k[s] = np.asarray(rhs(x + h * inc))
        x_new = x + h * sum(b * k[j] for j, b in enumerate(_B[:6]) if b != 0.0)
        k[6] = np.asarray(rhs(x_new))
        n_fcalls += 6

        err_vec = h * sum(e * k[j] for j, e in enumerate(_E) if e != 0.0)
        scale = spec.atol + spec.rtol * np.maximum(np.abs(x), np.abs(x_new))
        err = _rms(err_vec / scale)

        if not np.isfinite(err) or not np.all(np.isfinite(x_new)):
            n_rejected += 1
            rejected_last = True
            h *= FACTOR_MIN
            continue

        if err <= 1.0:
            ydiff = x_new - x
            bspl = h * k[0] - ydiff
            r = (x, ydiff, bspl, ydiff - h * k[6] - bspl,
                 h * sum(d * k[j] for j, d in enumerate(_D) if d != 0.0))
            t_new = tf if h == tf - t else t + h
            while next_out < len(grid) and grid[next_out] <= t_new + h_min:
                theta = (grid[next_out] - t) / h
                out[next_out] = r[0] + theta * (r[1] + (1 - theta) * (
                    r[2] + theta * (r[3] + (1 - theta) * r[4])))
                next_out += 1

            t, x = t_new, x_new
            k[0] = k[6]
            n_steps += 1
            factor = FACTOR_MAX if err == 0.0 else SAFETY * err ** -0.2
            factor = min(FACTOR_MAX, max(FACTOR_MIN, factor))
            if rejected_last:
                factor = min(factor, 1.0)
            rejected_last = False
            h *= factor
        else:
            n_rejected += 1
            rejected_last = True
            h *= max(FACTOR_MIN, SAFETY * err ** -0.2)

    out[-1] = x
    _check_state(out, t, n_fcalls)
    return SolveResult(grid, out, n_fcalls, n_steps, n_rejected, kind=spec.kind)


def integrate(rhs: Callable, x0, t0: float, tf: float, spec: SolverSpec) -> SolveResult:
    """Integrate dx/dt = rhs(x) from t0 to tf and sample on a uniform grid."""
    x0 = np.array(x0, dtype=np.float64)
    if not tf > t0:
        raise LatentSimError(
            message=f"Empty time span [{t0}, {tf}]",
            error_type=ErrorType.CONFIGURATION,
            context={'t0': t0, 'tf': tf},
        )
    _check_state(x0, t0, 0)
    grid = output_grid(t0, tf, spec.n_output)

    start = time.perf_counter()
    if spec.kind == SolverKind.DOPRI5:
        result = _dopri5(rhs, x0, t0, tf, spec, grid)
    else:
        result = _fixed_step(rhs, x0, t0, tf, spec, grid)
    result.wall_time = time.perf_counter() - start
    logger.debug("%s over [%g, %g]: %d calls, %d steps, %d rejected",
                 spec.kind.value, t0, tf, result.n_fcalls, result.n_steps, result.n_rejected)
    return result


def mse(result: SolveResult, reference: SolveResult, endpoint_only: bool = False) -> float:
    """Mean squared difference over the shared output grid (or its last sample)."""
    if (result.times.shape != reference.times.shape
            or not np.allclose(result.times, reference.times, rtol=1e-12, atol=1e-12)
            or result.states.shape != reference.states.shape):
        raise LatentSimError(
            message="Results are sampled on different output grids",
            error_type=ErrorType.GRID_MISMATCH,
            context={'result_shape': result.states.shape,
                     'reference_shape': reference.states.shape},
        )
    diff = result.states - reference.states
    if endpoint_only:
        diff = diff[-1]
    value = float(np.mean(diff * diff))
    return value if np.isfinite(value) else math.inf
