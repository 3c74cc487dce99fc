"""
Longitudinal aircraft dynamics driven by a vortex lattice model.

Body axes: x forward, y right, z down, pitch nose-up positive. Each lifting
surface is one chordwise row of horseshoe vortices: bound segment on the
quarter chord, control point on the three-quarter chord, trailing legs parallel
to the body x axis. The influence matrix therefore depends on geometry only and
is inverted once per configuration; the state enters through the tangency
right-hand side, which is linear in (vx, vz, q).

State x = [vx, vz, q, theta], q = theta-dot.
"""

import functools
import logging
from dataclasses import dataclass
from pathlib import Path
from typing import Optional, Tuple, Union

import numpy as np
from pydantic import BaseModel, ConfigDict, Field

from .. import autodiff as ad
from ..autodiff import primal
from ..errors import ErrorType, LatentSimError
from .base import OdeSystem

logger = logging.getLogger(__name__)

VLM_HORIZON = (0.0, 6.0)


class VlmConfig(BaseModel):
    """Geometry, mass properties and atmosphere of the glider."""

    model_config = ConfigDict(extra="forbid", frozen=True)

    wing_span: float = Field(11.0, gt=0)
    wing_chord: float = Field(1.0, gt=0)
    wing_panels: int = Field(100, ge=1)
    wing_leading_edge_x: float = 0.15
    wing_incidence_deg: float = 2.0

    tail_span: float = Field(2.75, gt=0)
    tail_chord: float = Field(0.6, gt=0)
    tail_panels: int = Field(25, ge=0)
    tail_arm: float = Field(5.0, gt=0)
    tail_incidence_deg: float = -2.0

    mass: float = Field(700.0, gt=0)
    iyy: float = Field(3000.0, gt=0)
    rho: float = Field(1.225, gt=0)
    gravity: float = 9.81
    min_airspeed: float = Field(1.0, gt=0)

    # dvz/dt = Fz/m + q vx; True flips the coupling term to -q vx
    reversed_vz_coupling: bool = False
    wake_length_factor: float = Field(1000.0, gt=0)

    lower: Tuple[float, float, float, float] = (40.0, -1.0, -0.3, -0.2)
    upper: Tuple[float, float, float, float] = (60.0, 6.0, 0.3, 0.2)

    def scaled_panels(self, wing_panels: int) -> "VlmConfig":
        """Same aircraft, wing and tail panel counts scaled together."""
        ratio = self.tail_panels / self.wing_panels
        tail = max(1, int(round(wing_panels * ratio))) if self.tail_panels else 0
        return self.model_copy(update={'wing_panels': wing_panels, 'tail_panels': tail})


@dataclass(frozen=True)
class PanelGeometry:
    """Flattened panel arrays for all surfaces, wing first."""

    surface: np.ndarray       # 0 wing, 1 tail
    y_a: np.ndarray
    y_b: np.ndarray
    x_bound: np.ndarray       # quarter-chord x of each bound segment
    x_control: np.ndarray     # three-quarter-chord x
    width: np.ndarray
    normal_x: np.ndarray
    normal_z: np.ndarray
    influence_inverse: np.ndarray   # inverse of the normal-wash influence matrix
    wash_x: np.ndarray        # induced x-velocity at bound midpoints per unit circulation
    wash_z: np.ndarray        # induced z-velocity at bound midpoints per unit circulation

    @property
    def n_panels(self) -> int:
        return int(self.width.size)


def _segment_velocity(points: np.ndarray, start: np.ndarray, end: np.ndarray) -> np.ndarray:
    """Biot-Savart velocity of unit-strength straight filaments start->end.

    points (K, 3), start/end (N, 3) -> (K, N, 3). Points on a filament's line get zero.
    """
    r1 = points[:, None, :] - start[None, :, :]
    r2 = points[:, None, :] - end[None, :, :]
    r0 = (end - start)[None, :, :]
    cross = np.cross(r1, r2)
    cross2 = np.sum(cross * cross, axis=-1)
    n1 = np.linalg.norm(r1, axis=-1)
    n2 = np.linalg.norm(r2, axis=-1)
    length2 = np.sum(r0 * r0, axis=-1)

    on_line = (cross2 <= 1e-12 * length2) | (n1 < 1e-12) | (n2 < 1e-12)
    safe_cross2 = np.where(on_line, 1.0, cross2)
    safe_n1 = np.where(on_line, 1.0, n1)
    safe_n2 = np.where(on_line, 1.0, n2)
    projection = np.sum(r0 * (r1 / safe_n1[..., None] - r2 / safe_n2[..., None]), axis=-1)
    coef = np.where(on_line, 0.0, projection / (4.0 * np.pi * safe_cross2))
    return coef[..., None] * cross


def _horseshoe_velocity(points, x_bound, y_a, y_b, wake_length) -> np.ndarray:
    zeros = np.zeros_like(y_a)
    far = x_bound - wake_length
    trail_a = np.stack([far, y_a, zeros], axis=-1)
    corner_a = np.stack([x_bound, y_a, zeros], axis=-1)
    corner_b = np.stack([x_bound, y_b, zeros], axis=-1)
    trail_b = np.stack([far, y_b, zeros], axis=-1)
    return (_segment_velocity(points, trail_a, corner_a)
            + _segment_velocity(points, corner_a, corner_b)
            + _segment_velocity(points, corner_b, trail_b))


def _surface(span, chord, panels, leading_edge_x, incidence_deg, index):
    edges = np.linspace(-0.5 * span, 0.5 * span, panels + 1)
    incidence = np.radians(incidence_deg)
    ones = np.ones(panels)
    return {
        'surface': index * np.ones(panels, dtype=int),
        'y_a': edges[:-1],
        'y_b': edges[1:],
        'x_bound': (leading_edge_x - 0.25 * chord) * ones,
        'x_control': (leading_edge_x - 0.75 * chord) * ones,
        'width': np.diff(edges),
        # upward unit normal of a plate pitched by the incidence
        'normal_x': -np.sin(incidence) * ones,
        'normal_z': -np.cos(incidence) * ones,
    }


@functools.lru_cache(maxsize=32)
def build_geometry(cfg: VlmConfig) -> PanelGeometry:
    surfaces = [_surface(cfg.wing_span, cfg.wing_chord, cfg.wing_panels,
                         cfg.wing_leading_edge_x, cfg.wing_incidence_deg, 0)]
    if cfg.tail_panels > 0:
        tail_le = -cfg.tail_arm + 0.25 * cfg.tail_chord
        surfaces.append(_surface(cfg.tail_span, cfg.tail_chord, cfg.tail_panels,
                                 tail_le, cfg.tail_incidence_deg, 1))
    arrays = {key: np.concatenate([s[key] for s in surfaces]) for key in surfaces[0]}

    wake_length = cfg.wake_length_factor * cfg.wing_span
    y_mid = 0.5 * (arrays['y_a'] + arrays['y_b'])
    zeros = np.zeros_like(y_mid)
    control = np.stack([arrays['x_control'], y_mid, zeros], axis=-1)
    bound_mid = np.stack([arrays['x_bound'], y_mid, zeros], axis=-1)

    at_control = _horseshoe_velocity(control, arrays['x_bound'], arrays['y_a'],
                                     arrays['y_b'], wake_length)
    influence = (at_control[..., 0] * arrays['normal_x'][:, None]
                 + at_control[..., 2] * arrays['normal_z'][:, None])
    try:
        influence_inverse = np.linalg.inv(influence)
    except np.linalg.LinAlgError as exc:
        raise LatentSimError(
            message="Singular influence matrix, degenerate panel geometry",
            error_type=ErrorType.LINEAR_SOLVE,
            context={'wing_panels': cfg.wing_panels, 'tail_panels': cfg.tail_panels},
        ) from exc

    at_bound = _horseshoe_velocity(bound_mid, arrays['x_bound'], arrays['y_a'],
                                   arrays['y_b'], wake_length)
    logger.debug("Built VLM geometry with %d panels, influence condition %.3e",
                 y_mid.size, np.linalg.cond(influence))
    return PanelGeometry(
        influence_inverse=influence_inverse,
        wash_x=at_bound[..., 0],
        wash_z=at_bound[..., 2],
        **arrays,
    )


def _column(v):
    return ad.reshape(v, ad.shape_of(v) + (1,))


def _check_airspeed(x, cfg: VlmConfig) -> None:
    state = primal(x)
    speed = np.hypot(state[..., 0], state[..., 1])
    if np.any(speed <= cfg.min_airspeed):
        raise LatentSimError(
            message="Airspeed below stall-guard minimum",
            error_type=ErrorType.DOMAIN,
            context={'min_speed': float(np.min(speed)), 'min_airspeed': cfg.min_airspeed},
        )


def solve_vlm_forces(x, cfg: VlmConfig):
    """Aerodynamic (Fx, Fz, My) about the CG, gravity excluded."""
    _check_airspeed(x, cfg)
    geo = build_geometry(cfg)
    vx = _column(ad.getitem(x, (Ellipsis, 0)))
    vz = _column(ad.getitem(x, (Ellipsis, 1)))
    q = _column(ad.getitem(x, (Ellipsis, 2)))

    # air velocity at a body point r: -(v + omega x r) = (-vx, 0, -vz + q r_x)
    tangency = ad.add(ad.mul(vx, geo.normal_x),
                      ad.mul(ad.sub(vz, ad.mul(q, geo.x_control)), geo.normal_z))
    gamma = ad.matmul(tangency, geo.influence_inverse.T)

    local_x = ad.add(ad.neg(vx), ad.matmul(gamma, geo.wash_x.T))
    local_z = ad.add(ad.add(ad.neg(vz), ad.mul(q, geo.x_bound)), ad.matmul(gamma, geo.wash_z.T))

    # F = rho V x (Gamma * width * y_hat)
    strength = ad.mul(gamma, cfg.rho * geo.width)
    fx = ad.neg(ad.mul(strength, local_z))
    fz = ad.mul(strength, local_x)
    my = ad.neg(ad.mul(fz, geo.x_bound))
    return ad.sum_(fx, axis=-1), ad.sum_(fz, axis=-1), ad.sum_(my, axis=-1)


def vlm_rhs(x, cfg: VlmConfig):
    fx, fz, my = solve_vlm_forces(x, cfg)
    vx = ad.getitem(x, (Ellipsis, 0))
    vz = ad.getitem(x, (Ellipsis, 1))
    q = ad.getitem(x, (Ellipsis, 2))
    theta = ad.getitem(x, (Ellipsis, 3))

    weight = cfg.mass * cfg.gravity
    fx = ad.sub(fx, ad.mul(weight, ad.sin(theta)))
    fz = ad.add(fz, ad.mul(weight, ad.cos(theta)))

    sign = -1.0 if cfg.reversed_vz_coupling else 1.0
    vx_dot = ad.sub(ad.mul(1.0 / cfg.mass, fx), ad.mul(q, vz))
    vz_dot = ad.add(ad.mul(1.0 / cfg.mass, fz), ad.mul(sign, ad.mul(q, vx)))
    q_dot = ad.mul(1.0 / cfg.iyy, my)
    return ad.stack([vx_dot, vz_dot, q_dot, q], axis=-1)


def trim_state(cfg: VlmConfig, guess: Optional[np.ndarray] = None,
               tol: float = 1e-10, max_iter: int = 50) -> np.ndarray:
    """Steady glide (q = 0) from Newton iterations on (vx, vz, theta).

    Jacobian columns come from forward-mode JVPs of the right-hand side.
    """
    y = np.array([50.0, 2.0, 0.0]) if guess is None else np.asarray(guess, dtype=np.float64)

    def residual(u):
        state = ad.stack([ad.getitem(u, 0), ad.getitem(u, 1), 0.0 * ad.getitem(u, 0),
                          ad.getitem(u, 2)], axis=-1)
        return ad.getitem(vlm_rhs(state, cfg), slice(0, 3))

    for iteration in range(max_iter):
        r = residual(y)
        if np.max(np.abs(r)) < tol:
            break
        jac = np.column_stack([ad.jvp(residual, y, e) for e in np.eye(3)])
        step = np.linalg.solve(jac, -r)
        # damp steps that would leave the flight envelope
        scale = 1.0
        while scale > 1e-3:
            candidate = y + scale * step
            if np.hypot(candidate[0], candidate[1]) > cfg.min_airspeed:
                break
            scale *= 0.5
        y = y + scale * step
    else:
        raise LatentSimError(
            message="Trim iteration did not converge",
            error_type=ErrorType.DIVERGENCE,
            context={'residual': float(np.max(np.abs(residual(y))))},
        )
    logger.debug("Trim converged after %d iterations: %s", iteration, y)
    return np.array([y[0], y[1], 0.0, y[2]])


def wing_lift_coefficient(cfg: VlmConfig, alpha: float, airspeed: float = 50.0) -> float:
    """C_L of the isolated, zero-incidence wing at angle of attack alpha (radians)."""
    wing = cfg.model_copy(update={'tail_panels': 0, 'wing_incidence_deg': 0.0})
    state = np.array([airspeed * np.cos(alpha), airspeed * np.sin(alpha), 0.0, 0.0])
    fx, fz, _ = solve_vlm_forces(state, wing)
    lift = fx * np.sin(alpha) - fz * np.cos(alpha)
    area = wing.wing_span * wing.wing_chord
    return float(lift / (0.5 * wing.rho * airspeed ** 2 * area))


def write_panel_listing(cfg: VlmConfig, path: Union[str, Path]) -> Path:
    """Plain-text dump of the panel lattice for inspection."""
    geo = build_geometry(cfg)
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    names = ('wing', 'tail')
    with open(path, 'w') as f:
        f.write("# surface panel y_a y_b x_bound x_control width normal_x normal_z\n")
        for i in range(geo.n_panels):
            f.write(
                f"{names[geo.surface[i]]} {i} {geo.y_a[i]:.6f} {geo.y_b[i]:.6f} "
                f"{geo.x_bound[i]:.6f} {geo.x_control[i]:.6f} {geo.width[i]:.6f} "
                f"{geo.normal_x[i]:.6f} {geo.normal_z[i]:.6f}\n"
            )
    return path


def vlm_system(cfg: Optional[VlmConfig] = None) -> OdeSystem:
    cfg = VlmConfig() if cfg is None else cfg
    build_geometry(cfg)
    return OdeSystem(
        name="vlm",
        dim=4,
        rhs=lambda x: vlm_rhs(x, cfg),
        lower=np.array(cfg.lower),
        upper=np.array(cfg.upper),
        horizon=VLM_HORIZON,
    )
