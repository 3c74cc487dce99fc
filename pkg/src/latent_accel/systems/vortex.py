"""Point vortices in the plane, state [x1, y1, x2, y2, ...]."""

import logging
from typing import Optional, Tuple

import numpy as np
from pydantic import BaseModel, ConfigDict, Field, model_validator

from .. import autodiff as ad
from ..autodiff import primal
from .base import OdeSystem

logger = logging.getLogger(__name__)

VORTEX_HORIZON = (0.0, 12.0)


class VortexConfig(BaseModel):
    """Particle count, signed circulations and softening radius."""

    model_config = ConfigDict(extra="forbid", frozen=True)

    n_particles: int = Field(4, ge=2)
    circulations: Optional[Tuple[float, ...]] = None
    core_radius: float = Field(1e-3, ge=0.0)
    box: Tuple[float, float] = (-1.0, 1.0)

    @model_validator(mode="after")
    def _check_circulations(self):
        if self.circulations is not None and len(self.circulations) != self.n_particles:
            raise ValueError(
                f"circulations has {len(self.circulations)} entries for {self.n_particles} particles"
            )
        return self

    @property
    def gammas(self) -> np.ndarray:
        if self.circulations is None:
            return np.ones(self.n_particles)
        return np.asarray(self.circulations, dtype=np.float64)

    @property
    def dim(self) -> int:
        return 2 * self.n_particles


_warned_close = False


def _warn_if_close(x, cfg: VortexConfig) -> None:
    global _warned_close
    if _warned_close or cfg.core_radius == 0.0:
        return
    pts = primal(x).reshape(-1, cfg.n_particles, 2)
    diff = pts[:, :, None, :] - pts[:, None, :, :]
    dist = np.sqrt(np.sum(diff ** 2, axis=-1))
    dist[:, np.arange(cfg.n_particles), np.arange(cfg.n_particles)] = np.inf
    if np.any(dist < cfg.core_radius):
        _warned_close = True
        logger.warning("Vortex separation below core radius %.3g, softening active", cfg.core_radius)


def vortex_rhs(x, cfg: VortexConfig):
    """Velocity of each particle induced by all the others.

    u_i = sum_j G_j (-(y_i - y_j), x_i - x_j) / (2 pi (r_ij^2 + eps^2))
    """
    _warn_if_close(x, cfg)
    P = cfg.n_particles
    lead = ad.shape_of(x)[:-1]
    off_diagonal = 1.0 - np.eye(P)

    px = ad.getitem(x, (Ellipsis, slice(0, None, 2)))
    py = ad.getitem(x, (Ellipsis, slice(1, None, 2)))
    dx = ad.sub(ad.reshape(px, lead + (P, 1)), ad.reshape(px, lead + (1, P)))
    dy = ad.sub(ad.reshape(py, lead + (P, 1)), ad.reshape(py, lead + (1, P)))

    r2 = ad.add(ad.add(ad.mul(dx, dx), ad.mul(dy, dy)), cfg.core_radius ** 2)
    # unit diagonal keeps i == j finite, the numerator mask zeroes it
    weight = ad.div(cfg.gammas * off_diagonal / (2.0 * np.pi), ad.add(r2, np.eye(P)))

    u = ad.sum_(ad.mul(ad.neg(dy), weight), axis=-1)
    v = ad.sum_(ad.mul(dx, weight), axis=-1)
    return ad.reshape(ad.stack([u, v], axis=-1), lead + (2 * P,))


def vortex_invariants(x: np.ndarray, cfg: VortexConfig) -> dict:
    """Linear impulse and the softened interaction Hamiltonian.

    H = -1/(4 pi) sum_{i<j} G_i G_j log(r_ij^2 + eps^2), exact for the softened law.
    """
    pts = np.asarray(x, dtype=np.float64).reshape(-1, cfg.n_particles, 2)
    g = cfg.gammas
    impulse_x = np.sum(g * pts[..., 0], axis=-1)
    impulse_y = np.sum(g * pts[..., 1], axis=-1)

    diff = pts[:, :, None, :] - pts[:, None, :, :]
    r2 = np.sum(diff ** 2, axis=-1) + cfg.core_radius ** 2
    iu = np.triu_indices(cfg.n_particles, k=1)
    pair = (g[:, None] * g[None, :])[iu]
    hamiltonian = -np.sum(pair * np.log(r2[:, iu[0], iu[1]]), axis=-1) / (4.0 * np.pi)

    squeeze = np.ndim(x) == 1
    return {
        'impulse_x': impulse_x[0] if squeeze else impulse_x,
        'impulse_y': impulse_y[0] if squeeze else impulse_y,
        'hamiltonian': hamiltonian[0] if squeeze else hamiltonian,
    }


def leapfrog_config() -> Tuple[VortexConfig, np.ndarray]:
    """Two counter-rotating pairs on a common axis, the narrow pair behind."""
    cfg = VortexConfig(n_particles=4, circulations=(1.0, -1.0, 1.0, -1.0))
    x0 = np.array([-0.5, 0.5, -0.5, -0.5, 0.5, 1.0, 0.5, -1.0])
    return cfg, x0


def vortex_system(cfg: Optional[VortexConfig] = None) -> OdeSystem:
    cfg = VortexConfig() if cfg is None else cfg
    lo, hi = cfg.box
    return OdeSystem(
        name="vortex",
        dim=cfg.dim,
        rhs=lambda x: vortex_rhs(x, cfg),
        lower=np.full(cfg.dim, lo),
        upper=np.full(cfg.dim, hi),
        horizon=VORTEX_HORIZON,
    )
