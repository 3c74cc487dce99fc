"""
Latent equations of motion and the encode -> simulate -> decode pipeline.

For z = phi(A x) the chain rule gives

    dz/dt = J_phi(u) A f(A^+ u),    u = phi^{-1}(z)

so any solver that integrates dz/dt exactly reproduces the original trajectory
after decoding, whatever the network parameters are.
"""

import logging
import time
from typing import Callable, Optional, Tuple

import numpy as np

from . import autodiff as ad
from .net import PseudoInvertibleNet
from .solvers import SolveResult, SolverSpec, integrate
from .systems.base import FunctionCounter, OdeSystem

logger = logging.getLogger(__name__)


def latent_dynamics(net: PseudoInvertibleNet, f: Callable, z, params=None, pinv=None):
    """dz/dt for plain, dual or tape-valued z.

    ``params`` and ``pinv`` default to the net's current parameters and cached
    pseudo-inverse; the training loss passes differentiable ones instead.
    phi^{-1}(z) is evaluated once and feeds both the projection and the JVP.
    """
    u = net.phi_inverse(z, params)
    x = net.project(u, pinv)
    w = net.lift_state(f(x), params)
    return net.phi_jvp(u, w, params)


class LatentSystem:
    """A trained (or untrained) net paired with the original right-hand side.

    Read-only with respect to the net; ``counter`` accumulates evaluations of
    the original f, one per state row.
    """

    def __init__(self, net: PseudoInvertibleNet, base: OdeSystem):
        if net.n != base.dim:
            raise ValueError(f"Net state dimension {net.n} does not match system '{base.name}' ({base.dim})")
        self.net = net
        self.base = base
        self.counter = FunctionCounter()
        self.logger = logging.getLogger(__name__)

    @property
    def dim(self) -> int:
        return self.net.m

    def _f(self, x):
        shape = ad.shape_of(x)
        self.counter.add(1 if len(shape) == 1 else int(np.prod(shape[:-1])))
        return self.base.rhs(x)

    def rhs(self, z):
        return latent_rhs(self, z)

    __call__ = rhs

    def with_counter(self) -> "LatentSystem":
        return LatentSystem(self.net, self.base)


def latent_rhs(system: LatentSystem, z):
    """J_phi(phi^{-1}(z)) A f(A^+ phi^{-1}(z)); one f evaluation per call."""
    return latent_dynamics(system.net, system._f, z)


def latent_rhs_batch(system: LatentSystem, z, params=None, pinv=None):
    """Row-wise latent dynamics of a (B, m) batch, counting B evaluations of f.

    The training loss passes tape-valued ``params`` and ``pinv`` and dual-valued z.
    """
    z = z if isinstance(z, (ad.Dual, ad.Var)) else np.atleast_2d(np.asarray(z, dtype=np.float64))
    return latent_dynamics(system.net, system._f, z, params, pinv)


def encode_trajectory(net: PseudoInvertibleNet, states: np.ndarray) -> np.ndarray:
    """Latent image of an original-space trajectory (T, n) -> (T, m)."""
    return net.encode(np.asarray(states, dtype=np.float64))


def simulate_latent(system: LatentSystem, x0, tspan: Tuple[float, float],
                    solver: SolverSpec, decode_states: bool = True) -> SolveResult:
    """Encode x0, integrate the latent dynamics, decode every output sample.

    ``n_fcalls`` on the result counts evaluations of the original f;
    ``extras`` also carries the total latent RHS calls and the latent states.
    """
    x0 = np.asarray(x0, dtype=np.float64)
    start = time.perf_counter()
    z0 = system.net.encode(x0)
    before = system.counter.count
    latent = integrate(system.rhs, z0, tspan[0], tspan[1], solver)
    base_calls = system.counter.count - before

    states = system.net.decode(latent.states) if decode_states else latent.states
    wall_time = time.perf_counter() - start
    system.logger.debug("Latent %s run: %d base calls, %d latent calls, %.3fs",
                        solver.kind.value, base_calls, latent.n_fcalls, wall_time)
    return SolveResult(
        times=latent.times,
        states=states,
        n_fcalls=base_calls,
        n_steps=latent.n_steps,
        n_rejected=latent.n_rejected,
        wall_time=wall_time,
        kind=solver.kind,
        extras={'latent_states': latent.states, 'total_fcalls': latent.n_fcalls,
                'base_fcalls': base_calls},
    )


def simulate_original(system: OdeSystem, x0, tspan: Optional[Tuple[float, float]],
                      solver: SolverSpec) -> SolveResult:
    """Direct integration of f, with the call count taken from the system counter."""
    tspan = system.horizon if tspan is None else tspan
    before = system.counter.count
    result = integrate(system, x0, tspan[0], tspan[1], solver)
    result.extras['base_fcalls'] = system.counter.count - before
    result.extras['total_fcalls'] = result.n_fcalls
    return result
