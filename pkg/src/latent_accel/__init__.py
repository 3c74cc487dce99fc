"""Latent-space acceleration of ODE simulation.

Maps states through a trainable pseudo-invertible network into a taller latent
space whose dynamics follow from the original equations by the chain rule, and
trains the network so those latent dynamics change slowly.
"""

from .errors import ErrorClassifier, ErrorSeverity, ErrorType, LatentSimError
from .latent import LatentSystem, latent_rhs, latent_rhs_batch, simulate_latent
from .net import (PseudoInvertibleNet, build_net, decode, encode, load_checkpoint, phi_jvp,
                  refresh_pseudo_inverse, save_checkpoint)
from .solvers import SolveResult, SolverKind, SolverSpec, integrate, mse
from .systems import OdeSystem, make_system

__version__ = "0.1.0"

__all__ = [
    'ErrorClassifier',
    'ErrorSeverity',
    'ErrorType',
    'LatentSimError',
    'LatentSystem',
    'latent_rhs',
    'latent_rhs_batch',
    'simulate_latent',
    'PseudoInvertibleNet',
    'build_net',
    'encode',
    'decode',
    'phi_jvp',
    'refresh_pseudo_inverse',
    'save_checkpoint',
    'load_checkpoint',
    'SolveResult',
    'SolverKind',
    'SolverSpec',
    'integrate',
    'mse',
    'OdeSystem',
    'make_system',
]
