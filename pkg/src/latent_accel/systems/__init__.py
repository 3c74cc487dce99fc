"""Benchmark ODE systems and their lookup by name."""

from typing import Any, Dict, Optional

from ..errors import ErrorType, LatentSimError
from .base import FunctionCounter, OdeSystem
from .linear import (DECAY_HORIZON, LINEAR_HORIZON, LINEAR_MATRIX, decay_system,
                     linear_exact, linear_rhs, linear_system)
from .vlm import (VLM_HORIZON, VlmConfig, build_geometry, solve_vlm_forces, trim_state,
                  vlm_rhs, vlm_system, wing_lift_coefficient, write_panel_listing)
from .vortex import (VORTEX_HORIZON, VortexConfig, leapfrog_config, vortex_invariants,
                     vortex_rhs, vortex_system)

SYSTEM_NAMES = ("linear", "decay", "vortex", "vlm")


def make_system(name: str, params: Optional[Dict[str, Any]] = None) -> OdeSystem:
    """Build a benchmark system from its name and keyword parameters."""
    params = dict(params or {})
    horizon = params.pop("horizon", None)
    try:
        if name == "linear":
            system = linear_system(**params)
        elif name == "decay":
            system = decay_system(**params)
        elif name == "vortex":
            system = vortex_system(VortexConfig(**params))
        elif name == "vlm":
            system = vlm_system(VlmConfig(**params))
        else:
            raise LatentSimError(
                message=f"Unknown system '{name}'",
                error_type=ErrorType.CONFIGURATION,
                context={'known': list(SYSTEM_NAMES)},
            )
    except (TypeError, ValueError) as exc:
        raise LatentSimError(
            message=f"Invalid parameters for system '{name}': {exc}",
            error_type=ErrorType.CONFIGURATION,
            context={'params': params},
        ) from exc
    if horizon is not None:
        system.horizon = (float(horizon[0]), float(horizon[1]))
    return system


__all__ = [
    "FunctionCounter", "OdeSystem", "SYSTEM_NAMES", "make_system",
    "LINEAR_MATRIX", "LINEAR_HORIZON", "DECAY_HORIZON", "linear_rhs", "linear_exact",
    "linear_system", "decay_system",
    "VortexConfig", "VORTEX_HORIZON", "vortex_rhs", "vortex_invariants", "leapfrog_config",
    "vortex_system",
    "VlmConfig", "VLM_HORIZON", "build_geometry", "solve_vlm_forces", "vlm_rhs",
    "trim_state", "wing_lift_coefficient", "write_panel_listing", "vlm_system",
]
