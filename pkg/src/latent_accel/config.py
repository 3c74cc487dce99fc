"""
Experiment configuration.

One JSON document per experiment, validated by pydantic models that reject
unknown keys. Section defaults are tuned per system;
``default_experiment`` fills them in for a named system.
"""

import json
import logging
import os
from pathlib import Path
from typing import Any, Dict, List, Literal, Optional, Tuple, Union

import numpy as np
import psutil
from pydantic import BaseModel, ConfigDict, Field, ValidationError, field_validator

from .errors import ErrorType, LatentSimError
from .optim import OptimizerKind
from .solvers import SolverKind, SolverSpec

logger = logging.getLogger(__name__)


class _Section(BaseModel):
    model_config = ConfigDict(extra="forbid")


class SystemSection(_Section):
    name: Literal["linear", "decay", "vortex", "vlm"] = "linear"
    horizon: Optional[Tuple[float, float]] = None
    params: Dict[str, Any] = Field(default_factory=dict)

    def build(self):
        from .systems import make_system

        params = dict(self.params)
        if self.horizon is not None:
            params["horizon"] = self.horizon
        return make_system(self.name, params)


class NetworkConfig(_Section):
    latent_dim: int = Field(64, ge=2)
    n_layers: int = Field(6, ge=1)
    hidden_width: int = Field(64, ge=1)
    depth: int = Field(3, ge=1)
    clamp: float = Field(5.0, gt=0)
    lift_std: float = Field(0.1, ge=0)


class TrainConfig(_Section):
    """Optimizer, sampling and loss settings for one training run."""

    epochs: int = Field(30000, ge=0)
    lr: float = Field(1e-3, gt=0)
    optimizer: OptimizerKind = OptimizerKind.ADAM
    weight_decay: float = Field(1e-2, ge=0)
    batch_size: int = Field(128, ge=1)
    full_batch_max: int = Field(600, ge=1)
    sampling: Literal["uniform", "trajectory"] = "uniform"
    n_samples: int = Field(600, ge=1)
    n_trajectories: int = Field(40, ge=1)
    samples_per_trajectory: int = Field(25, ge=2)
    trajectory_rtol: float = Field(1e-9, gt=0)
    k: int = Field(8, ge=1)
    seed: int = 0
    log_every: int = Field(100, ge=1)
    divergence_factor: float = Field(1e6, gt=1)
    fd_outer_jvp: bool = False
    threads: int = Field(1, ge=1)

    @field_validator("optimizer", mode="before")
    @classmethod
    def _optimizer_alias(cls, value):
        # "AdamiW" is accepted as a spelling of AdamW
        if isinstance(value, str):
            value = value.lower()
            return "adamw" if value == "adamiw" else value
        return value


class SweepConfig(_Section):
    """Solver settings swept for a work-precision diagram."""

    euler_dt: List[float] = Field(default_factory=lambda: np.logspace(np.log10(1e-3), np.log10(0.2), 12).tolist())
    rk4_dt: List[float] = Field(default_factory=lambda: np.logspace(np.log10(1e-3), np.log10(0.2), 12).tolist())
    dopri5_tol: List[float] = Field(default_factory=lambda: np.logspace(-12, -2, 11).tolist())
    n_output: int = Field(201, ge=2)
    max_steps: int = Field(1_000_000, ge=1)

    @field_validator("euler_dt", "rk4_dt", "dopri5_tol")
    @classmethod
    def _positive(cls, values):
        if any(v <= 0 for v in values):
            raise ValueError("sweep values must be positive")
        return sorted(values)

    def specs(self) -> List[SolverSpec]:
        out = [SolverSpec.euler(dt, n_output=self.n_output, max_steps=self.max_steps)
               for dt in self.euler_dt]
        out += [SolverSpec.rk4(dt, n_output=self.n_output, max_steps=self.max_steps)
                for dt in self.rk4_dt]
        out += [SolverSpec.dopri5(tol, n_output=self.n_output, max_steps=self.max_steps)
                for tol in self.dopri5_tol]
        return out


class BenchConfig(_Section):
    n_test: int = Field(10, ge=1)
    test_box_scale: float = Field(1.5, gt=0)
    endpoint_only: bool = False
    reference_tol: float = Field(1e-12, gt=0)
    mse_band: Tuple[float, float] = (1e-4, 1e-2)
    reps: int = Field(1, ge=1)


class StudyConfig(_Section):
    """Sweeps for the sample-size, latent-dimension and panel-count studies."""

    sample_sizes: List[int] = Field(default_factory=lambda: [10, 30, 100, 300, 600])
    latent_dims: List[int] = Field(default_factory=lambda: [8, 16, 32, 64])
    panel_counts: List[int] = Field(default_factory=lambda: [10, 25, 50, 100, 200])
    repetitions: int = Field(1, ge=1)
    epochs: Optional[int] = Field(None, ge=0)
    original_dt: float = Field(0.06, gt=0)
    latent_dt: float = Field(0.2, gt=0)

    @field_validator("sample_sizes", "latent_dims", "panel_counts")
    @classmethod
    def _positive_sorted(cls, values):
        if any(v <= 0 for v in values):
            raise ValueError("sweep values must be positive")
        if list(values) != sorted(values):
            raise ValueError("sweep values must be sorted")
        return values


class SimulateConfig(_Section):
    solver: SolverKind = SolverKind.EULER
    dt: float = Field(0.08, gt=0)
    tol: float = Field(1e-6, gt=0)
    n_output: int = Field(201, ge=2)
    x0: Optional[List[float]] = None

    def spec(self) -> SolverSpec:
        if self.solver == SolverKind.DOPRI5:
            return SolverSpec.dopri5(self.tol, n_output=self.n_output)
        return SolverSpec(self.solver, dt=self.dt, n_output=self.n_output)


class RunConfig(_Section):
    seed: int = 0
    threads: int = Field(1, ge=0)
    out: str = "runs"
    log_level: Optional[str] = None

    @property
    def workers(self) -> int:
        """Worker count; 0 means one per physical core."""
        if self.threads == 0:
            return psutil.cpu_count(logical=False) or os.cpu_count() or 1
        return self.threads


class ExperimentConfig(_Section):
    system: SystemSection = Field(default_factory=SystemSection)
    network: NetworkConfig = Field(default_factory=NetworkConfig)
    train: TrainConfig = Field(default_factory=TrainConfig)
    solvers: SweepConfig = Field(default_factory=SweepConfig)
    bench: BenchConfig = Field(default_factory=BenchConfig)
    study: StudyConfig = Field(default_factory=StudyConfig)
    simulate: SimulateConfig = Field(default_factory=SimulateConfig)
    run: RunConfig = Field(default_factory=RunConfig)


_SYSTEM_DEFAULTS: Dict[str, Dict[str, Dict[str, Any]]] = {
    "linear": {
        "network": {"latent_dim": 64, "n_layers": 6, "hidden_width": 64, "depth": 3},
        "train": {"epochs": 30000, "lr": 1e-3, "optimizer": "adam", "sampling": "uniform",
                  "n_samples": 600, "k": 8},
        "simulate": {"solver": "euler", "dt": 0.08},
        "bench": {"mse_band": (1e-4, 1e-2)},
    },
    "decay": {
        "network": {"latent_dim": 2, "n_layers": 2, "hidden_width": 16, "depth": 2},
        "train": {"epochs": 2000, "lr": 1e-3, "optimizer": "adam", "sampling": "uniform",
                  "n_samples": 200, "k": 1},
        "simulate": {"solver": "euler", "dt": 0.08},
    },
    "vortex": {
        "network": {"latent_dim": 64, "n_layers": 8, "hidden_width": 64, "depth": 5},
        "train": {"epochs": 50000, "lr": 1e-3, "optimizer": "adamw", "sampling": "trajectory",
                  "n_trajectories": 40, "k": 4},
        "simulate": {"solver": "euler", "dt": 0.06},
        "bench": {"mse_band": (1e-5, 1e-3)},
    },
    "vlm": {
        "network": {"latent_dim": 32, "n_layers": 8, "hidden_width": 64, "depth": 3},
        "train": {"epochs": 50000, "lr": 5e-4, "optimizer": "adamw", "sampling": "trajectory",
                  "n_trajectories": 20, "k": 8},
        "simulate": {"solver": "euler", "dt": 0.03},
    },
}


def _merge(base: Dict[str, Any], override: Dict[str, Any]) -> Dict[str, Any]:
    out = dict(base)
    for key, value in override.items():
        if isinstance(value, dict) and isinstance(out.get(key), dict):
            out[key] = _merge(out[key], value)
        else:
            out[key] = value
    return out


def _validate(document: Dict[str, Any], source: str) -> ExperimentConfig:
    try:
        return ExperimentConfig.model_validate(document)
    except ValidationError as exc:
        raise LatentSimError(
            message=f"Invalid configuration in {source}: {exc.error_count()} problem(s)",
            error_type=ErrorType.CONFIGURATION,
            context={'source': source, 'errors': [
                {'loc': '.'.join(str(p) for p in err['loc']), 'msg': err['msg']}
                for err in exc.errors()
            ]},
        ) from exc


def default_experiment(system: str, overrides: Optional[Dict[str, Any]] = None) -> ExperimentConfig:
    """Hyperparameter-table defaults for a system, optionally overridden."""
    if system not in _SYSTEM_DEFAULTS:
        raise LatentSimError(
            message=f"No defaults for system '{system}'",
            error_type=ErrorType.CONFIGURATION,
            context={'known': sorted(_SYSTEM_DEFAULTS)},
        )
    document = _merge({"system": {"name": system}}, _SYSTEM_DEFAULTS[system])
    return _validate(_merge(document, overrides or {}), f"defaults:{system}")


def load_config(path: Union[str, Path]) -> ExperimentConfig:
    """Read an experiment document; system defaults sit under the file's keys."""
    path = Path(path)
    try:
        document = json.loads(path.read_text())
    except OSError as exc:
        raise LatentSimError(
            message=f"Could not read config: {exc}",
            error_type=ErrorType.IO,
            context={'path': str(path)},
        ) from exc
    except json.JSONDecodeError as exc:
        raise LatentSimError(
            message=f"Config is not valid JSON: {exc}",
            error_type=ErrorType.CONFIGURATION,
            context={'path': str(path), 'line': exc.lineno},
        ) from exc
    if not isinstance(document, dict):
        raise LatentSimError(
            message="Config root must be an object",
            error_type=ErrorType.CONFIGURATION,
            context={'path': str(path)},
        )

    system = document.get("system")
    name = system.get("name", "linear") if isinstance(system, dict) else "linear"
    defaults = _SYSTEM_DEFAULTS.get(name, {})
    config = _validate(_merge(_merge({"system": {"name": name}}, defaults), document), str(path))
    logger.info("Loaded %s experiment from %s", config.system.name, path)
    return config
