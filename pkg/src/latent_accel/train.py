"""
Training the lift and coupling layers so the latent dynamics evolve slowly.

The loss averages squared directional derivatives of the latent right-hand side,

    L = 1/(N k) sum_i sum_j || J_zdot(z_i) v_j ||^2,   z_i = encode(x_i),

with unit random directions v_j. The outer derivative runs on duals through the
latent dynamics (which hold an inner JVP through phi), and the whole expression
is recorded on a tape for the parameter gradient.
"""

import logging
import sys
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import List, Optional, Tuple

import numpy as np
from dataclasses_json import dataclass_json

from . import autodiff as ad
from .config import NetworkConfig, TrainConfig
from .errors import ErrorClassifier, ErrorType, LatentSimError
from .latent import LatentSystem, latent_rhs_batch
from .net import PseudoInvertibleNet, build_net, pseudo_inverse_expr
from .optim import Optimizer
from .solvers import SolverSpec, integrate
from .systems.base import OdeSystem

logger = logging.getLogger(__name__)

MAX_REDRAWS_PER_TRAJECTORY = 50


@dataclass
class SampleSet:
    points: np.ndarray
    provenance: str
    trajectory_ids: Optional[np.ndarray] = None

    def __len__(self) -> int:
        return int(self.points.shape[0])


def make_samples(system: OdeSystem, cfg: TrainConfig, rng: np.random.Generator) -> SampleSet:
    """Training states, drawn uniformly from the box or taken along trajectories."""
    if cfg.sampling == "uniform":
        points = rng.uniform(system.lower, system.upper, size=(cfg.n_samples, system.dim))
        return SampleSet(points, "uniform-box")

    spec = SolverSpec.dopri5(cfg.trajectory_rtol, n_output=cfg.samples_per_trajectory)
    t0, tf = system.horizon
    chunks, ids = [], []
    redraws = 0
    while len(chunks) < cfg.n_trajectories:
        x0 = rng.uniform(system.lower, system.upper)
        try:
            states = integrate(system.rhs, x0, t0, tf, spec).states
            escaped = not np.all(system.contains(states))
        except LatentSimError as exc:
            if not exc.recoverable:
                raise
            escaped = True
        if escaped:
            redraws += 1
            logger.debug("Discarded training trajectory from %s leaving the domain box", x0)
            if redraws > MAX_REDRAWS_PER_TRAJECTORY * cfg.n_trajectories:
                raise LatentSimError(
                    message="Too many training trajectories escaped the domain box",
                    error_type=ErrorType.DOMAIN,
                    context={'system': system.name, 'redraws': redraws},
                )
            continue
        ids.append(np.full(len(states), len(chunks)))
        chunks.append(states)
    if redraws:
        logger.warning("Discarded %d training trajectories leaving the domain box, kept %d",
                       redraws, len(chunks))
    return SampleSet(np.concatenate(chunks), "trajectory-subsampled", np.concatenate(ids))


def random_directions(rng: np.random.Generator, k: int, m: int) -> np.ndarray:
    """k standard normal directions scaled to unit length."""
    v = rng.standard_normal((k, m))
    return v / np.linalg.norm(v, axis=1, keepdims=True)


def slowness_loss(system: LatentSystem, points: np.ndarray, directions: np.ndarray,
                  theta=None, fd_outer_jvp: bool = False, scale: Optional[float] = None):
    """Mean squared directional derivative of the latent dynamics.

    ``theta`` may be a tape variable, in which case A^+ is rebuilt from A
    differentiably. ``scale`` replaces the 1/(N k) normalisation for shards.
    """
    net = system.net
    points = np.atleast_2d(np.asarray(points, dtype=np.float64))
    n_points, k, m = points.shape[0], directions.shape[0], net.m
    params = net.params(theta)
    pinv = net.lift.pinv if theta is None else pseudo_inverse_expr(params["A"])

    z = net.encode(points, params)
    z_rows = ad.reshape(ad.stack([z] * k, axis=1), (n_points * k, m))
    v_rows = np.tile(directions, (n_points, 1))

    def dynamics(zz):
        return latent_rhs_batch(system, zz, params, pinv)

    if fd_outer_jvp:
        eps = (1e-5 * (1.0 + np.linalg.norm(ad.primal(z_rows), axis=1)))[:, None]
        step = eps * v_rows
        rate = ad.div(ad.sub(dynamics(ad.add(z_rows, step)), dynamics(ad.sub(z_rows, step))),
                      2.0 * eps)
    else:
        rate = ad.jvp(dynamics, z_rows, v_rows)

    rows = ad.primal(rate)
    bad = ~np.all(np.isfinite(rows), axis=1)
    if np.any(bad):
        raise LatentSimError(
            message="Non-finite latent Jacobian-vector product in the loss",
            error_type=ErrorType.NON_FINITE,
            context={'sample_index': int(np.argmax(bad) // k)},
        )
    scale = 1.0 / (n_points * k) if scale is None else scale
    return ad.mul(scale, ad.sum_(ad.mul(rate, rate)))


def jacobian_loss(system: LatentSystem, batch: SampleSet, k: int,
                  rng: np.random.Generator, fd_outer_jvp: bool = False) -> float:
    """Loss value at the net's current parameters with fresh directions."""
    if len(batch) == 0:
        raise ValueError("Loss needs at least one sample")
    directions = random_directions(rng, k, system.net.m)
    return float(ad.primal(slowness_loss(system, batch.points, directions,
                                         fd_outer_jvp=fd_outer_jvp)))


def loss_and_gradient(system: LatentSystem, points: np.ndarray, directions: np.ndarray,
                      fd_outer_jvp: bool = False, threads: int = 1) -> Tuple[float, np.ndarray]:
    """Loss and its exact gradient with respect to the flat parameter vector.

    With threads > 1 the batch is split into contiguous shards, each on its own
    tape; shard results are summed in shard order.
    """
    theta = system.net.theta
    scale = 1.0 / (len(points) * len(directions))

    def shard(rows: np.ndarray) -> Tuple[float, np.ndarray]:
        return ad.value_and_grad(
            lambda p: slowness_loss(system, rows, directions, p, fd_outer_jvp, scale), theta)

    if threads <= 1 or len(points) < 2:
        return shard(points)
    shards = [s for s in np.array_split(points, min(threads, len(points))) if len(s)]
    with ThreadPoolExecutor(max_workers=len(shards)) as executor:
        results = list(executor.map(shard, shards))
    loss = 0.0
    grad = np.zeros_like(theta)
    for value, g in results:
        loss += value
        grad += g
    return loss, grad


@dataclass_json
@dataclass
class TrainProgress:
    epoch: int
    loss: float
    best_loss: float
    wall_time_s: float


@dataclass
class TrainResult:
    net: PseudoInvertibleNet
    loss_history: List[float] = field(default_factory=list)
    best_loss: float = float("inf")
    best_epoch: int = -1
    initial_loss: Optional[float] = None
    wall_time: float = 0.0
    samples: Optional[SampleSet] = None

    def to_dict(self) -> dict:
        return {
            'epochs_run': len(self.loss_history),
            'best_loss': self.best_loss,
            'best_epoch': self.best_epoch,
            'initial_loss': self.initial_loss,
            'wall_time_s': self.wall_time,
            'n_samples': len(self.samples) if self.samples is not None else 0,
        }


class ProgressWriter:
    """JSON-lines progress to stdout and an optional file."""

    def __init__(self, path: Optional[Path] = None, stream=None):
        self.stream = sys.stdout if stream is None else stream
        self.path = path
        if path is not None:
            path.parent.mkdir(parents=True, exist_ok=True)
            path.write_text("")

    def write(self, record: TrainProgress) -> None:
        line = record.to_json()
        print(line, file=self.stream, flush=True)
        if self.path is not None:
            with open(self.path, "a") as f:
                f.write(line + "\n")


def train(system: OdeSystem, cfg: TrainConfig, network: Optional[NetworkConfig] = None,
          out_dir: Optional[Path] = None, samples: Optional[SampleSet] = None,
          progress_stream=None) -> TrainResult:
    """Train a fresh network on the system; the lowest-loss parameters are kept."""
    network = NetworkConfig() if network is None else network
    rng = np.random.default_rng(cfg.seed)
    net = build_net(system.dim, network.latent_dim, network.n_layers, network.hidden_width,
                    network.depth, network.clamp, rng, lift_std=network.lift_std)
    samples = make_samples(system, cfg, rng) if samples is None else samples
    latent = LatentSystem(net, system)
    optimizer = Optimizer(cfg.optimizer, cfg.lr, cfg.weight_decay if cfg.optimizer == "adamw" else 0.0)
    writer = ProgressWriter(None if out_dir is None else Path(out_dir) / "train_progress.jsonl",
                            progress_stream)

    result = TrainResult(net=net, samples=samples)
    best_theta = net.theta.copy()
    n_total = len(samples)
    start = time.perf_counter()
    logger.info("Training %s net (n=%d, m=%d, %d parameters) on %d %s samples for %d epochs",
                system.name, net.n, net.m, net.n_params, n_total, samples.provenance, cfg.epochs)

    for epoch in range(cfg.epochs):
        if n_total <= cfg.full_batch_max:
            batch = samples.points
        else:
            batch = samples.points[rng.choice(n_total, size=cfg.batch_size, replace=False)]
        directions = random_directions(rng, cfg.k, net.m)
        loss, grad = loss_and_gradient(latent, batch, directions, cfg.fd_outer_jvp, cfg.threads)

        if result.initial_loss is None:
            result.initial_loss = loss
        if not np.isfinite(loss) or loss > cfg.divergence_factor * result.initial_loss:
            raise LatentSimError(
                message="Training diverged",
                error_type=ErrorType.DIVERGENCE,
                context={'epoch': epoch, 'loss': loss, 'initial_loss': result.initial_loss},
            )
        result.loss_history.append(loss)
        if loss < result.best_loss:
            result.best_loss, result.best_epoch = loss, epoch
            best_theta = net.theta.copy()

        net.set_parameters(optimizer.step(net.theta, grad))

        if (epoch + 1) % cfg.log_every == 0 or epoch + 1 == cfg.epochs:
            writer.write(TrainProgress(epoch + 1, loss, result.best_loss,
                                       time.perf_counter() - start))

    net.set_parameters(best_theta)
    result.wall_time = time.perf_counter() - start
    if cfg.epochs:
        logger.info("Training finished: best loss %.4e at epoch %d (initial %.4e), %.1fs",
                    result.best_loss, result.best_epoch, result.initial_loss, result.wall_time)
    return result


def try_train(system: OdeSystem, cfg: TrainConfig, network: NetworkConfig,
              **kwargs) -> Tuple[Optional[TrainResult], Optional[LatentSimError]]:
    """train() that hands back recoverable failures instead of raising them."""
    try:
        return train(system, cfg, network, **kwargs), None
    except LatentSimError as exc:
        if not ErrorClassifier.is_recoverable(exc.error_type):
            raise
        logger.warning("Training run failed: %s", exc)
        return None, exc
