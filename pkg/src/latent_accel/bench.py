"""
Work-precision benchmarks, sensitivity studies and result export.

A work-precision point is one solver setting run on every test initial
condition: function calls are summed over the trajectories and the error is the
mean squared difference against a reference on the shared output grid. The
best solver at each error level forms the lower envelope that the speedup
measures compare.
"""

import csv
import logging
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, fields
from pathlib import Path
from typing import Callable, List, Optional, Sequence, Tuple, Union

import numpy as np
import pandas as pd
from dataclasses_json import dataclass_json

from .config import ExperimentConfig, NetworkConfig, TrainConfig
from .errors import ErrorType, LatentSimError
from .latent import LatentSystem, simulate_latent
from .net import PseudoInvertibleNet
from .solvers import SolveResult, SolverSpec, integrate, mse
from .systems import VlmConfig, vlm_system
from .systems.base import OdeSystem
from .train import try_train

logger = logging.getLogger(__name__)

STUDIES = ("sample-size", "latent-dim", "panel-count")


@dataclass_json
@dataclass
class WorkPrecisionRecord:
    system: str
    method: str
    solver: str
    setting: float
    n_fcalls: int
    mse: float
    wall_time_s: float
    seed: int
    status: str = "ok"

    CSV_FIELDS = ("system", "method", "solver", "setting", "n_fcalls", "mse", "wall_time_s", "seed")

    def sort_key(self):
        return (self.system, self.method, self.solver, self.setting)


@dataclass_json
@dataclass
class StudyRecord:
    study: str
    value: float
    repetition: int
    seed: int
    speedup: float
    best_speedup: float
    orig_wall_time_s: float
    latent_wall_time_s: float
    wall_ratio: float
    orig_mse: float
    latent_mse: float
    status: str = "ok"

    CSV_FIELDS = ("study", "value", "repetition", "seed", "speedup", "best_speedup",
                  "orig_wall_time_s", "latent_wall_time_s", "wall_ratio", "orig_mse",
                  "latent_mse", "status")

    def sort_key(self):
        return (self.study, self.value, self.repetition)


Record = Union[WorkPrecisionRecord, StudyRecord]


# ---------------------------------------------------------------------------
# references and test conditions
# ---------------------------------------------------------------------------

def held_out_initial_conditions(system: OdeSystem, n_test: int, scale: float,
                                rng: np.random.Generator) -> np.ndarray:
    """Held-out initial states from the domain box scaled about its centre."""
    lower, upper = system.scaled_box(scale)
    return rng.uniform(lower, upper, size=(n_test, system.dim))


def reference_trajectory(system: OdeSystem, x0: np.ndarray, n_output: int,
                         tol: float = 1e-12) -> SolveResult:
    """Exact solution where one exists, tight Dopri5 otherwise."""
    t0, tf = system.horizon
    if system.exact is not None:
        grid = np.linspace(t0, tf, n_output)
        states = system.exact(x0, grid - t0)
        return SolveResult(grid, np.asarray(states), n_fcalls=0, n_steps=0)
    return integrate(system.rhs, x0, t0, tf, SolverSpec.dopri5(tol, n_output=n_output))


def reference_set(system: OdeSystem, ics: np.ndarray, n_output: int, tol: float = 1e-12,
                  threads: int = 1) -> List[SolveResult]:
    with ThreadPoolExecutor(max_workers=max(1, threads)) as executor:
        return list(executor.map(lambda x0: reference_trajectory(system, x0, n_output, tol), ics))


# ---------------------------------------------------------------------------
# work-precision sweeps
# ---------------------------------------------------------------------------

def _run_point(system: OdeSystem, net: Optional[PseudoInvertibleNet], spec: SolverSpec,
               ics: np.ndarray, references: Sequence[SolveResult], seed: int,
               endpoint_only: bool) -> WorkPrecisionRecord:
    if net is None:
        runner = system.with_counter()
        counter = runner.counter

        def simulate(x0):
            return integrate(runner, x0, system.horizon[0], system.horizon[1], spec)
    else:
        runner = LatentSystem(net, system)
        counter = runner.counter

        def simulate(x0):
            return simulate_latent(runner, x0, system.horizon, spec)

    errors, wall, status = [], 0.0, "ok"
    for x0, reference in zip(ics, references):
        try:
            result = simulate(x0)
        except LatentSimError as exc:
            if not exc.recoverable:
                raise
            logger.warning("%s %s %s setting %g failed: %s", system.name,
                           "latent" if net is not None else "original",
                           spec.kind.value, spec.setting, exc)
            status = exc.error_type.value
            errors.append(math.inf)
            break
        wall += result.wall_time
        errors.append(mse(result, reference, endpoint_only))

    error = math.inf if not all(np.isfinite(errors)) else float(np.mean(errors))
    return WorkPrecisionRecord(
        system=system.name,
        method="original" if net is None else "latent",
        solver=spec.kind.value,
        setting=spec.setting,
        n_fcalls=max(1, counter.count),
        mse=error,
        wall_time_s=wall,
        seed=seed,
        status=status,
    )


def work_precision(system: OdeSystem, net: Optional[PseudoInvertibleNet],
                   specs: Sequence[SolverSpec], ics: np.ndarray,
                   references: Sequence[SolveResult], seed: int = 0, threads: int = 1,
                   endpoint_only: bool = False) -> List[WorkPrecisionRecord]:
    """One record per solver setting, original equations when net is None."""
    with ThreadPoolExecutor(max_workers=max(1, threads)) as executor:
        futures = [executor.submit(_run_point, system, net, spec, ics, references, seed,
                                   endpoint_only) for spec in specs]
        records = [f.result() for f in futures]
    return sorted(records, key=WorkPrecisionRecord.sort_key)


def lower_envelope(records: Sequence[WorkPrecisionRecord]) -> pd.DataFrame:
    """Cheapest finite-error record at each error level.

    Rows are sorted by increasing MSE and their n_fcalls strictly decrease, so
    the curve is non-increasing in cost as the admitted error grows.
    """
    rows = sorted((r for r in records if np.isfinite(r.mse)), key=lambda r: (r.mse, r.n_fcalls))
    kept, best = [], math.inf
    for r in rows:
        if r.n_fcalls < best:
            best = r.n_fcalls
            kept.append({'mse': r.mse, 'n_fcalls': r.n_fcalls, 'solver': r.solver,
                         'setting': r.setting, 'method': r.method})
    return pd.DataFrame(kept, columns=['mse', 'n_fcalls', 'solver', 'setting', 'method'])


def envelope_cost(envelope: pd.DataFrame, level: float) -> float:
    """Fewest calls reaching an error of at most ``level`` (inf if none does)."""
    reachable = envelope.loc[envelope['mse'] <= level, 'n_fcalls']
    return float(reachable.min()) if len(reachable) else math.inf


def _ratios(original: Sequence[WorkPrecisionRecord], latent: Sequence[WorkPrecisionRecord],
            band: Tuple[float, float], n_levels: int) -> np.ndarray:
    orig_env, lat_env = lower_envelope(original), lower_envelope(latent)
    levels = np.logspace(np.log10(band[0]), np.log10(band[1]), n_levels)
    ratios = []
    for level in levels:
        a, b = envelope_cost(orig_env, level), envelope_cost(lat_env, level)
        if np.isfinite(a) and np.isfinite(b):
            ratios.append(a / b)
    return np.array(ratios)


def speedup_at_matched_mse(original, latent, band: Tuple[float, float],
                           n_levels: int = 21) -> float:
    """Geometric mean of original/latent envelope cost over log-spaced error levels."""
    ratios = _ratios(original, latent, band, n_levels)
    return float(np.exp(np.mean(np.log(ratios)))) if ratios.size else math.nan


def best_speedup(original, latent, band: Tuple[float, float], n_levels: int = 41) -> float:
    """Largest original/latent envelope cost ratio inside the error band."""
    ratios = _ratios(original, latent, band, n_levels)
    return float(np.max(ratios)) if ratios.size else math.nan


def repeat_envelopes(runs: Sequence[Sequence[WorkPrecisionRecord]],
                     band: Tuple[float, float] = (1e-10, 1e-1), n_levels: int = 19) -> pd.DataFrame:
    """Mean and standard deviation of envelope cost over repeated runs."""
    envelopes = [lower_envelope(run) for run in runs]
    levels = np.logspace(np.log10(band[0]), np.log10(band[1]), n_levels)
    rows = []
    for level in levels:
        costs = np.array([envelope_cost(env, level) for env in envelopes])
        finite = costs[np.isfinite(costs)]
        rows.append({
            'mse': level,
            'mean_fcalls': float(np.mean(finite)) if finite.size else math.nan,
            'std_fcalls': float(np.std(finite)) if finite.size else math.nan,
            'n_runs': int(finite.size),
        })
    return pd.DataFrame(rows)


# ---------------------------------------------------------------------------
# export
# ---------------------------------------------------------------------------

def _format(value) -> str:
    if isinstance(value, float):
        return repr(value)
    return str(value)


def export(records: Sequence[Record], path: Union[str, Path], format: str = "csv",
           record_type: type = WorkPrecisionRecord) -> Path:
    """Write records sorted by their key, as CSV (fixed header) or JSON lines."""
    path = Path(path)
    if records:
        record_type = type(records[0])
    ordered = sorted(records, key=record_type.sort_key)
    try:
        path.parent.mkdir(parents=True, exist_ok=True)
        with open(path, "w", newline="") as f:
            if format == "csv":
                writer = csv.writer(f, lineterminator="\n")
                writer.writerow(record_type.CSV_FIELDS)
                for record in ordered:
                    writer.writerow([_format(getattr(record, name)) for name in record_type.CSV_FIELDS])
            elif format == "jsonl":
                for record in ordered:
                    f.write(record.to_json() + "\n")
            else:
                raise LatentSimError(
                    message=f"Unsupported export format '{format}'",
                    error_type=ErrorType.CONFIGURATION,
                    context={'path': str(path)},
                )
    except OSError as exc:
        raise LatentSimError(
            message=f"Could not write results: {exc}",
            error_type=ErrorType.IO,
            context={'path': str(path)},
        ) from exc
    logger.info("Exported %d records to %s", len(ordered), path)
    return path


def read_csv(path: Union[str, Path], record_type: type = WorkPrecisionRecord) -> List[Record]:
    """Parse records written by ``export`` back into dataclasses."""
    types = {f.name: f.type for f in fields(record_type)}
    out = []
    with open(path, newline="") as f:
        for row in csv.DictReader(f):
            values = {}
            for name, text in row.items():
                kind = types[name]
                if kind in (int, "int"):
                    values[name] = int(text)
                elif kind in (float, "float"):
                    values[name] = float(text)
                else:
                    values[name] = text
            out.append(record_type(**values))
    return out


def records_frame(records: Sequence[Record]) -> pd.DataFrame:
    return pd.DataFrame([r.to_dict() for r in records])


# ---------------------------------------------------------------------------
# experiment drivers
# ---------------------------------------------------------------------------

@dataclass
class BenchOutcome:
    original: List[WorkPrecisionRecord]
    latent: List[List[WorkPrecisionRecord]]
    speedup: float
    best_speedup: float

    @property
    def records(self) -> List[WorkPrecisionRecord]:
        out = list(self.original)
        for run in self.latent:
            out.extend(run)
        return out


def _test_setup(system: OdeSystem, exp: ExperimentConfig, seed: int,
                threads: int) -> Tuple[np.ndarray, List[SolveResult]]:
    rng = np.random.default_rng([seed, 1])
    ics = held_out_initial_conditions(system, exp.bench.n_test, exp.bench.test_box_scale, rng)
    refs = reference_set(system, ics, exp.solvers.n_output, exp.bench.reference_tol, threads)
    return ics, refs


def run_bench(exp: ExperimentConfig, out_dir: Optional[Path] = None, threads: int = 1,
              net: Optional[PseudoInvertibleNet] = None,
              trainer: Optional[Callable[[int], Optional[PseudoInvertibleNet]]] = None) -> BenchOutcome:
    """Original and latent work-precision sweeps for one experiment.

    ``net`` is used as is; otherwise ``trainer(seed)`` supplies one net per
    repetition (exp.bench.reps of them).
    """
    system = exp.system.build()
    seed = exp.run.seed
    ics, refs = _test_setup(system, exp, seed, threads)
    specs = exp.solvers.specs()
    endpoint = exp.bench.endpoint_only

    original = work_precision(system, None, specs, ics, refs, seed, threads, endpoint)
    nets = [net] if net is not None else [trainer(seed + rep) for rep in range(exp.bench.reps)]
    latent_runs = [work_precision(system, n, specs, ics, refs, seed + rep, threads, endpoint)
                   for rep, n in enumerate(nets) if n is not None]

    band = exp.bench.mse_band
    speedups = [speedup_at_matched_mse(original, run, band) for run in latent_runs]
    bests = [best_speedup(original, run, band) for run in latent_runs]
    outcome = BenchOutcome(
        original=original,
        latent=latent_runs,
        speedup=float(np.nanmedian(speedups)) if speedups else math.nan,
        best_speedup=float(np.nanmedian(bests)) if bests else math.nan,
    )
    logger.info("%s: matched-error speedup %.2fx, best %.2fx in MSE band [%g, %g]",
                system.name, outcome.speedup, outcome.best_speedup, band[0], band[1])

    if out_dir is not None:
        out_dir = Path(out_dir)
        export(outcome.records, out_dir / "work_precision.csv", "csv")
        export(outcome.records, out_dir / "work_precision.jsonl", "jsonl")
        lower_envelope(original).to_csv(out_dir / "envelope_original.csv", index=False)
        for rep, run in enumerate(latent_runs):
            lower_envelope(run).to_csv(out_dir / f"envelope_latent_{rep}.csv", index=False)
        if len(latent_runs) > 1:
            repeat_envelopes(latent_runs).to_csv(out_dir / "envelope_latent_stats.csv", index=False)
    return outcome


def _failed(study: str, value: float, rep: int, seed: int, status: str) -> StudyRecord:
    nan = math.nan
    return StudyRecord(study, float(value), rep, seed, nan, nan, nan, nan, nan, nan, nan, status)


def _study_train_config(exp: ExperimentConfig, seed: int, **updates) -> TrainConfig:
    if exp.study.epochs is not None:
        updates.setdefault("epochs", exp.study.epochs)
    return exp.train.model_copy(update={"seed": seed, **updates})


def _speedup_study(exp: ExperimentConfig, study: str, values: Sequence[int],
                   configure: Callable[[int, int], Tuple[TrainConfig, NetworkConfig]],
                   threads: int) -> List[StudyRecord]:
    system = exp.system.build()
    specs = exp.solvers.specs()
    band = exp.bench.mse_band
    records = []
    for rep in range(exp.study.repetitions):
        seed = exp.run.seed + rep
        ics, refs = _test_setup(system, exp, seed, threads)
        original = work_precision(system, None, specs, ics, refs, seed, threads,
                                  exp.bench.endpoint_only)
        orig_env = lower_envelope(original)
        for value in values:
            train_cfg, network = configure(value, seed)
            result, error = try_train(system, train_cfg, network)
            if result is None:
                records.append(_failed(study, value, rep, seed, error.error_type.value))
                continue
            latent = work_precision(system, result.net, specs, ics, refs, seed, threads,
                                    exp.bench.endpoint_only)
            lat_env = lower_envelope(latent)
            records.append(StudyRecord(
                study=study, value=float(value), repetition=rep, seed=seed,
                speedup=speedup_at_matched_mse(original, latent, band),
                best_speedup=best_speedup(original, latent, band),
                orig_wall_time_s=float(sum(r.wall_time_s for r in original)),
                latent_wall_time_s=float(sum(r.wall_time_s for r in latent)),
                wall_ratio=float(sum(r.wall_time_s for r in latent)
                                 / max(sum(r.wall_time_s for r in original), 1e-300)),
                orig_mse=float(orig_env['mse'].min()) if len(orig_env) else math.inf,
                latent_mse=float(lat_env['mse'].min()) if len(lat_env) else math.inf,
            ))
            logger.info("%s study value %s rep %d: speedup %.2fx", study, value, rep,
                        records[-1].speedup)
    return records


def sample_size_study(exp: ExperimentConfig, threads: int = 1) -> List[StudyRecord]:
    """Speedup against the number of uniformly drawn training samples."""
    def configure(value, seed):
        return (_study_train_config(exp, seed, n_samples=int(value), sampling="uniform"),
                exp.network)
    return _speedup_study(exp, "sample-size", exp.study.sample_sizes, configure, threads)


def latent_dim_study(exp: ExperimentConfig, threads: int = 1) -> List[StudyRecord]:
    """Speedup against the latent dimension m."""
    def configure(value, seed):
        return (_study_train_config(exp, seed),
                exp.network.model_copy(update={"latent_dim": int(value)}))
    return _speedup_study(exp, "latent-dim", exp.study.latent_dims, configure, threads)


def panel_count_study(exp: ExperimentConfig, threads: int = 1) -> List[StudyRecord]:
    """Latent/original wall-time ratio against the wing panel count.

    Original runs use RK4 at ``study.original_dt``, latent runs Euler at
    ``study.latent_dt``; tail panels scale with the wing.
    """
    base_cfg = VlmConfig(**exp.system.params) if exp.system.name == "vlm" else VlmConfig()
    n_output = exp.solvers.n_output
    orig_spec = SolverSpec.rk4(exp.study.original_dt, n_output=n_output)
    lat_spec = SolverSpec.euler(exp.study.latent_dt, n_output=n_output)
    records = []
    for panels in exp.study.panel_counts:
        system = vlm_system(base_cfg.scaled_panels(int(panels)))
        if exp.system.horizon is not None:
            system.horizon = tuple(exp.system.horizon)
        for rep in range(exp.study.repetitions):
            seed = exp.run.seed + rep
            ics, refs = _test_setup(system, exp, seed, threads)
            result, error = try_train(system, _study_train_config(exp, seed), exp.network)
            if result is None:
                records.append(_failed("panel-count", panels, rep, seed, error.error_type.value))
                continue
            orig = _run_point(system, None, orig_spec, ics, refs, seed, exp.bench.endpoint_only)
            lat = _run_point(system, result.net, lat_spec, ics, refs, seed, exp.bench.endpoint_only)
            status = orig.status if orig.status != "ok" else lat.status
            records.append(StudyRecord(
                study="panel-count", value=float(panels), repetition=rep, seed=seed,
                speedup=orig.n_fcalls / lat.n_fcalls,
                best_speedup=orig.n_fcalls / lat.n_fcalls,
                orig_wall_time_s=orig.wall_time_s,
                latent_wall_time_s=lat.wall_time_s,
                wall_ratio=lat.wall_time_s / max(orig.wall_time_s, 1e-300),
                orig_mse=orig.mse,
                latent_mse=lat.mse,
                status=status,
            ))
            logger.info("panel-count %d rep %d: wall ratio %.3f (mse %.2e vs %.2e)", panels, rep,
                        records[-1].wall_ratio, orig.mse, lat.mse)
    return records


def summarize_study(records: Sequence[StudyRecord]) -> pd.DataFrame:
    """Median and spread of speedup and wall ratio per sweep value."""
    if not records:
        return pd.DataFrame(columns=['study', 'value', 'median_speedup', 'mean_speedup',
                                     'std_speedup', 'median_wall_ratio', 'n_ok'])
    df = records_frame(records)
    ok = df[df['status'] == 'ok']
    grouped = ok.groupby(['study', 'value'])
    summary = grouped.agg(
        median_speedup=('speedup', 'median'),
        mean_speedup=('speedup', 'mean'),
        std_speedup=('speedup', 'std'),
        median_wall_ratio=('wall_ratio', 'median'),
        n_ok=('speedup', 'size'),
    ).reset_index()
    return summary


def run_study(name: str, exp: ExperimentConfig, out_dir: Optional[Path] = None,
              threads: int = 1) -> List[StudyRecord]:
    if name == "sample-size":
        records = sample_size_study(exp, threads)
    elif name == "latent-dim":
        records = latent_dim_study(exp, threads)
    elif name == "panel-count":
        records = panel_count_study(exp, threads)
    else:
        raise LatentSimError(
            message=f"Unknown study '{name}'",
            error_type=ErrorType.CONFIGURATION,
            context={'known': list(STUDIES)},
        )
    failures = [r for r in records if r.status != "ok"]
    if failures:
        logger.warning("%d of %d study runs did not finish cleanly", len(failures), len(records))
    if out_dir is not None:
        out_dir = Path(out_dir)
        slug = name.replace("-", "_")
        export(records, out_dir / f"study_{slug}.csv", "csv")
        export(records, out_dir / f"study_{slug}.jsonl", "jsonl")
        summarize_study(records).to_csv(out_dir / f"study_{slug}_summary.csv", index=False)
    return records
