"""
Command-line interface.

    latent-accel train <config>
    latent-accel simulate <config> [--latent] [--checkpoint PATH]
    latent-accel bench <config> [--reps N] [--checkpoint PATH]
    latent-accel study {sample-size,latent-dim,panel-count} <config>

Global flags (--seed, --threads, --out, --log-level) are accepted after any
subcommand and override the config's ``run`` section.
"""

import argparse
import json
import logging
import os
import sys
from pathlib import Path
from typing import List, Optional

import numpy as np
import pandas as pd

from .bench import (STUDIES, held_out_initial_conditions, reference_trajectory, run_bench,
                    run_study, summarize_study)
from .config import ExperimentConfig, load_config
from .errors import ErrorType, LatentSimError
from .latent import LatentSystem, encode_trajectory, simulate_latent, simulate_original
from .net import PseudoInvertibleNet, load_checkpoint, save_checkpoint
from .solvers import mse
from .train import train

logger = logging.getLogger(__name__)

CHECKPOINT_NAME = "net.lsim"
LOG_FORMAT = '%(asctime)s - %(name)s - %(levelname)s - %(message)s'


def setup_logging(out_dir: Path, level: str) -> None:
    out_dir.mkdir(parents=True, exist_ok=True)
    logging.basicConfig(
        level=getattr(logging, level.upper(), logging.INFO),
        format=LOG_FORMAT,
        handlers=[
            logging.FileHandler(out_dir / 'latent_accel.log'),
            logging.StreamHandler(sys.stderr),
        ],
        force=True,
    )


def _common_flags() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument('--seed', type=int, help='Random seed (overrides run.seed and train.seed)')
    common.add_argument('--threads', type=int,
                        help='Worker threads, 0 for one per physical core, 1 for deterministic runs')
    common.add_argument('--out', type=str, help='Output directory (overrides run.out)')
    common.add_argument('--log-level', type=str, help='Logging level (DEBUG, INFO, ...)')
    return common


def build_parser() -> argparse.ArgumentParser:
    common = _common_flags()
    parser = argparse.ArgumentParser(
        prog='latent-accel',
        description='Accelerate ODE simulation through trained pseudo-invertible latent spaces',
    )
    sub = parser.add_subparsers(dest='command', required=True)

    p_train = sub.add_parser('train', parents=[common], help='Train a network and save a checkpoint')
    p_train.add_argument('config', type=str, help='Experiment config (JSON)')

    p_sim = sub.add_parser('simulate', parents=[common], help='Simulate one initial condition')
    p_sim.add_argument('config', type=str)
    p_sim.add_argument('--latent', action='store_true', help='Also simulate in the latent space')
    p_sim.add_argument('--checkpoint', type=str, help='Network checkpoint (default <out>/net.lsim)')

    p_bench = sub.add_parser('bench', parents=[common], help='Work-precision sweeps')
    p_bench.add_argument('config', type=str)
    p_bench.add_argument('--reps', type=int, help='Training repetitions (overrides bench.reps)')
    p_bench.add_argument('--checkpoint', type=str, help='Benchmark this network instead of training')

    p_study = sub.add_parser('study', parents=[common], help='Sensitivity studies')
    p_study.add_argument('study', choices=STUDIES)
    p_study.add_argument('config', type=str)
    p_study.add_argument('--reps', type=int, help='Repetitions per sweep value')
    return parser


def apply_overrides(exp: ExperimentConfig, args: argparse.Namespace) -> ExperimentConfig:
    run = exp.run.model_copy()
    train_cfg = exp.train.model_copy()
    if args.seed is not None:
        run.seed = args.seed
        train_cfg.seed = args.seed
    if args.threads is not None:
        if args.threads < 0:
            raise LatentSimError(
                message="--threads must be non-negative",
                error_type=ErrorType.CONFIGURATION,
                context={'threads': args.threads},
            )
        run.threads = args.threads
    train_cfg.threads = run.workers
    if args.out is not None:
        run.out = args.out
    if args.log_level is not None:
        run.log_level = args.log_level
    update = {'run': run, 'train': train_cfg}
    reps = getattr(args, 'reps', None)
    if reps is not None:
        if args.command == 'bench':
            update['bench'] = exp.bench.model_copy(update={'reps': reps})
        else:
            update['study'] = exp.study.model_copy(update={'repetitions': reps})
    return exp.model_copy(update=update)


def _trained_net(exp: ExperimentConfig, out_dir: Path, seed: int) -> Optional[PseudoInvertibleNet]:
    system = exp.system.build()
    result = train(system, exp.train.model_copy(update={'seed': seed}), exp.network,
                   out_dir=out_dir / f"seed_{seed}")
    save_checkpoint(result.net, out_dir / f"seed_{seed}" / CHECKPOINT_NAME)
    return result.net


def cmd_train(exp: ExperimentConfig, out_dir: Path, args) -> dict:
    system = exp.system.build()
    result = train(system, exp.train, exp.network, out_dir=out_dir)
    save_checkpoint(result.net, out_dir / CHECKPOINT_NAME)
    summary = {'system': system.name, **result.to_dict(),
               'checkpoint': str(out_dir / CHECKPOINT_NAME)}
    (out_dir / 'train_summary.json').write_text(json.dumps(summary, indent=2))
    return summary


def cmd_simulate(exp: ExperimentConfig, out_dir: Path, args) -> dict:
    system = exp.system.build()
    spec = exp.simulate.spec()
    if exp.simulate.x0 is not None:
        x0 = np.asarray(exp.simulate.x0, dtype=np.float64)
    else:
        rng = np.random.default_rng([exp.run.seed, 1])
        x0 = held_out_initial_conditions(system, 1, exp.bench.test_box_scale, rng)[0]
    if x0.shape != (system.dim,):
        raise LatentSimError(
            message=f"simulate.x0 has {x0.size} entries, system '{system.name}' needs {system.dim}",
            error_type=ErrorType.CONFIGURATION,
        )

    reference = reference_trajectory(system, x0, spec.n_output, exp.bench.reference_tol)
    original = simulate_original(system, x0, None, spec)
    summary = {
        'system': system.name, 'solver': spec.kind.value, 'setting': spec.setting,
        'x0': x0.tolist(),
        'original': {'n_fcalls': original.n_fcalls, 'mse': mse(original, reference)},
    }
    frame = {'t': original.times}
    for i in range(system.dim):
        frame[f'reference_x{i}'] = reference.states[:, i]
        frame[f'original_x{i}'] = original.states[:, i]

    if args.latent:
        path = Path(args.checkpoint) if args.checkpoint else out_dir / CHECKPOINT_NAME
        net = load_checkpoint(path)
        latent = simulate_latent(LatentSystem(net, system), x0, system.horizon, spec)
        summary['latent'] = {'n_fcalls': latent.n_fcalls,
                             'total_fcalls': latent.extras['total_fcalls'],
                             'mse': mse(latent, reference)}
        for i in range(system.dim):
            frame[f'latent_x{i}'] = latent.states[:, i]
        z = latent.extras['latent_states']
        z_ref = encode_trajectory(net, reference.states)
        latent_frame = {'t': latent.times}
        for i in range(z.shape[1]):
            latent_frame[f'z{i}'] = z[:, i]
            latent_frame[f'reference_z{i}'] = z_ref[:, i]
        pd.DataFrame(latent_frame).to_csv(out_dir / 'latent_trajectory.csv', index=False)

    pd.DataFrame(frame).to_csv(out_dir / 'trajectory.csv', index=False)
    logger.info("Simulation summary: %s", summary)
    return summary


def cmd_bench(exp: ExperimentConfig, out_dir: Path, args) -> dict:
    threads = exp.run.workers
    if args.checkpoint:
        outcome = run_bench(exp, out_dir, threads, net=load_checkpoint(args.checkpoint))
    else:
        outcome = run_bench(exp, out_dir, threads,
                            trainer=lambda seed: _trained_net(exp, out_dir, seed))
    return {'system': exp.system.name, 'speedup': outcome.speedup,
            'best_speedup': outcome.best_speedup, 'mse_band': list(exp.bench.mse_band),
            'n_records': len(outcome.records)}


def cmd_study(exp: ExperimentConfig, out_dir: Path, args) -> dict:
    records = run_study(args.study, exp, out_dir, exp.run.workers)
    summary = summarize_study(records)
    return {'study': args.study, 'summary': summary.to_dict(orient='records')}


COMMANDS = {
    'train': cmd_train,
    'simulate': cmd_simulate,
    'bench': cmd_bench,
    'study': cmd_study,
}


def main(argv: Optional[List[str]] = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        exp = apply_overrides(load_config(args.config), args)
        out_dir = Path(exp.run.out)
        level = exp.run.log_level or os.environ.get('LOG_LEVEL', 'INFO')
        setup_logging(out_dir, level)
        summary = COMMANDS[args.command](exp, out_dir, args)
    except LatentSimError as exc:
        logging.getLogger(__name__).error("%s", exc)
        print(json.dumps({'error': exc.to_dict()}, default=str), file=sys.stderr)
        return 2 if exc.error_type == ErrorType.CONFIGURATION else 1
    print(json.dumps(summary, default=str))
    return 0


if __name__ == '__main__':
    sys.exit(main())
