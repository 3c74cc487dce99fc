"""
End-to-end checks on trained networks. These train for a few hundred to a few
thousand epochs and are deselected by default; run them with ``pytest -m slow``.
The achieved speedups are logged at INFO and attached to the test report.
"""

import logging

import numpy as np
import pytest

from latent_accel.bench import (latent_dim_study, panel_count_study, run_bench, sample_size_study,
                                summarize_study)
from latent_accel.config import NetworkConfig, TrainConfig, default_experiment
from latent_accel.latent import LatentSystem, simulate_latent
from latent_accel.net import build_net
from latent_accel.solvers import SolverSpec
from latent_accel.systems import linear_exact, make_system
from latent_accel.train import random_directions, slowness_loss, train

pytestmark = pytest.mark.slow

logger = logging.getLogger(__name__)

NETWORK = NetworkConfig(latent_dim=8, n_layers=2, hidden_width=8, depth=1)
TRAIN = TrainConfig(epochs=200, lr=1e-2, n_samples=50, k=4, seed=0, log_every=50)

SWEEP = {
    "euler_dt": np.logspace(-3, np.log10(0.2), 10).tolist() + [0.08],
    "rk4_dt": np.logspace(-3, np.log10(0.2), 10).tolist(),
    "dopri5_tol": np.logspace(-10, -3, 8).tolist(),
}


def ordering_violations(values, increasing: bool = True) -> int:
    """Adjacent pairs out of order; missing values count as zero speedup."""
    v = np.nan_to_num(np.asarray(values, dtype=np.float64), nan=0.0)
    steps = np.diff(v)
    return int(np.sum(steps < 0)) if increasing else int(np.sum(steps > 0))


def trainer_for(exp):
    def trainer(seed):
        return train(exp.system.build(), exp.train.model_copy(update={"seed": seed}),
                     exp.network).net
    return trainer


def medians_by_value(records, values, column: str = "median_speedup"):
    """Per-value medians in sweep order, NaN where no run finished."""
    summary = summarize_study(records).set_index("value")
    return summary[column].reindex([float(v) for v in values]).tolist()


@pytest.fixture(scope="module")
def trained_linear():
    system = make_system("linear")
    return system, train(system, TRAIN, NETWORK)


class TestTrainedLinearSystem:

    def test_training_lowers_fixed_direction_loss(self, trained_linear):
        system, result = trained_linear
        fresh = build_net(3, 8, NETWORK.n_layers, NETWORK.hidden_width, NETWORK.depth,
                          NETWORK.clamp, np.random.default_rng(TRAIN.seed),
                          lift_std=NETWORK.lift_std)
        rng = np.random.default_rng(99)
        points = rng.uniform(system.lower, system.upper, size=(40, 3))
        directions = random_directions(rng, 64, 8)
        before = float(slowness_loss(LatentSystem(fresh, system), points, directions))
        after = float(slowness_loss(LatentSystem(result.net, system), points, directions))
        assert after < 0.5 * before

    def test_latent_run_decodes_to_exact_solution(self, trained_linear):
        system, result = trained_linear
        x0 = np.array([0.4, -0.3, 0.2])
        latent = simulate_latent(LatentSystem(result.net, system), x0, system.horizon,
                                 SolverSpec.dopri5(1e-10, n_output=21))
        np.testing.assert_allclose(latent.states, linear_exact(x0, latent.times), atol=1e-6)

    def test_best_loss_not_above_initial(self, trained_linear):
        _, result = trained_linear
        assert result.best_loss <= result.initial_loss
        assert len(result.loss_history) == TRAIN.epochs


class TestBenchWithTraining:

    def test_trained_bench_writes_results(self, tmp_path):
        exp = default_experiment("decay", {
            "network": {"latent_dim": 2, "n_layers": 1, "hidden_width": 4, "depth": 1},
            "train": {"epochs": 20, "n_samples": 20, "k": 1},
            "solvers": {"euler_dt": [0.01, 0.05], "rk4_dt": [0.05, 0.1], "dopri5_tol": [1e-6],
                        "n_output": 11},
            "bench": {"n_test": 2, "reps": 2},
        })

        def trainer(seed):
            return train(exp.system.build(), exp.train.model_copy(update={"seed": seed}),
                         exp.network).net

        outcome = run_bench(exp, tmp_path, threads=2, trainer=trainer)
        assert len(outcome.latent) == 2
        assert len(outcome.records) == 3 * 5
        for name in ("work_precision.csv", "envelope_original.csv", "envelope_latent_0.csv",
                     "envelope_latent_1.csv", "envelope_latent_stats.csv"):
            assert (tmp_path / name).exists()


class TestLinearSpeedup:
    """Trained linear network against the original equations"""

    @pytest.fixture(scope="class")
    def outcome(self, tmp_path_factory):
        exp = default_experiment("linear", {
            "network": {"latent_dim": 32, "n_layers": 4, "hidden_width": 32, "depth": 2},
            "train": {"epochs": 3000, "n_samples": 300, "k": 4, "log_every": 500},
            "solvers": SWEEP,
            "bench": {"n_test": 5},
        })
        return run_bench(exp, tmp_path_factory.mktemp("linear"), threads=1,
                         trainer=trainer_for(exp))

    def test_latent_euler_beats_original_at_large_step(self, outcome, record_property):
        def euler_at(records):
            return next(r for r in records if r.solver == "euler" and abs(r.setting - 0.08) < 1e-12)

        original, latent = euler_at(outcome.original), euler_at(outcome.latent[0])
        record_property("original_euler_mse", original.mse)
        record_property("latent_euler_mse", latent.mse)
        logger.info("Euler dt=0.08: original MSE %.3e, latent MSE %.3e", original.mse, latent.mse)
        assert latent.mse < original.mse

    def test_envelope_speedup_in_band(self, outcome, record_property):
        record_property("best_speedup", outcome.best_speedup)
        logger.info("linear best speedup %.2fx in [1e-4, 1e-2]", outcome.best_speedup)
        assert outcome.best_speedup >= 2.0


class TestVortexSpeedup:

    def test_envelope_speedup_in_band(self, tmp_path, record_property):
        exp = default_experiment("vortex", {
            "network": {"latent_dim": 32, "n_layers": 4, "hidden_width": 32, "depth": 3},
            "train": {"epochs": 3000, "n_trajectories": 40, "k": 4, "log_every": 500},
            "solvers": SWEEP,
            "bench": {"n_test": 5},
        })
        outcome = run_bench(exp, tmp_path, threads=1, trainer=trainer_for(exp))
        record_property("best_speedup", outcome.best_speedup)
        logger.info("vortex best speedup %.2fx in [1e-5, 1e-3]", outcome.best_speedup)
        assert outcome.best_speedup >= 3.0


class TestStudies:
    """Trends across the sensitivity sweeps"""

    def test_latent_dimension_trend(self, record_property):
        dims = [8, 16, 32, 64]
        exp = default_experiment("vortex", {
            "network": {"n_layers": 4, "hidden_width": 32, "depth": 2},
            "train": {"n_trajectories": 20, "log_every": 500},
            "solvers": SWEEP,
            "bench": {"n_test": 3},
            "study": {"latent_dims": dims, "repetitions": 3, "epochs": 1000},
        })
        medians = medians_by_value(latent_dim_study(exp), dims)
        record_property("median_speedups", medians)
        logger.info("latent-dim medians %s", dict(zip(dims, medians)))
        assert ordering_violations(medians, increasing=True) <= 1

    def test_more_samples_help(self, record_property):
        sizes = [10, 300]
        exp = default_experiment("linear", {
            "network": {"latent_dim": 32, "n_layers": 4, "hidden_width": 32, "depth": 2},
            "train": {"k": 4, "log_every": 500},
            "solvers": SWEEP,
            "bench": {"n_test": 3},
            "study": {"sample_sizes": sizes, "repetitions": 3, "epochs": 2000},
        })
        small, large = medians_by_value(sample_size_study(exp), sizes)
        record_property("median_speedups", [small, large])
        logger.info("sample-size medians: N=10 %.2fx, N=300 %.2fx", small, large)
        assert np.nan_to_num(large) > np.nan_to_num(small)

    def test_wall_ratio_falls_with_panel_count(self, record_property):
        panels = [10, 25, 50, 100]
        exp = default_experiment("vlm", {
            "network": {"latent_dim": 8, "n_layers": 3, "hidden_width": 16, "depth": 2},
            "train": {"n_trajectories": 10, "log_every": 500},
            "bench": {"n_test": 3},
            "study": {"panel_counts": panels, "repetitions": 1, "epochs": 1000},
        })
        ratios = medians_by_value(panel_count_study(exp), panels, column="median_wall_ratio")
        record_property("wall_ratios", ratios)
        logger.info("panel-count wall ratios %s", dict(zip(panels, ratios)))
        assert all(np.isfinite(ratios))
        assert ordering_violations(ratios, increasing=False) <= 1
