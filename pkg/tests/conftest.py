"""Shared fixtures: benchmark and scalar models with simulated records, stub study runners."""

import pytest

from ml_smoother.config import ExperimentConfig
from ml_smoother.errors import ReplicateShortfallError
from ml_smoother.kalman import kalman_filter, rts_smooth
from ml_smoother.model import benchmark_linear_model, scalar_linear_model, simulate
from ml_smoother.models import RunReport, RunSummary, StepRow, StudyKind


@pytest.fixture
def benchmark():
    return benchmark_linear_model(horizon=30)


@pytest.fixture
def benchmark_record(benchmark):
    traj = simulate(benchmark, seed=3)
    fr = kalman_filter(benchmark, traj.observations)
    return traj, fr, rts_smooth(benchmark, fr)


@pytest.fixture
def scalar():
    return scalar_linear_model(horizon=10)


@pytest.fixture
def scalar_record(scalar):
    traj = simulate(scalar, seed=5)
    fr = kalman_filter(scalar, traj.observations)
    return traj, fr, rts_smooth(scalar, fr)


def _fake_report(study: StudyKind, cfg: ExperimentConfig) -> RunReport:
    rows = [
        StepRow(
            k=k,
            x_true=[float(k)],
            xhat_filt=[float(k)],
            xhat_rts=[float(k)],
            xhat_smc=[float(k)],
            sigma_theory=[1.0],
            sigma_hat=[1.0],
            ci_lo=[k - 1.96],
            ci_hi=[k + 1.96],
            converged=True,
            s_hat=[0.5],
            xhat_ml=[float(k)],
        )
        for k in range(cfg.run.n + 1)
    ]
    summary = RunSummary(coverage_count=len(rows), coverage_fraction=1.0, convergence_rate=1.0, replicates_used=1)
    return RunReport(study=study, config=cfg, state_dim=1, rows=rows, summary=summary)


@pytest.fixture
def fake_runner():
    """Study runner returning a fixed one-dimensional report instantly."""
    return _fake_report


@pytest.fixture
def failing_runner():
    def runner(study: StudyKind, cfg: ExperimentConfig) -> RunReport:
        raise ReplicateShortfallError("only 1 of 4 replicates usable at step 3")

    return runner
