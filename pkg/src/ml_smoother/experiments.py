"""Linear and nonlinear studies: simulate, filter, smooth, estimate standard errors."""

import logging
import time
from contextlib import contextmanager
from dataclasses import dataclass

import numpy as np
from numpy.typing import NDArray

from .config import ExperimentConfig, Settings, build_model
from .covariance import covariance_recursion, repeated_sampling, replicate_seed, terminal_covariance
from .errors import ConfigError
from .kalman import kalman_filter, rts_smooth
from .model import LinearGaussianModel, StateSpaceModel, Trajectory, simulate
from .models import RunReport, RunSummary, StepRow, StudyKind
from .particle import filtered_mean, ml_state_estimate, pf_run
from .smoother import smooth_backward

logger = logging.getLogger("mlsmooth.experiments")

CI_Z = 1.96


@contextmanager
def _timed(timings: dict[str, float], stage: str):
    start = time.perf_counter()
    try:
        yield
    finally:
        timings[stage] = timings.get(stage, 0.0) + time.perf_counter() - start


@dataclass
class SmcEstimate:
    """Smoothed means, standard errors and per-step convergence from the particle path."""

    means: NDArray[np.float64]
    sigma_hat: NDArray[np.float64]
    s_hat: NDArray[np.float64]
    converged: NDArray[np.bool_]
    convergence_rate: float
    replicates_used: int
    filtered: NDArray[np.float64]
    ml_estimate: NDArray[np.float64]


def simulate_trajectory(cfg: ExperimentConfig) -> tuple[StateSpaceModel, Trajectory]:
    model = build_model(cfg.model, cfg.run.n)
    traj = simulate(model, cfg.run.n, cfg.run.seed)
    traj.metadata.update(kind=model.kind, n=cfg.run.n)
    return model, traj


def _smc_estimate(
    model: StateSpaceModel,
    traj: Trajectory,
    cfg: ExperimentConfig,
    timings: dict[str, float],
) -> SmcEstimate:
    """Primary particle pass plus repeated sampling (or the single-replicate recursion when N = 1)."""
    y = traj.observations
    n = traj.horizon
    run = cfg.run
    with _timed(timings, "particle_filter"):
        # replicate index N is never used by repeated sampling
        ph = pf_run(model, y, run.M, replicate_seed(run.seed, run.N))
    filtered = np.array([filtered_mean(ph, k) for k in range(n + 1)])
    ml_estimate = np.array([ml_state_estimate(model, ph, y, k) for k in range(n + 1)])

    linear_y = y if isinstance(model, LinearGaussianModel) else None
    if run.N >= 2:
        with _timed(timings, "repeated_sampling"):
            est = repeated_sampling(
                model, y, run.N, run.M, cfg.iteration, seed=run.seed,
                threads=run.threads or Settings.from_env().threads,
            )
        return SmcEstimate(
            means=est.means,
            sigma_hat=est.std_errors,
            s_hat=est.sample_std_errors(traj.states),
            converged=est.counts == est.num_replicates,
            convergence_rate=est.convergence_rate,
            replicates_used=int(est.counts.min()),
            filtered=filtered,
            ml_estimate=ml_estimate,
        )

    with _timed(timings, "smoother"):
        res = smooth_backward(model, y, ph, cfg.iteration)
    cov = covariance_recursion(
        res.info_xi, res.cross_x_next, res.cross_next_x, terminal_covariance(model, ph, linear_y)
    )
    sigma_hat = np.sqrt(np.maximum(np.diagonal(cov, axis1=1, axis2=2), 0.0))
    return SmcEstimate(
        means=res.means,
        sigma_hat=sigma_hat,
        s_hat=np.abs(res.means - traj.states),
        converged=res.converged,
        convergence_rate=float(res.converged[:n].mean()),
        replicates_used=1,
        filtered=filtered,
        ml_estimate=ml_estimate,
    )


def _rows(
    traj: Trajectory,
    filt: NDArray[np.float64],
    rts: NDArray[np.float64],
    theory: NDArray[np.float64],
    smc: SmcEstimate,
) -> list[StepRow]:
    lo = smc.means - CI_Z * smc.sigma_hat
    hi = smc.means + CI_Z * smc.sigma_hat
    return [
        StepRow(
            k=k,
            x_true=traj.states[k].tolist(),
            xhat_filt=filt[k].tolist(),
            xhat_rts=rts[k].tolist(),
            xhat_smc=smc.means[k].tolist(),
            sigma_theory=theory[k].tolist(),
            sigma_hat=smc.sigma_hat[k].tolist(),
            ci_lo=lo[k].tolist(),
            ci_hi=hi[k].tolist(),
            converged=bool(smc.converged[k]),
            s_hat=smc.s_hat[k].tolist(),
            xhat_ml=smc.ml_estimate[k].tolist(),
        )
        for k in range(traj.horizon + 1)
    ]


def coverage(truth: NDArray[np.float64], lo: NDArray[np.float64], hi: NDArray[np.float64]) -> tuple[int, float]:
    """(steps with every component inside [lo, hi], fraction of inside entries)."""
    inside = (truth >= lo) & (truth <= hi)
    return int(np.all(inside, axis=1).sum()), float(inside.mean())


def _summary(
    traj: Trajectory,
    smc: SmcEstimate,
    rts: NDArray[np.float64] | None = None,
    theory: NDArray[np.float64] | None = None,
) -> RunSummary:
    lo = smc.means - CI_Z * smc.sigma_hat
    hi = smc.means + CI_Z * smc.sigma_hat
    count, fraction = coverage(traj.states, lo, hi)
    summary = RunSummary(
        coverage_count=count,
        coverage_fraction=fraction,
        convergence_rate=smc.convergence_rate,
        replicates_used=smc.replicates_used,
    )
    positive = smc.s_hat > 0
    if np.any(positive):
        summary.mean_sigma_ratio_sample = float(np.mean(smc.sigma_hat[positive] / smc.s_hat[positive]))
    if rts is not None and theory is not None:
        summary.mean_abs_smc_rts = float(np.mean(np.abs(smc.means - rts)))
        rel = (smc.sigma_hat - theory) / theory
        summary.mean_rel_sigma_dev = float(np.mean(np.abs(rel)))
        summary.mean_sigma_excess = float(np.mean(rel))
    return summary


def run_linear_study(cfg: ExperimentConfig, zero_gain: bool = False) -> RunReport:
    """Kalman, RTS and the particle ML smoother side by side on a linear model.

    `zero_gain` forces the RTS gains to zero, which makes the RTS column a
    copy of the filtered column.
    """
    timings: dict[str, float] = {}
    with _timed(timings, "simulate"):
        model, traj = simulate_trajectory(cfg)
    if not isinstance(model, LinearGaussianModel):
        raise ConfigError(f"linear study needs a linear model, got kind={model.kind}")
    with _timed(timings, "kalman"):
        fr = kalman_filter(model, traj.observations)
        rts = rts_smooth(model, fr, zero_gain=zero_gain)
    theory = np.sqrt(np.diagonal(rts.cov, axis1=1, axis2=2))
    smc = _smc_estimate(model, traj, cfg, timings)
    report = RunReport(
        study=StudyKind.LINEAR,
        config=cfg,
        state_dim=model.state_dim,
        rows=_rows(traj, fr.upd_mean, rts.mean, theory, smc),
        summary=_summary(traj, smc, rts.mean, theory),
        timings=timings,
    )
    logger.info(
        "linear_study_done n=%d M=%d N=%d coverage=%.3f mean_abs_smc_rts=%.3e",
        cfg.run.n, cfg.run.M, cfg.run.N, report.summary.coverage_fraction, report.summary.mean_abs_smc_rts,
    )
    return report


def run_nonlinear_study(cfg: ExperimentConfig) -> RunReport:
    """Particle ML smoother, filter and ML state estimator on a nonlinear model."""
    timings: dict[str, float] = {}
    with _timed(timings, "simulate"):
        model, traj = simulate_trajectory(cfg)
    smc = _smc_estimate(model, traj, cfg, timings)
    missing = np.full_like(traj.states, np.nan)
    report = RunReport(
        study=StudyKind.NONLINEAR,
        config=cfg,
        state_dim=model.state_dim,
        rows=_rows(traj, smc.filtered, missing, missing, smc),
        summary=_summary(traj, smc),
        timings=timings,
    )
    logger.info(
        "nonlinear_study_done n=%d M=%d N=%d coverage=%.3f convergence=%.3f",
        cfg.run.n, cfg.run.M, cfg.run.N, report.summary.coverage_fraction, report.summary.convergence_rate,
    )
    return report


def run_study(study: StudyKind, cfg: ExperimentConfig) -> RunReport:
    if study is StudyKind.LINEAR:
        return run_linear_study(cfg)
    return run_nonlinear_study(cfg)
