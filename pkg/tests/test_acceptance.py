"""Desk-scale Monte Carlo acceptance runs. Deselected by default; run with `pytest -m slow`."""

import numpy as np
import pytest

from ml_smoother.config import load_config
from ml_smoother.experiments import run_linear_study, run_nonlinear_study
from ml_smoother.kalman import kalman_filter, rts_smooth
from ml_smoother.model import benchmark_linear_model, simulate
from ml_smoother.oracles import (
    check_linear_identities,
    check_mc_convergence,
    check_particle_information,
    check_score_moments,
    run_oracle_suite,
)
from ml_smoother.smoother import IterationConfig, Scheme, smooth_linear_exact

pytestmark = pytest.mark.slow


def _cfg(preset: str, **run):
    return load_config(preset=preset, overrides={"run": run, "out": {"plots": False}})


def test_exact_smoother_matches_rts_at_full_horizon():
    model = benchmark_linear_model(100)
    traj = simulate(model, seed=0)
    fr = kalman_filter(model, traj.observations)
    rts = rts_smooth(model, fr)
    res = smooth_linear_exact(model, traj.observations, fr, IterationConfig(scheme=Scheme.NEWTON))
    np.testing.assert_allclose(res.means, rts.mean, atol=1e-9)
    assert np.all(res.iterations[:-1] <= 2)


def test_identity_suite():
    report = run_oracle_suite(
        _cfg("linear", n=100),
        checks=(check_linear_identities, check_score_moments, check_particle_information),
    )
    assert report.passed, report.failed


def test_smc_means_match_rts_within_mc_error():
    report = run_oracle_suite(_cfg("linear", n=100, M=2000), checks=(check_mc_convergence,))
    assert report.passed, [c.detail for c in report.checks]


def test_reduced_linear_standard_errors():
    report = run_linear_study(_cfg("linear-reduced", seed=4))
    s = report.summary
    assert s.mean_rel_sigma_dev <= 0.25
    assert s.mean_sigma_excess <= 0.10


def test_linear_coverage_over_seeds():
    fractions = [run_linear_study(_cfg("linear-reduced", seed=seed)).summary.coverage_fraction for seed in range(20)]
    assert np.mean(fractions) >= 0.90


def test_reduced_nonlinear_study():
    reports = [run_nonlinear_study(_cfg("tanh-reduced", seed=seed)) for seed in range(5)]
    assert np.mean([r.summary.convergence_rate for r in reports]) >= 0.99
    ratios = [r.summary.mean_sigma_ratio_sample for r in reports]
    assert 0.5 <= np.mean(ratios) <= 2.0
    assert np.mean([r.summary.coverage_fraction for r in reports]) >= 0.90
