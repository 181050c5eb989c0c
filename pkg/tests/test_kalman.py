import numpy as np
import pytest
from pytest import approx

from ml_smoother.errors import StepIndexError
from ml_smoother.kalman import (
    backward_conditional_mean,
    cross_covariance_residual,
    expected_information_linear,
    incomplete_loglik_linear,
    incomplete_score_linear,
    incomplete_score_linear_pair,
    info_blocks_linear,
    kalman_filter,
    rts_smooth,
    woodbury_residual,
)
from ml_smoother.model import LinearGaussianModel, simulate
from ml_smoother.numerics import finite_diff_grad, psd_dominates


def test_scalar_filter_first_steps(scalar, scalar_record):
    _, fr, _ = scalar_record
    assert fr.upd_cov[0, 0, 0] == approx(0.5)
    assert fr.pred_cov[1, 0, 0] == approx(1.5)
    assert fr.upd_cov[1, 0, 0] == approx(0.6)


def test_covariance_orderings(benchmark_record):
    _, fr, rts = benchmark_record
    n = fr.horizon
    for k in range(n + 1):
        assert psd_dominates(fr.pred_cov[k], fr.upd_cov[k])
        assert psd_dominates(fr.upd_cov[k], rts.cov[k])
    for k in range(n):
        assert np.all(np.diag(rts.cov[k]) < np.diag(fr.upd_cov[k]))
    np.testing.assert_allclose(rts.cov[n], fr.upd_cov[n])


def test_identities(benchmark, benchmark_record):
    _, fr, rts = benchmark_record
    assert woodbury_residual(benchmark, fr, rts) < 1e-10
    assert cross_covariance_residual(benchmark, fr) < 1e-10
    for k in range(1, fr.horizon + 1):
        assert fr.cross_cov[k] == approx(fr.upd_cov[k - 1] @ benchmark.F.T, abs=1e-10)


def test_zero_gain_returns_filtered(benchmark, benchmark_record):
    _, fr, _ = benchmark_record
    rts = rts_smooth(benchmark, fr, zero_gain=True)
    np.testing.assert_allclose(rts.mean, fr.upd_mean)
    np.testing.assert_allclose(rts.cov, fr.upd_cov)


def test_rts_means_are_score_roots(benchmark, benchmark_record):
    _, fr, rts = benchmark_record
    for k in range(fr.horizon):
        s = incomplete_score_linear(benchmark, fr, k, rts.mean[k], rts.mean[k + 1])
        assert np.max(np.abs(s)) < 1e-8


def test_score_is_gradient_of_loglik(benchmark, benchmark_record):
    _, fr, _ = benchmark_record
    k = 7
    x_next = fr.upd_mean[k + 1]
    x = fr.upd_mean[k] + np.array([0.2, -0.1, 0.3])
    numeric = finite_diff_grad(lambda z: incomplete_loglik_linear(benchmark, fr, k, z, x_next), x)
    assert incomplete_score_linear(benchmark, fr, k, x, x_next) == approx(numeric, rel=1e-5, abs=1e-6)


def test_information_blocks(benchmark, benchmark_record):
    _, fr, _ = benchmark_record
    k = 4
    blocks = info_blocks_linear(benchmark, fr, k)
    q_inv = np.linalg.inv(benchmark.Q.cov)
    assert blocks.next_x == approx(q_inv @ benchmark.F)
    assert blocks.x_next == approx(blocks.next_x.T)
    joint = expected_information_linear(benchmark, fr, k)
    assert joint.shape == (6, 6)
    assert joint == approx(joint.T)
    assert np.linalg.eigvalsh(joint).min() > 0
    pair = incomplete_score_linear_pair(benchmark, fr, k, fr.upd_mean[k], fr.upd_mean[k + 1])
    assert pair.shape == (6,)


def test_backward_conditional_mean_with_zero_noise_limit():
    # tiny process noise: x_{k-1} is pinned to F^{-1} x_k
    model = LinearGaussianModel(F=[[2.0]], H=[[1.0]], Q=[[1e-10]], R=[[1.0]], mu=[0.0], P0=[[1.0]], horizon=3)
    traj = simulate(model, seed=0)
    fr = kalman_filter(model, traj.observations)
    assert backward_conditional_mean(model, fr, 2, [1.0]) == approx([0.5], abs=1e-6)


def test_step_bounds(benchmark, benchmark_record):
    traj, fr, _ = benchmark_record
    with pytest.raises(StepIndexError):
        incomplete_score_linear(benchmark, fr, fr.horizon, traj.states[0], traj.states[0])
    with pytest.raises(StepIndexError):
        backward_conditional_mean(benchmark, fr, 0, traj.states[0])
    with pytest.raises(StepIndexError):
        kalman_filter(benchmark, np.zeros((benchmark.horizon + 2, 1)))
