import numpy as np
import pytest
from pytest import approx
from scipy import integrate

from ml_smoother.errors import ModelConfigError, StepIndexError
from ml_smoother.model import (
    LinearGaussianModel,
    NonlinearTanhModel,
    benchmark_linear_model,
    scalar_linear_model,
    simulate,
)
from ml_smoother.numerics import finite_diff_grad, finite_diff_hess, finite_diff_jacobian


def _points(model, seed=0):
    rng = np.random.default_rng(seed)
    return rng.normal(scale=0.6, size=(3, model.state_dim))


@pytest.mark.parametrize("model", [benchmark_linear_model(5), NonlinearTanhModel(5)], ids=["linear", "tanh"])
def test_derivatives_match_finite_differences(model):
    x_prev, x, x_next = _points(model)
    y = np.full(model.obs_dim, 0.4)
    k = 2
    assert model.d_initial(x) == approx(finite_diff_grad(model.initial_logpdf, x), rel=1e-4, abs=1e-6)
    assert model.d_meas(k, y, x) == approx(
        finite_diff_grad(lambda z: model.measurement_logpdf(k, y, z), x), rel=1e-4, abs=1e-6
    )
    assert model.d_trans_in(k + 1, x_next, x) == approx(
        finite_diff_grad(lambda z: model.transition_logpdf(k + 1, x_next, z), x), rel=1e-4, abs=1e-6
    )
    assert model.d_trans_out(k, x, x_prev) == approx(
        finite_diff_grad(lambda z: model.transition_logpdf(k, z, x_prev), x), rel=1e-4, abs=1e-6
    )
    assert model.h_trans_in(k + 1, x_next, x) == approx(
        -finite_diff_hess(lambda z: model.transition_logpdf(k + 1, x_next, z), x), rel=1e-4, abs=1e-5
    )
    assert model.h_meas(k, x) == approx(
        -finite_diff_hess(lambda z: model.measurement_logpdf(k, y, z), x), rel=1e-4, abs=1e-5
    )
    assert model.h_trans_cross(k, x_prev) == approx(
        finite_diff_jacobian(lambda z: model.d_trans_out(k, x, z), x_prev), rel=1e-4, abs=1e-6
    )


def test_linear_cross_block_is_q_inverse_f():
    model = benchmark_linear_model(3)
    expected = np.linalg.inv(model.Q.cov) @ model.F
    assert model.h_trans_cross(1, np.zeros(3)) == approx(expected)


def test_batched_densities_match_single_calls():
    model = benchmark_linear_model(3)
    batch = np.random.default_rng(1).normal(size=(4, 3))
    x_next = np.array([0.1, 0.2, -0.3])
    many = model.transition_logpdf(1, x_next, batch)
    assert many.shape == (4,)
    assert many[2] == approx(model.transition_logpdf(1, x_next, batch[2]))
    assert model.d_trans_out(1, x_next, batch)[3] == approx(model.d_trans_out(1, x_next, batch[3]))


def test_tanh_gain_and_scalar_inputs():
    model = NonlinearTanhModel(40)
    assert model.gain(5) == approx(1.5)
    assert model.gain(15) == approx(0.5)
    assert model.transition_logpdf(5, 0.3, 0.1) == approx(model.transition_logpdf(5, [0.3], [0.1]))


def test_rejects_malformed_parameters():
    with pytest.raises(ModelConfigError, match="symmetric"):
        LinearGaussianModel(F=np.eye(2), H=[[1.0, 0.0]], Q=[[1.0, 0.5], [0.0, 1.0]], R=[[1.0]],
                            mu=[0, 0], P0=np.eye(2), horizon=3)
    with pytest.raises(ModelConfigError, match="positive definite"):
        scalar_linear_model(3, Q=0.0)
    with pytest.raises(ModelConfigError):
        LinearGaussianModel(F=np.eye(3), H=[[1.0, 0.0]], Q=np.eye(2), R=[[1.0]], mu=[0, 0], P0=np.eye(2), horizon=3)
    with pytest.raises(ModelConfigError):
        scalar_linear_model(0)


def test_step_ranges():
    model = scalar_linear_model(3)
    with pytest.raises(StepIndexError):
        model.transition_logpdf(0, 0.0, 0.0)
    with pytest.raises(StepIndexError):
        model.measurement_logpdf(4, 0.0, 0.0)


def test_simulate_is_deterministic():
    model = benchmark_linear_model(100)
    a = simulate(model, seed=11)
    b = simulate(model, seed=11)
    assert a.states.shape == (101, 3)
    assert a.observations.shape == (101, 1)
    np.testing.assert_array_equal(a.states, b.states)
    assert not np.allclose(simulate(model, seed=12).states, a.states)
    with pytest.raises(StepIndexError):
        simulate(model, n=101)


def test_with_horizon_keeps_parameters():
    model = benchmark_linear_model(horizon=5)
    longer = model.with_horizon(40)
    assert longer.horizon == 40
    np.testing.assert_array_equal(longer.F, model.F)
    np.testing.assert_array_equal(longer.Q.cov, model.Q.cov)
    assert longer.u.shape == (41, 1)


def test_tanh_mean_is_odd():
    model = NonlinearTanhModel(40)
    batch = np.linspace(-2.0, 2.0, 41).reshape(-1, 1)
    for k in (1, 5, 13):
        np.testing.assert_array_equal(model.transition_mean(k, -batch), -model.transition_mean(k, batch))


@pytest.mark.parametrize(
    "model, x_prev, sd",
    [(NonlinearTanhModel(5), 0.3, np.sqrt(0.2)), (scalar_linear_model(5, F=0.9, Q=0.7), -1.2, np.sqrt(0.7))],
    ids=["tanh", "scalar"],
)
def test_transition_density_integrates_to_one(model, x_prev, sd):
    center = float(model.transition_mean(2, [x_prev])[0])
    grid = np.linspace(center - 8.0 * sd, center + 8.0 * sd, 4001)
    dens = np.exp([model.transition_logpdf(2, [v], [x_prev]) for v in grid])
    assert integrate.trapezoid(dens, grid) == approx(1.0, abs=1e-6)


def test_initial_draws_match_prior_moments():
    model = benchmark_linear_model(3)
    draws = model.sample_initial(np.random.default_rng(0), 100_000)
    sd = np.sqrt(np.diag(model.P0.cov))
    assert np.all(np.abs(draws.mean(axis=0) - model.mu) <= 3.0 * sd / np.sqrt(len(draws)))
    assert draws.var(axis=0) == approx(sd**2, rel=0.02)
