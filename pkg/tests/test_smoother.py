import numpy as np
import pytest
from pydantic import ValidationError
from pytest import approx

from ml_smoother.errors import DegenerateWeightsError, FactorizationError
from ml_smoother.inference import ScoreEval, smc_info_xi, smc_score
from ml_smoother.kalman import incomplete_loglik_linear, kalman_filter, rts_smooth
from ml_smoother.model import NonlinearTanhModel, scalar_linear_model, simulate
from ml_smoother.particle import pf_run
from ml_smoother.smoother import (
    IterationConfig,
    Scheme,
    TerminalRule,
    _backward_pass,
    _iterate_step,
    _scheme_update,
    bhhh_step,
    em_gradient_step,
    em_local_equivalence_check,
    exact_linear_eval,
    newton_step,
    smooth_backward,
    smooth_linear_exact,
)


def _eval(score, info_xi, info_z, m_z, step=1):
    p = len(score)
    return ScoreEval(
        step=step,
        score=np.asarray(score, dtype=float),
        info_z=np.asarray(info_z, dtype=float),
        info_xi=np.asarray(info_xi, dtype=float),
        m_z=np.asarray(m_z, dtype=float),
        cross_x_next=np.zeros((p, p)),
        cross_next_x=np.zeros((p, p)),
    )


def test_single_steps_scalar():
    ev = _eval([1.5], [[3.0]], [[4.0]], [[2.25]])
    assert newton_step(1, [0.0], [0.0], ev) == approx([0.5])
    assert em_gradient_step(1, [0.0], [0.0], ev) == approx([0.375])
    assert bhhh_step(1, [0.0], [0.0], ev) == approx([1.5 / 2.25])


def test_zero_score_is_a_fixed_point():
    ev = _eval([0.0, 0.0], np.eye(2), 2 * np.eye(2), np.eye(2))
    x = np.array([0.3, -1.2])
    for step in (newton_step, em_gradient_step, bhhh_step):
        assert step(1, x, x, ev) == approx(x)


def test_indefinite_newton_matrix_falls_back():
    ev = _eval([1.0], [[-2.0]], [[4.0]], [[1.0]])
    with pytest.raises(FactorizationError):
        newton_step(1, [0.0], [0.0], ev)
    x, tag = _scheme_update(Scheme.NEWTON, 1, np.zeros(1), np.zeros(1), ev)
    assert tag == "newton->em_gradient"
    assert x == approx([0.25])


def test_non_pd_complete_information_uses_outer_product():
    ev = _eval([1.0], [[-2.0]], [[-1.0]], [[0.5]])
    x, tag = _scheme_update(Scheme.EM_GRADIENT, 1, np.zeros(1), np.zeros(1), ev)
    assert tag == "em_gradient->bhhh"
    assert x == approx([2.0])


def test_rank_deficient_outer_product_gets_ridge():
    ev = _eval([1.0, 0.0], np.eye(2), np.eye(2), [[1.0, 0.0], [0.0, 0.0]])
    x, tag = _scheme_update(Scheme.BHHH, 1, np.zeros(2), np.zeros(2), ev)
    assert tag == "ridge"
    assert np.all(np.isfinite(x))
    assert x[0] == approx(1.0, rel=1e-6)


def test_first_step_outer_product_uses_complete_information():
    score = np.array([0.4, -0.2])
    ev = _eval(score, np.eye(2), np.diag([2.0, 4.0]), np.outer(score, score), step=0)
    assert bhhh_step(0, np.zeros(2), np.zeros(2), ev) == approx([0.2, -0.05])


def _affine_evaluator(info, root, info_z, m_z, bound=None):
    """Score -info (x - root) with fixed blocks; raises beyond |x| > bound like a vanished backward kernel."""
    info, root = np.atleast_2d(info), np.atleast_1d(root)

    def evaluator(k, x, x_next):
        if bound is not None and np.max(np.abs(x)) > bound:
            raise DegenerateWeightsError("transition density vanished for every atom", step=k, state=x)
        return _eval(-info @ (x - root), info, info_z, m_z, step=k)

    return evaluator


def test_small_outer_product_steps_are_shortened_to_the_root():
    info = np.array([[4.0, 1.0], [1.0, 3.0]])
    root = np.array([0.7, -1.1])
    evaluator = _affine_evaluator(info, root, info + np.eye(2), 0.45 * np.eye(2))
    cfg = IterationConfig(scheme=Scheme.BHHH, epsilon=1e-10)
    out = _iterate_step(3, np.zeros(2), np.zeros(2), evaluator, cfg)
    assert out.converged
    assert out.x == approx(root, abs=1e-8)
    assert "halved" in out.fallbacks


def test_unevaluable_candidates_shorten_the_step():
    evaluator = _affine_evaluator([[1.0]], [1.0], [[-1.0]], [[0.01]], bound=2.0)
    cfg = IterationConfig(scheme=Scheme.EM_GRADIENT, epsilon=1e-8)
    out = _iterate_step(2, np.zeros(1), np.zeros(1), evaluator, cfg)
    assert out.converged
    assert out.x == approx([1.0], abs=1e-6)
    assert "em_gradient->bhhh" in out.fallbacks


def test_failed_start_restarts_instead_of_aborting():
    evaluator = _affine_evaluator([[1.0]], [1.0], [[2.0]], [[1.0]], bound=2.0)
    res = _backward_pass(
        1, 1, np.zeros(1), lambda k: np.array([50.0]), evaluator, IterationConfig(), restart=lambda k: np.zeros(1)
    )
    assert res.converged.all()
    assert res.means[0] == approx([1.0], abs=1e-6)
    assert res.fallbacks[0][0] == "restart"

    with pytest.raises(DegenerateWeightsError):
        _backward_pass(1, 1, np.zeros(1), lambda k: np.array([50.0]), evaluator, IterationConfig())


def test_iteration_config_validation():
    with pytest.raises(ValidationError):
        IterationConfig(epsilon=0.0)
    with pytest.raises(ValidationError):
        IterationConfig(max_iters=0)
    with pytest.raises(ValidationError):
        IterationConfig(damping=1.5)
    assert IterationConfig(scheme="bhhh").scheme is Scheme.BHHH


def test_exact_linear_smoother_reproduces_rts(benchmark, benchmark_record):
    traj, fr, rts = benchmark_record
    res = smooth_linear_exact(benchmark, traj.observations, fr)
    assert np.max(np.abs(res.means - rts.mean)) < 1e-9
    assert res.converged.all()
    assert res.iterations[: fr.horizon].max() <= 2


def test_exact_linear_em_gradient_reaches_rts(benchmark, benchmark_record):
    traj, fr, rts = benchmark_record
    res = smooth_linear_exact(benchmark, traj.observations, fr, IterationConfig(scheme=Scheme.EM_GRADIENT))
    assert np.max(np.abs(res.means - rts.mean)) < 1e-5


def test_uninformative_future_keeps_filtered_mean():
    data = simulate(scalar_linear_model(10), seed=1).observations
    model = scalar_linear_model(10, Q=1e8)
    fr = kalman_filter(model, data)
    res = smooth_linear_exact(model, data, fr)
    assert res.means == approx(fr.upd_mean, abs=1e-6)


def test_em_gradient_contraction_factor(scalar, scalar_record):
    traj, fr, _ = scalar_record
    k = 4
    x_next = fr.upd_mean[k + 1]
    xs = [np.array([3.0])]
    for _ in range(3):
        ev = exact_linear_eval(scalar, fr, traj.observations, k, xs[-1], x_next)
        xs.append(em_gradient_step(k, xs[-1], x_next, ev))
    info_xi = 1.0 / fr.upd_cov[k, 0, 0] + 1.0
    ratio = (xs[2] - xs[1]) / (xs[1] - xs[0])
    assert ratio == approx([1.0 - info_xi / 3.0], rel=1e-8)
    assert (xs[3] - xs[2]) / (xs[2] - xs[1]) == approx(ratio, rel=1e-6)


def test_em_gradient_loglik_is_monotone(benchmark, benchmark_record):
    traj, fr, rts = benchmark_record
    rng = np.random.default_rng(8)
    for k in range(0, fr.horizon, 3):
        for _ in range(5):
            start = rts.mean[k] + rng.normal(scale=3.0, size=3)
            report = em_local_equivalence_check(benchmark, traj.observations, fr, k, start, rts.mean[k + 1])
            assert report.violations == 0
            assert report.logliks[-1] >= report.logliks[0]


def test_em_check_at_root_is_flat(scalar, scalar_record):
    traj, fr, rts = scalar_record
    report = em_local_equivalence_check(scalar, traj.observations, fr, 3, rts.mean[3], rts.mean[4])
    assert report.logliks[-1] - report.logliks[0] == approx(0.0, abs=1e-12)
    assert report.logliks[0] == approx(incomplete_loglik_linear(scalar, fr, 3, rts.mean[3], rts.mean[4]))


@pytest.fixture
def particle_run(benchmark, benchmark_record):
    traj, fr, rts = benchmark_record
    return traj, rts, pf_run(benchmark, traj.observations, 2000, seed=17)


def test_particle_smoother_tracks_rts(benchmark, particle_run):
    traj, rts, ph = particle_run
    res = smooth_backward(benchmark, traj.observations, ph)
    assert res.convergence_rate >= 0.95
    assert res.iterations.max() <= 200
    assert float(np.mean(np.abs(res.means - rts.mean))) < 0.05
    for k in np.flatnonzero(res.converged[: res.horizon]):
        assert res.score_norms[k] <= 10 * res.epsilon * (1 + np.linalg.norm(res.info_xi[k], 2))


def test_converged_steps_are_score_roots(benchmark, particle_run):
    traj, _, ph = particle_run
    res = smooth_backward(benchmark, traj.observations, ph, IterationConfig(scheme=Scheme.NEWTON))
    y = traj.observations
    for k in (0, 9, 25):
        s = smc_score(benchmark, k, res.means[k], res.means[k + 1], y[k], ph)
        j = smc_info_xi(benchmark, k, res.means[k], res.means[k + 1], ph)
        assert np.max(np.abs(s)) <= 10 * res.epsilon * (1 + np.linalg.norm(j, 2))


def test_schemes_agree_on_linear_model(benchmark, particle_run):
    traj, _, ph = particle_run
    means = {
        scheme: smooth_backward(benchmark, traj.observations, ph, IterationConfig(scheme=scheme, epsilon=1e-9, max_iters=1000)).means
        for scheme in Scheme
    }
    assert np.max(np.abs(means[Scheme.NEWTON] - means[Scheme.EM_GRADIENT])) < 1e-6
    assert np.max(np.abs(means[Scheme.NEWTON] - means[Scheme.BHHH])) < 1e-6


def test_non_convergence_is_flagged_not_raised(benchmark, particle_run):
    traj, _, ph = particle_run
    cfg = IterationConfig(scheme=Scheme.EM_GRADIENT, max_iters=1, epsilon=1e-14)
    res = smooth_backward(benchmark, traj.observations, ph, cfg)
    assert not res.converged[: res.horizon].any()
    assert res.converged[res.horizon]
    assert np.all(np.isfinite(res.means))


def test_terminal_particle_mode_uses_an_atom(benchmark, particle_run):
    traj, _, ph = particle_run
    res = smooth_backward(benchmark, traj.observations, ph, IterationConfig(terminal=TerminalRule.PARTICLE_MODE))
    n = res.horizon
    assert np.any(np.all(ph.particles[n] == res.means[n], axis=1))


def test_tanh_smoother_converges():
    model = NonlinearTanhModel(40)
    traj = simulate(model, seed=6)
    ph = pf_run(model, traj.observations, 1000, seed=6)
    res = smooth_backward(model, traj.observations, ph)
    assert res.converged[: res.horizon].mean() >= 0.95
    assert np.all(np.isfinite(res.means))


@pytest.mark.parametrize("trajectory_seed", [3, 0])
def test_tanh_passes_complete_over_particle_seeds(trajectory_seed):
    model = NonlinearTanhModel(100)
    traj = simulate(model, seed=trajectory_seed)
    rates = []
    for seed in range(6):
        ph = pf_run(model, traj.observations, 2000, seed=seed)
        res = smooth_backward(model, traj.observations, ph)
        assert np.all(np.isfinite(res.means))
        assert np.max(np.abs(res.means)) < 10.0
        rates.append(res.convergence_rate)
    assert np.mean(rates) >= 0.99
