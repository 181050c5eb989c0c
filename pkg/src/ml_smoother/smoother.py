"""Backward maximum-likelihood smoothing pass.

For k = n-1 down to 0 the score S_{x_k}(x_k, xhat^s_{k+1|n}) is driven to
zero by Newton, EM-gradient or BHHH steps started at the filtered mean.
"""

import logging
from collections.abc import Callable
from dataclasses import dataclass, field
from enum import Enum

import numpy as np
from numpy.typing import ArrayLike, NDArray
from pydantic import BaseModel, ConfigDict, Field

from .errors import DegenerateWeightsError, FactorizationError
from .inference import ScoreEval, evaluate
from .kalman import FilterResult, incomplete_loglik_linear, incomplete_score_linear, info_blocks_linear
from .model import LinearGaussianModel, StateSpaceModel
from .numerics import Matrix, Vector, as_vector, solve_pd, symmetrize, trace_scale
from .particle import ParticleHistory, filtered_mean, ml_state_estimate

logger = logging.getLogger("mlsmooth.smoother")

MAX_HALVINGS = 6
BLOWUP_FACTOR = 10.0
RIDGE_SCALE = 1e-8
# smallest fraction of an outer-product step tried before the step stalls
MIN_STEP_FRACTION = 1e-8


class Scheme(str, Enum):
    """Iteration matrix used for the score step."""

    NEWTON = "newton"
    EM_GRADIENT = "em_gradient"
    BHHH = "bhhh"


class TerminalRule(str, Enum):
    """How xhat^s_{n|n} is chosen."""

    FILTERED_MEAN = "filtered_mean"
    PARTICLE_MODE = "particle_mode"


class IterationConfig(BaseModel):
    """Settings for the per-step root finding."""

    model_config = ConfigDict(extra="forbid")

    scheme: Scheme = Field(default=Scheme.EM_GRADIENT, description="Step matrix: J^xi, J^z or M_z")
    epsilon: float = Field(default=1e-6, gt=0, description="Max-norm threshold on successive iterates")
    max_iters: int = Field(default=200, ge=1, description="Iteration cap per step")
    damping: float = Field(default=1.0, gt=0, le=1, description="Multiplier applied to every step")
    terminal: TerminalRule = Field(
        default=TerminalRule.FILTERED_MEAN,
        description="Boundary value at step n",
    )


@dataclass
class SmootherResult:
    """Smoothed means and per-step diagnostics for steps 0..n.

    Information blocks are those evaluated at the final iterate of each step
    k < n; entry n of the per-step arrays describes the terminal value.
    """

    means: NDArray[np.float64]
    iterations: NDArray[np.int64]
    score_norms: NDArray[np.float64]
    converged: NDArray[np.bool_]
    info_xi: NDArray[np.float64]
    cross_x_next: NDArray[np.float64]
    cross_next_x: NDArray[np.float64]
    scheme: Scheme
    epsilon: float
    fallbacks: list[list[str]] = field(default_factory=list)

    @property
    def horizon(self) -> int:
        return self.means.shape[0] - 1

    @property
    def convergence_rate(self) -> float:
        return float(np.mean(self.converged[:-1]))


# ---------------------------------------------------------------------------
# Single steps
# ---------------------------------------------------------------------------

def newton_step(k: int, x_current: ArrayLike, x_next_smoothed: ArrayLike, ev: ScoreEval) -> Vector:
    """x + [J^xi]^{-1} S. Raises FactorizationError when J^xi is not positive definite."""
    return as_vector(x_current) + solve_pd(ev.info_xi, ev.score, step=k)


def em_gradient_step(k: int, x_current: ArrayLike, x_next_smoothed: ArrayLike, ev: ScoreEval) -> Vector:
    """x + [J^z]^{-1} S. Raises FactorizationError when J^z is not positive definite."""
    return as_vector(x_current) + solve_pd(ev.info_z, ev.score, step=k)


def _ridge_solve(mat: Matrix, rhs: Vector, k: int) -> tuple[Vector, bool]:
    try:
        return solve_pd(mat, rhs, step=k), False
    except FactorizationError:
        delta = RIDGE_SCALE * trace_scale(mat)
        ridged = symmetrize(mat) + delta * np.eye(mat.shape[0])
        while True:
            try:
                return solve_pd(ridged, rhs, step=k), True
            except FactorizationError:
                delta *= 10.0
                ridged = symmetrize(mat) + delta * np.eye(mat.shape[0])


def outer_product_matrix(ev: ScoreEval) -> Matrix:
    """M_z for k >= 1; J^z at k = 0, where M_z = S S^T has rank one."""
    return ev.info_z if ev.step == 0 else ev.m_z


def bhhh_step(k: int, x_current: ArrayLike, x_next_smoothed: ArrayLike, ev: ScoreEval) -> Vector:
    """x + M_z^{-1} S, with a ridge added when M_z is rank deficient."""
    delta, _ = _ridge_solve(outer_product_matrix(ev), ev.score, k)
    return as_vector(x_current) + delta


def _scheme_update(scheme: Scheme, k: int, x: Vector, x_next: Vector, ev: ScoreEval) -> tuple[Vector, str | None]:
    """Proposed iterate plus the fallback tag, if the requested matrix was unusable."""
    if scheme is Scheme.NEWTON:
        try:
            return newton_step(k, x, x_next, ev), None
        except FactorizationError:
            scheme_tag = "newton->em_gradient"
            try:
                return em_gradient_step(k, x, x_next, ev), scheme_tag
            except FactorizationError:
                pass
            delta, ridged = _ridge_solve(outer_product_matrix(ev), ev.score, k)
            return x + delta, "newton->bhhh" + ("+ridge" if ridged else "")
    if scheme is Scheme.EM_GRADIENT:
        try:
            return em_gradient_step(k, x, x_next, ev), None
        except FactorizationError:
            delta, ridged = _ridge_solve(outer_product_matrix(ev), ev.score, k)
            return x + delta, "em_gradient->bhhh" + ("+ridge" if ridged else "")
    delta, ridged = _ridge_solve(outer_product_matrix(ev), ev.score, k)
    return x + delta, ("ridge" if ridged else None)


def _uses_outer_product(scheme: Scheme, tag: str | None) -> bool:
    return scheme is Scheme.BHHH or (tag is not None and "bhhh" in tag)


# ---------------------------------------------------------------------------
# Backward pass
# ---------------------------------------------------------------------------

Evaluator = Callable[[int, Vector, Vector], ScoreEval]


@dataclass
class _StepOutcome:
    x: Vector
    ev: ScoreEval
    iterations: int
    converged: bool
    fallbacks: list[str]


_Candidate = tuple[Vector, ScoreEval, bool]


def _try_eval(evaluator: Evaluator, k: int, x: Vector, x_next: Vector) -> ScoreEval | None:
    """Evaluation at a candidate iterate; None where the backward weights vanish or the score overflows."""
    try:
        ev = evaluator(k, x, x_next)
    except DegenerateWeightsError as exc:
        logger.debug("candidate_rejected k=%d error=%s", k, exc)
        return None
    if not np.all(np.isfinite(ev.score)):
        logger.debug("candidate_rejected k=%d error=non-finite score", k)
        return None
    return ev


def _damped_candidate(
    k: int, x: Vector, delta: Vector, ev: ScoreEval, x_next: Vector, evaluator: Evaluator, epsilon: float
) -> _Candidate | None:
    """Halve delta, at most MAX_HALVINGS times, while the score blows up or cannot be evaluated."""
    limit = BLOWUP_FACTOR * max(ev.score_norm, epsilon)
    halvings = 0
    cand = _try_eval(evaluator, k, x + delta, x_next)
    while (cand is None or cand.score_norm > limit) and halvings < MAX_HALVINGS:
        delta = 0.5 * delta
        cand = _try_eval(evaluator, k, x + delta, x_next)
        halvings += 1
    if cand is None:
        return None
    return delta, cand, halvings > 0


def _backtracked_candidate(
    k: int, x: Vector, delta: Vector, ev: ScoreEval, x_next: Vector, evaluator: Evaluator
) -> _Candidate | None:
    """Fraction of an outer-product step that lowers the score 2-norm.

    The trial length is the secant root of the score along delta, capped at
    the full step, then halved down to MIN_STEP_FRACTION.
    """
    base = float(np.linalg.norm(ev.score))
    t = 1.0
    cand = _try_eval(evaluator, k, x + delta, x_next)
    if cand is not None:
        change = ev.score - cand.score
        denom = float(change @ change)
        secant = float(ev.score @ change) / denom if denom > 0.0 else 1.0
        if 0.0 < secant < 1.0:
            t = secant
            cand = _try_eval(evaluator, k, x + t * delta, x_next)
    while t >= MIN_STEP_FRACTION:
        if cand is not None and float(np.linalg.norm(cand.score)) < base:
            return t * delta, cand, t < 1.0
        t *= 0.5
        cand = _try_eval(evaluator, k, x + t * delta, x_next)
    return None


def _score_small(ev: ScoreEval, epsilon: float) -> bool:
    return ev.score_norm <= 10.0 * epsilon * (1.0 + float(np.linalg.norm(ev.info_xi, 2)))


def _iterate_step(
    k: int,
    x0: Vector,
    x_next: Vector,
    evaluator: Evaluator,
    cfg: IterationConfig,
) -> _StepOutcome:
    """Root search at one step. Candidates that cannot be evaluated are shortened, never raised."""
    x = x0.copy()
    ev = evaluator(k, x, x_next)
    notes: list[str] = []
    for it in range(1, cfg.max_iters + 1):
        proposal, tag = _scheme_update(cfg.scheme, k, x, x_next, ev)
        if tag and tag not in notes:
            notes.append(tag)
            logger.warning("step_fallback k=%d tag=%s", k, tag)
        delta = cfg.damping * (proposal - x)
        if _uses_outer_product(cfg.scheme, tag):
            step = _backtracked_candidate(k, x, delta, ev, x_next, evaluator)
        else:
            step = _damped_candidate(k, x, delta, ev, x_next, evaluator, cfg.epsilon)
        if step is None:
            if "stalled" not in notes:
                notes.append("stalled")
            logger.debug("step_stalled k=%d iter=%d score_norm=%.3e", k, it, ev.score_norm)
            return _StepOutcome(x, ev, it, _score_small(ev, cfg.epsilon), notes)
        delta, ev, shortened = step
        if shortened and "halved" not in notes:
            notes.append("halved")
        x = x + delta
        if float(np.max(np.abs(delta))) < cfg.epsilon and _score_small(ev, cfg.epsilon):
            return _StepOutcome(x, ev, it, True, notes)
    return _StepOutcome(x, ev, cfg.max_iters, False, notes)


def _backward_pass(
    n: int,
    p: int,
    terminal: Vector,
    initial: Callable[[int], Vector],
    evaluator: Evaluator,
    cfg: IterationConfig,
    restart: Callable[[int], Vector] | None = None,
) -> SmootherResult:
    means = np.empty((n + 1, p))
    iterations = np.zeros(n + 1, dtype=np.int64)
    score_norms = np.zeros(n + 1)
    converged = np.ones(n + 1, dtype=bool)
    info_xi = np.zeros((n, p, p))
    cross_x_next = np.zeros((n, p, p))
    cross_next_x = np.zeros((n, p, p))
    fallbacks: list[list[str]] = [[] for _ in range(n + 1)]

    means[n] = terminal
    for k in range(n - 1, -1, -1):
        try:
            out = _iterate_step(k, initial(k), means[k + 1], evaluator, cfg)
        except DegenerateWeightsError as exc:
            if restart is None:
                raise
            logger.warning("step_restart k=%d error=%s", k, exc)
            out = _iterate_step(k, restart(k), means[k + 1], evaluator, cfg)
            out.fallbacks.insert(0, "restart")
        means[k] = out.x
        iterations[k] = out.iterations
        score_norms[k] = out.ev.score_norm
        converged[k] = out.converged
        fallbacks[k] = out.fallbacks
        info_xi[k] = out.ev.info_xi
        cross_x_next[k] = out.ev.cross_x_next
        cross_next_x[k] = out.ev.cross_next_x
        if not out.converged:
            logger.warning(
                "step_not_converged k=%d iters=%d score_norm=%.3e", k, out.iterations, out.ev.score_norm
            )

    logger.info(
        "backward_pass_done n=%d scheme=%s converged=%d/%d mean_iters=%.1f",
        n, cfg.scheme.value, int(converged[:n].sum()), n, float(iterations[:n].mean()) if n else 0.0,
    )
    return SmootherResult(
        means=means,
        iterations=iterations,
        score_norms=score_norms,
        converged=converged,
        info_xi=info_xi,
        cross_x_next=cross_x_next,
        cross_next_x=cross_next_x,
        scheme=cfg.scheme,
        epsilon=cfg.epsilon,
        fallbacks=fallbacks,
    )


def smooth_backward(
    model: StateSpaceModel,
    y: ArrayLike,
    ph: ParticleHistory,
    cfg: IterationConfig | None = None,
) -> SmootherResult:
    """Particle-based ML smoother over steps 0..n of `ph`."""
    cfg = cfg or IterationConfig()
    y = np.asarray(y, dtype=np.float64).reshape(-1, model.obs_dim)
    n = ph.horizon
    if cfg.terminal is TerminalRule.PARTICLE_MODE:
        terminal = ml_state_estimate(model, ph, y, n)
    else:
        terminal = filtered_mean(ph, n)

    def evaluator(k: int, x_k: Vector, x_next: Vector) -> ScoreEval:
        return evaluate(model, k, x_k, x_next, y[k], ph)

    return _backward_pass(
        n,
        model.state_dim,
        terminal,
        lambda k: filtered_mean(ph, k),
        evaluator,
        cfg,
        restart=lambda k: ml_state_estimate(model, ph, y, k),
    )


def exact_linear_eval(
    model: LinearGaussianModel,
    fr: FilterResult,
    y: NDArray[np.float64],
    k: int,
    x_k: Vector,
    x_next: Vector,
) -> ScoreEval:
    """ScoreEval built from the closed-form linear score and information blocks."""
    blocks = info_blocks_linear(model, fr, k)
    backward = model.h_initial() if k == 0 else model.h_trans_out(k)
    info_z = symmetrize(model.h_meas(k, x_k) + model.h_trans_in(k + 1, x_next, x_k) + backward)
    return ScoreEval(
        step=k,
        score=incomplete_score_linear(model, fr, k, x_k, x_next),
        info_z=info_z,
        info_xi=blocks.xx,
        m_z=info_z,
        cross_x_next=blocks.x_next,
        cross_next_x=blocks.next_x,
    )


def smooth_linear_exact(
    model: LinearGaussianModel,
    y: ArrayLike,
    fr: FilterResult,
    cfg: IterationConfig | None = None,
) -> SmootherResult:
    """Score-root smoother driven by the exact linear score; Newton lands in one step."""
    cfg = cfg or IterationConfig(scheme=Scheme.NEWTON)
    y = np.asarray(y, dtype=np.float64).reshape(-1, model.obs_dim)
    n = fr.horizon

    def evaluator(k: int, x_k: Vector, x_next: Vector) -> ScoreEval:
        return exact_linear_eval(model, fr, y, k, x_k, x_next)

    return _backward_pass(n, model.state_dim, fr.upd_mean[n].copy(), lambda k: fr.upd_mean[k].copy(), evaluator, cfg)


# ---------------------------------------------------------------------------
# Likelihood monotonicity along EM-gradient iterates
# ---------------------------------------------------------------------------

@dataclass
class MonotonicityReport:
    """Incomplete-data loglikelihood along EM-gradient iterates at one step."""

    step: int
    logliks: list[float]
    violations: int
    max_decrease: float
    converged: bool


def em_local_equivalence_check(
    model: LinearGaussianModel,
    y: ArrayLike,
    fr: FilterResult,
    k: int,
    x_start: ArrayLike,
    x_next: ArrayLike,
    epsilon: float = 1e-10,
    max_iters: int = 200,
    slack: float = 1e-12,
) -> MonotonicityReport:
    """Track log f(x_k, x_{k+1}, y) along exact EM-gradient iterates and count decreases."""
    y = np.asarray(y, dtype=np.float64).reshape(-1, model.obs_dim)
    x = as_vector(x_start).copy()
    x_next = as_vector(x_next)
    logliks = [incomplete_loglik_linear(model, fr, k, x, x_next)]
    violations = 0
    max_decrease = 0.0
    converged = False
    for _ in range(max_iters):
        ev = exact_linear_eval(model, fr, y, k, x, x_next)
        new_x = em_gradient_step(k, x, x_next, ev)
        value = incomplete_loglik_linear(model, fr, k, new_x, x_next)
        drop = logliks[-1] - value
        if drop > slack:
            violations += 1
            max_decrease = max(max_decrease, drop)
        logliks.append(value)
        moved = float(np.max(np.abs(new_x - x)))
        x = new_x
        if moved < epsilon:
            converged = True
            break
    return MonotonicityReport(step=k, logliks=logliks, violations=violations, max_decrease=max_decrease, converged=converged)
