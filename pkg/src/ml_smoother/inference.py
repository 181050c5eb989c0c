"""Scores and observed information of the incomplete data (x_k, x_{k+1}, y_{0:n}).

Expectations over x_{k-1} use the backward-kernel weights of the step k-1
particle atoms, recomputed at every x_k. At k = 0 the prior score
d log f(x_0)/dx_0 replaces the backward expectation.
"""

from dataclasses import dataclass

import numpy as np
from numpy.typing import ArrayLike, NDArray

from .errors import StepIndexError
from .model import StateSpaceModel
from .numerics import Matrix, Vector, as_vector, symmetrize, weighted_covariance, weighted_mean
from .particle import ParticleHistory, backward_kernel_weights


@dataclass
class ScoreEval:
    """Score and information blocks at one (k, x_k, x_{k+1}) point."""

    step: int
    score: Vector
    info_z: Matrix
    info_xi: Matrix
    m_z: Matrix
    cross_x_next: Matrix
    cross_next_x: Matrix

    @property
    def score_norm(self) -> float:
        return float(np.max(np.abs(self.score)))


@dataclass
class _BackwardTerms:
    weights: NDArray[np.float64]
    grads: NDArray[np.float64]


def _backward_terms(model: StateSpaceModel, ph: ParticleHistory, k: int, x_k: Vector) -> _BackwardTerms | None:
    if k == 0:
        return None
    w = backward_kernel_weights(model, ph, k, x_k)
    g = np.atleast_2d(model.d_trans_out(k, x_k, ph.particles[k - 1]))
    return _BackwardTerms(weights=w, grads=g)


def _check_step(model: StateSpaceModel, k: int, lowest: int = 0) -> None:
    if not lowest <= k <= model.horizon - 1:
        raise StepIndexError(f"step {k} outside {lowest}..{model.horizon - 1}")


def _local_score(model: StateSpaceModel, k: int, x_k: Vector, x_next: Vector, y_k: ArrayLike) -> Vector:
    """Measurement and forward-transition parts of the score."""
    return model.d_meas(k, y_k, x_k) + model.d_trans_in(k + 1, x_next, x_k)


def _local_info(model: StateSpaceModel, k: int, x_k: Vector, x_next: Vector) -> Matrix:
    return model.h_meas(k, x_k) + model.h_trans_in(k + 1, x_next, x_k)


def complete_score(
    model: StateSpaceModel,
    k: int,
    x_prev: ArrayLike,
    x_k: ArrayLike,
    x_next: ArrayLike,
    y_k: ArrayLike,
) -> Vector:
    """d log f(x_{0:n}, y_{0:n}) / dx_k for 1 <= k <= n-1."""
    _check_step(model, k, lowest=1)
    x_k, x_next = as_vector(x_k), as_vector(x_next)
    return _local_score(model, k, x_k, x_next, y_k) + np.ravel(model.d_trans_out(k, x_k, as_vector(x_prev)))


def smc_score(
    model: StateSpaceModel,
    k: int,
    x_k: ArrayLike,
    x_next: ArrayLike,
    y_k: ArrayLike,
    ph: ParticleHistory,
) -> Vector:
    """S_{x_k}(x_k, x_{k+1}) with the backward expectation taken over the particle atoms."""
    _check_step(model, k)
    x_k, x_next = as_vector(x_k), as_vector(x_next)
    local = _local_score(model, k, x_k, x_next, y_k)
    terms = _backward_terms(model, ph, k, x_k)
    if terms is None:
        return local + model.d_initial(x_k)
    return local + weighted_mean(terms.grads, terms.weights)


def smc_info_z(
    model: StateSpaceModel,
    k: int,
    x_k: ArrayLike,
    x_next: ArrayLike,
    ph: ParticleHistory,
) -> Matrix:
    """J^z_{x_k,x_k}: conditional expectation of the complete-data negative Hessian."""
    _check_step(model, k)
    x_k, x_next = as_vector(x_k), as_vector(x_next)
    backward = model.h_initial() if k == 0 else model.h_trans_out(k)
    return symmetrize(_local_info(model, k, x_k, x_next) + backward)


def smc_info_xi(
    model: StateSpaceModel,
    k: int,
    x_k: ArrayLike,
    x_next: ArrayLike,
    ph: ParticleHistory,
) -> Matrix:
    """J^xi_{x_k,x_k} = J^z minus the backward-kernel covariance of d log f(x_k | x_{k-1})/dx_k."""
    info_z = smc_info_z(model, k, x_k, x_next, ph)
    terms = _backward_terms(model, ph, k, as_vector(x_k))
    if terms is None:
        return info_z
    return symmetrize(info_z - weighted_covariance(terms.grads, terms.weights))


def info_cross(model: StateSpaceModel, k: int, x_k: ArrayLike) -> tuple[Matrix, Matrix]:
    """(J^xi_{x_k,x_{k+1}}, J^xi_{x_{k+1},x_k}); F^T Q^{-1} and Q^{-1} F for a linear model."""
    _check_step(model, k)
    next_x = model.h_trans_cross(k + 1, as_vector(x_k))
    return next_x.T, next_x


def m_z_matrix(
    model: StateSpaceModel,
    k: int,
    x_k: ArrayLike,
    x_next: ArrayLike,
    y_k: ArrayLike,
    ph: ParticleHistory,
) -> Matrix:
    """Backward-kernel average of g g^T over complete-data scores g."""
    _check_step(model, k)
    x_k, x_next = as_vector(x_k), as_vector(x_next)
    local = _local_score(model, k, x_k, x_next, y_k)
    terms = _backward_terms(model, ph, k, x_k)
    if terms is None:
        g = local + model.d_initial(x_k)
        return np.outer(g, g)
    full = local + terms.grads
    return symmetrize(np.einsum("m,mi,mj->ij", terms.weights, full, full))


def evaluate(
    model: StateSpaceModel,
    k: int,
    x_k: ArrayLike,
    x_next: ArrayLike,
    y_k: ArrayLike,
    ph: ParticleHistory,
) -> ScoreEval:
    """All quantities at one point, sharing a single backward-weight computation."""
    _check_step(model, k)
    x_k, x_next = as_vector(x_k), as_vector(x_next)
    local = _local_score(model, k, x_k, x_next, y_k)
    local_info = _local_info(model, k, x_k, x_next)
    terms = _backward_terms(model, ph, k, x_k)
    if terms is None:
        score = local + model.d_initial(x_k)
        info_z = symmetrize(local_info + model.h_initial())
        info_xi = info_z
        m_z = np.outer(score, score)
    else:
        score = local + weighted_mean(terms.grads, terms.weights)
        info_z = symmetrize(local_info + model.h_trans_out(k))
        info_xi = symmetrize(info_z - weighted_covariance(terms.grads, terms.weights))
        full = local + terms.grads
        m_z = symmetrize(np.einsum("m,mi,mj->ij", terms.weights, full, full))
    cross_x_next, cross_next_x = info_cross(model, k, x_k)
    return ScoreEval(
        step=k,
        score=score,
        info_z=info_z,
        info_xi=info_xi,
        m_z=m_z,
        cross_x_next=cross_x_next,
        cross_next_x=cross_next_x,
    )
