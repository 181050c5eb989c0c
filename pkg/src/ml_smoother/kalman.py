"""Exact linear-Gaussian inference: Kalman filter, RTS smoother and closed-form scores.

These quantities are the ground truth the particle-based path is checked
against.
"""

import logging
from dataclasses import dataclass

import numpy as np
from numpy.typing import ArrayLike, NDArray

from .errors import FactorizationError, StepIndexError
from .model import LinearGaussianModel
from .numerics import (
    Matrix,
    Vector,
    as_vector,
    gaussian_logpdf,
    inv_pd,
    solve_pd,
    symmetrize,
)

logger = logging.getLogger("mlsmooth.kalman")


@dataclass
class FilterResult:
    """Per-step Kalman quantities for steps 0..n.

    `cross_cov[k]` holds Sigma_{k|k-1} for k >= 1; entry 0 is unused and zero.
    """

    pred_mean: NDArray[np.float64]
    pred_cov: NDArray[np.float64]
    upd_mean: NDArray[np.float64]
    upd_cov: NDArray[np.float64]
    gain: NDArray[np.float64]
    cross_cov: NDArray[np.float64]

    @property
    def horizon(self) -> int:
        return self.upd_mean.shape[0] - 1


@dataclass
class RtsResult:
    """Smoothed means/covariances for steps 0..n and gains C_k for k < n."""

    mean: NDArray[np.float64]
    cov: NDArray[np.float64]
    gain: NDArray[np.float64]


@dataclass
class InfoBlocks:
    """Observed-information blocks J_{x_k,x_k}, J_{x_k,x_{k+1}}, J_{x_{k+1},x_k}."""

    xx: Matrix
    x_next: Matrix
    next_x: Matrix


def kalman_filter(model: LinearGaussianModel, y: ArrayLike) -> FilterResult:
    """Predict/update recursion started from (mu, P0) as the step-0 prediction.

    The update uses the Joseph form so P_{k|k} stays symmetric positive definite.
    """
    y = np.asarray(y, dtype=np.float64).reshape(-1, model.obs_dim)
    n = y.shape[0] - 1
    if n > model.horizon:
        raise StepIndexError(f"{n + 1} observations exceed model horizon {model.horizon}")
    p, q = model.state_dim, model.obs_dim
    pred_mean = np.empty((n + 1, p))
    pred_cov = np.empty((n + 1, p, p))
    upd_mean = np.empty((n + 1, p))
    upd_cov = np.empty((n + 1, p, p))
    gain = np.empty((n + 1, p, q))
    cross_cov = np.zeros((n + 1, p, p))
    eye = np.eye(p)

    for k in range(n + 1):
        if k == 0:
            xp, Pp = model.mu.copy(), model.P0.cov.copy()
        else:
            F = model.F_at(k)
            xp = F @ upd_mean[k - 1] + model.control_at(k)
            Pp = symmetrize(F @ upd_cov[k - 1] @ F.T + model.Q_at(k).cov)
        H = model.H_at(k)
        R = model.R_at(k).cov
        innov_cov = H @ Pp @ H.T + R
        try:
            K = solve_pd(innov_cov, H @ Pp, step=k).T
        except FactorizationError:
            logger.error("innovation_not_pd step=%d", k)
            raise
        xu = xp + K @ (y[k] - H @ xp)
        A = eye - K @ H
        Pu = symmetrize(A @ Pp @ A.T + K @ R @ K.T)

        pred_mean[k], pred_cov[k] = xp, Pp
        upd_mean[k], upd_cov[k] = xu, Pu
        gain[k] = K
        if k < n:
            F_next = model.F_at(k + 1)
            cross_cov[k + 1] = Pp @ (F_next - F_next @ K @ H).T

    logger.debug("kalman_filter n=%d p=%d q=%d", n, p, q)
    return FilterResult(pred_mean, pred_cov, upd_mean, upd_cov, gain, cross_cov)


def rts_smooth(model: LinearGaussianModel, fr: FilterResult, zero_gain: bool = False) -> RtsResult:
    """Backward Rauch-Tung-Striebel pass.

    `zero_gain` forces C_k = 0, which decouples the steps and returns the
    filtered quantities unchanged.
    """
    n = fr.horizon
    p = model.state_dim
    mean = np.empty((n + 1, p))
    cov = np.empty((n + 1, p, p))
    gains = np.zeros((n, p, p))
    mean[n], cov[n] = fr.upd_mean[n], fr.upd_cov[n]
    for k in range(n - 1, -1, -1):
        if not zero_gain:
            F = model.F_at(k + 1)
            gains[k] = solve_pd(fr.pred_cov[k + 1], F @ fr.upd_cov[k], step=k + 1).T
        C = gains[k]
        mean[k] = fr.upd_mean[k] + C @ (mean[k + 1] - fr.pred_mean[k + 1])
        cov[k] = symmetrize(fr.upd_cov[k] + C @ (cov[k + 1] - fr.pred_cov[k + 1]) @ C.T)
    return RtsResult(mean=mean, cov=cov, gain=gains)


def _check_interior(fr: FilterResult, k: int) -> None:
    if not 0 <= k <= fr.horizon - 1:
        raise StepIndexError(f"step {k} outside 0..{fr.horizon - 1}")


def incomplete_score_linear(
    model: LinearGaussianModel,
    fr: FilterResult,
    k: int,
    x_k: ArrayLike,
    x_next: ArrayLike,
) -> Vector:
    """Exact S_{x_k}(x_k, x_{k+1}) of the linear model."""
    _check_interior(fr, k)
    x_k, x_next = as_vector(x_k), as_vector(x_next)
    P_inv = inv_pd(fr.upd_cov[k], step=k)
    F = model.F_at(k + 1)
    Q_inv = model.Q_at(k + 1).inv
    return (
        P_inv @ fr.upd_mean[k]
        - (P_inv + F.T @ Q_inv @ F) @ x_k
        + F.T @ Q_inv @ (x_next - model.control_at(k + 1))
    )


def incomplete_score_linear_pair(
    model: LinearGaussianModel,
    fr: FilterResult,
    k: int,
    x_k: ArrayLike,
    x_next: ArrayLike,
) -> Vector:
    """Joint score (S_{x_k}, S_{x_{k+1}}) of log N(x_k | xhat_{k|k}, P_{k|k}) f(x_{k+1} | x_k).

    The x_{k+1} component is the gradient of the same factorization, which is
    what the score-covariance identity is stated for.
    """
    _check_interior(fr, k)
    x_k, x_next = as_vector(x_k), as_vector(x_next)
    s_k = incomplete_score_linear(model, fr, k, x_k, x_next)
    s_next = model.d_trans_out(k + 1, x_next, x_k)
    return np.concatenate([s_k, s_next])


def incomplete_loglik_linear(
    model: LinearGaussianModel,
    fr: FilterResult,
    k: int,
    x_k: ArrayLike,
    x_next: ArrayLike,
) -> float:
    """log N(x_k | xhat_{k|k}, P_{k|k}) + log f(x_{k+1} | x_k), up to terms free of x_k."""
    _check_interior(fr, k)
    filt = gaussian_logpdf(as_vector(x_k), fr.upd_mean[k], fr.upd_cov[k], step=k)
    return float(filt + model.transition_logpdf(k + 1, x_next, x_k))


def info_blocks_linear(model: LinearGaussianModel, fr: FilterResult, k: int) -> InfoBlocks:
    """Constant blocks P_{k|k}^{-1} + F^T Q^{-1} F, F^T Q^{-1} and Q^{-1} F."""
    _check_interior(fr, k)
    F = model.F_at(k + 1)
    Q_inv = model.Q_at(k + 1).inv
    xx = symmetrize(inv_pd(fr.upd_cov[k], step=k) + F.T @ Q_inv @ F)
    return InfoBlocks(xx=xx, x_next=F.T @ Q_inv, next_x=Q_inv @ F)


def expected_information_linear(model: LinearGaussianModel, fr: FilterResult, k: int) -> Matrix:
    """Assembled 2p x 2p information of the pair (x_k, x_{k+1}).

    The lower-right block is Q^{-1} and the off-diagonal blocks are the
    negative Hessian of log f(x_{k+1} | x_k), i.e. -F^T Q^{-1} and -Q^{-1} F.
    """
    blocks = info_blocks_linear(model, fr, k)
    Q_inv = model.Q_at(k + 1).inv
    top = np.hstack([blocks.xx, -blocks.x_next])
    bottom = np.hstack([-blocks.next_x, Q_inv])
    return np.vstack([top, bottom])


def woodbury_residual(model: LinearGaussianModel, fr: FilterResult, rts: RtsResult) -> float:
    """Largest relative violation of the two Woodbury reductions over all steps."""
    worst = 0.0
    for k in range(fr.horizon):
        F = model.F_at(k + 1)
        Q_inv = model.Q_at(k + 1).inv
        P = fr.upd_cov[k]
        C = rts.gain[k]
        lhs = inv_pd(inv_pd(P, step=k) + F.T @ Q_inv @ F, step=k)
        rhs = P - C @ F @ P
        worst = max(worst, np.linalg.norm(lhs - rhs) / max(np.linalg.norm(rhs), 1e-300))
        lhs2 = rhs @ F.T @ Q_inv
        worst = max(worst, np.linalg.norm(lhs2 - C) / max(np.linalg.norm(C), 1e-300))
    return float(worst)


def cross_covariance_residual(model: LinearGaussianModel, fr: FilterResult) -> float:
    """Largest relative violation of F_k Sigma_{k|k-1} = P_{k|k-1} - Q_k over k >= 1."""
    worst = 0.0
    for k in range(1, fr.horizon + 1):
        lhs = model.F_at(k) @ fr.cross_cov[k]
        rhs = fr.pred_cov[k] - model.Q_at(k).cov
        worst = max(worst, np.linalg.norm(lhs - rhs) / max(np.linalg.norm(fr.pred_cov[k]), 1e-300))
    return float(worst)


def backward_conditional_mean(
    model: LinearGaussianModel,
    fr: FilterResult,
    k: int,
    x_k: ArrayLike,
) -> Vector:
    """E[x_{k-1} | x_k, y_{0:k-1}] = xhat_{k-1|k-1} + Sigma_{k|k-1} P_{k|k-1}^{-1} (x_k - xhat_{k|k-1})."""
    if not 1 <= k <= fr.horizon:
        raise StepIndexError(f"step {k} outside 1..{fr.horizon}")
    innov = as_vector(x_k) - fr.pred_mean[k]
    return fr.upd_mean[k - 1] + fr.cross_cov[k] @ solve_pd(fr.pred_cov[k], innov, step=k)
