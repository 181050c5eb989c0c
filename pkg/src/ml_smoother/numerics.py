"""Dense small-matrix utilities, Gaussian log-densities and finite-difference oracles."""

from collections.abc import Callable

import numpy as np
from numpy.typing import ArrayLike, NDArray
from scipy import linalg

from .errors import FactorizationError

Vector = NDArray[np.float64]
Matrix = NDArray[np.float64]

LOG_2PI = float(np.log(2.0 * np.pi))
_EPS = float(np.finfo(np.float64).eps)


def as_vector(x: ArrayLike) -> Vector:
    """Coerce scalars and sequences to a 1-D float array."""
    return np.atleast_1d(np.asarray(x, dtype=np.float64))


def as_matrix(a: ArrayLike) -> Matrix:
    """Coerce scalars, vectors and nested sequences to a 2-D float array."""
    arr = np.asarray(a, dtype=np.float64)
    if arr.ndim == 0:
        return arr.reshape(1, 1)
    if arr.ndim == 1:
        return arr.reshape(1, -1)
    return arr


def symmetrize(a: Matrix) -> Matrix:
    return 0.5 * (a + a.T)


def trace_scale(a: Matrix) -> float:
    """Average absolute diagonal entry, floored at 1."""
    return max(1.0, float(np.mean(np.abs(np.diag(a)))))


def cholesky_lower(a: Matrix, step: int | None = None) -> Matrix:
    """Lower Cholesky factor of the symmetrized matrix."""
    sym = symmetrize(as_matrix(a))
    if not np.all(np.isfinite(sym)):
        raise FactorizationError("matrix has non-finite entries", step=step)
    try:
        return linalg.cholesky(sym, lower=True)
    except linalg.LinAlgError as exc:
        raise FactorizationError(f"matrix is not positive definite: {exc}", step=step) from exc


def solve_pd(a: Matrix, b: ArrayLike, step: int | None = None) -> NDArray[np.float64]:
    """Solve a x = b for symmetric positive definite a via its Cholesky factor."""
    chol = cholesky_lower(a, step=step)
    return linalg.cho_solve((chol, True), np.asarray(b, dtype=np.float64))


def inv_pd(a: Matrix, step: int | None = None) -> Matrix:
    a = as_matrix(a)
    return symmetrize(solve_pd(a, np.eye(a.shape[0]), step=step))


def floor_eigenvalues(a: Matrix, floor: float = 0.0) -> Matrix:
    """Symmetrize and raise every eigenvalue to at least `floor`."""
    sym = symmetrize(as_matrix(a))
    vals, vecs = np.linalg.eigh(sym)
    if vals.min() >= floor:
        return sym
    vals = np.maximum(vals, floor)
    return symmetrize((vecs * vals) @ vecs.T)


def repair_pd(a: Matrix, rel_floor: float = 1e-12) -> Matrix:
    """Floor eigenvalues at rel_floor times the trace scale."""
    a = as_matrix(a)
    return floor_eigenvalues(a, rel_floor * trace_scale(a))


def gaussian_logpdf(
    x: ArrayLike,
    mean: ArrayLike,
    cov: ArrayLike,
    step: int | None = None,
) -> float | NDArray[np.float64]:
    """Log-density of N(mean, cov) at x.

    `x` may carry a leading batch axis, in which case one value per row is
    returned. The Mahalanobis term is evaluated with a triangular solve.
    """
    cov = as_matrix(cov)
    chol = cholesky_lower(cov, step=step)
    dim = cov.shape[0]
    diff = np.asarray(x, dtype=np.float64) - np.asarray(mean, dtype=np.float64)
    if diff.ndim == 0:
        diff = diff.reshape(1)
    if diff.shape[-1] != dim:
        raise ValueError(f"dimension mismatch: x has {diff.shape[-1]}, cov has {dim}")
    z = linalg.solve_triangular(chol, diff.T, lower=True)
    maha = np.sum(z * z, axis=0)
    logdet = 2.0 * np.sum(np.log(np.diag(chol)))
    out = -0.5 * (maha + dim * LOG_2PI + logdet)
    if np.ndim(out) == 0:
        return float(out)
    return out


def default_step(x: Vector, order: int = 1) -> Vector:
    """Central-difference step per component: eps^(1/3) for gradients, eps^(1/4) for Hessians."""
    power = 1.0 / 3.0 if order == 1 else 1.0 / 4.0
    return (_EPS ** power) * np.maximum(1.0, np.abs(x))


def _step_vector(x: Vector, h: float | ArrayLike | None, order: int) -> Vector:
    if h is None:
        return default_step(x, order)
    steps = np.broadcast_to(np.asarray(h, dtype=np.float64), x.shape).copy()
    if np.any(steps <= 0):
        raise ValueError("finite-difference step must be positive")
    return steps


def _checked(f: Callable[[Vector], float], x: Vector) -> float:
    value = float(f(x))
    if not np.isfinite(value):
        raise FloatingPointError(f"non-finite function value at {x}")
    return value


def finite_diff_grad(
    f: Callable[[Vector], float],
    x: ArrayLike,
    h: float | ArrayLike | None = None,
) -> Vector:
    """Central-difference gradient of a scalar function."""
    x = as_vector(x)
    steps = _step_vector(x, h, order=1)
    grad = np.empty_like(x)
    for i in range(x.size):
        e = np.zeros_like(x)
        e[i] = steps[i]
        grad[i] = (_checked(f, x + e) - _checked(f, x - e)) / (2.0 * steps[i])
    return grad


def finite_diff_jacobian(
    f: Callable[[Vector], ArrayLike],
    x: ArrayLike,
    h: float | ArrayLike | None = None,
) -> Matrix:
    """Central-difference Jacobian of a vector function; row i is d f_i."""
    x = as_vector(x)
    steps = _step_vector(x, h, order=1)
    cols = []
    for j in range(x.size):
        e = np.zeros_like(x)
        e[j] = steps[j]
        up = as_vector(f(x + e))
        down = as_vector(f(x - e))
        if not (np.all(np.isfinite(up)) and np.all(np.isfinite(down))):
            raise FloatingPointError(f"non-finite function value near {x}")
        cols.append((up - down) / (2.0 * steps[j]))
    return np.column_stack(cols)


def finite_diff_hess(
    f: Callable[[Vector], float],
    x: ArrayLike,
    h: float | ArrayLike | None = None,
) -> Matrix:
    """Second-order central-difference Hessian, symmetrized."""
    x = as_vector(x)
    steps = _step_vector(x, h, order=2)
    n = x.size
    hess = np.empty((n, n))
    f0 = _checked(f, x)
    for i in range(n):
        ei = np.zeros_like(x)
        ei[i] = steps[i]
        hess[i, i] = (_checked(f, x + ei) - 2.0 * f0 + _checked(f, x - ei)) / steps[i] ** 2
        for j in range(i + 1, n):
            ej = np.zeros_like(x)
            ej[j] = steps[j]
            fpp = _checked(f, x + ei + ej)
            fpm = _checked(f, x + ei - ej)
            fmp = _checked(f, x - ei + ej)
            fmm = _checked(f, x - ei - ej)
            hess[i, j] = hess[j, i] = (fpp - fpm - fmp + fmm) / (4.0 * steps[i] * steps[j])
    return symmetrize(hess)


def psd_dominates(a: ArrayLike, b: ArrayLike, tol: float | None = None) -> bool:
    """True iff a - b + tol*I is positive semidefinite."""
    a = as_matrix(a)
    b = as_matrix(b)
    if a.shape != b.shape or a.shape[0] != a.shape[1]:
        raise ValueError(f"shape mismatch: {a.shape} vs {b.shape}")
    if tol is None:
        tol = 1e-8 * max(trace_scale(a), trace_scale(b))
    diff = symmetrize(a - b)
    return bool(np.linalg.eigvalsh(diff).min() + tol >= 0.0)


def effective_sample_size(weights: ArrayLike) -> float:
    w = np.asarray(weights, dtype=np.float64)
    return float(1.0 / np.sum(w * w))


def weighted_mean(points: NDArray[np.float64], weights: NDArray[np.float64]) -> Vector:
    """Fixed-order weighted average of the rows of `points`."""
    return np.einsum("m,mi->i", weights, points)


def weighted_covariance(points: NDArray[np.float64], weights: NDArray[np.float64]) -> Matrix:
    """Centered weighted covariance of the rows of `points`, eigenvalue-floored at 0."""
    mean = weighted_mean(points, weights)
    centered = points - mean
    cov = np.einsum("m,mi,mj->ij", weights, centered, centered)
    return floor_eigenvalues(cov, 0.0)


def substream(seed: int, *keys: int) -> np.random.Generator:
    """Counter-based generator for one (seed, keys...) purpose.

    Each distinct key tuple yields an independent Philox stream, so draws do
    not depend on evaluation order.
    """
    return np.random.Generator(np.random.Philox(np.random.SeedSequence([int(seed), *map(int, keys)])))
