"""Bootstrap particle filter and the backward-kernel weights built on its output."""

import logging
from dataclasses import dataclass

import numpy as np
from numpy.typing import ArrayLike, NDArray
from scipy.special import logsumexp

from .errors import DegenerateWeightsError, StepIndexError
from .model import StateSpaceModel
from .numerics import (
    Matrix,
    Vector,
    as_vector,
    effective_sample_size,
    substream,
    weighted_covariance,
    weighted_mean,
)

logger = logging.getLogger("mlsmooth.particle")

# Log-likelihoods whose maximum falls below this are treated as vanished.
DEGENERACY_FLOOR = -700.0

# substream purpose tags
_INIT = 0
_PROPAGATE = 1
_RESAMPLE = 2


@dataclass
class ParticleHistory:
    """Forward-pass record.

    `particles[k]` and `weights[k]` are the atoms and normalized weights of the
    filtering distribution at step k, stored before any resampling.
    `ancestors[k]` indexes the step k-1 atoms each step-k particle descends
    from (identity at k = 0).
    """

    particles: NDArray[np.float64]
    weights: NDArray[np.float64]
    ancestors: NDArray[np.int64]
    ess: NDArray[np.float64]
    resampled: NDArray[np.bool_]
    seed: int

    @property
    def horizon(self) -> int:
        return self.particles.shape[0] - 1

    @property
    def num_particles(self) -> int:
        return self.particles.shape[1]

    def check_step(self, k: int) -> None:
        if not 0 <= k <= self.horizon:
            raise StepIndexError(f"step {k} outside 0..{self.horizon}")


def normalized_weights(loglikelihoods: ArrayLike, step: int | None = None) -> NDArray[np.float64]:
    """exp(l - max) / sum exp(l - max)."""
    logw = np.asarray(loglikelihoods, dtype=np.float64)
    if np.any(np.isnan(logw)):
        raise DegenerateWeightsError("NaN log-weight", step=step)
    top = np.max(logw)
    if not np.isfinite(top):
        raise DegenerateWeightsError("all log-weights are -inf", step=step)
    w = np.exp(logw - top)
    return w / np.sum(w)


def _multinomial(weights: NDArray[np.float64], rng: np.random.Generator) -> NDArray[np.int64]:
    cumulative = np.cumsum(weights)
    draws = rng.random(weights.size) * cumulative[-1]
    return np.minimum(np.searchsorted(cumulative, draws, side="right"), weights.size - 1)


def pf_run(
    model: StateSpaceModel,
    y: ArrayLike,
    num_particles: int,
    seed: int,
    resample_fraction: float = 0.5,
) -> ParticleHistory:
    """Bootstrap filter with multinomial resampling whenever ESS < fraction * M."""
    if num_particles < 2:
        raise ValueError(f"need at least 2 particles, got {num_particles}")
    y = np.asarray(y, dtype=np.float64).reshape(-1, model.obs_dim)
    n = y.shape[0] - 1
    M = num_particles
    particles = np.empty((n + 1, M, model.state_dim))
    weights = np.empty((n + 1, M))
    ancestors = np.empty((n + 1, M), dtype=np.int64)
    ess = np.empty(n + 1)
    resampled = np.zeros(n + 1, dtype=bool)

    x = model.sample_initial(substream(seed, 0, _INIT), size=M)
    prior_logw = np.full(M, -np.log(M))
    ancestors[0] = np.arange(M)
    threshold = resample_fraction * M

    for k in range(n + 1):
        if k > 0:
            prev_w = weights[k - 1]
            if ess[k - 1] < threshold:
                idx = _multinomial(prev_w, substream(seed, k, _RESAMPLE))
                resampled[k - 1] = True
                prior_logw = np.full(M, -np.log(M))
                logger.debug("resampled step=%d ess=%.1f", k - 1, ess[k - 1])
            else:
                idx = np.arange(M)
                with np.errstate(divide="ignore"):
                    prior_logw = np.log(prev_w)
            ancestors[k] = idx
            x = model.sample_transition(k, particles[k - 1][idx], substream(seed, k, _PROPAGATE))
        loglik = np.asarray(model.measurement_logpdf(k, y[k], x), dtype=np.float64)
        if not np.max(loglik) > DEGENERACY_FLOOR:
            raise DegenerateWeightsError("measurement likelihood vanished for every particle", step=k)
        particles[k] = x
        weights[k] = normalized_weights(prior_logw + loglik, step=k)
        ess[k] = effective_sample_size(weights[k])

    logger.info(
        "particle_filter_done n=%d M=%d seed=%d resamples=%d min_ess=%.1f",
        n, M, seed, int(resampled.sum()), float(ess.min()),
    )
    return ParticleHistory(particles, weights, ancestors, ess, resampled, seed)


def backward_kernel_weights(
    model: StateSpaceModel,
    ph: ParticleHistory,
    k: int,
    x_k: ArrayLike,
) -> NDArray[np.float64]:
    """w_{k-1}^m(x_k) proportional to alpha_{k-1}^m f(x_k | x_{k-1}^m)."""
    if not 1 <= k <= ph.horizon:
        raise StepIndexError(f"backward kernel step {k} outside 1..{ph.horizon}")
    x_k = as_vector(x_k)
    trans = np.asarray(model.transition_logpdf(k, x_k, ph.particles[k - 1]), dtype=np.float64)
    if not np.max(trans) > DEGENERACY_FLOOR:
        raise DegenerateWeightsError("transition density vanished for every atom", step=k, state=x_k)
    with np.errstate(divide="ignore"):
        logw = np.log(ph.weights[k - 1]) + trans
    return normalized_weights(logw, step=k)


def filtered_mean(ph: ParticleHistory, k: int) -> Vector:
    ph.check_step(k)
    return weighted_mean(ph.particles[k], ph.weights[k])


def filtered_cov(ph: ParticleHistory, k: int) -> Matrix:
    ph.check_step(k)
    return weighted_covariance(ph.particles[k], ph.weights[k])


def ml_state_estimate(model: StateSpaceModel, ph: ParticleHistory, y: ArrayLike, k: int) -> Vector:
    """Atom maximizing the particle estimate of log f(x_k, y_{0:k}).

    The predictive density at each atom is the alpha-weighted transition
    mixture over the step k-1 atoms (the prior at k = 0).
    """
    ph.check_step(k)
    y = np.asarray(y, dtype=np.float64).reshape(-1, model.obs_dim)
    atoms = ph.particles[k]
    loglik = np.asarray(model.measurement_logpdf(k, y[k], atoms), dtype=np.float64)
    if k == 0:
        prior = np.array([model.initial_logpdf(a) for a in atoms])
    else:
        with np.errstate(divide="ignore"):
            log_alpha = np.log(ph.weights[k - 1])
        prev = ph.particles[k - 1]
        prior = np.array([logsumexp(log_alpha + model.transition_logpdf(k, a, prev)) for a in atoms])
    return atoms[int(np.argmax(prior + loglik))].copy()
