"""Standard errors for the ML smoother by repeated sampling.

N independent particle passes over the same observations each yield a
smoothed trajectory and the information blocks at its smoothed pairs. The
blocks are averaged per step and then pushed through the backward
recursion

    Sigma_k = I_k^{-1} + I_k^{-1} I_{k,k+1} Sigma_{k+1} I_{k+1,k} I_k^{-1}.
"""

import logging
from collections.abc import Sequence
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass

import numpy as np
from numpy.typing import ArrayLike, NDArray

from .config import Settings
from .errors import FactorizationError, ReplicateShortfallError, SmootherError
from .kalman import kalman_filter
from .model import LinearGaussianModel, StateSpaceModel
from .numerics import Matrix, inv_pd, repair_pd, symmetrize, trace_scale
from .particle import ParticleHistory, filtered_cov, pf_run
from .smoother import IterationConfig, SmootherResult, smooth_backward

logger = logging.getLogger("mlsmooth.covariance")

# how far below zero an averaged block's eigenvalue may sit before it is rejected
INDEFINITE_TOLERANCE = 1e-8
_REPLICATE_TAG = 3


@dataclass
class CovEstimate:
    """Repeated-sampling estimates for steps 0..n.

    `counts[k]` is the number of replicates contributing at step k;
    `replicate_states[l, k]` is replicate l's smoothed state (NaN where it
    was excluded).
    """

    means: NDArray[np.float64]
    info_xx: NDArray[np.float64]
    info_x_next: NDArray[np.float64]
    info_next_x: NDArray[np.float64]
    cov: NDArray[np.float64]
    terminal_cov: Matrix
    counts: NDArray[np.int64]
    replicate_states: NDArray[np.float64]
    num_replicates: int
    convergence_rate: float

    @property
    def horizon(self) -> int:
        return self.means.shape[0] - 1

    @property
    def std_errors(self) -> NDArray[np.float64]:
        """sigma-hat_{k|n}: square roots of the diagonal of each Sigma-hat_k."""
        return np.sqrt(np.maximum(np.diagonal(self.cov, axis1=1, axis2=2), 0.0))

    def sample_std_errors(self, truth: ArrayLike) -> NDArray[np.float64]:
        """s_{k|n} = sqrt(sum_l (xhat_{k,l} - x_k)^2 / (N - 1)) over contributing replicates."""
        truth = np.asarray(truth, dtype=np.float64).reshape(self.means.shape)
        sq = (self.replicate_states - truth[None]) ** 2
        total = np.nansum(sq, axis=0)
        dof = np.maximum(self.counts - 1, 1)[:, None]
        return np.sqrt(total / dof)


def replicate_seed(seed: int, replicate: int) -> int:
    """Independent seed for replicate l derived from the master seed."""
    return int(np.random.SeedSequence([seed, _REPLICATE_TAG, replicate]).generate_state(1)[0])


@dataclass
class _Replicate:
    index: int
    result: SmootherResult | None
    ph: ParticleHistory | None
    error: str | None = None


def _run_replicate(
    model: StateSpaceModel,
    y: NDArray[np.float64],
    num_particles: int,
    cfg: IterationConfig,
    index: int,
    seed: int,
) -> _Replicate:
    try:
        ph = pf_run(model, y, num_particles, seed)
        result = smooth_backward(model, y, ph, cfg)
    except SmootherError as exc:
        logger.warning("replicate_failed index=%d seed=%d error=%s", index, seed, exc)
        return _Replicate(index=index, result=None, ph=None, error=str(exc))
    return _Replicate(index=index, result=result, ph=ph)


def terminal_covariance(
    model: StateSpaceModel,
    ph: ParticleHistory | Sequence[ParticleHistory],
    y: ArrayLike | None = None,
) -> Matrix:
    """Boundary value of the recursion at step n.

    A linear model with observations supplied gets P_{n|n} from the Kalman
    filter; otherwise the weighted particle covariance at step n, averaged
    when several histories are given.
    """
    histories = [ph] if isinstance(ph, ParticleHistory) else list(ph)
    if isinstance(model, LinearGaussianModel) and y is not None:
        fr = kalman_filter(model, y)
        return fr.upd_cov[fr.horizon].copy()
    if not histories:
        raise ValueError("need at least one particle history")
    n = histories[0].horizon
    cov = symmetrize(np.mean([filtered_cov(h, n) for h in histories], axis=0))
    if histories[0].num_particles < 2 or not np.any(np.diag(cov) > 0):
        logger.warning("terminal_covariance_degenerate M=%d", histories[0].num_particles)
    return cov


def _checked_inverse(block: Matrix, k: int) -> Matrix:
    sym = symmetrize(block)
    lowest = float(np.linalg.eigvalsh(sym).min())
    if lowest < -INDEFINITE_TOLERANCE * trace_scale(sym):
        raise FactorizationError(f"information block not positive definite (min eigenvalue {lowest:.3e})", step=k)
    return inv_pd(repair_pd(sym), step=k)


def covariance_recursion(
    info_xx: ArrayLike,
    info_x_next: ArrayLike,
    info_next_x: ArrayLike,
    terminal: ArrayLike,
) -> NDArray[np.float64]:
    """Backward sweep k = n-1..0 returning Sigma_k for k = 0..n (entry n is `terminal`)."""
    info_xx = np.asarray(info_xx, dtype=np.float64)
    info_x_next = np.asarray(info_x_next, dtype=np.float64)
    info_next_x = np.asarray(info_next_x, dtype=np.float64)
    n, p = info_xx.shape[0], info_xx.shape[1]
    cov = np.empty((n + 1, p, p))
    cov[n] = symmetrize(np.asarray(terminal, dtype=np.float64).reshape(p, p))
    for k in range(n - 1, -1, -1):
        inv = _checked_inverse(info_xx[k], k)
        lhs = inv @ info_x_next[k]
        rhs = info_next_x[k] @ inv
        cov[k] = symmetrize(inv + lhs @ cov[k + 1] @ rhs)
    return cov


def assemble_joint_information(xx: Matrix, x_next: Matrix, next_x: Matrix, next_next: Matrix) -> Matrix:
    """[[I_kk, I_k,k+1], [I_k+1,k, I_k+1,k+1]] as one 2p x 2p matrix."""
    return np.block([[xx, x_next], [next_x, next_next]])


def block_inverse_top_left(joint: Matrix, p: int) -> Matrix:
    """Top-left p x p block of the inverse of a joint information matrix."""
    return symmetrize(inv_pd(joint)[:p, :p])


def repeated_sampling(
    model: StateSpaceModel,
    y: ArrayLike,
    num_replicates: int,
    num_particles: int,
    cfg: IterationConfig | None = None,
    seed: int = 0,
    seeds: Sequence[int] | None = None,
    terminal: ArrayLike | None = None,
    threads: int | None = None,
) -> CovEstimate:
    """Average smoothed states and information blocks over N particle replicates.

    A replicate whose step k did not converge is left out at k; a replicate
    that raised is left out everywhere. Fewer than N/2 contributions at any
    step raises ReplicateShortfallError.
    """
    if num_replicates < 2:
        raise ValueError(f"repeated sampling needs N >= 2, got {num_replicates}")
    cfg = cfg or IterationConfig()
    y = np.asarray(y, dtype=np.float64).reshape(-1, model.obs_dim)
    n, p = y.shape[0] - 1, model.state_dim
    if seeds is None:
        seeds = [replicate_seed(seed, ell) for ell in range(num_replicates)]
    elif len(seeds) != num_replicates:
        raise ValueError(f"got {len(seeds)} seeds for {num_replicates} replicates")
    workers = threads or Settings.from_env().threads

    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            futures = [
                pool.submit(_run_replicate, model, y, num_particles, cfg, ell, s)
                for ell, s in enumerate(seeds)
            ]
            replicates = [f.result() for f in futures]
    else:
        replicates = [_run_replicate(model, y, num_particles, cfg, ell, s) for ell, s in enumerate(seeds)]

    states = np.full((num_replicates, n + 1, p), np.nan)
    mask = np.zeros((num_replicates, n + 1), dtype=bool)
    sum_xx = np.zeros((n, p, p))
    sum_x_next = np.zeros((n, p, p))
    sum_next_x = np.zeros((n, p, p))
    histories: list[ParticleHistory] = []
    converged_steps = 0

    # fixed replicate order keeps the sums independent of thread scheduling
    for rep in replicates:
        if rep.result is None:
            continue
        res = rep.result
        histories.append(rep.ph)
        ok = res.converged.copy()
        mask[rep.index] = ok
        states[rep.index, ok] = res.means[ok]
        converged_steps += int(ok[:n].sum())
        for k in np.flatnonzero(ok[:n]):
            sum_xx[k] += res.info_xi[k]
            sum_x_next[k] += res.cross_x_next[k]
            sum_next_x[k] += res.cross_next_x[k]

    counts = mask.sum(axis=0).astype(np.int64)
    short = np.flatnonzero(2 * counts < num_replicates)
    if short.size:
        k = int(short[0])
        logger.error("replicate_shortfall k=%d effective=%d N=%d", k, counts[k], num_replicates)
        raise ReplicateShortfallError(
            f"only {counts[k]} of {num_replicates} replicates usable at step {k}"
        )

    denom = counts[:n, None, None]
    info_xx = sum_xx / denom
    info_x_next = sum_x_next / denom
    info_next_x = sum_next_x / denom
    means = np.nanmean(states, axis=0)

    if terminal is None:
        terminal = terminal_covariance(model, histories, y if isinstance(model, LinearGaussianModel) else None)
    terminal = np.asarray(terminal, dtype=np.float64).reshape(p, p)
    cov = covariance_recursion(info_xx, info_x_next, info_next_x, terminal)

    rate = converged_steps / max(len(histories) * n, 1)
    logger.info(
        "repeated_sampling_done n=%d N=%d M=%d usable=%d convergence=%.3f",
        n, num_replicates, num_particles, len(histories), rate,
    )
    return CovEstimate(
        means=means,
        info_xx=info_xx,
        info_x_next=info_x_next,
        info_next_x=info_next_x,
        cov=cov,
        terminal_cov=terminal,
        counts=counts,
        replicate_states=states,
        num_replicates=num_replicates,
        convergence_rate=rate,
    )
