"""State-space model interface and the linear-Gaussian and tanh implementations.

Time steps run k = 0..n. A measurement exists at every step, the initial
density covers x_0, and the transition density f(x_k | x_{k-1}) is defined
for k = 1..n.

Every density and derivative accepts a batch of states in its *conditioning*
argument (leading axis), so particle expectations are single vectorized calls.
"""

import logging
from abc import ABC, abstractmethod
from dataclasses import dataclass, field
from functools import cached_property

import numpy as np
from numpy.typing import ArrayLike, NDArray
from scipy import linalg

from .errors import ModelConfigError, StepIndexError
from .numerics import LOG_2PI, Matrix, Vector, as_matrix, as_vector, substream

logger = logging.getLogger("mlsmooth.model")

# substream purpose tags
_SIM_STATE = 1
_SIM_OBS = 2


def _states(x: ArrayLike) -> NDArray[np.float64]:
    """One state as shape (p,), or a batch as (M, p); scalars become (1,)."""
    return np.atleast_1d(np.asarray(x, dtype=np.float64))


@dataclass(frozen=True, eq=False)
class GaussianNoise:
    """A fixed covariance with its cached factorization."""

    cov: Matrix

    @classmethod
    def checked(cls, cov: ArrayLike, name: str, dim: int) -> "GaussianNoise":
        mat = as_matrix(cov)
        if mat.shape != (dim, dim):
            raise ModelConfigError(f"{name} must be {dim}x{dim}, got {mat.shape}")
        if not np.all(np.isfinite(mat)):
            raise ModelConfigError(f"{name} has non-finite entries")
        if not np.allclose(mat, mat.T, rtol=1e-10, atol=1e-12):
            raise ModelConfigError(f"{name} is not symmetric")
        try:
            linalg.cholesky(mat, lower=True)
        except linalg.LinAlgError as exc:
            raise ModelConfigError(f"{name} is not positive definite") from exc
        return cls(cov=mat.copy())

    @cached_property
    def chol(self) -> Matrix:
        return linalg.cholesky(self.cov, lower=True)

    @cached_property
    def inv(self) -> Matrix:
        inv = linalg.cho_solve((self.chol, True), np.eye(self.cov.shape[0]))
        return 0.5 * (inv + inv.T)

    @cached_property
    def logdet(self) -> float:
        return 2.0 * float(np.sum(np.log(np.diag(self.chol))))

    @property
    def dim(self) -> int:
        return self.cov.shape[0]

    def logpdf(self, resid: NDArray[np.float64]) -> float | NDArray[np.float64]:
        """Zero-mean log-density of residuals; rows of a 2-D input are separate draws."""
        z = linalg.solve_triangular(self.chol, np.asarray(resid).T, lower=True)
        out = -0.5 * (np.sum(z * z, axis=0) + self.dim * LOG_2PI + self.logdet)
        return float(out) if np.ndim(out) == 0 else out

    def draw(self, rng: np.random.Generator, size: int | None = None) -> NDArray[np.float64]:
        if size is None:
            return self.chol @ rng.standard_normal(self.dim)
        return rng.standard_normal((size, self.dim)) @ self.chol.T


class StateSpaceModel(ABC):
    """Abstract evaluable state-space model.

    Derivative conventions: `d_*` are gradients of log-densities, `h_*` are
    negative Hessians, except `h_trans_cross` which returns the mixed second
    derivative d^2 log f(x'|x) / dx' dx^T (Q^{-1} F for a linear model).
    """

    kind: str = "abstract"

    def __init__(self, state_dim: int, obs_dim: int, horizon: int):
        if horizon < 1:
            raise ModelConfigError(f"horizon must be >= 1, got {horizon}")
        self.state_dim = state_dim
        self.obs_dim = obs_dim
        self.horizon = horizon

    def check_transition_step(self, k: int) -> None:
        if not 1 <= k <= self.horizon:
            raise StepIndexError(f"transition step {k} outside 1..{self.horizon}")

    def check_measurement_step(self, k: int) -> None:
        if not 0 <= k <= self.horizon:
            raise StepIndexError(f"measurement step {k} outside 0..{self.horizon}")

    @abstractmethod
    def initial_logpdf(self, x0: ArrayLike) -> float: ...

    @abstractmethod
    def transition_logpdf(self, k: int, x_next: ArrayLike, x_prev: ArrayLike): ...

    @abstractmethod
    def measurement_logpdf(self, k: int, y: ArrayLike, x: ArrayLike): ...

    @abstractmethod
    def sample_initial(self, rng: np.random.Generator, size: int | None = None): ...

    @abstractmethod
    def sample_transition(self, k: int, x_prev: ArrayLike, rng: np.random.Generator): ...

    @abstractmethod
    def sample_measurement(self, k: int, x: ArrayLike, rng: np.random.Generator): ...

    @abstractmethod
    def d_initial(self, x0: ArrayLike) -> Vector: ...

    @abstractmethod
    def d_meas(self, k: int, y: ArrayLike, x: ArrayLike) -> Vector: ...

    @abstractmethod
    def d_trans_out(self, k: int, x_next: ArrayLike, x_prev: ArrayLike): ...

    @abstractmethod
    def d_trans_in(self, k: int, x_next: ArrayLike, x_prev: ArrayLike) -> Vector: ...

    @abstractmethod
    def h_initial(self) -> Matrix: ...

    @abstractmethod
    def h_meas(self, k: int, x: ArrayLike) -> Matrix: ...

    @abstractmethod
    def h_trans_out(self, k: int) -> Matrix: ...

    @abstractmethod
    def h_trans_cross(self, k: int, x_prev: ArrayLike) -> Matrix: ...

    @abstractmethod
    def h_trans_in(self, k: int, x_next: ArrayLike, x_prev: ArrayLike) -> Matrix: ...


class AdditiveGaussianModel(StateSpaceModel):
    """x_k = F_k(x_{k-1}) + v_k, y_k = H_k x_k + w_k with Gaussian v, w and x_0.

    Subclasses supply the transition mean and its first two derivatives; the
    densities, samplers and information terms follow from them.
    """

    def __init__(
        self,
        H: ArrayLike,
        Q: ArrayLike,
        R: ArrayLike,
        mu: ArrayLike,
        P0: ArrayLike,
        horizon: int,
    ):
        H = as_matrix(H)
        mu = as_vector(mu)
        state_dim = mu.size
        obs_dim = H.shape[0]
        if H.shape[1] != state_dim:
            raise ModelConfigError(f"H must be {obs_dim}x{state_dim}, got {H.shape}")
        super().__init__(state_dim, obs_dim, horizon)
        self.H = H
        self.mu = mu
        self.Q = GaussianNoise.checked(Q, "Q", state_dim)
        self.R = GaussianNoise.checked(R, "R", obs_dim)
        self.P0 = GaussianNoise.checked(P0, "P0", state_dim)

    @abstractmethod
    def transition_mean(self, k: int, x_prev: ArrayLike) -> NDArray[np.float64]:
        """F_k(x_prev); batch rows map to batch rows."""

    @abstractmethod
    def transition_jacobian(self, k: int, x_prev: ArrayLike) -> Matrix:
        """dF_k/dx at a single state, shape (p, p) with rows indexing outputs."""

    @abstractmethod
    def transition_curvature(self, k: int, x_prev: ArrayLike) -> NDArray[np.float64]:
        """Second derivatives T[i, j, l] = d^2 F_k,i / dx_j dx_l at a single state."""

    # parameter accessors; constant in k unless a subclass says otherwise
    def H_at(self, k: int) -> Matrix:
        return self.H

    def Q_at(self, k: int) -> GaussianNoise:
        return self.Q

    def R_at(self, k: int) -> GaussianNoise:
        return self.R

    def initial_logpdf(self, x0: ArrayLike) -> float:
        return self.P0.logpdf(as_vector(x0) - self.mu)

    def transition_logpdf(self, k: int, x_next: ArrayLike, x_prev: ArrayLike):
        self.check_transition_step(k)
        resid = as_vector(x_next) - self.transition_mean(k, _states(x_prev))
        return self.Q_at(k).logpdf(resid)

    def measurement_logpdf(self, k: int, y: ArrayLike, x: ArrayLike):
        self.check_measurement_step(k)
        x = _states(x)
        resid = as_vector(y) - x @ self.H_at(k).T
        return self.R_at(k).logpdf(resid)

    def sample_initial(self, rng: np.random.Generator, size: int | None = None):
        return self.mu + self.P0.draw(rng, size)

    def sample_transition(self, k: int, x_prev: ArrayLike, rng: np.random.Generator):
        self.check_transition_step(k)
        x_prev = _states(x_prev)
        size = x_prev.shape[0] if x_prev.ndim == 2 else None
        return self.transition_mean(k, x_prev) + self.Q_at(k).draw(rng, size)

    def sample_measurement(self, k: int, x: ArrayLike, rng: np.random.Generator):
        self.check_measurement_step(k)
        x = _states(x)
        size = x.shape[0] if x.ndim == 2 else None
        return x @ self.H_at(k).T + self.R_at(k).draw(rng, size)

    def d_initial(self, x0: ArrayLike) -> Vector:
        return -self.P0.inv @ (as_vector(x0) - self.mu)

    def d_meas(self, k: int, y: ArrayLike, x: ArrayLike) -> Vector:
        self.check_measurement_step(k)
        H = self.H_at(k)
        return H.T @ (self.R_at(k).inv @ (as_vector(y) - H @ as_vector(x)))

    def d_trans_out(self, k: int, x_next: ArrayLike, x_prev: ArrayLike):
        """-Q_k^{-1}(x_next - F_k(x_prev)); one row per batch entry of x_prev."""
        self.check_transition_step(k)
        resid = as_vector(x_next) - self.transition_mean(k, _states(x_prev))
        return -resid @ self.Q_at(k).inv

    def d_trans_in(self, k: int, x_next: ArrayLike, x_prev: ArrayLike) -> Vector:
        self.check_transition_step(k)
        x_prev = as_vector(x_prev)
        resid = as_vector(x_next) - self.transition_mean(k, x_prev)
        return self.transition_jacobian(k, x_prev).T @ (self.Q_at(k).inv @ resid)

    def h_initial(self) -> Matrix:
        return self.P0.inv

    def h_meas(self, k: int, x: ArrayLike | None = None) -> Matrix:
        self.check_measurement_step(k)
        H = self.H_at(k)
        return H.T @ self.R_at(k).inv @ H

    def h_trans_out(self, k: int) -> Matrix:
        self.check_transition_step(k)
        return self.Q_at(k).inv

    def h_trans_cross(self, k: int, x_prev: ArrayLike) -> Matrix:
        self.check_transition_step(k)
        return self.Q_at(k).inv @ self.transition_jacobian(k, as_vector(x_prev))

    def h_trans_in(self, k: int, x_next: ArrayLike, x_prev: ArrayLike) -> Matrix:
        """Gauss-Newton term plus the curvature correction of the transition mean."""
        self.check_transition_step(k)
        x_prev = as_vector(x_prev)
        jac = self.transition_jacobian(k, x_prev)
        q_inv = self.Q_at(k).inv
        gauss_newton = jac.T @ q_inv @ jac
        weighted_resid = q_inv @ (as_vector(x_next) - self.transition_mean(k, x_prev))
        curvature = np.einsum("i,ijl->jl", weighted_resid, self.transition_curvature(k, x_prev))
        out = gauss_newton - curvature
        return 0.5 * (out + out.T)


class LinearGaussianModel(AdditiveGaussianModel):
    """x_k = F x_{k-1} + G u_k + v_k, y_k = H x_k + w_k."""

    kind = "linear"

    def __init__(
        self,
        F: ArrayLike,
        H: ArrayLike,
        Q: ArrayLike,
        R: ArrayLike,
        mu: ArrayLike,
        P0: ArrayLike,
        horizon: int,
        G: ArrayLike | None = None,
        u: ArrayLike | None = None,
    ):
        super().__init__(H=H, Q=Q, R=R, mu=mu, P0=P0, horizon=horizon)
        p = self.state_dim
        self.F = as_matrix(F)
        if self.F.shape != (p, p):
            raise ModelConfigError(f"F must be {p}x{p}, got {self.F.shape}")
        if G is None:
            self.G = np.zeros((p, 1))
            self.u = np.zeros((horizon + 1, 1))
        else:
            self.G = as_matrix(G).reshape(p, -1)
            m = self.G.shape[1]
            u_arr = np.zeros((horizon + 1, m)) if u is None else np.asarray(u, dtype=np.float64)
            if u_arr.ndim == 1:
                u_arr = u_arr.reshape(-1, m)
            if u_arr.shape != (horizon + 1, m):
                raise ModelConfigError(f"u must have shape ({horizon + 1}, {m}), got {u_arr.shape}")
            self.u = u_arr

    def F_at(self, k: int) -> Matrix:
        return self.F

    def control_at(self, k: int) -> Vector:
        """G_k u_k."""
        return self.G @ self.u[k]

    def transition_mean(self, k: int, x_prev: ArrayLike) -> NDArray[np.float64]:
        return np.asarray(x_prev, dtype=np.float64) @ self.F_at(k).T + self.control_at(k)

    def transition_jacobian(self, k: int, x_prev: ArrayLike) -> Matrix:
        return self.F_at(k)

    def transition_curvature(self, k: int, x_prev: ArrayLike) -> NDArray[np.float64]:
        p = self.state_dim
        return np.zeros((p, p, p))

    def with_horizon(self, horizon: int) -> "LinearGaussianModel":
        """Same parameters over a different horizon, with zero control input."""
        return LinearGaussianModel(
            F=self.F, H=self.H, Q=self.Q.cov, R=self.R.cov, mu=self.mu, P0=self.P0.cov,
            horizon=horizon, G=self.G, u=np.zeros((horizon + 1, self.G.shape[1])),
        )


class NonlinearTanhModel(AdditiveGaussianModel):
    """x_k = f_k tanh(pi x_{k-1}) + v_k, y_k = x_k / 2 + w_k, f_k = 1 + 0.5 sin(2 pi k / 20)."""

    kind = "tanh"

    def __init__(
        self,
        horizon: int,
        q: float = 0.2,
        r: float = 1.0,
        h: float = 0.5,
        mu: float = 0.0,
        p0: float = 1.0,
        amplitude: float = 0.5,
        period: float = 20.0,
    ):
        if q <= 0 or r <= 0 or p0 <= 0:
            raise ModelConfigError("tanh model variances must be positive")
        super().__init__(H=[[h]], Q=[[q]], R=[[r]], mu=[mu], P0=[[p0]], horizon=horizon)
        self.amplitude = amplitude
        self.period = period

    def gain(self, k: int) -> float:
        return 1.0 + self.amplitude * np.sin(2.0 * np.pi * k / self.period)

    def transition_mean(self, k: int, x_prev: ArrayLike) -> NDArray[np.float64]:
        return self.gain(k) * np.tanh(np.pi * np.asarray(x_prev, dtype=np.float64))

    def transition_jacobian(self, k: int, x_prev: ArrayLike) -> Matrix:
        x = float(as_vector(x_prev)[0])
        sech2 = 1.0 / np.cosh(np.pi * x) ** 2
        return np.array([[self.gain(k) * np.pi * sech2]])

    def transition_curvature(self, k: int, x_prev: ArrayLike) -> NDArray[np.float64]:
        x = float(as_vector(x_prev)[0])
        sech2 = 1.0 / np.cosh(np.pi * x) ** 2
        return np.array([[[-2.0 * self.gain(k) * np.pi ** 2 * sech2 * np.tanh(np.pi * x)]]])


def benchmark_linear_model(horizon: int = 100) -> LinearGaussianModel:
    """Three-state system observed through the sum of its last two components."""
    return LinearGaussianModel(
        F=[[0.66, -1.31, -1.11], [0.07, 0.73, -0.06], [0.00, 0.08, 0.80]],
        H=[[0.0, 1.0, 1.0]],
        Q=np.diag([0.2, 0.3, 0.5]),
        R=[[0.1]],
        mu=[0.0, 0.0, 0.0],
        P0=0.3 * np.eye(3),
        horizon=horizon,
    )


def scalar_linear_model(
    horizon: int,
    F: float = 1.0,
    H: float = 1.0,
    Q: float = 1.0,
    R: float = 1.0,
    mu: float = 0.0,
    P0: float = 1.0,
) -> LinearGaussianModel:
    return LinearGaussianModel(F=[[F]], H=[[H]], Q=[[Q]], R=[[R]], mu=[mu], P0=[[P0]], horizon=horizon)


@dataclass
class Trajectory:
    """A simulated record x_{0:n}, y_{0:n}."""

    states: NDArray[np.float64]
    observations: NDArray[np.float64]
    seed: int
    metadata: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.states.shape[0] != self.observations.shape[0]:
            raise ValueError("states and observations must have equal length")

    @property
    def horizon(self) -> int:
        return self.states.shape[0] - 1


def simulate(model: StateSpaceModel, n: int | None = None, seed: int = 0) -> Trajectory:
    """Ancestral sampling x_0 -> x_1 -> ... with a measurement at every step."""
    n = model.horizon if n is None else n
    if n > model.horizon:
        raise StepIndexError(f"horizon {n} exceeds model horizon {model.horizon}")
    state_rng = substream(seed, _SIM_STATE)
    obs_rng = substream(seed, _SIM_OBS)
    states = np.empty((n + 1, model.state_dim))
    obs = np.empty((n + 1, model.obs_dim))
    states[0] = model.sample_initial(state_rng)
    obs[0] = model.sample_measurement(0, states[0], obs_rng)
    for k in range(1, n + 1):
        states[k] = model.sample_transition(k, states[k - 1], state_rng)
        obs[k] = model.sample_measurement(k, states[k], obs_rng)
    logger.debug("simulated kind=%s n=%d seed=%d", model.kind, n, seed)
    return Trajectory(states=states, observations=obs, seed=seed)
