"""Experiment configuration, presets, environment settings and logging setup."""

import json
import logging
import os
from dataclasses import dataclass
from enum import Enum
from pathlib import Path
from typing import Any

import numpy as np
from pydantic import BaseModel, ConfigDict, Field, ValidationError

from .errors import ConfigError, ModelConfigError
from .model import (
    LinearGaussianModel,
    NonlinearTanhModel,
    StateSpaceModel,
    benchmark_linear_model,
    scalar_linear_model,
)
from .smoother import IterationConfig

logger = logging.getLogger("mlsmooth.config")

PROJECT_ROOT = Path(__file__).parent.parent.parent


@dataclass(frozen=True)
class Settings:
    """Process-wide settings read from MLSMOOTH_* variables."""

    log_level: str = "INFO"
    threads: int = 1
    runs_dir: Path = PROJECT_ROOT / ".runs"

    @classmethod
    def from_env(cls) -> "Settings":
        try:
            threads = max(1, int(os.environ.get("MLSMOOTH_THREADS", "1")))
        except ValueError:
            logger.warning("invalid MLSMOOTH_THREADS=%r, using 1", os.environ.get("MLSMOOTH_THREADS"))
            threads = 1
        runs_dir = os.environ.get("MLSMOOTH_RUNS_DIR")
        return cls(
            log_level=os.environ.get("MLSMOOTH_LOG_LEVEL", "INFO").upper(),
            threads=threads,
            runs_dir=Path(runs_dir) if runs_dir else PROJECT_ROOT / ".runs",
        )


def configure_logging(level: str | None = None) -> None:
    log_level = (level or Settings.from_env().log_level).upper()
    logging.basicConfig(
        level=log_level,
        format="%(asctime)s %(levelname)s %(name)s: %(message)s",
    )


class ModelKind(str, Enum):
    """Model families the driver can build."""

    LINEAR = "linear"
    TANH = "tanh"
    SCALAR = "scalar"


class ModelSpec(BaseModel):
    """Model parameters. Matrices are row-major nested lists.

    A linear model with no matrices given is the three-state benchmark.
    """

    model_config = ConfigDict(extra="forbid")

    kind: ModelKind = Field(default=ModelKind.LINEAR, description="Model family")
    F: list[list[float]] | None = Field(default=None, description="Transition matrix")
    G: list[list[float]] | None = Field(default=None, description="Control input matrix")
    H: list[list[float]] | None = Field(default=None, description="Measurement matrix")
    Q: list[list[float]] | None = Field(default=None, description="Process noise covariance")
    R: list[list[float]] | None = Field(default=None, description="Measurement noise covariance")
    mu: list[float] | None = Field(default=None, description="Initial state mean")
    P0: list[list[float]] | None = Field(default=None, description="Initial state covariance")
    u: list[list[float]] | None = Field(default=None, description="Control inputs, one row per step")
    q: float = Field(default=0.2, gt=0, description="tanh model process noise variance")
    r: float = Field(default=1.0, gt=0, description="tanh model measurement noise variance")
    h: float = Field(default=0.5, description="tanh model measurement gain")


class RunSpec(BaseModel):
    """Sizes and seeds of one study."""

    model_config = ConfigDict(extra="forbid")

    n: int = Field(default=100, ge=1, description="Horizon; steps run 0..n")
    M: int = Field(default=2000, ge=2, description="Particles per filter pass")
    N: int = Field(default=100, ge=1, description="Repeated-sampling replicates")
    seed: int = Field(default=0, ge=0, description="Master seed")
    threads: int | None = Field(default=None, ge=1, description="Replicate workers (MLSMOOTH_THREADS if unset)")


class OutSpec(BaseModel):
    model_config = ConfigDict(extra="forbid")

    dir: str = Field(default="out", description="Output directory for CSV, report and plots")
    plots: bool = Field(default=True, description="Write SVG plots when matplotlib is available")


class ExperimentConfig(BaseModel):
    """Full configuration of one study run."""

    model_config = ConfigDict(extra="forbid", populate_by_name=True)

    model: ModelSpec = Field(default_factory=ModelSpec)
    run: RunSpec = Field(default_factory=RunSpec)
    iteration: IterationConfig = Field(default_factory=IterationConfig, alias="iter")
    out: OutSpec = Field(default_factory=OutSpec)


PRESETS: dict[str, dict[str, Any]] = {
    "linear": {"model": {"kind": "linear"}},
    "linear-reduced": {"model": {"kind": "linear"}, "run": {"n": 40, "N": 30}},
    "tanh": {"model": {"kind": "tanh"}},
    "tanh-reduced": {"model": {"kind": "tanh"}, "run": {"n": 40, "N": 20, "M": 1000}},
    "scalar": {
        "model": {"kind": "scalar", "F": [[1.0]], "H": [[1.0]], "Q": [[1.0]], "R": [[1.0]], "mu": [0.0], "P0": [[1.0]]},
    },
}


def _merge(base: dict[str, Any], extra: dict[str, Any]) -> dict[str, Any]:
    out = dict(base)
    for key, value in extra.items():
        if isinstance(value, dict) and isinstance(out.get(key), dict):
            out[key] = _merge(out[key], value)
        else:
            out[key] = value
    return out


def load_config(
    path: str | Path | None = None,
    preset: str | None = None,
    overrides: dict[str, Any] | None = None,
) -> ExperimentConfig:
    """Preset, then file, then overrides; later sources win key by key."""
    data: dict[str, Any] = {}
    if preset is not None:
        if preset not in PRESETS:
            raise ConfigError(f"unknown preset {preset!r}; choose from {', '.join(PRESETS)}")
        data = _merge(data, PRESETS[preset])
    if path is not None:
        try:
            data = _merge(data, json.loads(Path(path).read_text()))
        except OSError as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from exc
        except json.JSONDecodeError as exc:
            raise ConfigError(f"config {path} is not valid JSON: {exc}") from exc
    if overrides:
        data = _merge(data, overrides)
    try:
        return ExperimentConfig.model_validate(data)
    except ValidationError as exc:
        raise ConfigError(str(exc)) from exc


def _required(spec: ModelSpec, *names: str) -> None:
    missing = [name for name in names if getattr(spec, name) is None]
    if missing:
        raise ConfigError(f"{spec.kind.value} model needs {', '.join(missing)}")


def build_model(spec: ModelSpec, horizon: int) -> StateSpaceModel:
    """Instantiate the configured model; invalid parameters surface as ConfigError."""
    try:
        if spec.kind is ModelKind.TANH:
            mu = spec.mu[0] if spec.mu else 0.0
            p0 = spec.P0[0][0] if spec.P0 else 1.0
            return NonlinearTanhModel(horizon, q=spec.q, r=spec.r, h=spec.h, mu=mu, p0=p0)
        if spec.kind is ModelKind.SCALAR:
            def entry(value, default):
                return float(np.asarray(value).ravel()[0]) if value is not None else default

            return scalar_linear_model(
                horizon,
                F=entry(spec.F, 1.0),
                H=entry(spec.H, 1.0),
                Q=entry(spec.Q, 1.0),
                R=entry(spec.R, 1.0),
                mu=entry(spec.mu, 0.0),
                P0=entry(spec.P0, 1.0),
            )
        if spec.F is None and spec.H is None and spec.Q is None and spec.R is None:
            return benchmark_linear_model(horizon)
        _required(spec, "F", "H", "Q", "R")
        p = len(spec.F)
        return LinearGaussianModel(
            F=spec.F,
            H=spec.H,
            Q=spec.Q,
            R=spec.R,
            mu=spec.mu if spec.mu is not None else np.zeros(p),
            P0=spec.P0 if spec.P0 is not None else np.eye(p),
            horizon=horizon,
            G=spec.G,
            u=spec.u,
        )
    except ModelConfigError as exc:
        raise ConfigError(f"invalid model: {exc}") from exc
