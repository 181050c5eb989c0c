"""Pydantic models for study reports and the run service API."""

from datetime import datetime
from enum import Enum

from pydantic import BaseModel, Field

from .config import ExperimentConfig


class StudyKind(str, Enum):
    """Which study pipeline a run executes."""

    LINEAR = "linear"
    NONLINEAR = "nonlinear"


class RunStatus(str, Enum):
    """Run lifecycle."""

    PENDING = "pending"
    RUNNING = "running"
    COMPLETED = "completed"
    FAILED = "failed"


class StepRow(BaseModel):
    """One row of the per-step table; vector fields hold one entry per state component.

    Columns a study does not produce (RTS and theoretical sigma for the
    nonlinear study) are NaN.
    """

    k: int = Field(..., ge=0, description="Time step")
    x_true: list[float] = Field(..., description="Simulated state")
    xhat_filt: list[float] = Field(..., description="Filtered mean (Kalman or particle)")
    xhat_rts: list[float] = Field(..., description="RTS smoothed mean")
    xhat_smc: list[float] = Field(..., description="Particle ML smoothed mean")
    sigma_theory: list[float] = Field(..., description="Closed-form smoothed standard error")
    sigma_hat: list[float] = Field(..., description="Repeated-sampling standard error")
    ci_lo: list[float] = Field(..., description="xhat_smc - 1.96 sigma_hat")
    ci_hi: list[float] = Field(..., description="xhat_smc + 1.96 sigma_hat")
    converged: bool = Field(..., description="Smoother converged at this step")
    s_hat: list[float] = Field(..., description="Sample standard error around the true state")
    xhat_ml: list[float] = Field(..., description="Particle ML state estimate")


class RunSummary(BaseModel):
    """Scalar study diagnostics."""

    coverage_count: int = Field(..., ge=0, description="Steps whose every component lies inside the 95% band")
    coverage_fraction: float = Field(..., description="Fraction of (step, component) pairs inside the band")
    convergence_rate: float = Field(..., description="Fraction of smoothed steps that converged")
    mean_abs_smc_rts: float | None = Field(default=None, description="Mean |xhat_smc - xhat_rts|")
    mean_rel_sigma_dev: float | None = Field(default=None, description="Mean |sigma_hat - sigma| / sigma")
    mean_sigma_excess: float | None = Field(default=None, description="Mean (sigma_hat - sigma) / sigma")
    mean_sigma_ratio_sample: float | None = Field(
        default=None,
        description="Mean sigma_hat / s_hat",
    )
    replicates_used: int = Field(..., ge=1, description="Replicates contributing to the estimates")


class RunReport(BaseModel):
    """Everything a study produces; the CSV and plots are views of `rows`."""

    study: StudyKind
    config: ExperimentConfig
    state_dim: int = Field(..., ge=1)
    rows: list[StepRow]
    summary: RunSummary
    timings: dict[str, float] = Field(default_factory=dict, description="Wall-clock seconds per stage")


class CreateRunRequest(BaseModel):
    """Request body for starting a run."""

    study: StudyKind = Field(default=StudyKind.LINEAR, description="Study to execute")
    preset: str | None = Field(default=None, description="Named preset applied before `config`")
    config: dict | None = Field(default=None, description="Partial ExperimentConfig overrides")


class RunInfo(BaseModel):
    """Response model for a run."""

    run_id: str = Field(..., description="Unique run identifier")
    study: StudyKind = Field(..., description="Study kind")
    status: RunStatus = Field(..., description="Current run status")
    created_at: datetime = Field(..., description="Submission timestamp")
    finished_at: datetime | None = Field(default=None, description="Completion timestamp")
    error: str | None = Field(default=None, description="Failure message")
    summary: RunSummary | None = Field(default=None, description="Diagnostics once completed")


class RunListResponse(BaseModel):
    runs: list[RunInfo]
    total: int
