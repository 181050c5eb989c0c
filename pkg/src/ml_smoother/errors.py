"""Error types raised by the smoothing library."""


class SmootherError(Exception):
    """Base class for every error raised by ml_smoother."""


class FactorizationError(SmootherError, ValueError):
    """A matrix expected to be positive definite failed to factorize."""

    def __init__(self, message: str, step: int | None = None):
        self.step = step
        if step is not None:
            message = f"{message} (step {step})"
        super().__init__(message)


class DegenerateWeightsError(SmootherError, RuntimeError):
    """All importance or backward-kernel weights vanished numerically."""

    def __init__(self, message: str, step: int | None = None, state=None):
        self.step = step
        self.state = state
        parts = [message]
        if step is not None:
            parts.append(f"step {step}")
        if state is not None:
            parts.append(f"x_k={state}")
        super().__init__(" | ".join(parts))


class ModelConfigError(SmootherError, ValueError):
    """Model parameters are malformed (shape, symmetry or definiteness)."""


class StepIndexError(SmootherError, IndexError):
    """A time index lies outside the range a density is defined on."""


class ReplicateShortfallError(SmootherError, RuntimeError):
    """Too many repeated-sampling replicates failed at some step."""


class ConfigError(SmootherError, ValueError):
    """Experiment configuration is invalid."""
