"""Exception types shared across the package."""


class OptimizationError(RuntimeError):
    """Raised when a loss or gradient turns non-finite during optimization.

    Carries enough position info (iteration, and timestep for the per-step
    phase) to locate the failing update.
    """

    def __init__(self, message: str, iteration: int, timestep: int | None = None):
        suffix = f" (iteration {iteration}" + (f", t={timestep})" if timestep is not None else ")")
        super().__init__(message + suffix)
        self.iteration = iteration
        self.timestep = timestep


class TrainingError(RuntimeError):
    """Raised when backend training diverges (non-finite loss)."""

    def __init__(self, message: str, epoch: int):
        super().__init__(f"{message} (epoch {epoch})")
        self.epoch = epoch


class PipelineError(RuntimeError):
    """Raised when a pipeline phase fails; names the phase and wraps the cause."""

    def __init__(self, phase: str, cause: BaseException):
        super().__init__(f"pipeline phase '{phase}' failed: {cause}")
        self.phase = phase
        self.cause = cause
