"""Exception types shared across the package."""


class ConfigurationError(ValueError):
    """Invalid model, grid, or run configuration."""


class MassMismatchError(ValueError):
    """Density update is incompatible with zero-flux boundaries."""


class SolverError(RuntimeError):
    """Numerical solve failed or produced an inconsistent state."""

    def __init__(self, message: str, step: int | None = None):
        if step is not None:
            message = f"step {step}: {message}"
        super().__init__(message)
        self.step = step


class SingularSystemError(SolverError):
    """Linear system factorization failed or data is incompatible."""
