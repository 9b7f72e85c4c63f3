"""Exception types shared across the package."""


class OutOfDomainError(ValueError):
    """Evaluation point lies outside the allowed domain."""


class InvalidConfigurationError(ValueError):
    """Configuration violates a structural invariant."""


class DegenerateIntervalError(ValueError):
    """Censoring interval carries no probability mass under the model."""


class InsufficientDataError(ValueError):
    """Not enough observations to carry out the computation."""


class InferenceError(RuntimeError):
    """Estimation failed (non-convergence, singular updates, ...)."""

    def __init__(self, message, state=None):
        super().__init__(message)
        self.state = state


class PredictionError(RuntimeError):
    """Patient-specific posterior computation failed."""


class SimulationError(RuntimeError):
    """Cohort generation failed."""


class IngestionError(ValueError):
    """Input file failed validation. Carries per-line error messages."""

    def __init__(self, line_errors):
        self.line_errors = list(line_errors)
        super().__init__(
            "invalid patient data file:\n" + "\n".join(self.line_errors)
        )
