"""Exception types shared across the toolkit."""


class ValidationError(ValueError):
    """An input violates a documented precondition or invariant."""


class ConfigurationError(ValueError):
    """A config value is unknown or structurally invalid."""


class TrainingError(RuntimeError):
    """Training cannot proceed (e.g. degenerate labels)."""


class DivergenceError(RuntimeError):
    """An optimization loop produced a non-finite loss."""

    def __init__(self, message: str, step: int | None = None):
        super().__init__(message)
        self.step = step


class UndefinedCosineError(ValidationError):
    """Cosine similarity is undefined because a vector has zero norm."""
