"""Exception types shared across the package."""


class ConfigurationError(ValueError):
    """A model, network, or config object is wired inconsistently."""


class UsageError(ValueError):
    """An operation was called with arguments that violate its contract."""


class SchemaError(ConfigurationError):
    """A config file or override does not match the expected schema."""

    def __init__(self, field: str, message: str):
        super().__init__(f"config field '{field}': {message}")
        self.field = field


class DegenerateInputError(ValueError):
    """An input vector is degenerate (e.g. zero norm) and cannot be normalized."""


class NumericalError(RuntimeError):
    """A computation produced non-finite values."""


class IngestionError(RuntimeError):
    """Raw dataset files are missing or corrupt."""


class InsufficientNegatives(Exception):
    """Warm-up signal: the replay buffer cannot supply enough eligible negatives.

    Callers are expected to skip the contrastive term for the current step
    rather than treat this as a failure.
    """

    def __init__(self, needed: int, eligible: int):
        super().__init__(f"need {needed} negatives, only {eligible} eligible")
        self.needed = needed
        self.eligible = eligible
