"""Exception types shared across the package."""


class ContractViolation(ValueError):
    """Input shapes or dimensions do not match what an operation requires."""


class ConfigError(ValueError):
    """Invalid configuration value (temperature, stride, counts, ...)."""

    def __init__(self, message, fields=None):
        super().__init__(message)
        self.fields = list(fields or [])


class NumericError(ArithmeticError):
    """Non-finite values where finite ones are required."""


class ParseError(ValueError):
    """Malformed file content. ``offset`` is the byte offset of the problem, if known."""

    def __init__(self, message, offset=None):
        if offset is not None:
            message = f"{message} (at byte offset {offset})"
        super().__init__(message)
        self.offset = offset


class IncompatibleCheckpointError(ValueError):
    """Checkpoint version or configuration does not match what the caller expects."""

    def __init__(self, message, field=None):
        super().__init__(message)
        self.field = field


class GenerationError(RuntimeError):
    """Phantom generation could not place structures within the attempt budget."""


class ModelError(RuntimeError):
    """Model parameters are unusable (e.g. non-finite)."""


class TrainingDivergence(RuntimeError):
    """A loss term became non-finite during training."""

    def __init__(self, term, step=None):
        where = f" at step {step}" if step is not None else ""
        super().__init__(f"non-finite loss term '{term}'{where}")
        self.term = term
        self.step = step
