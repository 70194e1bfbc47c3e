"""Exception hierarchy shared across the package."""


class DiffvocError(Exception):
    """Base class for all package errors."""


class ConfigurationError(DiffvocError, ValueError):
    """Invalid configuration values or inconsistent settings."""


class ContractError(DiffvocError, ValueError):
    """An operation was called with arguments violating its preconditions."""


class ScheduleSamplingError(DiffvocError, RuntimeError):
    """A monotone inference schedule could not be drawn from a range."""


class NumericalError(DiffvocError, FloatingPointError):
    """A non-finite value appeared in a computation.

    ``step`` carries the reverse-step index (or training step) when known.
    """

    def __init__(self, message, step=None, context=None):
        super().__init__(message)
        self.step = step
        self.context = context or {}


class CheckpointError(DiffvocError):
    """Base class for checkpoint I/O failures."""


class CheckpointVersionError(CheckpointError):
    pass


class CheckpointCorruptError(CheckpointError):
    pass


class CheckpointConfigMismatch(CheckpointError):
    pass


class AudioFormatError(DiffvocError, ValueError):
    """Unsupported or truncated audio file."""


class MetricError(DiffvocError, ValueError):
    """A metric is undefined for the given inputs (e.g. zero reference energy)."""
