"""Exception types shared across the package."""


class MqmeError(Exception):
    pass


class ConfigError(MqmeError, ValueError):
    """An EnvConfig/ExperimentConfig invariant is violated."""


class UsageError(MqmeError, ValueError):
    """An operation was called outside its precondition."""


class GenerationError(MqmeError, RuntimeError):
    """Data or feedback generation could not meet its quota."""


class FormatError(MqmeError, IOError):
    """A binary artifact is malformed (bad magic, truncation, CRC)."""

    def __init__(self, message, offset=None):
        if offset is not None:
            message = f"{message} (at byte offset {offset})"
        super().__init__(message)
        self.offset = offset


class TrainingError(MqmeError, FloatingPointError):
    pass


class ResourceError(MqmeError, MemoryError):
    pass


class CalibrationError(MqmeError, ValueError):
    pass


class UndefinedMetricError(MqmeError, ValueError):
    pass


class DependencyError(MqmeError, FileNotFoundError):
    """A pipeline stage needs an artifact that an earlier stage writes."""


class ProvenanceError(MqmeError, ValueError):
    """Report inputs were produced under different configurations."""
