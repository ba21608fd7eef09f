"""Exception hierarchy shared across the engine."""


class HycedisError(Exception):
    """Base class for every error raised by this package."""


class DimensionError(HycedisError, ValueError):
    """Array shapes do not line up."""


class DomainError(HycedisError, ValueError):
    """An input lies outside the domain of an operation (e.g. empty sequence)."""


class DataError(HycedisError, ValueError):
    """A dataset is unusable for the requested operation."""


class ConfigError(HycedisError, ValueError):
    pass


class MetricError(HycedisError, ValueError):
    pass


class StateError(HycedisError, RuntimeError):
    """A model was used before it was trained or fitted."""


class TrainingError(HycedisError, RuntimeError):
    """Optimization produced a non-finite value."""


class ParseError(HycedisError, ValueError):
    def __init__(self, message: str, line: int | None = None):
        self.line = line
        super().__init__(f"line {line}: {message}" if line is not None else message)


class ValidationError(HycedisError, ValueError):
    def __init__(self, message: str, field: str | None = None, line: int | None = None):
        self.field = field
        self.line = line
        prefix = f"line {line}: " if line is not None else ""
        super().__init__(prefix + message)


class CheckpointError(HycedisError, ValueError):
    pass
