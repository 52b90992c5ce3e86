"""Exception types shared across the package."""


class StartStopError(ValueError):
    """Base class for all package errors."""


class ConfigError(StartStopError):
    """Invalid or inconsistent configuration."""


class CapacityError(StartStopError):
    """A frame does not fit the available resource elements."""


class MalformedFrameError(StartStopError):
    """A frame allocation violates its structural invariants."""
