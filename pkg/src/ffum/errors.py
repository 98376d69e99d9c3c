"""Exception hierarchy shared by every ffum module."""


class FfumError(Exception):
    """Base class for all errors raised by ffum."""


class ConfigurationError(FfumError, ValueError):
    """Invalid configuration, shapes, or scenario parameters."""


class UsageError(FfumError, ValueError):
    """A function was called with arguments violating its contract."""


class DomainError(FfumError, ValueError):
    """A scalar argument lies outside a function's domain."""


class IngestionError(FfumError, ValueError):
    """A data file is malformed. ``offset`` is the byte position of the fault."""

    def __init__(self, message, offset=None):
        if offset is not None:
            message = f"{message} (at byte offset {offset})"
        super().__init__(message)
        self.offset = offset


class ProtocolError(FfumError, RuntimeError):
    """A federated round could not be completed, e.g. nobody contributed."""


class NonFiniteError(FfumError, FloatingPointError):
    """NaN or Inf appeared in a forward value or a gradient."""
