"""Exception types shared across the package."""


class SoftSegError(Exception):
    """Base class for all package errors."""


class ConfigurationError(SoftSegError, ValueError):
    """Invalid configuration value or combination."""


class ShapeError(SoftSegError, ValueError):
    """Array shapes are inconsistent with what an operation expects."""


class StateError(SoftSegError, RuntimeError):
    """An operation was called in the wrong order or without required state."""


class FormatError(SoftSegError, ValueError):
    """A file on disk does not match its declared layout."""

    def __init__(self, message, field=None):
        super().__init__(message if field is None else f"{field}: {message}")
        self.field = field


class NumericError(SoftSegError, FloatingPointError):
    """Non-finite values where finite ones are required."""
