"""Exception types shared across the package."""


class ShapeError(ValueError):
    """Operand shapes are incompatible with the requested operation."""


class NumericError(ArithmeticError):
    """Non-finite or out-of-domain values where finite ones are required."""


class ConfigError(ValueError):
    """Invalid configuration value or combination of values."""


class StateError(RuntimeError):
    """Operation issued against an object in the wrong state."""


class DataError(ValueError):
    """Dataset contents violate what the caller asked for."""


class FormatError(ValueError):
    """On-disk payload does not match the expected binary layout."""

    def __init__(self, message, offset=None):
        if offset is not None:
            message = f"{message} (byte offset {offset})"
        super().__init__(message)
        self.offset = offset
