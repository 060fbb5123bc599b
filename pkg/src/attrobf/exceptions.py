"""Exception types shared across the package."""


class ShapeError(ValueError):
    """Array geometry does not match what an operation requires."""


class NonFiniteError(FloatingPointError):
    """Training produced a NaN or infinite value."""


class ConfigError(ValueError):
    """A configuration value is out of range or inconsistent."""


class ModelFormatError(ValueError):
    """A model file could not be decoded."""


class BadMagicError(ModelFormatError):
    pass


class VersionMismatchError(ModelFormatError):
    pass


class ChecksumError(ModelFormatError):
    pass


class DatasetError(ValueError):
    """Malformed dataset or manifest entry.

    ``row`` is the 1-based manifest data row (header excluded) when known.
    """

    def __init__(self, message, row=None):
        if row is not None:
            message = f"row {row}: {message}"
        super().__init__(message)
        self.row = row
