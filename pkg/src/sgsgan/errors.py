"""Exception types shared across the package.

The CLI maps each family onto an exit code: configuration problems exit 2,
data and file-format problems exit 3, numeric failures exit 4.
"""

from .autodiff.tensor import NumericError, ShapeError


class ConfigError(ValueError):
    """Invalid or inconsistent configuration."""


class DataError(Exception):
    """Missing, malformed or inconsistent data on disk."""


class FormatError(DataError):
    """A file does not follow its binary layout.

    ``offset`` is the byte position where parsing failed, when known.
    """

    def __init__(self, message: str, offset: int | None = None):
        if offset is not None:
            message = f"{message} (at byte {offset})"
        super().__init__(message)
        self.offset = offset


__all__ = ["ConfigError", "DataError", "FormatError", "NumericError", "ShapeError"]
