"""Exception hierarchy shared by the library and the CLI.

Every error carries the process exit code the CLI should use:
0 success, 1 usage/config error, 2 data error, 3 numerical abort.
"""

from typing import Any


class MmdrError(Exception):
    """Base class for all mmdr errors."""

    exit_code = 1


class ConfigError(MmdrError):
    """Invalid or unreadable run configuration."""

    exit_code = 1


class StructuralError(MmdrError):
    """A component was requested from a bundle whose topology does not have it."""

    exit_code = 1


class DataError(MmdrError):
    """Malformed, missing or insufficient data."""

    exit_code = 2


class ChecksumError(DataError):
    """Checkpoint payload does not match the checksum in its manifest."""


class DimensionError(MmdrError, ValueError):
    """Operand shapes do not agree."""

    exit_code = 2


class DegenerateInputError(MmdrError, ValueError):
    """Input for which an op is undefined (empty mask, zero norm, empty batch)."""

    exit_code = 2


class TokenIndexError(DataError, IndexError):
    """Token id outside the embedding table."""


class NumericalError(MmdrError):
    """Non-finite values appeared during training or in a forward op."""

    exit_code = 3

    def __init__(self, message: str, diagnostics: dict[str, Any] | None = None) -> None:
        super().__init__(message)
        self.diagnostics = diagnostics or {}
