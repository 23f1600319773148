"""Exception types shared across the package.

Each class carries the CLI exit code it maps to, so the command-line
harness can turn any failure into a machine-readable record.
"""


class CogniSNNError(Exception):
    exit_code = 1


class DimensionError(CogniSNNError, ValueError):
    """Tensor extents do not agree with what an operation needs."""

    exit_code = 4


class InvalidArgumentError(CogniSNNError, ValueError):
    exit_code = 2


class CapacityError(CogniSNNError):
    """Raised when path enumeration would exceed its configured cap."""

    exit_code = 4

    def __init__(self, cap: int):
        super().__init__(f"path enumeration exceeded cap of {cap} paths")
        self.cap = cap


class FormatError(CogniSNNError, ValueError):
    """Malformed input file. ``offset`` is the byte (or line) position."""

    exit_code = 3

    def __init__(self, message: str, offset: int | None = None):
        if offset is not None:
            message = f"{message} (at offset {offset})"
        super().__init__(message)
        self.offset = offset


class ConfigError(CogniSNNError, ValueError):
    exit_code = 2


class NumericError(CogniSNNError, FloatingPointError):
    """Non-finite loss or gradient; ``path`` names the offending parameter."""

    exit_code = 4

    def __init__(self, message: str, path: str | None = None):
        if path is not None:
            message = f"{message} [parameter: {path}]"
        super().__init__(message)
        self.path = path
