"""Exception hierarchy. CLI exit codes are keyed off these classes."""


class GridcastError(Exception):
    exit_code = 1


class ShapeError(GridcastError, ValueError):
    """Dimension, channel-count, or dtype mismatch."""

    exit_code = 1


class ConfigError(GridcastError, ValueError):
    exit_code = 1


class TensorFileError(GridcastError, OSError):
    """Malformed or truncated TensorFile container."""

    exit_code = 2


class NumericError(GridcastError, ArithmeticError):
    """Non-finite loss or gradient."""

    exit_code = 3
