"""Exception types shared across the package.

The CLI maps each family onto an exit code, so library code should raise
the most specific class available.
"""


class TensormixError(Exception):
    """Base class for all package errors."""


class ConfigError(TensormixError, ValueError):
    """Invalid configuration, options or scenario."""


class DataError(TensormixError, ValueError):
    """Malformed or inconsistent input data."""


class DimensionError(DataError):
    """Array shapes or category counts do not line up."""


class InvalidInputError(DataError):
    """Input violates a documented precondition."""


class NumericError(TensormixError, ArithmeticError):
    """Non-finite values or a zero-probability observation."""


class SolverError(TensormixError, RuntimeError):
    """The fitting procedure failed (line search exhausted, divergence)."""
