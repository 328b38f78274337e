"""Exception types shared across the package.

The CLI maps these onto exit codes, so library code raises them instead of
returning status flags.
"""


class STGPError(Exception):
    """Base class for all package errors."""


class DataError(STGPError, ValueError):
    """Malformed or inconsistent input data."""


class NumericalError(STGPError, ArithmeticError):
    """A factorization failed or an objective became non-finite."""


class ModelFileError(STGPError, ValueError):
    """A model file is corrupt, truncated, or has an unsupported version."""
