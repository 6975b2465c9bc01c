"""Exception types shared across the package.

The CLI maps these onto exit codes: ``DataError`` -> 2, ``NumericalError`` -> 3.
"""


class DataError(ValueError):
    """Malformed or inconsistent input data (files, corpora, models)."""


class NumericalError(ArithmeticError):
    """A numerical routine failed (non-PSD matrix, non-finite objective, ...)."""
