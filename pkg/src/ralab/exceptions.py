"""Exception taxonomy shared across the package.

The CLI maps these onto exit codes: UsageError -> 2, DataError -> 3,
NumericError -> 4.
"""


class RalabError(Exception):
    """Base class for all package errors."""


class UsageError(RalabError):
    """Caller violated an API contract (bad arguments, wrong call order)."""


class ShapeError(RalabError):
    """Operands have incompatible shapes; message names the offending op."""


class NumericError(RalabError):
    """A computation produced non-finite values or is numerically undefined."""


class DataError(RalabError):
    """A file or config could not be read, parsed, or validated."""
