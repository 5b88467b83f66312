"""Exception and warning classes shared across the package.

Data problems (bad files, geometry mismatches, degenerate inputs) raise
:class:`DataError`; linear-algebra and optimisation failures raise
:class:`NumericalError`.  The CLI maps the two families to exit codes 2 and 3.
"""


class StormUQError(Exception):
    """Base class for all package errors."""


class DataError(StormUQError, ValueError):
    """Input data is malformed, inconsistent or degenerate."""


class ParseError(DataError):
    """A file could not be parsed.  ``lineno`` is 1-based when known."""

    def __init__(self, message, path=None, lineno=None):
        self.path = path
        self.lineno = lineno
        where = ""
        if path is not None:
            where = f"{path}"
        if lineno is not None:
            where = f"{where}:{lineno}" if where else f"line {lineno}"
        super().__init__(f"{where}: {message}" if where else message)


class GeometryError(DataError):
    """Two rasters (or a raster and a buffer) do not share a grid."""


class DegenerateBufferError(DataError):
    """A buffer region has fewer than two land cells."""


class DegenerateFieldError(DataError):
    """An error field carries no information (e.g. identically zero)."""


class DesignError(DataError):
    """The regression design of the hierarchy is rank deficient."""


class NumericalError(StormUQError, ArithmeticError):
    """A numerical procedure failed."""


class NearSingularError(NumericalError):
    """Cholesky factorisation failed at a leading minor.

    ``minor`` is the 1-based order of the first non-positive leading minor.
    """

    def __init__(self, message, minor=None):
        self.minor = minor
        super().__init__(message)


class BoundaryWarning(UserWarning):
    """An optimiser stopped at the edge of its search interval."""


class ConvergenceWarning(UserWarning):
    """An iterative procedure stopped before meeting its tolerance."""
