"""Exception hierarchy for gridverify."""


class GridVerifyError(Exception):
    """Base class for all package errors."""


class ParseError(GridVerifyError, ValueError):
    """Malformed case, region or scenario file."""

    def __init__(self, message, line=None):
        self.line = line
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)


class TopologyError(GridVerifyError, ValueError):
    """Wrong number of substations, unknown bus references and similar."""


class RadialityError(TopologyError):
    """Branch set is not a tree rooted at the substation."""


class OracleDivergenceError(GridVerifyError, RuntimeError):
    """Backward/forward sweep did not converge (infeasible loading)."""


class UnderdeterminedError(GridVerifyError, ValueError):
    """A least-squares system matrix is singular."""

    def __init__(self, message, nullity=None):
        self.nullity = nullity
        super().__init__(message)


class DimensionError(GridVerifyError, ValueError):
    """Vector or matrix with an unexpected shape."""


class PartitionError(GridVerifyError, ValueError):
    """Invalid region assignment or region operation."""


class AccessViolation(GridVerifyError, PermissionError):
    """Author is not allowed to write to (or read from) a ledger."""


class VariableIndexError(GridVerifyError, IndexError):
    """Reference to a system variable that does not exist."""
