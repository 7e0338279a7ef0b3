"""Exception hierarchy shared by the library and mapped to CLI exit codes."""
from __future__ import annotations


class BifurcationError(Exception):
    """Base class for all library errors."""


class UsageError(BifurcationError, ValueError):
    """Bad arguments: dimension mismatch, unknown selector, invalid config."""


class ModelEvaluationError(BifurcationError, ArithmeticError):
    """The model right-hand side or a derivative produced a non-finite value."""

    def __init__(self, message: str, z=None, theta=None):
        super().__init__(message)
        self.z = z
        self.theta = theta


class CorrectorError(BifurcationError):
    """Newton corrector failed to converge."""

    def __init__(self, message: str, residual: float = float("nan")):
        super().__init__(message)
        self.residual = residual


class SingularityError(BifurcationError):
    """A Newton system matrix was numerically singular."""


class DegenerateGeometryError(BifurcationError):
    """The state-parameter Jacobian lost rank, so the curve tangent is undefined."""

    def __init__(self, message: str, index: int | None = None):
        super().__init__(message)
        self.index = index


class UndefinedMeasureError(BifurcationError):
    """Total measure requested for a diagram without any usable branch."""


class RefinementError(BifurcationError):
    """Newton on the extended bifurcation system did not converge."""


class DegenerateBifurcationError(RefinementError):
    """A refined zero of the determinant has vanishing directional slope."""


class DegenerateSensitivityError(BifurcationError):
    """The extended-system Jacobian is singular at a bifurcation point."""


class EmptyPredictionError(BifurcationError):
    """The supervised error is undefined without predictions."""


class OracleDomainError(BifurcationError):
    """Input lies outside the domain of an analytic oracle."""


class DataError(BifurcationError):
    """An input file is malformed or empty."""
