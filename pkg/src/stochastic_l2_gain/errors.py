"""Exception hierarchy shared by every stage of the pipeline.

Input problems also derive from ValueError so callers that already catch
ValueError keep working. Numerical failures derive from ArithmeticError or
RuntimeError. LMI infeasibility is reported through solution status, not here.
"""

from __future__ import annotations

from typing import Optional


class L2GainError(Exception):
    """Base class for all package errors."""


# =============================================================================
# Input Errors
# =============================================================================


class InvalidInputError(L2GainError, ValueError):
    """Non-finite or malformed numerical input."""


class InvalidDepthError(L2GainError, ValueError):
    """Hankel depth exceeds the trajectory length."""


class InvalidBasisError(L2GainError, ValueError):
    """A basis is rank deficient or not orthonormal."""


class InvalidHistoryError(L2GainError, ValueError):
    """Plant history is shorter than the kernel lag."""


class InconsistentLayoutError(L2GainError, ValueError):
    """Dimensions disagree with the declared signal layout."""


class NotExcitingError(L2GainError, ValueError):
    """An input trajectory is not persistently exciting."""

    def __init__(self, message: str, trajectory_index: Optional[int] = None):
        super().__init__(message)
        self.trajectory_index = trajectory_index


class UndefinedRhoError(L2GainError, ValueError):
    """Mean energy and covariance trace are both zero."""


class EmptyCohortError(L2GainError, ValueError):
    """No rollout reached the requested horizon with positive energy."""


class SchemaError(L2GainError, ValueError):
    """A file or configuration does not match its schema."""

    def __init__(self, message: str, path: Optional[str] = None):
        super().__init__(f"{path}: {message}" if path else message)
        self.path = path


# =============================================================================
# Numerical Errors
# =============================================================================


class NotPSDError(L2GainError, ArithmeticError):
    """Matrix has an eigenvalue below the clamp tolerance."""

    def __init__(self, message: str, eigenvalue: float):
        super().__init__(message)
        self.eigenvalue = eigenvalue


class IllConditionedError(L2GainError, ArithmeticError):
    """Matrix condition number exceeds the configured cap."""

    def __init__(self, message: str, condition: float):
        super().__init__(message)
        self.condition = condition


class SingularInnovationError(L2GainError, ArithmeticError):
    """Innovation covariance cannot be inverted; regularize S_n."""


class NonConvergenceError(L2GainError, RuntimeError):
    """Fixed-point iteration hit its iteration cap."""

    def __init__(self, message: str, residual: float):
        super().__init__(message)
        self.residual = residual


class CertificateError(L2GainError, RuntimeError):
    """A design failed re-verification of its LMI blocks or storage function."""


class StageError(L2GainError):
    """Wraps an error raised inside a named pipeline stage."""

    def __init__(self, stage: str, cause: Exception):
        super().__init__(f"[{stage}] {cause}")
        self.stage = stage
        self.cause = cause


class SolverError(L2GainError, RuntimeError):
    """Every configured conic solver failed to run."""
