"""Conic solver backends."""

from .base import BackendResult, ConicBackend
from .cvxpy_backend import CvxpyBackend

__all__ = ["BackendResult", "ConicBackend", "CvxpyBackend"]
