"""Abstract base class for conic solver backends."""

from __future__ import annotations

from abc import ABC, abstractmethod
from dataclasses import dataclass, field
from typing import TYPE_CHECKING, Optional

import numpy as np

from ..models import SolveStatus

if TYPE_CHECKING:
    from ..sdp import ConicProgram


@dataclass
class BackendResult:
    """Raw outcome of a backend call, before independent verification."""

    status: SolveStatus
    assignments: dict[str, np.ndarray] = field(default_factory=dict)
    margin: Optional[float] = None  # achieved smallest-eigenvalue floor, if maximized
    objective_value: Optional[float] = None
    detail: str = ""


class ConicBackend(ABC):
    """Turns a ConicProgram into a concrete solver call.

    Without an objective, implementations maximize a common lower bound on the
    eigenvalues of all PSD blocks (capped, so the problem stays bounded) and
    report infeasible when that bound is below -feas_tol. With an objective
    they minimize it subject to every block being PSD.
    """

    name: str = "abstract"

    @abstractmethod
    def solve(
        self,
        program: "ConicProgram",
        feas_tol: float,
        max_iterations: int,
    ) -> BackendResult:
        """Solve the program and return raw assignments for every variable."""
        pass
