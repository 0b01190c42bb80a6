"""cvxpy backend: Clarabel by default, SCS as fallback."""

from __future__ import annotations

import logging
from typing import Optional, Sequence

import cvxpy as cp
import numpy as np

from .. import sdp
from ..errors import SolverError
from ..models import SolveStatus
from .base import BackendResult, ConicBackend

logger = logging.getLogger(__name__)

_FEASIBLE_STATUSES = {cp.OPTIMAL, cp.OPTIMAL_INACCURATE}
_INFEASIBLE_STATUSES = {cp.INFEASIBLE, cp.INFEASIBLE_INACCURATE}
_UNBOUNDED_STATUSES = {cp.UNBOUNDED, cp.UNBOUNDED_INACCURATE}


class CvxpyBackend(ConicBackend):
    """Solves programs with cvxpy.

    margin_cap bounds the maximized eigenvalue floor. With an objective, blocks
    are required to be at least backoff·I, which keeps the optimum clear of
    the verification tolerance.
    """

    name = "cvxpy"

    def __init__(
        self,
        solvers: Sequence[str] = ("CLARABEL", "SCS"),
        margin_cap: float = 1.0,
        backoff: float = 1e-5,
        verbose: bool = False,
    ):
        self._solvers = tuple(solvers)
        self._margin_cap = margin_cap
        self._backoff = backoff
        self._verbose = verbose

    # =========================================================================
    # Translation
    # =========================================================================

    @staticmethod
    def _term(term: "sdp.Term", cvars: dict[str, cp.Variable]) -> cp.Expression:
        v = cvars[term.var.name]
        if isinstance(term, sdp.ScaledTerm):
            return v[0, 0] * term.coeff
        if isinstance(term, sdp.TraceTerm):
            return cp.reshape(term.scale * cp.trace(term.coeff @ v), (1, 1), order="F")
        out = v.T if term.transpose else v
        if term.left is not None:
            out = term.left @ out
        if term.right is not None:
            out = out @ term.right
        return term.scale * out

    def _expr(self, expr: "sdp.AffineExpr", cvars: dict[str, cp.Variable]) -> cp.Expression:
        out = cp.Constant(expr.constant)
        for term in expr.terms:
            out = out + self._term(term, cvars)
        return out

    def _block(self, block: "sdp.PSDBlock", cvars: dict[str, cp.Variable]) -> cp.Expression:
        sizes = block.sizes
        rows = []
        for i in range(len(sizes)):
            row = []
            for j in range(len(sizes)):
                entry = block.entry(i, j)
                if entry is None:
                    row.append(np.zeros((sizes[i], sizes[j])))
                elif j <= i:
                    row.append(self._expr(entry, cvars))
                else:
                    row.append(self._expr(entry, cvars).T)
            rows.append(row)
        mat = cp.bmat(rows)
        return 0.5 * (mat + mat.T)

    def _options(self, solver: str, max_iterations: int) -> dict:
        if solver == "SCS":
            return {"max_iters": max(max_iterations, 10_000), "eps_abs": 1e-9, "eps_rel": 1e-9}
        if solver == "CLARABEL":
            return {"max_iter": max_iterations}
        return {}

    # =========================================================================
    # Solve
    # =========================================================================

    def solve(
        self,
        program: "sdp.ConicProgram",
        feas_tol: float,
        max_iterations: int,
    ) -> BackendResult:
        cvars = {
            name: cp.Variable(v.shape, symmetric=v.symmetric, name=name)
            for name, v in program.variables.items()
        }

        margin: Optional[cp.Variable] = None
        constraints = []
        if program.objective is None:
            margin = cp.Variable(name="eigenvalue_floor")
            constraints.append(margin <= self._margin_cap)
            floor = margin
        else:
            floor = self._backoff

        for block in program.psd_blocks:
            mat = self._block(block, cvars)
            constraints.append(mat - floor * np.eye(block.dim) >> 0)
        for _, expr in program.linear_constraints:
            constraints.append(self._expr(expr, cvars) >= 0)

        if margin is not None:
            objective = cp.Maximize(margin)
        else:
            objective = cp.Minimize(cp.sum(self._expr(program.objective, cvars)))
        problem = cp.Problem(objective, constraints)

        last_error: Optional[Exception] = None
        used = None
        for solver in self._solvers:
            if solver not in cp.installed_solvers():
                continue
            try:
                problem.solve(solver=solver, verbose=self._verbose, **self._options(solver, max_iterations))
            except cp.error.SolverError as exc:
                logger.warning("Solver %s failed: %s", solver, exc)
                last_error = exc
                continue
            used = solver
            if problem.status in _FEASIBLE_STATUSES | _INFEASIBLE_STATUSES:
                break
        if used is None:
            raise SolverError(f"No conic solver could run the program: {last_error}")

        status_text = str(problem.status)
        logger.debug("%s finished with status %s", used, status_text)
        if problem.status in _INFEASIBLE_STATUSES:
            return BackendResult(status=SolveStatus.INFEASIBLE, detail=status_text)
        if problem.status in _UNBOUNDED_STATUSES:
            logger.warning("%s reported an unbounded program", used)
            return BackendResult(status=SolveStatus.INFEASIBLE, detail=status_text)
        if problem.status not in _FEASIBLE_STATUSES:
            return BackendResult(status=SolveStatus.MAX_ITERATIONS, detail=status_text)

        assignments = {}
        for name, v in program.variables.items():
            value = cvars[name].value
            value = np.zeros(v.shape) if value is None else np.asarray(value, dtype=float).reshape(v.shape)
            if v.symmetric:
                value = 0.5 * (value + value.T)
            assignments[name] = value

        achieved = None if margin is None else float(margin.value)
        status = SolveStatus.FEASIBLE
        if achieved is not None and achieved < -feas_tol:
            status = SolveStatus.INFEASIBLE
        return BackendResult(
            status=status,
            assignments=assignments,
            margin=achieved,
            objective_value=None if margin is not None else float(problem.value),
            detail=f"{used}:{status_text}",
        )
