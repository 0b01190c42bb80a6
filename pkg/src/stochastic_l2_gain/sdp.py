"""Conic programs over symmetric matrix variables with affine PSD constraints.

Programs are described independently of any solver: variables, PSD blocks
given as lower-triangular grids of affine expressions, scalar inequalities
expr >= 0 and an optional linear objective to minimize. A backend turns them
into a concrete solver call; every returned point is re-checked here by direct
eigenvalue evaluation.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Mapping, Optional, Sequence, Union

import numpy as np

from .backends.base import BackendResult, ConicBackend
from .errors import InvalidInputError
from .models import SolveStatus
from .numerics import min_eigenvalue, symmetrize

logger = logging.getLogger(__name__)

DEFAULT_FEAS_TOL = 1e-8
DEFAULT_MAX_ITERATIONS = 500

Shape = tuple[int, int]


# =============================================================================
# Variables and Terms
# =============================================================================


@dataclass(frozen=True)
class Variable:
    name: str
    shape: Shape
    symmetric: bool = False

    @property
    def is_scalar(self) -> bool:
        return self.shape == (1, 1)


@dataclass(frozen=True, eq=False)
class MatrixTerm:
    """scale · left · V (or Vᵀ) · right; None stands for the identity."""

    var: Variable
    left: Optional[np.ndarray] = None
    right: Optional[np.ndarray] = None
    transpose: bool = False
    scale: float = 1.0

    @property
    def shape(self) -> Shape:
        rows, cols = self.var.shape[::-1] if self.transpose else self.var.shape
        if self.left is not None:
            rows = self.left.shape[0]
        if self.right is not None:
            cols = self.right.shape[1]
        return rows, cols

    def evaluate(self, value: np.ndarray) -> np.ndarray:
        out = value.T if self.transpose else value
        if self.left is not None:
            out = self.left @ out
        if self.right is not None:
            out = out @ self.right
        return self.scale * out


@dataclass(frozen=True, eq=False)
class ScaledTerm:
    """Scalar variable times a constant matrix."""

    var: Variable
    coeff: np.ndarray

    @property
    def shape(self) -> Shape:
        return self.coeff.shape

    def evaluate(self, value: np.ndarray) -> np.ndarray:
        return float(np.asarray(value).reshape(-1)[0]) * self.coeff


@dataclass(frozen=True, eq=False)
class TraceTerm:
    """tr(C V) as a 1×1 expression."""

    var: Variable
    coeff: np.ndarray
    scale: float = 1.0

    @property
    def shape(self) -> Shape:
        return (1, 1)

    def evaluate(self, value: np.ndarray) -> np.ndarray:
        return np.array([[self.scale * float(np.trace(self.coeff @ value))]])


Term = Union[MatrixTerm, ScaledTerm, TraceTerm]


def _scale_term(term: Term, s: float) -> Term:
    if isinstance(term, ScaledTerm):
        return ScaledTerm(term.var, s * term.coeff)
    if isinstance(term, TraceTerm):
        return TraceTerm(term.var, term.coeff, s * term.scale)
    return MatrixTerm(term.var, term.left, term.right, term.transpose, s * term.scale)


def _right_mul(term: Term, C: np.ndarray) -> Term:
    if isinstance(term, ScaledTerm):
        return ScaledTerm(term.var, term.coeff @ C)
    if isinstance(term, TraceTerm):
        raise InvalidInputError("Trace terms cannot be multiplied by a matrix")
    right = C if term.right is None else term.right @ C
    return MatrixTerm(term.var, term.left, right, term.transpose, term.scale)


def _left_mul(C: np.ndarray, term: Term) -> Term:
    if isinstance(term, ScaledTerm):
        return ScaledTerm(term.var, C @ term.coeff)
    if isinstance(term, TraceTerm):
        raise InvalidInputError("Trace terms cannot be multiplied by a matrix")
    left = C if term.left is None else C @ term.left
    return MatrixTerm(term.var, left, term.right, term.transpose, term.scale)


# =============================================================================
# Affine Expressions
# =============================================================================


@dataclass(frozen=True, eq=False)
class AffineExpr:
    """constant + Σ terms, all of one shape."""

    __array_ufunc__ = None  # numpy defers ndarray @ expr to __rmatmul__

    shape: Shape
    constant: np.ndarray
    terms: tuple[Term, ...] = ()

    def __post_init__(self) -> None:
        const = np.asarray(self.constant, dtype=float).reshape(self.shape)
        object.__setattr__(self, "constant", const)
        for term in self.terms:
            if term.shape != self.shape:
                raise InvalidInputError(
                    f"Term on '{term.var.name}' has shape {term.shape}, expression is {self.shape}"
                )

    @staticmethod
    def _coerce(other: object, shape: Shape) -> "AffineExpr":
        if isinstance(other, AffineExpr):
            return other
        arr = np.asarray(other, dtype=float)
        if arr.ndim == 0:
            arr = np.full(shape, float(arr))
        return const(arr)

    def __add__(self, other: object) -> "AffineExpr":
        rhs = self._coerce(other, self.shape)
        if rhs.shape != self.shape:
            raise InvalidInputError(f"Shape mismatch in sum: {self.shape} vs {rhs.shape}")
        return AffineExpr(self.shape, self.constant + rhs.constant, self.terms + rhs.terms)

    __radd__ = __add__

    def __neg__(self) -> "AffineExpr":
        return self * -1.0

    def __sub__(self, other: object) -> "AffineExpr":
        return self + (-self._coerce(other, self.shape))

    def __rsub__(self, other: object) -> "AffineExpr":
        return self._coerce(other, self.shape) + (-self)

    def __mul__(self, s: float) -> "AffineExpr":
        s = float(s)
        return AffineExpr(self.shape, s * self.constant, tuple(_scale_term(t, s) for t in self.terms))

    __rmul__ = __mul__

    def __matmul__(self, C: np.ndarray) -> "AffineExpr":
        C = np.atleast_2d(np.asarray(C, dtype=float))
        return AffineExpr(
            (self.shape[0], C.shape[1]),
            self.constant @ C,
            tuple(_right_mul(t, C) for t in self.terms),
        )

    def __rmatmul__(self, C: np.ndarray) -> "AffineExpr":
        C = np.atleast_2d(np.asarray(C, dtype=float))
        return AffineExpr(
            (C.shape[0], self.shape[1]),
            C @ self.constant,
            tuple(_left_mul(C, t) for t in self.terms),
        )

    def variables(self) -> set[str]:
        return {t.var.name for t in self.terms}

    def evaluate(self, values: Mapping[str, np.ndarray]) -> np.ndarray:
        out = self.constant.copy()
        for term in self.terms:
            out = out + term.evaluate(np.asarray(values[term.var.name], dtype=float))
        return out


def const(C: np.ndarray) -> AffineExpr:
    arr = np.atleast_2d(np.asarray(C, dtype=float))
    return AffineExpr(arr.shape, arr)


def var(v: Variable, transpose: bool = False) -> AffineExpr:
    term = MatrixTerm(v, transpose=transpose)
    return AffineExpr(term.shape, np.zeros(term.shape), (term,))


def scaled(v: Variable, coeff: np.ndarray) -> AffineExpr:
    """Scalar variable v times the constant matrix coeff."""
    if not v.is_scalar:
        raise InvalidInputError(f"'{v.name}' is not a scalar variable")
    coeff = np.atleast_2d(np.asarray(coeff, dtype=float))
    return AffineExpr(coeff.shape, np.zeros(coeff.shape), (ScaledTerm(v, coeff),))


def trace(v: Variable, coeff: Optional[np.ndarray] = None) -> AffineExpr:
    """tr(C V) with C defaulting to the identity."""
    C = np.eye(v.shape[0]) if coeff is None else np.asarray(coeff, dtype=float)
    return AffineExpr((1, 1), np.zeros((1, 1)), (TraceTerm(v, C),))


# =============================================================================
# Programs
# =============================================================================


@dataclass(frozen=True, eq=False)
class PSDBlock:
    """Symmetric block matrix given by its lower triangle; None entries are zero."""

    name: str
    grid: tuple[tuple[Optional[AffineExpr], ...], ...]

    def __post_init__(self) -> None:
        sizes = []
        for i, row in enumerate(self.grid):
            if len(row) != i + 1:
                raise InvalidInputError(f"Block '{self.name}' row {i} must have {i + 1} entries")
            diag = row[i]
            if diag is None or diag.shape[0] != diag.shape[1]:
                raise InvalidInputError(f"Block '{self.name}' needs square diagonal entry {i}")
            sizes.append(diag.shape[0])
        for i, row in enumerate(self.grid):
            for j, entry in enumerate(row[:i]):
                if entry is not None and entry.shape != (sizes[i], sizes[j]):
                    raise InvalidInputError(
                        f"Block '{self.name}' entry ({i},{j}) has shape {entry.shape}, "
                        f"expected {(sizes[i], sizes[j])}"
                    )
        object.__setattr__(self, "_sizes", tuple(sizes))

    @property
    def sizes(self) -> tuple[int, ...]:
        return self._sizes  # type: ignore[attr-defined]

    @property
    def dim(self) -> int:
        return sum(self.sizes)

    def entry(self, i: int, j: int) -> Optional[AffineExpr]:
        """Lower-triangle entry; callers transpose for j > i."""
        return self.grid[i][j] if j <= i else self.grid[j][i]

    def evaluate(self, values: Mapping[str, np.ndarray]) -> np.ndarray:
        sizes = self.sizes
        offsets = np.concatenate([[0], np.cumsum(sizes)])
        out = np.zeros((self.dim, self.dim))
        for i, row in enumerate(self.grid):
            for j, entry in enumerate(row):
                if entry is None:
                    continue
                val = entry.evaluate(values)
                out[offsets[i] : offsets[i + 1], offsets[j] : offsets[j + 1]] = val
                if i != j:
                    out[offsets[j] : offsets[j + 1], offsets[i] : offsets[i + 1]] = val.T
        return symmetrize(out)


@dataclass
class ConicProgram:
    variables: dict[str, Variable] = field(default_factory=dict)
    psd_blocks: list[PSDBlock] = field(default_factory=list)
    linear_constraints: list[tuple[str, AffineExpr]] = field(default_factory=list)
    objective: Optional[AffineExpr] = None

    def add_variable(self, name: str, shape: Shape, symmetric: bool = False) -> Variable:
        if name in self.variables:
            raise InvalidInputError(f"Variable '{name}' already exists")
        if symmetric and shape[0] != shape[1]:
            raise InvalidInputError(f"Symmetric variable '{name}' must be square")
        v = Variable(name, (int(shape[0]), int(shape[1])), symmetric)
        self.variables[name] = v
        return v

    def add_psd(self, name: str, grid: Sequence[Sequence[Optional[AffineExpr]]]) -> PSDBlock:
        block = PSDBlock(name, tuple(tuple(row) for row in grid))
        self._check_known(name, [e for row in block.grid for e in row if e is not None])
        self.psd_blocks.append(block)
        return block

    def add_nonnegative(self, name: str, expr: AffineExpr) -> None:
        if expr.shape != (1, 1):
            raise InvalidInputError(f"Linear constraint '{name}' must be scalar")
        self._check_known(name, [expr])
        self.linear_constraints.append((name, expr))

    def minimize(self, expr: AffineExpr) -> None:
        if expr.shape != (1, 1):
            raise InvalidInputError("Objective must be scalar")
        self._check_known("objective", [expr])
        self.objective = expr

    def _check_known(self, where: str, exprs: Sequence[AffineExpr]) -> None:
        for expr in exprs:
            unknown = expr.variables() - set(self.variables)
            if unknown:
                raise InvalidInputError(f"'{where}' uses unregistered variables {sorted(unknown)}")

    def block(self, name: str) -> PSDBlock:
        for block in self.psd_blocks:
            if block.name == name:
                return block
        raise KeyError(name)

    def describe(self) -> str:
        """Human-readable listing of variables, blocks and constraints."""
        lines = ["Variables:"]
        for v in self.variables.values():
            kind = "symmetric" if v.symmetric else ("scalar" if v.is_scalar else "matrix")
            lines.append(f"  {v.name}: {v.shape[0]}x{v.shape[1]} {kind}")
        lines.append("PSD blocks:")
        for block in self.psd_blocks:
            lines.append(f"  {block.name}: {block.dim}x{block.dim}, partition {list(block.sizes)}")
            for i, row in enumerate(block.grid):
                for j, entry in enumerate(row):
                    if entry is None:
                        continue
                    names = ", ".join(sorted(entry.variables())) or "constant"
                    lines.append(f"    [{i},{j}] {entry.shape[0]}x{entry.shape[1]}: {names}")
        if self.linear_constraints:
            lines.append("Linear constraints (>= 0):")
            for name, expr in self.linear_constraints:
                lines.append(f"  {name}: {', '.join(sorted(expr.variables())) or 'constant'}")
        if self.objective is not None:
            lines.append(f"Objective (minimize): {', '.join(sorted(self.objective.variables()))}")
        return "\n".join(lines)


# =============================================================================
# Solutions
# =============================================================================


@dataclass(frozen=True)
class Verification:
    block_margins: dict[str, float]
    linear_margins: dict[str, float]

    @property
    def min_eig_margin(self) -> float:
        return min(self.block_margins.values(), default=float("inf"))

    @property
    def min_linear_margin(self) -> float:
        return min(self.linear_margins.values(), default=float("inf"))

    def passes(self, feas_tol: float) -> bool:
        return self.min_eig_margin >= -feas_tol and self.min_linear_margin >= -feas_tol


def verify(program: ConicProgram, assignments: Mapping[str, np.ndarray]) -> Verification:
    """Smallest eigenvalue of every PSD block and value of every linear constraint."""
    blocks = {b.name: min_eigenvalue(b.evaluate(assignments)) for b in program.psd_blocks}
    linear = {
        name: float(expr.evaluate(assignments)[0, 0]) for name, expr in program.linear_constraints
    }
    return Verification(block_margins=blocks, linear_margins=linear)


@dataclass(frozen=True)
class ConicSolution:
    assignments: dict[str, np.ndarray]
    status: SolveStatus
    min_eig_margin: float
    objective_value: Optional[float] = None
    block_margins: dict[str, float] = field(default_factory=dict)
    linear_margins: dict[str, float] = field(default_factory=dict)
    solver: str = ""
    backend_status: Optional[SolveStatus] = None  # before re-verification

    @property
    def feasible(self) -> bool:
        return self.status == SolveStatus.FEASIBLE

    def value(self, name: str) -> np.ndarray:
        return self.assignments[name]

    def scalar(self, name: str) -> float:
        return float(np.asarray(self.assignments[name]).reshape(-1)[0])


def default_backend() -> ConicBackend:
    from .backends.cvxpy_backend import CvxpyBackend

    return CvxpyBackend()


def solve(
    program: ConicProgram,
    feas_tol: float = DEFAULT_FEAS_TOL,
    max_iterations: int = DEFAULT_MAX_ITERATIONS,
    backend: Optional[ConicBackend] = None,
) -> ConicSolution:
    """Solve and independently re-verify a conic program.

    Without an objective the backend maximizes the smallest block eigenvalue;
    with one it minimizes the objective. A point the backend calls feasible
    but that fails direct verification is reported infeasible.
    """
    if not program.psd_blocks and not program.linear_constraints:
        raise InvalidInputError("Program has no constraints")
    backend = backend or default_backend()
    result: BackendResult = backend.solve(program, feas_tol=feas_tol, max_iterations=max_iterations)

    assignments = {
        name: result.assignments.get(name, np.zeros(v.shape)) for name, v in program.variables.items()
    }
    check = verify(program, assignments)
    status = result.status
    if status == SolveStatus.FEASIBLE and not check.passes(feas_tol):
        logger.warning(
            "%s reported a feasible point that fails verification (block margin %.3e, linear margin %.3e)",
            backend.name,
            check.min_eig_margin,
            check.min_linear_margin,
        )
        status = SolveStatus.INFEASIBLE

    objective_value = None
    if program.objective is not None and status == SolveStatus.FEASIBLE:
        objective_value = float(program.objective.evaluate(assignments)[0, 0])

    logger.info(
        "Conic solve via %s: status=%s min eigenvalue margin=%.3e",
        backend.name,
        status.value,
        check.min_eig_margin,
    )
    return ConicSolution(
        assignments=assignments,
        status=status,
        min_eig_margin=check.min_eig_margin,
        objective_value=objective_value,
        block_margins=check.block_margins,
        linear_margins=check.linear_margins,
        solver=backend.name,
        backend_status=result.status,
    )
