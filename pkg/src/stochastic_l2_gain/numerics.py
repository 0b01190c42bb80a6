"""Dense linear-algebra kernels shared by every module."""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import NamedTuple, Optional, Sequence

import numpy as np
import scipy.linalg

from .errors import InvalidBasisError, InvalidInputError, NotPSDError

logger = logging.getLogger(__name__)

DEFAULT_RANK_TOL = 1e-9
DEFAULT_CLAMP_TOL = 1e-8
SYMMETRY_TOL = 1e-10
ORTHONORMAL_TOL = 1e-8
DEFAULT_TAU_SCAN: tuple[float, ...] = (
    0.0,
    *(s * 10.0**k for k in range(-2, 3) for s in (1.0, -1.0)),
)


# =============================================================================
# Validation
# =============================================================================


def check_finite(A: np.ndarray, name: str = "matrix") -> np.ndarray:
    """Return A as a float array, raising if any entry is NaN or infinite."""
    arr = np.asarray(A, dtype=float)
    if not np.all(np.isfinite(arr)):
        raise InvalidInputError(f"{name} contains non-finite entries")
    return arr


def as_square(A: np.ndarray, name: str = "matrix") -> np.ndarray:
    arr = check_finite(A, name)
    if arr.ndim != 2 or arr.shape[0] != arr.shape[1]:
        raise InvalidInputError(f"{name} must be square, got shape {arr.shape}")
    return arr


# =============================================================================
# Symmetric Matrices
# =============================================================================


def symmetrize(A: np.ndarray) -> np.ndarray:
    """Return (A + Aᵀ)/2."""
    arr = np.asarray(A, dtype=float)
    return 0.5 * (arr + arr.T)


def sym_eig(A: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Eigendecomposition of a symmetric matrix, eigenvalues descending.

    Each eigenvector is signed so its largest-magnitude entry is positive, and
    eigenvectors sharing an eigenvalue (to SYMMETRY_TOL relative) are ordered
    lexicographically. Repeated calls on the same input return the same basis.
    """
    S = symmetrize(as_square(A))
    vals, vecs = np.linalg.eigh(S)
    vals = vals[::-1].copy()
    vecs = vecs[:, ::-1].copy()

    for j in range(vecs.shape[1]):
        pivot = np.argmax(np.abs(vecs[:, j]))
        if vecs[pivot, j] < 0:
            vecs[:, j] = -vecs[:, j]

    scale = max(1.0, float(np.max(np.abs(vals)))) if vals.size else 1.0
    order = list(range(vals.size))
    start = 0
    while start < len(order):
        stop = start + 1
        while stop < len(order) and abs(vals[start] - vals[stop]) <= SYMMETRY_TOL * scale:
            stop += 1
        if stop - start > 1:
            group = order[start:stop]
            group.sort(key=lambda j: tuple(np.round(-vecs[:, j], 12)))
            order[start:stop] = group
        start = stop
    return vals[order], vecs[:, order]


def min_eigenvalue(A: np.ndarray) -> float:
    S = symmetrize(as_square(A))
    if S.size == 0:
        return float("inf")
    return float(scipy.linalg.eigvalsh(S)[0])


def is_psd(A: np.ndarray, tol: float = DEFAULT_CLAMP_TOL) -> bool:
    return min_eigenvalue(A) >= -tol


def psd_sqrt(A: np.ndarray, clamp_tol: float = DEFAULT_CLAMP_TOL) -> np.ndarray:
    """Symmetric square root of a PSD matrix.

    Eigenvalues in [-clamp_tol, 0) are clamped to zero; anything lower raises
    NotPSDError carrying the offending eigenvalue.
    """
    vals, vecs = sym_eig(A)
    if vals.size and vals[-1] < -clamp_tol:
        raise NotPSDError(
            f"Matrix is not PSD: smallest eigenvalue {vals[-1]:.3e} < -{clamp_tol:g}",
            eigenvalue=float(vals[-1]),
        )
    root = np.sqrt(np.clip(vals, 0.0, None))
    return symmetrize((vecs * root) @ vecs.T)


# =============================================================================
# Pseudoinverse and Annihilators
# =============================================================================


def pinv(A: np.ndarray, rank_tol: float = DEFAULT_RANK_TOL) -> np.ndarray:
    """Moore-Penrose inverse by SVD.

    Singular values below rank_tol times the largest one are treated as zero.
    """
    arr = check_finite(A, "pinv argument")
    if arr.size == 0:
        return np.zeros(arr.shape[::-1])
    U, s, Vt = np.linalg.svd(arr, full_matrices=False)
    cutoff = rank_tol * (s[0] if s.size else 0.0)
    inv = np.zeros_like(s)
    keep = s > cutoff
    inv[keep] = 1.0 / s[keep]
    return (Vt.T * inv) @ U.T


def numerical_rank(A: np.ndarray, rank_tol: float = DEFAULT_RANK_TOL) -> int:
    arr = check_finite(A, "rank argument")
    if arr.size == 0:
        return 0
    s = np.linalg.svd(arr, compute_uv=False)
    if s.size == 0 or s[0] == 0.0:
        return 0
    return int(np.sum(s > rank_tol * s[0]))


def left_annihilator(A: np.ndarray, rank_tol: float = DEFAULT_RANK_TOL) -> np.ndarray:
    """A_perp = I - A A†, the projector onto the orthogonal complement of cs(A)."""
    arr = check_finite(A)
    return np.eye(arr.shape[0]) - arr @ pinv(arr, rank_tol)


def right_annihilator(A: np.ndarray, rank_tol: float = DEFAULT_RANK_TOL) -> np.ndarray:
    """A^perp = I - A† A, the projector onto the null space of A."""
    arr = check_finite(A)
    return np.eye(arr.shape[1]) - pinv(arr, rank_tol) @ arr


def null_space_basis(A: np.ndarray, rank_tol: float = DEFAULT_RANK_TOL) -> np.ndarray:
    """Orthonormal basis of null(A) from the SVD, with deterministic signs."""
    arr = check_finite(A, "null-space argument")
    basis = scipy.linalg.null_space(arr, rcond=rank_tol)
    for j in range(basis.shape[1]):
        pivot = np.argmax(np.abs(basis[:, j]))
        if basis[pivot, j] < 0:
            basis[:, j] = -basis[:, j]
    return basis


# =============================================================================
# Subspaces
# =============================================================================


def check_orthonormal(U: np.ndarray, name: str = "basis", tol: float = ORTHONORMAL_TOL) -> np.ndarray:
    arr = check_finite(U, name)
    if arr.ndim != 2 or arr.shape[1] == 0:
        raise InvalidBasisError(f"{name} must be a non-empty 2-D matrix")
    gram_err = np.linalg.norm(arr.T @ arr - np.eye(arr.shape[1]))
    if gram_err > tol:
        raise InvalidBasisError(
            f"{name} does not have orthonormal columns (‖UᵀU − I‖ = {gram_err:.2e})"
        )
    return arr


def chordal_distance(U: np.ndarray, V: np.ndarray) -> float:
    """Chordal distance sqrt(Σ sin²θ_i) between the column spans of U and V."""
    U = check_orthonormal(U, "U")
    V = check_orthonormal(V, "V")
    if U.shape != V.shape:
        raise InvalidBasisError(
            f"Subspaces must share ambient and column dimension: {U.shape} vs {V.shape}"
        )
    angles = scipy.linalg.subspace_angles(U, V)
    return float(np.sqrt(np.sum(np.sin(angles) ** 2)))


# =============================================================================
# Quadratic Freedom
# =============================================================================


@dataclass(frozen=True)
class QuadraticForm:
    """The inequality

        [v1; v2]ᵀ [[Q, S], [Sᵀ, -R]] [v1; v2] + ηᵀv1 + μᵀv2 + β ≥ 0

    with R PSD.
    """

    Q: np.ndarray
    R: np.ndarray
    S: np.ndarray
    eta: Optional[np.ndarray] = None
    mu: Optional[np.ndarray] = None
    beta: float = 0.0
    clamp_tol: float = field(default=DEFAULT_CLAMP_TOL, compare=False)

    def __post_init__(self) -> None:
        Q = symmetrize(as_square(self.Q, "Q"))
        R = symmetrize(as_square(self.R, "R"))
        S = check_finite(self.S, "S").reshape(Q.shape[0], R.shape[0])
        eta = np.zeros(Q.shape[0]) if self.eta is None else check_finite(self.eta, "eta").ravel()
        mu = np.zeros(R.shape[0]) if self.mu is None else check_finite(self.mu, "mu").ravel()
        if eta.shape != (Q.shape[0],) or mu.shape != (R.shape[0],):
            raise InvalidInputError("eta/mu dimensions do not match Q/R")
        lam = min_eigenvalue(R) if R.size else 0.0
        if lam < -self.clamp_tol:
            raise NotPSDError(f"R must be PSD (smallest eigenvalue {lam:.3e})", eigenvalue=lam)
        object.__setattr__(self, "Q", Q)
        object.__setattr__(self, "R", R)
        object.__setattr__(self, "S", S)
        object.__setattr__(self, "eta", eta)
        object.__setattr__(self, "mu", mu)
        object.__setattr__(self, "beta", float(self.beta))

    @property
    def n1(self) -> int:
        return self.Q.shape[0]

    @property
    def n2(self) -> int:
        return self.R.shape[0]

    def evaluate(self, v1: np.ndarray, v2: np.ndarray) -> float:
        """Value of the left-hand side at (v1, v2)."""
        v1 = np.asarray(v1, dtype=float)
        v2 = np.asarray(v2, dtype=float)
        return float(
            v1 @ self.Q @ v1
            + 2.0 * v1 @ self.S @ v2
            - v2 @ self.R @ v2
            + self.eta @ v1
            + self.mu @ v2
            + self.beta
        )

    def substituted(self, K: np.ndarray, xi: np.ndarray) -> np.ndarray:
        """Homogenized matrix [[c, b/2ᵀ], [b/2, A]] of the form after v2 = K v1 + ξ."""
        A = self.Q + self.S @ K + K.T @ self.S.T - K.T @ self.R @ K
        b = self.eta + 2.0 * self.S @ xi - 2.0 * K.T @ self.R @ xi + K.T @ self.mu
        c = -xi @ self.R @ xi + self.mu @ xi + self.beta
        top = np.concatenate([[c], 0.5 * b])
        body = np.hstack([0.5 * b[:, None], A])
        return symmetrize(np.vstack([top, body]))


class FreedomResult(NamedTuple):
    K: np.ndarray
    xi: np.ndarray
    feasible: bool


def freedom_matrix(qf: QuadraticForm, tau: float, rank_tol: float = DEFAULT_RANK_TOL) -> np.ndarray:
    """Left-hand side of the τ-parameterized freedom condition on (v0, v1)."""
    R_dag = pinv(qf.R, rank_tol)
    R_perp = left_annihilator(qf.R, rank_tol)
    base = np.zeros((qf.n1 + 1, qf.n1 + 1))
    base[0, 0] = qf.beta
    base[0, 1:] = 0.5 * qf.eta
    base[1:, 0] = 0.5 * qf.eta
    base[1:, 1:] = qf.Q
    coupling = np.vstack([0.5 * qf.mu[None, :], qf.S])
    return symmetrize(base + coupling @ (R_dag + tau * R_perp) @ coupling.T)


def quadratic_freedom_solve(
    qf: QuadraticForm,
    tau: float = 0.0,
    feas_tol: float = 1e-9,
    rank_tol: float = DEFAULT_RANK_TOL,
) -> FreedomResult:
    """Construct v2 = K v1 + ξ keeping the quadratic form nonnegative for every v1.

    Feasibility is judged on the freedom condition at the supplied τ; failure
    is reported through the flag. With μ = 0 the offset ξ is exactly zero and
    feasibility additionally requires β ≥ 0.
    """
    R_dag = pinv(qf.R, rank_tol)
    R_perp = left_annihilator(qf.R, rank_tol)
    gain = R_dag + 0.5 * tau * R_perp
    K = gain @ qf.S.T
    if np.any(qf.mu):
        xi = 0.5 * gain @ qf.mu
    else:
        xi = np.zeros(qf.n2)

    condition = freedom_matrix(qf, tau, rank_tol)
    margin = min_eigenvalue(condition)
    scale = max(1.0, float(np.max(np.abs(condition))))
    feasible = margin >= -feas_tol * scale
    if not np.any(qf.mu) and qf.beta < 0:
        feasible = False
    logger.debug("Freedom check tau=%g margin=%.3e feasible=%s", tau, margin, feasible)
    return FreedomResult(K=K, xi=xi, feasible=bool(feasible))


def scan_quadratic_freedom(
    qf: QuadraticForm,
    taus: Sequence[float] = DEFAULT_TAU_SCAN,
    feas_tol: float = 1e-9,
) -> tuple[FreedomResult, float]:
    """Try each τ in order; return the first feasible result and its τ.

    When none is feasible, the result for the τ with the largest margin is
    returned with feasible=False.
    """
    best: Optional[tuple[float, FreedomResult, float]] = None
    for tau in taus:
        result = quadratic_freedom_solve(qf, tau, feas_tol)
        if result.feasible:
            return result, float(tau)
        margin = min_eigenvalue(freedom_matrix(qf, tau))
        if best is None or margin > best[0]:
            best = (margin, result, float(tau))
    assert best is not None, "tau scan must not be empty"
    return best[1], best[2]
