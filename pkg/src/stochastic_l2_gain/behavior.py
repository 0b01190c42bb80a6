"""Behavior learning from noisy trajectory data.

Per-step vectors are always ordered (y, u, d) and windows are stacked oldest
first: col(w_{k-L}, ..., w_k).
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from functools import cached_property
from typing import TYPE_CHECKING, Optional, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view
from pydantic import BaseModel, ConfigDict, Field

from .errors import (
    InconsistentLayoutError,
    InvalidDepthError,
    InvalidInputError,
    NotExcitingError,
    NotPSDError,
)
from .numerics import (
    DEFAULT_CLAMP_TOL,
    DEFAULT_RANK_TOL,
    as_square,
    check_finite,
    check_orthonormal,
    min_eigenvalue,
    null_space_basis,
    numerical_rank,
    sym_eig,
    symmetrize,
)

if TYPE_CHECKING:
    from .plant import KernelModel

logger = logging.getLogger(__name__)

DEFAULT_GAP_TOL = 10.0


# =============================================================================
# Layout
# =============================================================================


class SignalLayout(BaseModel):
    """Dimensions of the manifest variable w = (y, u, d) and the window lag."""

    model_config = ConfigDict(frozen=True)

    p: int = Field(ge=1)  # outputs
    m: int = Field(ge=1)  # manipulated inputs
    q: int = Field(default=0, ge=0)  # disturbances
    L: int = Field(ge=1)  # past steps in a window
    n_state: int = Field(default=0, ge=0)

    @property
    def w_dim(self) -> int:
        return self.p + self.m + self.q

    @property
    def input_dim(self) -> int:
        return self.m + self.q

    @property
    def depth(self) -> int:
        return self.L + 1

    @property
    def window_dim(self) -> int:
        return self.depth * self.w_dim

    @property
    def g_dim(self) -> int:
        return self.depth * self.input_dim + self.n_state

    @property
    def min_length(self) -> int:
        """Smallest T for which persistent excitation is possible."""
        return self.L + self.n_state + self.input_dim

    def channel_names(self) -> list[str]:
        return (
            [f"y{i + 1}" for i in range(self.p)]
            + [f"u{i + 1}" for i in range(self.m)]
            + [f"d{i + 1}" for i in range(self.q)]
        )

    def y_slice(self) -> slice:
        return slice(0, self.p)

    def u_slice(self) -> slice:
        return slice(self.p, self.p + self.m)

    def d_slice(self) -> slice:
        return slice(self.p + self.m, self.w_dim)

    def with_state(self, n_state: int) -> "SignalLayout":
        return self.model_copy(update={"n_state": n_state})


# =============================================================================
# Trajectory Data
# =============================================================================


@dataclass
class TrajectorySet:
    """N measured trajectories of T+1 steps each, rows ordered (y, u, d)."""

    trajectories: list[np.ndarray]
    layout: SignalLayout

    def __post_init__(self) -> None:
        if not self.trajectories:
            raise InvalidInputError("TrajectorySet needs at least one trajectory")
        arrays = [check_finite(t, f"trajectory {i}") for i, t in enumerate(self.trajectories)]
        length = arrays[0].shape[0]
        for i, arr in enumerate(arrays):
            if arr.ndim != 2 or arr.shape[1] != self.layout.w_dim:
                raise InconsistentLayoutError(
                    f"Trajectory {i} has shape {arr.shape}, expected (*, {self.layout.w_dim})"
                )
            if arr.shape[0] != length:
                raise InvalidInputError(
                    f"Trajectory {i} has {arr.shape[0]} steps, expected {length}"
                )
        if length - 1 < self.layout.min_length:
            raise InvalidInputError(
                f"Trajectories of T={length - 1} are too short for persistent excitation "
                f"(need T >= {self.layout.min_length})"
            )
        self.trajectories = arrays

    @property
    def N(self) -> int:
        return len(self.trajectories)

    @property
    def T(self) -> int:
        return self.trajectories[0].shape[0] - 1

    def free_inputs(self, index: int) -> np.ndarray:
        """The jointly free (u, d) columns of one trajectory."""
        return self.trajectories[index][:, self.layout.p :]


# =============================================================================
# Hankel Matrices and Persistent Excitation
# =============================================================================


def hankel(traj: np.ndarray, depth: int) -> np.ndarray:
    """Block-Hankel matrix of the given depth; column j is the window starting at step j."""
    arr = check_finite(traj, "trajectory")
    if arr.ndim == 1:
        arr = arr[:, None]
    steps, width = arr.shape
    if depth < 1 or depth > steps:
        raise InvalidDepthError(f"Depth {depth} invalid for a trajectory of {steps} steps")
    windows = sliding_window_view(arr, depth, axis=0)  # (cols, width, depth)
    return windows.transpose(0, 2, 1).reshape(steps - depth + 1, depth * width).T


def is_persistently_exciting(
    input_traj: np.ndarray,
    order: int,
    rank_tol: float = DEFAULT_RANK_TOL,
) -> bool:
    """True iff the depth-`order` Hankel matrix of the input has full row rank."""
    H = hankel(input_traj, order)
    if H.shape[1] < H.shape[0]:
        return False
    return numerical_rank(H, rank_tol) == H.shape[0]


# =============================================================================
# Behavior Basis
# =============================================================================


@dataclass(frozen=True)
class BehaviorBasis:
    """Orthonormal basis F of the (L+1)-step behavior and its selectors."""

    F: np.ndarray
    layout: SignalLayout
    eigenvalues: Optional[np.ndarray] = field(default=None, compare=False)
    spectral_gap: Optional[float] = field(default=None, compare=False)
    gap_warning: bool = field(default=False, compare=False)

    def __post_init__(self) -> None:
        F = check_orthonormal(self.F, "F", tol=1e-9)
        if F.shape[0] != self.layout.window_dim:
            raise InconsistentLayoutError(
                f"F has {F.shape[0]} rows, layout needs {self.layout.window_dim}"
            )
        if F.shape[1] != self.layout.g_dim:
            raise InconsistentLayoutError(
                f"F has {F.shape[1]} columns, layout needs g_dim={self.layout.g_dim}"
            )
        F = F.copy()
        F.setflags(write=False)
        object.__setattr__(self, "F", F)

    @property
    def g_dim(self) -> int:
        return self.F.shape[1]

    def _step_selector(self, step: int, cols: slice) -> np.ndarray:
        lay = self.layout
        idx = np.arange(lay.w_dim)[cols] + step * lay.w_dim
        sel = np.zeros((idx.size, lay.window_dim))
        sel[np.arange(idx.size), idx] = 1.0
        return sel

    # -------------------------------------------------------------------------
    # Selectors on a stacked window
    # -------------------------------------------------------------------------

    @cached_property
    def Pi_p(self) -> np.ndarray:
        """Drops the oldest step: col(w_{k-L}, ..., w_k) -> col(w_{k-L+1}, ..., w_k)."""
        lay = self.layout
        return np.eye(lay.window_dim)[lay.w_dim :]

    @cached_property
    def Pi_f(self) -> np.ndarray:
        return self._step_selector(self.layout.L, slice(None))

    @cached_property
    def Pi_y(self) -> np.ndarray:
        return self._step_selector(self.layout.L, self.layout.y_slice())

    @cached_property
    def Pi_u(self) -> np.ndarray:
        return self._step_selector(self.layout.L, self.layout.u_slice())

    @cached_property
    def Pi_d(self) -> np.ndarray:
        return self._step_selector(self.layout.L, self.layout.d_slice())

    # -------------------------------------------------------------------------
    # Row partitions of F
    # -------------------------------------------------------------------------

    @cached_property
    def F_wp(self) -> np.ndarray:
        """Rows of F covering the past L steps."""
        return self.F[: self.layout.L * self.layout.w_dim]

    @cached_property
    def F_dk(self) -> np.ndarray:
        """Rows of F for d_k in the current step."""
        return self.Pi_d @ self.F

    @cached_property
    def H(self) -> np.ndarray:
        """Measurement map Π_f F."""
        return self.Pi_f @ self.F

    @cached_property
    def Pi_y_F(self) -> np.ndarray:
        return self.Pi_y @ self.F

    @cached_property
    def Pi_u_F(self) -> np.ndarray:
        return self.Pi_u @ self.F

    def window(self, g: np.ndarray) -> np.ndarray:
        """Window F g represented by a parameterizer."""
        return self.F @ np.asarray(g, dtype=float)


def window_at(traj: np.ndarray, k: int, L: int) -> np.ndarray:
    """Stacked window col(w_{k-L}, ..., w_k) of a (steps, w_dim) trajectory."""
    if k < L or k >= traj.shape[0]:
        raise InvalidDepthError(f"Window ending at step {k} needs {L} steps of history")
    return np.asarray(traj[k - L : k + 1], dtype=float).ravel()


def state_map(basis: BehaviorBasis, window: np.ndarray) -> np.ndarray:
    """Parameterizer g = F† w̃ of a window (or of each column of a window matrix)."""
    w = np.asarray(window, dtype=float)
    if w.shape[0] != basis.layout.window_dim:
        raise InconsistentLayoutError(
            f"Window has {w.shape[0]} rows, expected {basis.layout.window_dim}"
        )
    return basis.F.T @ w


def _check_noise_cov(noise_cov: np.ndarray, layout: SignalLayout) -> np.ndarray:
    S_n = symmetrize(as_square(noise_cov, "S_n"))
    if S_n.shape[0] != layout.w_dim:
        raise InconsistentLayoutError(
            f"S_n is {S_n.shape[0]}x{S_n.shape[0]}, layout needs w_dim={layout.w_dim}"
        )
    lam = min_eigenvalue(S_n)
    if lam < -DEFAULT_CLAMP_TOL:
        raise NotPSDError(f"S_n must be PSD (smallest eigenvalue {lam:.3e})", eigenvalue=lam)
    return S_n


def noise_compensated_gram(data: TrajectorySet, noise_cov: np.ndarray) -> np.ndarray:
    """M_N = (1/N) Σ H Hᵀ − (T−L+1)(I_{L+1} ⊗ S_n)."""
    layout = data.layout
    S_n = _check_noise_cov(noise_cov, layout)
    gram = np.zeros((layout.window_dim, layout.window_dim))
    for traj in data.trajectories:
        H = hankel(traj, layout.depth)
        gram += H @ H.T
    gram /= data.N
    columns = data.T - layout.L + 1
    return symmetrize(gram - columns * np.kron(np.eye(layout.depth), S_n))


def _detect_state_dim(eigenvalues: np.ndarray, layout: SignalLayout) -> int:
    base = layout.depth * layout.input_dim
    upper = min(layout.window_dim - 1, base + layout.L * layout.p)
    # compensated tail eigenvalues scatter around zero with either sign
    floor = max(abs(float(eigenvalues[0])), np.finfo(float).tiny) * 1e-12
    best_n, best_ratio = 0, -np.inf
    for g in range(base, upper + 1):
        ratio = eigenvalues[g - 1] / max(abs(float(eigenvalues[g])), floor)
        if ratio > best_ratio:
            best_n, best_ratio = g - base, ratio
    return best_n


def learn_basis(
    data: TrajectorySet,
    noise_cov: np.ndarray,
    layout: Optional[SignalLayout] = None,
    *,
    gap_tol: float = DEFAULT_GAP_TOL,
    auto_state: bool = False,
    rank_tol: float = DEFAULT_RANK_TOL,
) -> BehaviorBasis:
    """Learn F from noisy trajectories by the noise-compensated spectral method.

    The columns of F are the eigenvectors of the largest g_dim eigenvalues of
    M_N, re-orthonormalized so FᵀF = I. A spectral gap below gap_tol only
    sets gap_warning. With auto_state, n_state is chosen at the largest
    relative eigenvalue gap; the layout's n_state then bounds the excitation
    order checked.
    """
    layout = layout or data.layout
    if layout.w_dim != data.layout.w_dim or layout.L != data.layout.L:
        raise InconsistentLayoutError("Layout disagrees with the dataset layout")

    order = layout.L + layout.n_state + 1
    for i in range(data.N):
        if not is_persistently_exciting(data.free_inputs(i), order, rank_tol):
            raise NotExcitingError(
                f"Trajectory {i} is not persistently exciting of order {order}",
                trajectory_index=i,
            )

    M_N = noise_compensated_gram(data, noise_cov)
    eigenvalues, eigenvectors = sym_eig(M_N)

    if auto_state:
        n_state = _detect_state_dim(eigenvalues, layout)
        logger.info("Detected state cardinality n_state=%d", n_state)
        layout = layout.with_state(n_state)

    g_dim = layout.g_dim
    if g_dim > layout.window_dim:
        raise InconsistentLayoutError(
            f"g_dim={g_dim} exceeds the window dimension {layout.window_dim}"
        )
    Q, R = np.linalg.qr(eigenvectors[:, :g_dim])
    F = Q * np.sign(np.where(np.diag(R) == 0, 1.0, np.diag(R)))

    if g_dim < eigenvalues.size:
        below = eigenvalues[g_dim]
        gap = float("inf") if below <= 0 else float(eigenvalues[g_dim - 1] / below)
    else:
        gap = float("inf")
    gap_warning = gap < gap_tol
    if gap_warning:
        logger.warning(
            "Small spectral gap %.3g < %.3g between eigenvalues %d and %d of M_N",
            gap,
            gap_tol,
            g_dim,
            g_dim + 1,
        )
    logger.info("Learned behavior basis: N=%d T=%d g_dim=%d gap=%.3g", data.N, data.T, g_dim, gap)
    return BehaviorBasis(
        F=F,
        layout=layout,
        eigenvalues=eigenvalues,
        spectral_gap=gap,
        gap_warning=gap_warning,
    )


def exact_basis_from_kernel(kernel: "KernelModel", layout: SignalLayout) -> BehaviorBasis:
    """Orthonormal basis of the null space of the kernel's window constraints."""
    constraints = kernel.window_constraints(layout.L)
    basis = null_space_basis(constraints, rank_tol=1e-12)
    if basis.shape[1] != layout.g_dim:
        raise InconsistentLayoutError(
            f"Kernel null space has dimension {basis.shape[1]}, "
            f"layout g_dim={layout.g_dim} (check n_state)"
        )
    return BehaviorBasis(F=basis, layout=layout)


def stack_windows(trajectories: Sequence[np.ndarray], L: int) -> np.ndarray:
    """All windows of all trajectories as columns."""
    return np.hstack([hankel(t, L + 1) for t in trajectories])
