"""Ground-truth plants in kernel form R_y(σ⁻¹)y_k + R_u(σ⁻¹)u_k + R_d(σ⁻¹)d_k = 0."""

from __future__ import annotations

import logging
from dataclasses import dataclass
from typing import Optional

import numpy as np

from .behavior import SignalLayout
from .errors import InvalidHistoryError, InvalidInputError
from .numerics import check_finite, null_space_basis

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class KernelModel:
    """Lag-indexed coefficient blocks; index j multiplies the signal at k - j.

    R_y has shape (lag+1, p, p), R_u (lag+1, p, m) and R_d (lag+1, p, q).
    """

    R_y: np.ndarray
    R_u: np.ndarray
    R_d: np.ndarray

    def __post_init__(self) -> None:
        R_y = check_finite(self.R_y, "R_y")
        R_u = check_finite(self.R_u, "R_u")
        R_d = np.asarray(self.R_d, dtype=float)
        if R_d.size == 0:
            R_d = np.zeros((R_y.shape[0], R_y.shape[1], 0))
        R_d = check_finite(R_d, "R_d")
        if R_y.ndim != 3 or R_y.shape[1] != R_y.shape[2]:
            raise InvalidInputError(f"R_y must have shape (lag+1, p, p), got {R_y.shape}")
        lags = {R_y.shape[0], R_u.shape[0], R_d.shape[0]}
        rows = {R_y.shape[1], R_u.shape[1], R_d.shape[1]}
        if len(lags) != 1 or len(rows) != 1:
            raise InvalidInputError("Kernel coefficient blocks disagree on lag or output rows")
        if np.linalg.cond(R_y[0]) > 1e12:
            raise InvalidInputError("R_y[0] must be invertible for a well-posed output recursion")
        for name, arr in (("R_y", R_y), ("R_u", R_u), ("R_d", R_d)):
            arr = arr.copy()
            arr.setflags(write=False)
            object.__setattr__(self, name, arr)

    @property
    def lag(self) -> int:
        return self.R_y.shape[0] - 1

    @property
    def p(self) -> int:
        return self.R_y.shape[1]

    @property
    def m(self) -> int:
        return self.R_u.shape[2]

    @property
    def q(self) -> int:
        return self.R_d.shape[2]

    @property
    def w_dim(self) -> int:
        return self.p + self.m + self.q

    def step_blocks(self) -> np.ndarray:
        """Per-lag blocks [R_y[j], R_u[j], R_d[j]] acting on w_{k-j}."""
        return np.concatenate([self.R_y, self.R_u, self.R_d], axis=2)

    def window_constraints(self, L: int) -> np.ndarray:
        """Block-Toeplitz matrix whose null space is the (L+1)-step behavior."""
        if L < self.lag:
            raise InvalidInputError(f"Window lag L={L} is shorter than the kernel lag {self.lag}")
        blocks = self.step_blocks()
        w = self.w_dim
        rows = []
        for t in range(self.lag, L + 1):
            row = np.zeros((self.p, (L + 1) * w))
            for j in range(self.lag + 1):
                start = (t - j) * w
                row[:, start : start + w] = blocks[j]
            rows.append(row)
        return np.vstack(rows)

    def state_dim(self) -> int:
        """State cardinality read off the null-space dimension at L = lag."""
        L = max(self.lag, 1)
        null_dim = null_space_basis(self.window_constraints(L), rank_tol=1e-12).shape[1]
        return null_dim - (L + 1) * (self.m + self.q)

    def layout(self, L: int, n_state: Optional[int] = None) -> SignalLayout:
        return SignalLayout(
            p=self.p,
            m=self.m,
            q=self.q,
            L=L,
            n_state=self.state_dim() if n_state is None else n_state,
        )

    def companion(self) -> np.ndarray:
        """Companion matrix of the autonomous output recursion (u = d = 0)."""
        p, lag = self.p, self.lag
        R0_inv = np.linalg.inv(self.R_y[0])
        top = np.hstack([-R0_inv @ self.R_y[j] for j in range(1, lag + 1)])
        if lag == 1:
            return top
        shift = np.hstack([np.eye(p * (lag - 1)), np.zeros((p * (lag - 1), p))])
        return np.vstack([top, shift])

    def open_loop_spectral_radius(self) -> float:
        if self.lag == 0:
            return 0.0
        return float(np.max(np.abs(np.linalg.eigvals(self.companion()))))

    @classmethod
    def example(cls) -> "KernelModel":
        """Unstable two-output benchmark plant with lag 1 and state cardinality 2."""
        R_y = np.array(
            [
                [[4.29, -1.43], [-1.43, 2.14]],
                [[-4.5, 1.5], [-1.57, 2.36]],
            ]
        )
        R_u = np.array(
            [
                [[-1.11, -1.4], [-1.47, -1.45]],
                [[-0.65, 0.42], [0.024, -0.17]],
            ]
        )
        R_d = np.array(
            [
                [[-0.15, -0.12], [-0.11, -0.16]],
                np.zeros((2, 2)),
            ]
        )
        return cls(R_y=R_y, R_u=R_u, R_d=R_d)

    @classmethod
    def integrator(cls) -> "KernelModel":
        """y_k = y_{k-1} + u_k without disturbance."""
        return cls(
            R_y=np.array([[[1.0]], [[-1.0]]]),
            R_u=np.array([[[-1.0]], [[0.0]]]),
            R_d=np.zeros((2, 1, 0)),
        )


def step_plant(
    model: KernelModel,
    history: np.ndarray,
    u_k: np.ndarray,
    d_k: Optional[np.ndarray] = None,
) -> np.ndarray:
    """Next output y_k from the last `lag` steps (rows (y, u, d), most recent last)."""
    hist = np.asarray(history, dtype=float).reshape(-1, model.w_dim) if model.lag else None
    if model.lag and hist.shape[0] < model.lag:
        raise InvalidHistoryError(
            f"History has {hist.shape[0]} steps, kernel lag needs {model.lag}"
        )
    u_k = np.asarray(u_k, dtype=float).reshape(model.m)
    d_k = np.zeros(model.q) if d_k is None else np.asarray(d_k, dtype=float).reshape(model.q)

    blocks = model.step_blocks()
    acc = model.R_u[0] @ u_k + model.R_d[0] @ d_k
    for j in range(1, model.lag + 1):
        acc = acc + blocks[j] @ hist[-j]
    return -np.linalg.solve(model.R_y[0], acc)


def kernel_residual(model: KernelModel, steps: np.ndarray) -> float:
    """Largest kernel residual norm over every full-lag stretch of the given steps."""
    arr = np.asarray(steps, dtype=float).reshape(-1, model.w_dim)
    blocks = model.step_blocks()
    worst = 0.0
    for k in range(model.lag, arr.shape[0]):
        res = sum(blocks[j] @ arr[k - j] for j in range(model.lag + 1))
        worst = max(worst, float(np.linalg.norm(res)))
    return worst


def simulate_open_loop(
    model: KernelModel,
    u_seq: np.ndarray,
    d_seq: Optional[np.ndarray] = None,
    history: Optional[np.ndarray] = None,
) -> np.ndarray:
    """Drive the plant with given inputs; returns rows (y, u, d) for each new step."""
    u_seq = np.asarray(u_seq, dtype=float).reshape(-1, model.m)
    steps = u_seq.shape[0]
    if d_seq is None:
        d_seq = np.zeros((steps, model.q))
    d_seq = np.asarray(d_seq, dtype=float).reshape(steps, model.q)
    if history is None:
        history = np.zeros((model.lag, model.w_dim))
    hist = np.asarray(history, dtype=float).reshape(-1, model.w_dim)

    out = np.zeros((steps, model.w_dim))
    window = list(hist[-model.lag :]) if model.lag else []
    for k in range(steps):
        y = step_plant(model, np.array(window), u_seq[k], d_seq[k])
        out[k] = np.concatenate([y, u_seq[k], d_seq[k]])
        if model.lag:
            window = window[1:] + [out[k]]
    return out
