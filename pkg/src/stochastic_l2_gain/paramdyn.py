"""Parameterizer dynamics g_k = F_p g_{k-1} + F_f d_k + F_z z_k and its error system."""

from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np

from .behavior import BehaviorBasis
from .errors import IllConditionedError, InconsistentLayoutError, InvalidInputError

logger = logging.getLogger(__name__)

DEFAULT_COND_MAX = 1e8
DEFAULT_RANK_TOL = 1e-9
DEFAULT_NULL_GAP = 0.5  # largest σ of the free directions, relative to σ_max


@dataclass(frozen=True)
class ParamDynamics:
    """Transition matrices of the parameterizer and of its prior estimation error."""

    F_p: np.ndarray
    F_f: np.ndarray
    F_z: np.ndarray
    E_p: np.ndarray
    E_f: np.ndarray
    E_u: np.ndarray
    basis: BehaviorBasis
    condition: float  # of Π_u F F_z
    null_residual: float  # ‖[F_wp; F_dk] F_z‖, zero for an exact basis

    @property
    def g_dim(self) -> int:
        return self.F_p.shape[0]

    def step(self, g_prev: np.ndarray, d_k: np.ndarray, z_k: np.ndarray) -> np.ndarray:
        return self.F_p @ g_prev + self.F_f @ d_k + self.F_z @ z_k

    def error_step(
        self, e_prev: np.ndarray, delta_d: np.ndarray, delta_u: np.ndarray
    ) -> np.ndarray:
        """Prior error e_{k|k-1} = E_p e_{k-1|k-1} + E_f Δd_k + E_u Δu_k."""
        return self.E_p @ e_prev + self.E_f @ delta_d + self.E_u @ delta_u


def decompose(
    basis: BehaviorBasis,
    cond_max: float = DEFAULT_COND_MAX,
    null_gap: float = DEFAULT_NULL_GAP,
    rank_tol: float = DEFAULT_RANK_TOL,
) -> ParamDynamics:
    """Split the one-step recursion of the parameterizer into past, disturbance and free parts.

    [F_wp; F_dk] is inverted on its dominant rank g_dim − m subspace, and F_z
    spans the remaining m right singular directions. For a learned basis these
    directions are only approximately annihilated; the residual is recorded.
    The split is rejected when a kept singular value falls below rank_tol·σ_max
    or a free one exceeds null_gap·σ_max.
    """
    if not 0.0 < null_gap < 1.0:
        raise InvalidInputError(f"null_gap must lie in (0, 1), got {null_gap}")
    lay = basis.layout
    F = basis.F
    g_dim, m, q = lay.g_dim, lay.m, lay.q
    stacked = np.vstack([basis.F_wp, basis.F_dk])

    U, s, Vt = np.linalg.svd(stacked, full_matrices=True)
    rank = g_dim - m
    if rank < 0 or rank > s.size:
        raise InconsistentLayoutError(f"Cannot split g_dim={g_dim} into rank {rank} plus m={m}")
    s_max = s[0] if s.size else 1.0
    if rank > 0 and s[rank - 1] <= rank_tol * s_max:
        raise InconsistentLayoutError(
            f"[F_wp; F_dk] has null-space dimension greater than m={m} "
            f"(singular value {s[rank - 1]:.2e})"
        )
    if rank < s.size and s[rank] > null_gap * s_max:
        raise InconsistentLayoutError(
            f"[F_wp; F_dk] has no {m}-dimensional near-null space "
            f"(singular value {s[rank]:.2e})"
        )

    pinv_stacked = (Vt[:rank].T / s[:rank]) @ U[:, :rank].T
    F_z = Vt[rank:].T.copy()
    for j in range(F_z.shape[1]):
        pivot = np.argmax(np.abs(F_z[:, j]))
        if F_z[pivot, j] < 0:
            F_z[:, j] = -F_z[:, j]

    past_rows = lay.L * lay.w_dim
    F_p = pinv_stacked @ np.vstack([basis.Pi_p @ F, np.zeros((q, g_dim))])
    F_f = pinv_stacked @ np.vstack([np.zeros((past_rows, q)), np.eye(q)])

    coupling = basis.Pi_u_F @ F_z
    condition = float(np.linalg.cond(coupling))
    if not np.isfinite(condition) or condition > cond_max:
        raise IllConditionedError(
            f"Π_u F F_z has condition number {condition:.3e} > {cond_max:.1e}",
            condition=condition,
        )
    E_u = F_z @ np.linalg.inv(coupling)
    projector = np.eye(g_dim) - E_u @ basis.Pi_u_F
    E_p = projector @ F_p
    E_f = projector @ F_f

    null_residual = float(np.linalg.norm(stacked @ F_z))
    logger.info(
        "Decomposed parameterizer dynamics: cond(Π_u F F_z)=%.3g null residual=%.2e",
        condition,
        null_residual,
    )
    return ParamDynamics(
        F_p=F_p,
        F_f=F_f,
        F_z=F_z,
        E_p=E_p,
        E_f=E_f,
        E_u=E_u,
        basis=basis,
        condition=condition,
        null_residual=null_residual,
    )


def simulate_parameterizer(
    dyn: ParamDynamics,
    g0: np.ndarray,
    d_seq: np.ndarray,
    z_seq: np.ndarray,
) -> np.ndarray:
    """Iterate the recursion; row 0 is g0 and row k is g_k."""
    q = dyn.F_f.shape[1]
    m = dyn.F_z.shape[1]
    d_seq = np.asarray(d_seq, dtype=float).reshape(-1, q) if q else np.zeros((len(z_seq), 0))
    z_seq = np.asarray(z_seq, dtype=float).reshape(-1, m)
    if d_seq.shape[0] != z_seq.shape[0]:
        raise InvalidInputError(
            f"d and z sequences differ in length ({d_seq.shape[0]} vs {z_seq.shape[0]})"
        )
    out = np.zeros((z_seq.shape[0] + 1, dyn.g_dim))
    out[0] = np.asarray(g0, dtype=float)
    for k in range(z_seq.shape[0]):
        out[k + 1] = dyn.step(out[k], d_seq[k], z_seq[k])
    return out
