"""Optimal parameterizer filter and its steady-state Riccati solution."""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Optional

import numpy as np
import scipy.linalg

from .behavior import BehaviorBasis, SignalLayout
from .errors import (
    InconsistentLayoutError,
    NonConvergenceError,
    NotPSDError,
    SingularInnovationError,
)
from .numerics import DEFAULT_CLAMP_TOL, as_square, min_eigenvalue, symmetrize
from .paramdyn import ParamDynamics

logger = logging.getLogger(__name__)

DEFAULT_MAX_ITER = 10_000
DEFAULT_ARE_TOL = 1e-10
SN_REGULARIZATION = 1e-10


# =============================================================================
# Noise Model
# =============================================================================


@dataclass(frozen=True)
class NoiseModel:
    """Covariances of the disturbance uncertainty, input uncertainty and measurement noise."""

    S_d: np.ndarray
    S_u: np.ndarray
    S_n: np.ndarray
    regularized: bool = field(default=False, compare=False)
    S_n_filter: np.ndarray = field(init=False, repr=False, compare=False)

    def __post_init__(self) -> None:
        mats = {}
        for name in ("S_d", "S_u", "S_n"):
            raw = np.asarray(getattr(self, name), dtype=float)
            if raw.size == 0:
                mats[name] = np.zeros((0, 0))
                continue
            mat = symmetrize(as_square(raw, name))
            lam = min_eigenvalue(mat)
            if lam < -DEFAULT_CLAMP_TOL:
                raise NotPSDError(f"{name} must be PSD (smallest eigenvalue {lam:.3e})", eigenvalue=lam)
            mats[name] = mat

        # the filter sees a regularized copy; sampling keeps the raw S_n
        regularized = self.regularized
        S_n_filter = mats["S_n"].copy()
        if S_n_filter.size and min_eigenvalue(S_n_filter) <= 0.0:
            logger.warning(
                "S_n is singular; the filter adds %.0e·I so the innovation covariance stays invertible",
                SN_REGULARIZATION,
            )
            S_n_filter = S_n_filter + SN_REGULARIZATION * np.eye(S_n_filter.shape[0])
            regularized = True
        mats["S_n_filter"] = S_n_filter

        for name, mat in mats.items():
            mat.setflags(write=False)
            object.__setattr__(self, name, mat)
        object.__setattr__(self, "regularized", regularized)

    def check_layout(self, layout: SignalLayout) -> "NoiseModel":
        expected = {"S_d": layout.q, "S_u": layout.m, "S_n": layout.w_dim}
        for name, dim in expected.items():
            if getattr(self, name).shape != (dim, dim):
                raise InconsistentLayoutError(
                    f"{name} has shape {getattr(self, name).shape}, layout needs ({dim}, {dim})"
                )
        return self

    @classmethod
    def example(cls) -> "NoiseModel":
        return cls(
            S_d=np.diag([0.4, 0.35]),
            S_u=np.diag([0.2, 0.1]),
            S_n=np.diag([0.6, 0.2, 0.1, 0.5, 0.5, 0.3]),
        )


# =============================================================================
# Filter State
# =============================================================================


@dataclass(frozen=True)
class FilterState:
    """Posterior estimate ĝ_{k|k} with error covariance 𝒫_{k|k}."""

    g_hat: np.ndarray
    P_post: np.ndarray
    k: int = 0


def initial_covariance(basis: BehaviorBasis, noise: NoiseModel) -> np.ndarray:
    """Error covariance Fᵀ(I ⊗ S_n)F of the state map applied to one noisy window."""
    S_window = np.kron(np.eye(basis.layout.depth), noise.S_n)
    return symmetrize(basis.F.T @ S_window @ basis.F)


def predict(
    dyn: ParamDynamics,
    g_post: np.ndarray,
    d_mean: np.ndarray,
    z_hat: np.ndarray,
) -> np.ndarray:
    """Prior ĝ_{k|k-1} = F_p ĝ_{k-1|k-1} + F_f 𝔼[d_k] + F_z ẑ_k."""
    return dyn.F_p @ g_post + dyn.F_f @ d_mean + dyn.F_z @ z_hat


def control_from_prior(basis: BehaviorBasis, g_prior: np.ndarray) -> np.ndarray:
    """Manipulated variable ū_k = Π_u F ĝ_{k|k-1}."""
    return basis.Pi_u_F @ g_prior


def process_covariance(dyn: ParamDynamics, noise: NoiseModel) -> np.ndarray:
    """𝒬 = E_f S_d E_fᵀ + E_u S_u E_uᵀ."""
    return symmetrize(dyn.E_f @ noise.S_d @ dyn.E_f.T + dyn.E_u @ noise.S_u @ dyn.E_u.T)


def covariance_predict(dyn: ParamDynamics, P_post: np.ndarray, noise: NoiseModel) -> np.ndarray:
    """𝒫_{k|k-1} = E_p 𝒫_{k-1|k-1} E_pᵀ + 𝒬."""
    return symmetrize(dyn.E_p @ P_post @ dyn.E_p.T + process_covariance(dyn, noise))


def kalman_gain(P_prior: np.ndarray, H: np.ndarray, S_n: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Gain and posterior covariance for measurement map H and noise S_n."""
    HP = H @ P_prior
    innovation = symmetrize(HP @ H.T + S_n)
    try:
        K = scipy.linalg.solve(innovation, HP, assume_a="pos").T
    except (np.linalg.LinAlgError, scipy.linalg.LinAlgError) as exc:
        raise SingularInnovationError(
            f"Innovation covariance is singular ({exc}); regularize S_n"
        ) from exc
    if not np.all(np.isfinite(K)):
        raise SingularInnovationError("Innovation covariance is singular; regularize S_n")
    P_post = symmetrize(P_prior - K @ HP)
    return K, P_post


def gain_and_update(
    basis: BehaviorBasis,
    P_prior: np.ndarray,
    noise: NoiseModel,
) -> tuple[np.ndarray, np.ndarray]:
    """𝒦_k = 𝒫 Hᵀ(H𝒫Hᵀ + S_n)⁻¹ and 𝒫_{k|k} = (I − 𝒦_k H)𝒫 with H = Π_f F."""
    return kalman_gain(P_prior, basis.H, noise.S_n_filter)


def posterior_update(
    basis: BehaviorBasis,
    g_prior: np.ndarray,
    K_k: np.ndarray,
    w_measured: np.ndarray,
) -> np.ndarray:
    """ĝ_{k|k} = ĝ_{k|k-1} + 𝒦_k(w_k^m − Π_f F ĝ_{k|k-1})."""
    return g_prior + K_k @ (w_measured - basis.H @ g_prior)


# =============================================================================
# Steady State
# =============================================================================


@dataclass(frozen=True)
class SteadyState:
    """Fixed point of the covariance recursion and the terms of its Riccati form."""

    P: np.ndarray
    Q_term: np.ndarray
    N_term: np.ndarray
    A_term: np.ndarray
    R_term: np.ndarray
    T_term: np.ndarray
    K_inf: np.ndarray
    P_prior: np.ndarray
    iterations: int
    residual: float

    def eigenvalues(self) -> np.ndarray:
        return np.sort(np.linalg.eigvalsh(self.P))[::-1]


def riccati_terms(
    E_p: np.ndarray,
    H: np.ndarray,
    Q: np.ndarray,
    S_n: np.ndarray,
    P: np.ndarray,
) -> dict[str, np.ndarray]:
    """𝒜 = H E_p, ℛ = H𝒬Hᵀ + S_n, 𝒯 = H𝒬 and 𝒩 = (𝒜𝒫E_pᵀ + 𝒯)ᵀ(𝒜𝒫𝒜ᵀ + ℛ)⁻¹(𝒜𝒫E_pᵀ + 𝒯)."""
    A = H @ E_p
    R = symmetrize(H @ Q @ H.T + S_n)
    T = H @ Q
    cross = A @ P @ E_p.T + T
    inner = symmetrize(A @ P @ A.T + R)
    N = symmetrize(cross.T @ scipy.linalg.solve(inner, cross, assume_a="pos"))
    return {"A": A, "R": R, "T": T, "N": N}


def riccati_residual(E_p: np.ndarray, Q: np.ndarray, N: np.ndarray, P: np.ndarray) -> float:
    """‖𝒫 − (E_p𝒫E_pᵀ − 𝒩 + 𝒬)‖_F / ‖𝒫‖_F."""
    diff = P - (E_p @ P @ E_p.T - N + Q)
    return float(np.linalg.norm(diff) / max(np.linalg.norm(P), np.finfo(float).tiny))


def solve_filter_are(
    E_p: np.ndarray,
    H: np.ndarray,
    Q: np.ndarray,
    S_n: np.ndarray,
    P0: Optional[np.ndarray] = None,
    max_iter: int = DEFAULT_MAX_ITER,
    are_tol: float = DEFAULT_ARE_TOL,
) -> SteadyState:
    """Fixed-point iteration of predict + update until the posterior covariance settles."""
    P = symmetrize(Q if P0 is None else P0)
    if min_eigenvalue(P) < -DEFAULT_CLAMP_TOL:
        raise NotPSDError("Initial covariance must be PSD", eigenvalue=min_eigenvalue(P))

    delta = float("inf")
    for iteration in range(1, max_iter + 1):
        P_prior = symmetrize(E_p @ P @ E_p.T + Q)
        _, P_next = kalman_gain(P_prior, H, S_n)
        delta = float(np.linalg.norm(P_next - P) / max(1.0, np.linalg.norm(P_next)))
        P = P_next
        if delta < are_tol:
            break
    else:
        raise NonConvergenceError(
            f"Riccati iteration did not converge in {max_iter} steps (last change {delta:.3e})",
            residual=delta,
        )

    terms = riccati_terms(E_p, H, Q, S_n, P)
    residual = riccati_residual(E_p, Q, terms["N"], P)
    if residual > max(are_tol, 1e-9):
        logger.warning("Riccati residual %.3e exceeds tolerance %.1e", residual, are_tol)
    P_prior = symmetrize(E_p @ P @ E_p.T + Q)
    K_inf, _ = kalman_gain(P_prior, H, S_n)
    logger.info("Riccati iteration converged in %d steps (residual %.2e)", iteration, residual)
    return SteadyState(
        P=P,
        Q_term=Q,
        N_term=terms["N"],
        A_term=terms["A"],
        R_term=terms["R"],
        T_term=terms["T"],
        K_inf=K_inf,
        P_prior=P_prior,
        iterations=iteration,
        residual=residual,
    )


def solve_are(
    dyn: ParamDynamics,
    basis: BehaviorBasis,
    noise: NoiseModel,
    P0: Optional[np.ndarray] = None,
    max_iter: int = DEFAULT_MAX_ITER,
    are_tol: float = DEFAULT_ARE_TOL,
) -> SteadyState:
    """Steady-state posterior covariance 𝒫 of the parameterizer filter.

    P0 defaults to 𝒬, the one-step noise covariance.
    """
    Q = process_covariance(dyn, noise)
    return solve_filter_are(dyn.E_p, basis.H, Q, noise.S_n_filter, P0, max_iter, are_tol)


# =============================================================================
# Online Filtering
# =============================================================================


@dataclass(frozen=True)
class GainSchedule:
    """Data-independent sequence of gains and covariances from a fixed 𝒫_{0|0}.

    gains[k-1] is 𝒦_k; P_post[k] is 𝒫_{k|k} with P_post[0] = 𝒫_{0|0}.
    """

    gains: np.ndarray
    P_prior: np.ndarray
    P_post: np.ndarray

    def __len__(self) -> int:
        return self.gains.shape[0]


def gain_schedule(
    dyn: ParamDynamics,
    basis: BehaviorBasis,
    noise: NoiseModel,
    P0: np.ndarray,
    steps: int,
) -> GainSchedule:
    g_dim, w_dim = basis.g_dim, basis.layout.w_dim
    gains = np.zeros((steps, g_dim, w_dim))
    priors = np.zeros((steps, g_dim, g_dim))
    posts = np.zeros((steps + 1, g_dim, g_dim))
    posts[0] = symmetrize(P0)
    for k in range(steps):
        priors[k] = covariance_predict(dyn, posts[k], noise)
        gains[k], posts[k + 1] = gain_and_update(basis, priors[k], noise)
    return GainSchedule(gains=gains, P_prior=priors, P_post=posts)


def filter_step(
    dyn: ParamDynamics,
    basis: BehaviorBasis,
    noise: NoiseModel,
    state: FilterState,
    g_prior: np.ndarray,
    w_measured: np.ndarray,
) -> FilterState:
    """Covariance predict, gain, and posterior update for one step."""
    P_prior = covariance_predict(dyn, state.P_post, noise)
    K, P_post = gain_and_update(basis, P_prior, noise)
    g_post = posterior_update(basis, g_prior, K, w_measured)
    return FilterState(g_hat=g_post, P_post=P_post, k=state.k + 1)
