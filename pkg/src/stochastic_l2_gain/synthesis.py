"""Controller synthesis for probabilistic finite L2-gain stabilization.

Three program families are built on top of the filter's steady state:
general mean (time-varying forecast of 𝔼[d_k]), constant mean d̄ and zero
mean. Each feasible solution is assembled into an immutable
ControllerDesign carrying the closed-loop prior maps, the storage matrix and
the verified block margins.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field, replace
from typing import Mapping, Optional, Sequence, Union

import numpy as np

from . import sdp
from .backends.base import ConicBackend
from .behavior import BehaviorBasis
from .errors import (
    CertificateError,
    IllConditionedError,
    InvalidInputError,
    UndefinedRhoError,
)
from .estimator import NoiseModel, SteadyState
from .models import DesignMode, SolveStatus
from .numerics import min_eigenvalue, psd_sqrt, symmetrize
from .paramdyn import ParamDynamics

logger = logging.getLogger(__name__)

STRICT_MARGIN = 1e-6  # W ⪰ STRICT_MARGIN·I stands in for W ≻ 0
W_COND_MAX = 1e10
STORAGE_TOL = 1e-8
GAMMA_ROUND_UP = 1e-2  # relative raise of optimized γ² before the interior re-solve

GammaArg = Optional[float]  # None makes γ² a decision variable


# =============================================================================
# Gain Profile
# =============================================================================


@dataclass(frozen=True)
class GainProfile:
    """γ1², γ2² and the weighting ρ that combines them into one failure bound."""

    gamma1_sq: float
    gamma2_sq: float
    rho: float

    def __post_init__(self) -> None:
        if self.gamma1_sq < 0 or self.gamma2_sq < 0:
            raise InvalidInputError("gamma1_sq and gamma2_sq must be nonnegative")
        if not 0.0 <= self.rho <= 1.0:
            raise InvalidInputError(f"rho must lie in [0, 1], got {self.rho}")

    @property
    def weighted_sq(self) -> float:
        """ρ·γ1² + (1−ρ)·γ2²."""
        return self.rho * self.gamma1_sq + (1.0 - self.rho) * self.gamma2_sq

    def effective_bound(self, gamma: float) -> float:
        """Failure probability bound (ρ·γ1² + (1−ρ)·γ2²)/γ² for the gain level γ."""
        if gamma <= 0:
            raise InvalidInputError("gamma must be positive")
        return self.weighted_sq / gamma**2

    def critical_gamma(self) -> float:
        """γ at which the bound reaches one."""
        return math.sqrt(self.weighted_sq)


def compute_rho(d_mean: np.ndarray, S_d: np.ndarray) -> float:
    """Weighting ρ between mean energy and uncertainty.

    A vector is a constant mean d̄ and gives ‖d̄‖²/(tr S_d + ‖d̄‖²). A (T, q)
    array is a forecast sequence and gives the finite-horizon average
    Σ‖𝔼d_k‖² / (T·tr S_d + Σ‖𝔼d_k‖²).
    """
    arr = np.asarray(d_mean, dtype=float)
    if not np.all(np.isfinite(arr)):
        raise InvalidInputError("Disturbance mean must be finite")
    trace_S = float(np.trace(np.atleast_2d(S_d))) if np.size(S_d) else 0.0
    if arr.ndim <= 1:
        energy = float(arr @ arr) if arr.size else 0.0
        denom = trace_S + energy
    else:
        energy = float(np.sum(arr**2))
        denom = arr.shape[0] * trace_S + energy
    if denom <= 0.0:
        raise UndefinedRhoError("rho is undefined: tr(S_d) and the mean energy are both zero")
    return energy / denom


def corollary1_gammas(gamma: float, p: float) -> tuple[float, float]:
    """γ1² = γ2² = p·γ², which makes the failure bound equal to p for any ρ."""
    if gamma <= 0:
        raise InvalidInputError("gamma must be positive")
    if not 0.0 < p <= 1.0:
        raise InvalidInputError(f"p must lie in (0, 1], got {p}")
    value = p * gamma**2
    return value, value


def output_error_floor(basis: BehaviorBasis, ss: SteadyState) -> float:
    """tr(Π_y F 𝒫_prior Fᵀ Π_yᵀ), a lower bound on tr(X) in every program.

    The offset block gives tr X ≥ tr(W⁻¹𝒩) + tr(Π_y F 𝒫 Fᵀ Π_yᵀ), the
    dissipation block gives W⁻¹ ⪰ Fᵀ Π_yᵀ Π_y F, and 𝒫 + 𝒩 = 𝒫_prior holds
    at the steady state.
    """
    return float(np.trace(basis.Pi_y_F @ ss.P_prior @ basis.Pi_y_F.T))


def gamma2_floor(basis: BehaviorBasis, ss: SteadyState, noise: NoiseModel) -> float:
    """Smallest γ2² the general and zero-mean trace budgets can admit."""
    trace_S_d = float(np.trace(noise.S_d)) if noise.S_d.size else 0.0
    floor = output_error_floor(basis, ss)
    if trace_S_d <= 0.0:
        return math.inf if floor > 0.0 else 0.0
    return floor / trace_S_d


# =============================================================================
# Program Builders
# =============================================================================


@dataclass(frozen=True)
class _Shared:
    """Constant pieces every program needs."""

    g_dim: int
    m: int
    q: int
    p: int
    N_half: np.ndarray
    P_half: np.ndarray
    Pi_y_F: np.ndarray
    trace_S_d: float


def _shared(dyn: ParamDynamics, basis: BehaviorBasis, ss: SteadyState, noise: NoiseModel) -> _Shared:
    lay = basis.layout
    noise.check_layout(lay)
    if ss.P.shape != (basis.g_dim, basis.g_dim):
        raise InvalidInputError("Steady state does not match the basis dimension")
    return _Shared(
        g_dim=basis.g_dim,
        m=lay.m,
        q=lay.q,
        p=lay.p,
        N_half=psd_sqrt(ss.N_term),
        P_half=psd_sqrt(ss.P),
        Pi_y_F=basis.Pi_y_F,
        trace_S_d=float(np.trace(noise.S_d)) if noise.S_d.size else 0.0,
    )


def _gamma(prog: sdp.ConicProgram, name: str, value: GammaArg) -> Union[float, sdp.Variable]:
    if value is None:
        v = prog.add_variable(name, (1, 1))
        prog.add_nonnegative(f"{name}_nonnegative", sdp.var(v))
        return v
    if value < 0:
        raise InvalidInputError(f"{name} must be nonnegative")
    return float(value)


def _times(gamma: Union[float, sdp.Variable], coeff: np.ndarray) -> sdp.AffineExpr:
    if isinstance(gamma, sdp.Variable):
        return sdp.scaled(gamma, coeff)
    return sdp.const(gamma * np.atleast_2d(coeff))


def _add_positive_definite(prog: sdp.ConicProgram, W: sdp.Variable, strict_margin: float) -> None:
    prog.add_psd("positive_definite", [[sdp.var(W) - strict_margin * np.eye(W.shape[0])]])


def _add_offset_block(prog: sdp.ConicProgram, X: sdp.Variable, W: sdp.Variable, sh: _Shared) -> None:
    """[[X, *, *], [𝒩^½, W, *], [Π_y F 𝒫^½, 0, I]] ⪰ 0."""
    prog.add_psd(
        "offset",
        [
            [sdp.var(X)],
            [sdp.const(sh.N_half), sdp.var(W)],
            [sdp.const(sh.Pi_y_F @ sh.P_half), None, sdp.const(np.eye(sh.p))],
        ],
    )


def _add_trace_budget(
    prog: sdp.ConicProgram, X: sdp.Variable, gamma2: Union[float, sdp.Variable], sh: _Shared
) -> None:
    """γ2²·tr(S_d) − tr(X) ≥ 0."""
    prog.add_nonnegative("trace_budget", _times(gamma2, [[sh.trace_S_d]]) - sdp.trace(X))


def _closed_loop_entry(dyn: ParamDynamics, W: sdp.Variable, Y: sdp.Variable) -> sdp.AffineExpr:
    """F_p W + F_z Y."""
    return dyn.F_p @ sdp.var(W) + dyn.F_z @ sdp.var(Y)


def build_theorem1(
    dyn: ParamDynamics,
    basis: BehaviorBasis,
    ss: SteadyState,
    noise: NoiseModel,
    gamma1_sq: GammaArg,
    gamma2_sq: GammaArg,
    strict_margin: float = STRICT_MARGIN,
) -> sdp.ConicProgram:
    """General-mean program over W, X, Y_g, K_d."""
    sh = _shared(dyn, basis, ss, noise)
    prog = sdp.ConicProgram()
    W = prog.add_variable("W", (sh.g_dim, sh.g_dim), symmetric=True)
    X = prog.add_variable("X", (sh.g_dim, sh.g_dim), symmetric=True)
    Y = prog.add_variable("Y", (sh.m, sh.g_dim))
    g1 = _gamma(prog, "gamma1_sq", gamma1_sq)
    g2 = _gamma(prog, "gamma2_sq", gamma2_sq)

    _add_positive_definite(prog, W, strict_margin)
    _add_trace_budget(prog, X, g2, sh)
    _add_offset_block(prog, X, W, sh)

    output = sh.Pi_y_F @ sdp.var(W)
    if sh.q:
        K_d = prog.add_variable("K_d", (sh.m, sh.q))
        forcing = sdp.const(dyn.F_f) + dyn.F_z @ sdp.var(K_d)
        grid = [
            [sdp.var(W)],
            [None, _times(g1, np.eye(sh.q))],
            [output, None, sdp.const(np.eye(sh.p))],
            [_closed_loop_entry(dyn, W, Y), forcing, None, sdp.var(W)],
        ]
    else:
        grid = [
            [sdp.var(W)],
            [output, sdp.const(np.eye(sh.p))],
            [_closed_loop_entry(dyn, W, Y), None, sdp.var(W)],
        ]
    prog.add_psd("dissipation", grid)
    return prog


def build_theorem2(
    dyn: ParamDynamics,
    basis: BehaviorBasis,
    ss: SteadyState,
    noise: NoiseModel,
    d_bar: np.ndarray,
    gamma1_sq: GammaArg,
    gamma2_sq: GammaArg,
    strict_margin: float = STRICT_MARGIN,
) -> sdp.ConicProgram:
    """Constant-mean program over W, X, Y, ξ."""
    sh = _shared(dyn, basis, ss, noise)
    d_bar = np.asarray(d_bar, dtype=float).reshape(-1)
    if d_bar.shape != (sh.q,):
        raise InvalidInputError(f"d_bar must have {sh.q} entries, got {d_bar.size}")

    prog = sdp.ConicProgram()
    W = prog.add_variable("W", (sh.g_dim, sh.g_dim), symmetric=True)
    X = prog.add_variable("X", (sh.g_dim, sh.g_dim), symmetric=True)
    Y = prog.add_variable("Y", (sh.m, sh.g_dim))
    xi = prog.add_variable("xi", (sh.m, 1))
    g1 = _gamma(prog, "gamma1_sq", gamma1_sq)
    g2 = _gamma(prog, "gamma2_sq", gamma2_sq)

    _add_positive_definite(prog, W, strict_margin)
    _add_offset_block(prog, X, W, sh)

    phi = _times(g1, [[float(d_bar @ d_bar)]]) + _times(g2, [[sh.trace_S_d]]) - sdp.trace(X)
    offset = sdp.const((dyn.F_f @ d_bar).reshape(-1, 1)) + dyn.F_z @ sdp.var(xi)
    prog.add_psd(
        "dissipation",
        [
            [phi],
            [None, sdp.var(W)],
            [None, sh.Pi_y_F @ sdp.var(W), sdp.const(np.eye(sh.p))],
            [offset, _closed_loop_entry(dyn, W, Y), None, sdp.var(W)],
        ],
    )
    return prog


def build_zero_mean(
    dyn: ParamDynamics,
    basis: BehaviorBasis,
    ss: SteadyState,
    noise: NoiseModel,
    gamma2_sq: GammaArg,
    strict_margin: float = STRICT_MARGIN,
) -> sdp.ConicProgram:
    """Zero-mean program over W, X, Y: stabilization of the expected behavior."""
    sh = _shared(dyn, basis, ss, noise)
    prog = sdp.ConicProgram()
    W = prog.add_variable("W", (sh.g_dim, sh.g_dim), symmetric=True)
    X = prog.add_variable("X", (sh.g_dim, sh.g_dim), symmetric=True)
    Y = prog.add_variable("Y", (sh.m, sh.g_dim))
    g2 = _gamma(prog, "gamma2_sq", gamma2_sq)

    _add_positive_definite(prog, W, strict_margin)
    _add_trace_budget(prog, X, g2, sh)
    _add_offset_block(prog, X, W, sh)
    prog.add_psd(
        "dissipation",
        [
            [sdp.var(W)],
            [sh.Pi_y_F @ sdp.var(W), sdp.const(np.eye(sh.p))],
            [_closed_loop_entry(dyn, W, Y), None, sdp.var(W)],
        ],
    )
    return prog


# =============================================================================
# Controller Design
# =============================================================================


@dataclass(frozen=True)
class ControllerDesign:
    """A verified solution and the closed-loop prior maps it induces.

    The prior recursion is ĝ_{k|k-1} = A_cl ĝ_{k-1|k-1} + forcing, where the
    forcing is B_cl 𝔼[d_k] in general mode, the constant vector
    F_f d̄ + F_z ξ in constant-mean mode and absent in zero-mean mode.
    """

    mode: DesignMode
    W: np.ndarray
    X: np.ndarray
    Y: np.ndarray
    M: np.ndarray
    A_cl: np.ndarray
    B_cl: Optional[np.ndarray]
    P_storage: np.ndarray
    profile: GainProfile
    K_d: Optional[np.ndarray] = None
    xi: Optional[np.ndarray] = None
    d_bar: Optional[np.ndarray] = None
    trace_S_d: float = 0.0
    block_margins: Mapping[str, float] = field(default_factory=dict)
    linear_margins: Mapping[str, float] = field(default_factory=dict)
    objective: Optional[float] = None

    @property
    def feedback_gain(self) -> np.ndarray:
        """K_g = Y W⁻¹."""
        return self.Y @ self.M

    @property
    def g_dim(self) -> int:
        return self.W.shape[0]

    @property
    def storage_margin(self) -> float:
        return min_eigenvalue(self.P_storage)

    @property
    def spectral_radius(self) -> float:
        return float(np.max(np.abs(np.linalg.eigvals(self.A_cl))))

    def virtual_input(self, g_post: np.ndarray, d_mean: Optional[np.ndarray] = None) -> np.ndarray:
        """ẑ_k from the previous posterior and the mean forecast."""
        z = self.feedback_gain @ np.asarray(g_post, dtype=float)
        if self.mode == DesignMode.GENERAL and self.K_d is not None and d_mean is not None:
            z = z + self.K_d @ np.asarray(d_mean, dtype=float)
        elif self.mode == DesignMode.CONSTANT and self.xi is not None:
            z = z + self.xi
        return z

    def prior(
        self,
        dyn: ParamDynamics,
        g_post: np.ndarray,
        d_mean: Optional[np.ndarray] = None,
    ) -> np.ndarray:
        """ĝ_{k|k-1} = F_p ĝ_{k-1|k-1} + F_f 𝔼[d_k] + F_z ẑ_k."""
        q = dyn.F_f.shape[1]
        if self.mode == DesignMode.CONSTANT and self.d_bar is not None:
            d = self.d_bar
        elif d_mean is None or self.mode == DesignMode.ZERO:
            d = np.zeros(q)
        else:
            d = np.asarray(d_mean, dtype=float)
        return dyn.F_p @ g_post + dyn.F_f @ d + dyn.F_z @ self.virtual_input(g_post, d)


def _invert_w(W: np.ndarray, cond_max: float) -> np.ndarray:
    vals, vecs = np.linalg.eigh(symmetrize(W))
    if vals[0] <= 0.0:
        raise IllConditionedError(f"W is not positive definite (smallest eigenvalue {vals[0]:.3e})", condition=math.inf)
    condition = float(vals[-1] / vals[0])
    if condition > cond_max:
        raise IllConditionedError(
            f"W has condition number {condition:.3e} > {cond_max:.1e}", condition=condition
        )
    return symmetrize((vecs / vals) @ vecs.T)


def assemble_controller(
    solution: sdp.ConicSolution,
    mode: DesignMode,
    dyn: ParamDynamics,
    basis: BehaviorBasis,
    ss: SteadyState,
    noise: NoiseModel,
    d_bar: Optional[np.ndarray] = None,
    rho: Optional[float] = None,
    feas_tol: float = sdp.DEFAULT_FEAS_TOL,
    w_cond_max: float = W_COND_MAX,
) -> ControllerDesign:
    """Turn a feasible solution into a ControllerDesign and re-check its certificates."""
    if not solution.feasible:
        raise CertificateError(f"Cannot assemble a controller from a {solution.status.value} solution")
    bad = {name: m for name, m in solution.block_margins.items() if m < -feas_tol}
    bad.update({name: m for name, m in solution.linear_margins.items() if m < -feas_tol})
    if bad:
        raise CertificateError(f"Solution violates constraints: {bad}")

    W = symmetrize(solution.value("W"))
    X = symmetrize(solution.value("X"))
    Y = solution.value("Y")
    M = _invert_w(W, w_cond_max)
    K_g = Y @ M
    A_cl = dyn.F_p + dyn.F_z @ K_g

    K_d = xi = None
    B_cl = None
    if mode == DesignMode.GENERAL and "K_d" in solution.assignments:
        K_d = solution.value("K_d")
        B_cl = dyn.F_f + dyn.F_z @ K_d
    elif mode == DesignMode.CONSTANT:
        if d_bar is None:
            raise InvalidInputError("constant-mean mode needs d_bar")
        d_bar = np.asarray(d_bar, dtype=float).reshape(-1)
        xi = solution.value("xi").reshape(-1)
        B_cl = dyn.F_f @ d_bar + dyn.F_z @ xi

    P_storage = symmetrize(M - basis.Pi_y_F.T @ basis.Pi_y_F)
    storage_margin = min_eigenvalue(P_storage)
    if storage_margin < -STORAGE_TOL * max(1.0, float(np.linalg.norm(M, 2))):
        raise CertificateError(f"Storage matrix is not PSD (smallest eigenvalue {storage_margin:.3e})")

    gamma1_sq = solution.scalar("gamma1_sq") if "gamma1_sq" in solution.assignments else None
    gamma2_sq = solution.scalar("gamma2_sq") if "gamma2_sq" in solution.assignments else None
    trace_S_d = float(np.trace(noise.S_d)) if noise.S_d.size else 0.0
    if rho is None:
        rho = compute_rho(d_bar, noise.S_d) if mode == DesignMode.CONSTANT else 0.0
    profile = GainProfile(
        gamma1_sq=0.0 if gamma1_sq is None else max(gamma1_sq, 0.0),
        gamma2_sq=0.0 if gamma2_sq is None else max(gamma2_sq, 0.0),
        rho=0.0 if mode == DesignMode.ZERO else rho,
    )

    design = ControllerDesign(
        mode=mode,
        W=W,
        X=X,
        Y=Y,
        M=M,
        A_cl=A_cl,
        B_cl=B_cl,
        P_storage=P_storage,
        profile=profile,
        K_d=K_d,
        xi=xi,
        d_bar=d_bar if mode == DesignMode.CONSTANT else None,
        trace_S_d=trace_S_d,
        block_margins=dict(solution.block_margins),
        linear_margins=dict(solution.linear_margins),
        objective=solution.objective_value,
    )
    logger.info(
        "Assembled %s controller: spectral radius %.4f, storage margin %.3e",
        mode.value,
        design.spectral_radius,
        storage_margin,
    )
    return design


def with_gammas(design: ControllerDesign, gamma1_sq: float, gamma2_sq: float) -> ControllerDesign:
    """Copy of a design with the fixed γ values it was solved for."""
    profile = GainProfile(gamma1_sq=gamma1_sq, gamma2_sq=gamma2_sq, rho=design.profile.rho)
    return replace(design, profile=profile)


# =============================================================================
# Certificates
# =============================================================================


def nominal_dissipation_margin(
    design: ControllerDesign,
    basis: BehaviorBasis,
    g: np.ndarray,
    d_mean: Optional[np.ndarray] = None,
) -> float:
    """Pre-Schur dissipation inequality at one (ĝ, 𝔼[d]) pair; nonnegative when certified.

    General and zero mean: ‖ĝ‖²_{M−FᵀΠ_yᵀΠ_yF} + γ1²‖𝔼d‖² − ‖A_cl ĝ + B_cl 𝔼d‖²_M.
    Constant mean: ‖ĝ‖²_{M−FᵀΠ_yᵀΠ_yF} − ‖A_cl ĝ + F_f d̄ + F_z ξ‖²_M + φ.
    """
    g = np.asarray(g, dtype=float)
    storage = float(g @ design.P_storage @ g)
    nxt = design.A_cl @ g
    supply = 0.0
    if design.mode == DesignMode.GENERAL and design.B_cl is not None and d_mean is not None:
        d = np.asarray(d_mean, dtype=float)
        nxt = nxt + design.B_cl @ d
        supply = design.profile.gamma1_sq * float(d @ d)
    elif design.mode == DesignMode.CONSTANT and design.B_cl is not None:
        d_bar = design.d_bar if design.d_bar is not None else np.zeros(0)
        nxt = nxt + design.B_cl
        supply = (
            design.profile.gamma1_sq * float(d_bar @ d_bar)
            + design.profile.gamma2_sq * design.trace_S_d
            - float(np.trace(design.X))
        )
    return storage + supply - float(nxt @ design.M @ nxt)


def offset_margin(design: ControllerDesign, basis: BehaviorBasis, ss: SteadyState) -> float:
    """Smallest eigenvalue of X − 𝒩^½ M 𝒩^½ − 𝒫^½ FᵀΠ_yᵀΠ_yF 𝒫^½."""
    N_half = psd_sqrt(ss.N_term)
    P_half = psd_sqrt(ss.P)
    output = basis.Pi_y_F @ P_half
    slack = design.X - N_half @ design.M @ N_half - output.T @ output
    return min_eigenvalue(symmetrize(slack))


def expected_dissipation_step(
    design: ControllerDesign,
    basis: BehaviorBasis,
    g_prev: np.ndarray,
    d_mean: Optional[np.ndarray] = None,
) -> tuple[np.ndarray, float]:
    """Advance the expected parameterizer one step and return the dissipation margin.

    The margin is −‖𝔼y_k‖² + γ1²‖𝔼d_k‖² − (‖𝔼g_k‖²_P − ‖𝔼g_{k−1}‖²_P) with P the
    storage matrix; a certified general or zero-mean design keeps it nonnegative.
    """
    g_prev = np.asarray(g_prev, dtype=float)
    g_next = design.A_cl @ g_prev
    supply = 0.0
    if design.B_cl is not None and design.mode == DesignMode.GENERAL and d_mean is not None:
        d = np.asarray(d_mean, dtype=float)
        g_next = g_next + design.B_cl @ d
        supply = design.profile.gamma1_sq * float(d @ d)
    elif design.B_cl is not None and design.mode == DesignMode.CONSTANT:
        g_next = g_next + design.B_cl
    y = basis.Pi_y_F @ g_next
    P = design.P_storage
    increase = float(g_next @ P @ g_next - g_prev @ P @ g_prev)
    return g_next, -float(y @ y) + supply - increase


# =============================================================================
# Chance Constraint
# =============================================================================


@dataclass(frozen=True)
class ChanceConstraint:
    """[[ψ, *], [F_p ĝ + F_f 𝔼[d] + F_z ẑ, W]] at one state, for online optimization."""

    psi: float
    offset: np.ndarray  # F_p ĝ + F_f 𝔼[d]
    F_z: np.ndarray
    W: np.ndarray
    z_hat: np.ndarray

    @property
    def matrix(self) -> np.ndarray:
        v = self.offset + self.F_z @ self.z_hat
        g = self.W.shape[0]
        out = np.zeros((g + 1, g + 1))
        out[0, 0] = self.psi
        out[1:, 0] = v
        out[0, 1:] = v
        out[1:, 1:] = self.W
        return symmetrize(out)

    @property
    def margin(self) -> float:
        return min_eigenvalue(self.matrix)

    @property
    def admissible(self) -> bool:
        """False when ψ < 0, in which case no ẑ can satisfy the block."""
        return self.psi >= 0.0

    def feasible(self, tol: float = 1e-9) -> bool:
        return self.admissible and self.margin >= -tol * max(1.0, abs(self.psi))

    def as_affine(self, prog: sdp.ConicProgram, name: str = "z_hat") -> sdp.Variable:
        """Register ẑ as a variable of prog and add the block as a PSD constraint."""
        z = prog.add_variable(name, (self.F_z.shape[1], 1))
        prog.add_psd(
            "chance_constraint",
            [
                [sdp.const([[self.psi]])],
                [sdp.const(self.offset.reshape(-1, 1)) + self.F_z @ sdp.var(z), sdp.const(self.W)],
            ],
        )
        return z


def chance_constraint_block(
    design: ControllerDesign,
    dyn: ParamDynamics,
    basis: BehaviorBasis,
    ss: SteadyState,
    g_post_prev: np.ndarray,
    d_mean: np.ndarray,
    S_d: np.ndarray,
    gamma: float,
    p: float,
    z_hat: np.ndarray,
) -> ChanceConstraint:
    """Online chance-constraint block with the p·γ² supply and the steady-state 𝒫."""
    g = np.asarray(g_post_prev, dtype=float)
    d = np.asarray(d_mean, dtype=float).reshape(-1)
    trace_S = float(np.trace(S_d)) if np.size(S_d) else 0.0
    output_gram = basis.Pi_y_F.T @ basis.Pi_y_F
    psi = (
        float(g @ design.P_storage @ g)
        + p * gamma**2 * (float(d @ d) + trace_S)
        - float(np.trace(design.M @ ss.N_term + output_gram @ ss.P))
    )
    return ChanceConstraint(
        psi=psi,
        offset=dyn.F_p @ g + dyn.F_f @ d,
        F_z=dyn.F_z,
        W=design.W,
        z_hat=np.asarray(z_hat, dtype=float).reshape(-1),
    )


# =============================================================================
# Design Drivers
# =============================================================================


@dataclass(frozen=True)
class SynthesisResult:
    status: SolveStatus
    design: Optional[ControllerDesign]
    solution: sdp.ConicSolution
    program: sdp.ConicProgram

    @property
    def feasible(self) -> bool:
        return self.design is not None


def design(
    mode: DesignMode,
    dyn: ParamDynamics,
    basis: BehaviorBasis,
    ss: SteadyState,
    noise: NoiseModel,
    gamma1_sq: GammaArg = None,
    gamma2_sq: GammaArg = None,
    d_bar: Optional[np.ndarray] = None,
    rho: Optional[float] = None,
    optimize: bool = False,
    backend: Optional[ConicBackend] = None,
    feas_tol: float = sdp.DEFAULT_FEAS_TOL,
    max_iterations: int = sdp.DEFAULT_MAX_ITERATIONS,
    strict_margin: float = STRICT_MARGIN,
    w_cond_max: float = W_COND_MAX,
) -> SynthesisResult:
    """Build, solve and assemble the program for one mode.

    optimize (constant mean only) makes γ1², γ2² variables and minimizes
    ρ·γ1² + (1−ρ)·γ2²; otherwise both must be given (γ1² is unused in zero mode).
    """
    if optimize and mode != DesignMode.CONSTANT:
        raise InvalidInputError("gamma optimization is only available for constant-mean designs")
    if not optimize and gamma2_sq is None:
        raise InvalidInputError("gamma2_sq is required unless gammas are optimized")
    if not optimize and mode != DesignMode.ZERO and gamma1_sq is None:
        raise InvalidInputError("gamma1_sq is required unless gammas are optimized")

    if mode == DesignMode.GENERAL:
        prog = build_theorem1(dyn, basis, ss, noise, gamma1_sq, gamma2_sq, strict_margin)
    elif mode == DesignMode.CONSTANT:
        if d_bar is None:
            raise InvalidInputError("constant-mean mode needs d_bar")
        if optimize:
            gamma1_sq = gamma2_sq = None
        prog = build_theorem2(dyn, basis, ss, noise, d_bar, gamma1_sq, gamma2_sq, strict_margin)
        if optimize:
            weight = compute_rho(d_bar, noise.S_d)
            prog.minimize(
                sdp.scaled(prog.variables["gamma1_sq"], [[weight]])
                + sdp.scaled(prog.variables["gamma2_sq"], [[1.0 - weight]])
            )
    else:
        prog = build_zero_mean(dyn, basis, ss, noise, gamma2_sq, strict_margin)

    if not optimize:
        _warn_below_floor(mode, basis, ss, noise, gamma1_sq, gamma2_sq, d_bar)

    solution = sdp.solve(prog, feas_tol=feas_tol, max_iterations=max_iterations, backend=backend)
    if optimize:
        return _interior_optimum(
            solution,
            prog,
            dyn,
            basis,
            ss,
            noise,
            d_bar,
            backend=backend,
            feas_tol=feas_tol,
            max_iterations=max_iterations,
            strict_margin=strict_margin,
            w_cond_max=w_cond_max,
        )
    if not solution.feasible:
        logger.info("%s design is %s", mode.value, solution.status.value)
        return SynthesisResult(solution.status, None, solution, prog)

    result = assemble_controller(
        solution, mode, dyn, basis, ss, noise, d_bar=d_bar, rho=rho, feas_tol=feas_tol, w_cond_max=w_cond_max
    )
    if not optimize:
        result = with_gammas(result, 0.0 if gamma1_sq is None else gamma1_sq, gamma2_sq)
    return SynthesisResult(solution.status, result, solution, prog)


def _warn_below_floor(
    mode: DesignMode,
    basis: BehaviorBasis,
    ss: SteadyState,
    noise: NoiseModel,
    gamma1_sq: GammaArg,
    gamma2_sq: GammaArg,
    d_bar: Optional[np.ndarray],
) -> None:
    trace_S_d = float(np.trace(noise.S_d)) if noise.S_d.size else 0.0
    budget = (gamma2_sq or 0.0) * trace_S_d
    if mode == DesignMode.CONSTANT and d_bar is not None:
        d = np.asarray(d_bar, dtype=float).reshape(-1)
        budget += (gamma1_sq or 0.0) * float(d @ d)
    floor = output_error_floor(basis, ss)
    if budget < floor:
        logger.warning(
            "%s design cannot be feasible: gamma budget %.4g is below the output error floor %.4g",
            mode.value,
            budget,
            floor,
        )


def _interior_optimum(
    solution: sdp.ConicSolution,
    prog: sdp.ConicProgram,
    dyn: ParamDynamics,
    basis: BehaviorBasis,
    ss: SteadyState,
    noise: NoiseModel,
    d_bar: np.ndarray,
    **options,
) -> SynthesisResult:
    """Re-solve at the optimal γ's raised by GAMMA_ROUND_UP, maximizing the eigenvalue floor.

    An objective solve ends on the boundary of the feasible set, where the
    solver's own tolerance can leave blocks slightly indefinite.
    """
    if solution.backend_status != SolveStatus.FEASIBLE:
        logger.info("constant design optimization is %s", solution.status.value)
        return SynthesisResult(solution.status, None, solution, prog)

    def raised(name: str) -> float:
        return max(solution.scalar(name), 0.0) * (1.0 + GAMMA_ROUND_UP) + GAMMA_ROUND_UP**2

    gamma1_sq, gamma2_sq = raised("gamma1_sq"), raised("gamma2_sq")
    logger.info(
        "Optimized gammas %.6g, %.6g (margin %.3e); re-solving at %.6g, %.6g",
        solution.scalar("gamma1_sq"),
        solution.scalar("gamma2_sq"),
        solution.min_eig_margin,
        gamma1_sq,
        gamma2_sq,
    )
    pinned = design(
        DesignMode.CONSTANT,
        dyn,
        basis,
        ss,
        noise,
        gamma1_sq=gamma1_sq,
        gamma2_sq=gamma2_sq,
        d_bar=d_bar,
        **options,
    )
    if pinned.design is None:
        logger.warning("Raised gammas are not strictly feasible (%s)", pinned.status.value)
        return pinned
    return replace(pinned, design=replace(pinned.design, objective=pinned.design.profile.weighted_sq))


def optimize_gammas(
    dyn: ParamDynamics,
    basis: BehaviorBasis,
    ss: SteadyState,
    noise: NoiseModel,
    d_bar: np.ndarray,
    **kwargs,
) -> SynthesisResult:
    """Constant-mean design minimizing ρ·γ1² + (1−ρ)·γ2²."""
    return design(DesignMode.CONSTANT, dyn, basis, ss, noise, d_bar=d_bar, optimize=True, **kwargs)


def bisect_gamma2(
    dyn: ParamDynamics,
    basis: BehaviorBasis,
    ss: SteadyState,
    noise: NoiseModel,
    lo: float = 0.0,
    hi: Optional[float] = None,
    rel_tol: float = 1e-3,
    max_steps: int = 60,
    **kwargs,
) -> tuple[float, Optional[SynthesisResult]]:
    """Smallest feasible γ2² of the zero-mean program, up to rel_tol.

    Returns (γ2², result at that value); result is None when no upper bound
    could be found by doubling.
    """

    def attempt(value: float) -> SynthesisResult:
        return design(DesignMode.ZERO, dyn, basis, ss, noise, gamma2_sq=value, **kwargs)

    best: Optional[SynthesisResult] = None
    if hi is None:
        hi = max(1.0, 2.0 * lo)
        for _ in range(max_steps):
            best = attempt(hi)
            if best.feasible:
                break
            lo, hi = hi, 2.0 * hi
        else:
            logger.warning("No feasible gamma2_sq found below %.3g", hi)
            return math.inf, None
    else:
        best = attempt(hi)
        if not best.feasible:
            return math.inf, None

    for _ in range(max_steps):
        if hi - lo <= rel_tol * max(hi, 1e-12):
            break
        mid = 0.5 * (lo + hi)
        trial = attempt(mid)
        if trial.feasible:
            hi, best = mid, trial
        else:
            lo = mid
    logger.info("Bisection bracket for gamma2_sq: [%.6g, %.6g]", lo, hi)
    return hi, best


@dataclass(frozen=True)
class PiecewiseDesign:
    """Designs for a finite set of constant mean values, switched by the forecast."""

    designs: Mapping[tuple[float, ...], ControllerDesign]
    atol: float = 1e-9

    @classmethod
    def build(
        cls,
        levels: Sequence[np.ndarray],
        dyn: ParamDynamics,
        basis: BehaviorBasis,
        ss: SteadyState,
        noise: NoiseModel,
        gamma1_sq: GammaArg = None,
        gamma2_sq: GammaArg = None,
        optimize: bool = False,
        **kwargs,
    ) -> "PiecewiseDesign":
        designs: dict[tuple[float, ...], ControllerDesign] = {}
        for level in levels:
            key = tuple(float(v) for v in np.asarray(level, dtype=float).reshape(-1))
            result = design(
                DesignMode.CONSTANT,
                dyn,
                basis,
                ss,
                noise,
                gamma1_sq=gamma1_sq,
                gamma2_sq=gamma2_sq,
                d_bar=np.array(key),
                optimize=optimize,
                **kwargs,
            )
            if result.design is None:
                raise CertificateError(f"No feasible constant-mean design for d̄ = {key}")
            designs[key] = result.design
        return cls(designs=designs)

    def select(self, d_mean: np.ndarray) -> ControllerDesign:
        d = np.asarray(d_mean, dtype=float).reshape(-1)
        for key, item in self.designs.items():
            if np.allclose(d, key, atol=self.atol, rtol=0.0):
                return item
        raise InvalidInputError(f"No design for mean value {d.tolist()}")

    @property
    def worst_profile(self) -> GainProfile:
        return max((d.profile for d in self.designs.values()), key=lambda p: p.weighted_sq)
