"""Pydantic models for run configuration and emitted artifacts."""

from __future__ import annotations

import hashlib
import json
import tomllib
from datetime import datetime
from enum import Enum
from pathlib import Path
from typing import Optional, Union

from pydantic import BaseModel, Field, ValidationError, model_validator

from .errors import SchemaError


Matrix = list[list[float]]
MatrixOrDiagonal = Union[list[list[float]], list[float]]


# =============================================================================
# Enums
# =============================================================================


class DesignMode(str, Enum):
    """How the disturbance mean is treated during synthesis."""

    GENERAL = "general"  # time-varying forecast 𝔼[d_k], disturbance gain γ1 and offset gain γ2
    CONSTANT = "constant"  # known constant mean d̄
    ZERO = "zero"  # d̄ = 0, stabilization of the expected behavior


class GammaMode(str, Enum):
    """How γ1² and γ2² are chosen."""

    FIXED = "fixed"
    COROLLARY1 = "corollary1"  # γ1² = γ2² = p·γ²
    OPTIMIZE = "optimize"  # minimize ρ·γ1² + (1−ρ)·γ2² (constant mean only)


class SolveStatus(str, Enum):
    """Outcome of a conic solve."""

    FEASIBLE = "feasible"
    INFEASIBLE = "infeasible"
    MAX_ITERATIONS = "max_iterations"


class RolloutStatus(str, Enum):
    COMPLETED = "completed"
    DIVERGED = "diverged"  # ‖y_k‖ exceeded the overflow cap


class ForecastKind(str, Enum):
    ZERO = "zero"
    CONSTANT = "constant"
    SINUSOID_STEPS = "sinusoid_steps"
    PIECEWISE = "piecewise"


class RunStatus(str, Enum):
    """Status of a CLI run in the ledger."""

    RUNNING = "running"
    SUCCEEDED = "succeeded"
    INFEASIBLE = "infeasible"
    DIVERGED = "diverged"
    FAILED = "failed"


class EventType(str, Enum):
    """Type of event in the run ledger."""

    RUN_STARTED = "run_started"
    DATASET_WRITTEN = "dataset_written"
    BASIS_LEARNED = "basis_learned"
    ARE_SOLVED = "are_solved"
    DESIGN_SOLVED = "design_solved"
    CAMPAIGN_FINISHED = "campaign_finished"
    REPORT_WRITTEN = "report_written"
    CHECK_COMPLETED = "check_completed"
    ERROR = "error"


# =============================================================================
# Configuration
# =============================================================================


class SignalsConfig(BaseModel):
    """Channel counts, needed only when no kernel is given."""

    p: int = Field(ge=1)
    m: int = Field(ge=1)
    q: int = Field(default=0, ge=0)


class KernelConfig(BaseModel):
    """Lag-indexed kernel coefficients (index j multiplies the signal at k − j)."""

    R_y: list[Matrix]
    R_u: list[Matrix]
    R_d: list[Matrix] = Field(default_factory=list)

    @classmethod
    def example(cls) -> "KernelConfig":
        return cls(
            R_y=[[[4.29, -1.43], [-1.43, 2.14]], [[-4.5, 1.5], [-1.57, 2.36]]],
            R_u=[[[-1.11, -1.4], [-1.47, -1.45]], [[-0.65, 0.42], [0.024, -0.17]]],
            R_d=[[[-0.15, -0.12], [-0.11, -0.16]], [[0.0, 0.0], [0.0, 0.0]]],
        )

    @property
    def dims(self) -> tuple[int, int, int]:
        p = len(self.R_y[0])
        m = len(self.R_u[0][0]) if self.R_u and self.R_u[0] else 0
        q = len(self.R_d[0][0]) if self.R_d and self.R_d[0] and self.R_d[0][0] else 0
        return p, m, q


class NoiseConfig(BaseModel):
    """Covariances; a flat list is read as a diagonal."""

    S_d: MatrixOrDiagonal = Field(default_factory=list)
    S_u: MatrixOrDiagonal
    S_n: MatrixOrDiagonal

    @classmethod
    def example(cls) -> "NoiseConfig":
        return cls(S_d=[0.4, 0.35], S_u=[0.2, 0.1], S_n=[0.6, 0.2, 0.1, 0.5, 0.5, 0.3])

    @staticmethod
    def dim(value: MatrixOrDiagonal) -> int:
        return len(value)


class MixtureConfig(BaseModel):
    """Gaussian mixtures used for Δd, Δu and n."""

    components: int = Field(default=3, ge=1)
    mean_spread: float = Field(default=1.0, ge=0.0)  # relative to the target std
    covariance_jitter: float = Field(default=0.5, ge=0.0, lt=1.0)


class GammaConfig(BaseModel):
    mode: GammaMode = GammaMode.FIXED
    gamma1_sq: Optional[float] = Field(default=4.0, ge=0.0)
    gamma2_sq: Optional[float] = Field(default=4.0, ge=0.0)
    gamma: Optional[float] = Field(default=None, gt=0.0)
    p: Optional[float] = Field(default=None, gt=0.0, le=1.0)

    @model_validator(mode="after")
    def _check_mode(self) -> "GammaConfig":
        if self.mode == GammaMode.COROLLARY1 and (self.gamma is None or self.p is None):
            raise ValueError("corollary1 gamma mode needs both gamma and p")
        if self.mode == GammaMode.FIXED and self.gamma2_sq is None:
            raise ValueError("fixed gamma mode needs gamma2_sq")
        return self


class DisturbanceConfig(BaseModel):
    """Forecast of 𝔼[d_k] for the online loop and the design mode it implies."""

    mode: DesignMode = DesignMode.GENERAL
    d_bar: list[float] = Field(default_factory=lambda: [1.0, 1.0])
    # general mode forecast: offset + amplitude·sin(2πk/period + phase_j) + step_size·⌊k/step_every⌋ mod 2
    offset: float = 0.0
    amplitude: float = Field(default=1.0, ge=0.0)
    period: float = Field(default=25.0, gt=0.0)
    step_every: int = Field(default=40, ge=1)
    step_size: float = 0.5
    # piecewise-constant forecast: values switched every `hold` steps
    levels: list[list[float]] = Field(default_factory=list)
    hold: int = Field(default=50, ge=1)


class DataConfig(BaseModel):
    trajectories: int = Field(default=500, ge=1)
    length: int = Field(default=60, ge=1)  # T; each trajectory has T + 1 steps
    input_scale: float = Field(default=1.0, gt=0.0)
    max_retries: int = Field(default=5, ge=0)


class SimulationConfig(BaseModel):
    horizon: int = Field(default=100, ge=1)
    cohort: int = Field(default=2000, ge=1)
    campaigns: int = Field(default=1, ge=1)  # > 1 enables the outer test
    workers: int = Field(default=1, ge=1)
    overflow_cap: float = Field(default=1e9, gt=0.0)
    divergence_threshold: float = Field(default=0.0, ge=0.0, le=1.0)
    gamma_min: float = Field(default=1.0, gt=0.0)
    gamma_max: float = Field(default=10.0, gt=0.0)
    gamma_points: int = Field(default=51, ge=2)
    horizons: list[int] = Field(default_factory=lambda: [5, 20, 100])


class ToleranceConfig(BaseModel):
    rank_tol: float = Field(default=1e-9, gt=0.0)
    clamp_tol: float = Field(default=1e-8, gt=0.0)
    gap_tol: float = Field(default=10.0, gt=0.0)
    cond_max: float = Field(default=1e8, gt=0.0)
    null_gap: float = Field(default=0.5, gt=0.0, lt=1.0)
    are_tol: float = Field(default=1e-10, gt=0.0)
    max_iter: int = Field(default=10_000, ge=1)
    feas_tol: float = Field(default=1e-8, gt=0.0)
    strict_margin: float = Field(default=1e-6, gt=0.0)
    w_cond_max: float = Field(default=1e10, gt=0.0)
    solver_iterations: int = Field(default=500, ge=1)


class SeedConfig(BaseModel):
    data: int = Field(default=0, ge=0)
    simulation: int = Field(default=1, ge=0)
    mixture: int = Field(default=2, ge=0)


class RunConfig(BaseModel):
    """Everything a generate → design → simulate → report pipeline needs."""

    L: int = Field(default=4, ge=1)
    n_state: Optional[int] = Field(default=None, ge=0)  # None: derived from the kernel or detected
    auto_state: bool = False
    kernel: Optional[KernelConfig] = None
    signals: Optional[SignalsConfig] = None
    noise: NoiseConfig
    mixture: MixtureConfig = Field(default_factory=MixtureConfig)
    gamma: GammaConfig = Field(default_factory=GammaConfig)
    disturbance: DisturbanceConfig = Field(default_factory=DisturbanceConfig)
    data: DataConfig = Field(default_factory=DataConfig)
    simulation: SimulationConfig = Field(default_factory=SimulationConfig)
    tolerances: ToleranceConfig = Field(default_factory=ToleranceConfig)
    seeds: SeedConfig = Field(default_factory=SeedConfig)

    @model_validator(mode="after")
    def _check_consistency(self) -> "RunConfig":
        if self.kernel is None and self.signals is None:
            raise ValueError("either kernel or signals must be given")
        p, m, q = self.dims
        if self.kernel is not None and self.signals is not None:
            if (self.signals.p, self.signals.m, self.signals.q) != (p, m, q):
                raise ValueError("signals disagree with the kernel dimensions")
        expected = {"S_d": q, "S_u": m, "S_n": p + m + q}
        for name, dim in expected.items():
            got = NoiseConfig.dim(getattr(self.noise, name))
            if got != dim:
                raise ValueError(f"noise.{name} has dimension {got}, expected {dim}")
        if self.gamma.mode == GammaMode.OPTIMIZE and self.disturbance.mode != DesignMode.CONSTANT:
            raise ValueError("gamma optimization requires the constant disturbance mode")
        if self.disturbance.mode == DesignMode.CONSTANT and len(self.disturbance.d_bar) != q:
            raise ValueError(f"d_bar must have {q} entries")
        for level in self.disturbance.levels:
            if len(level) != q:
                raise ValueError(f"piecewise levels must have {q} entries")
        if self.simulation.gamma_max <= self.simulation.gamma_min:
            raise ValueError("gamma_max must exceed gamma_min")
        if self.gamma.mode == GammaMode.FIXED and self.disturbance.mode != DesignMode.ZERO:
            if self.gamma.gamma1_sq is None:
                raise ValueError("fixed gamma mode needs gamma1_sq outside zero mode")
        return self

    @property
    def dims(self) -> tuple[int, int, int]:
        if self.kernel is not None:
            return self.kernel.dims
        assert self.signals is not None
        return self.signals.p, self.signals.m, self.signals.q

    def config_hash(self) -> str:
        canonical = json.dumps(self.model_dump(mode="json"), sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(canonical.encode("utf-8")).hexdigest()[:16]

    @classmethod
    def example(cls, **overrides) -> "RunConfig":
        base = {
            "L": 4,
            "kernel": KernelConfig.example().model_dump(),
            "noise": NoiseConfig.example().model_dump(),
        }
        base.update(overrides)
        return cls.model_validate(base)

    @classmethod
    def from_file(cls, path: Union[str, Path]) -> "RunConfig":
        """Load a TOML or JSON configuration file."""
        path = Path(path)
        try:
            text = path.read_text(encoding="utf-8")
        except OSError as exc:
            raise SchemaError(f"cannot read config: {exc}", path=str(path)) from exc
        try:
            if path.suffix.lower() == ".json":
                raw = json.loads(text)
            else:
                raw = tomllib.loads(text)
        except (tomllib.TOMLDecodeError, json.JSONDecodeError) as exc:
            raise SchemaError(f"cannot parse config: {exc}", path=str(path)) from exc
        try:
            return cls.model_validate(raw)
        except ValidationError as exc:
            raise SchemaError(str(exc), path=str(path)) from exc


# =============================================================================
# Artifacts
# =============================================================================


class SeedManifest(BaseModel):
    """Seeds that reproduce every random stream of a run."""

    data: Optional[int] = None
    simulation: Optional[int] = None
    mixture: Optional[int] = None
    rollouts: list[int] = Field(default_factory=list)
    retries: int = 0

    def header(self) -> str:
        return ",".join(f"{k}={v}" for k, v in self.model_dump(exclude={"rollouts"}).items() if v is not None)


class GainProfileModel(BaseModel):
    gamma1_sq: Optional[float] = None
    gamma2_sq: float
    rho: float = Field(ge=0.0, le=1.0)


class DesignArtifact(BaseModel):
    """Everything needed to re-run a controller: basis, LMI solution and margins."""

    created_at: datetime = Field(default_factory=datetime.now)
    config_hash: str
    seeds: SeedManifest = Field(default_factory=SeedManifest)
    mode: DesignMode
    gamma_mode: GammaMode = GammaMode.FIXED
    p: int
    m: int
    q: int
    L: int
    n_state: int
    F: Matrix
    W: Matrix
    X: Matrix
    Y: Matrix
    K_d: Optional[Matrix] = None
    xi: Optional[list[float]] = None
    d_bar: Optional[list[float]] = None
    profile: GainProfileModel
    objective: Optional[float] = None
    block_margins: dict[str, float] = Field(default_factory=dict)
    linear_margins: dict[str, float] = Field(default_factory=dict)
    storage_margin: float = 0.0
    spectral_radius: float = 0.0
    spectral_gap: Optional[float] = None
    are_residual: float = 0.0
    are_iterations: int = 0


class CampaignSummary(BaseModel):
    """Results of one simulate run, as recorded in summary files and the ledger."""

    config_hash: str = ""
    seed: int = 0
    mode: DesignMode
    gamma_mode: GammaMode = GammaMode.FIXED
    group: str = ""  # general | constant | constant_optimized | zero
    horizon: int
    cohort: int
    campaigns: int
    diverged: int
    diverged_fraction: float
    gamma1_sq: Optional[float] = None
    gamma2_sq: float
    rho: float
    empirical_rho: Optional[float] = None  # None when no rollout has disturbance energy
    inner_pass: dict[int, bool] = Field(default_factory=dict)
    outer_pass: list[bool] = Field(default_factory=list)
    outer_offending: list[Optional[float]] = Field(default_factory=list)
    smallest_passing_horizon: Optional[int] = None
    runtime_s: float = 0.0
