"""Closed-loop rollouts, Monte Carlo campaigns and open-loop dataset generation."""

from __future__ import annotations

import logging
import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from typing import Optional, Sequence, Union

import numpy as np

from .behavior import BehaviorBasis, SignalLayout, TrajectorySet, is_persistently_exciting, state_map
from .errors import EmptyCohortError, InvalidInputError, NotExcitingError
from .estimator import GainSchedule, NoiseModel, gain_schedule, initial_covariance, posterior_update
from .models import RolloutStatus
from .paramdyn import ParamDynamics
from .plant import KernelModel, step_plant
from .signals import Forecast, MixtureSpec, SeedLike, sample_mixture
from .synthesis import ControllerDesign, PiecewiseDesign

logger = logging.getLogger(__name__)

DEFAULT_OVERFLOW_CAP = 1e9
DEFAULT_COHORT = 2000

AnyDesign = Union[ControllerDesign, PiecewiseDesign]


# =============================================================================
# Noise Sources
# =============================================================================


@dataclass(frozen=True)
class NoiseSources:
    """Distributions of Δd, Δu and n for one rollout or campaign."""

    disturbance: MixtureSpec
    input: MixtureSpec
    measurement: MixtureSpec

    @classmethod
    def gaussian(cls, noise: NoiseModel) -> "NoiseSources":
        return cls(
            disturbance=MixtureSpec.gaussian(noise.S_d),
            input=MixtureSpec.gaussian(noise.S_u),
            measurement=MixtureSpec.gaussian(noise.S_n),
        )

    @classmethod
    def random(cls, noise: NoiseModel, seed: SeedLike, components: int = 3, **kwargs) -> "NoiseSources":
        base = seed if isinstance(seed, np.random.SeedSequence) else np.random.SeedSequence(seed)
        children = base.spawn(3)
        return cls(
            disturbance=MixtureSpec.random(noise.S_d, components, seed=children[0], **kwargs),
            input=MixtureSpec.random(noise.S_u, components, seed=children[1], **kwargs),
            measurement=MixtureSpec.random(noise.S_n, components, seed=children[2], **kwargs),
        )

    def with_disturbance(self, spec: MixtureSpec) -> "NoiseSources":
        return NoiseSources(disturbance=spec, input=self.input, measurement=self.measurement)


# =============================================================================
# Controller
# =============================================================================


class Controller:
    """Online part of the design: sees only the mean forecast and the measurements.

    act() turns the previous posterior and 𝔼[d_k] into ĝ_{k|k-1} and ū_k;
    observe() runs the measurement update with the scheduled gain.
    """

    def __init__(
        self,
        design: AnyDesign,
        dyn: ParamDynamics,
        basis: BehaviorBasis,
        schedule: GainSchedule,
    ):
        self._design = design
        self._dyn = dyn
        self._basis = basis
        self._schedule = schedule
        self._g_post: Optional[np.ndarray] = None
        self._g_prior: Optional[np.ndarray] = None
        self._k = 0

    @property
    def step(self) -> int:
        return self._k

    @property
    def g_prior(self) -> Optional[np.ndarray]:
        return self._g_prior

    @property
    def g_post(self) -> Optional[np.ndarray]:
        return self._g_post

    @property
    def P_post(self) -> np.ndarray:
        return self._schedule.P_post[min(self._k, len(self._schedule))]

    def start(self, window_measured: np.ndarray) -> np.ndarray:
        """ĝ_{0|0} from the first measured window."""
        self._g_post = state_map(self._basis, window_measured)
        self._g_prior = None
        self._k = 0
        return self._g_post

    def _design_for(self, d_mean: np.ndarray) -> ControllerDesign:
        if isinstance(self._design, PiecewiseDesign):
            return self._design.select(d_mean)
        return self._design

    def act(self, d_mean: np.ndarray) -> np.ndarray:
        if self._g_post is None:
            raise InvalidInputError("Controller has not been started")
        design = self._design_for(d_mean)
        self._g_prior = design.prior(self._dyn, self._g_post, d_mean)
        return self._basis.Pi_u_F @ self._g_prior

    def observe(self, w_measured: np.ndarray) -> np.ndarray:
        if self._g_prior is None:
            raise InvalidInputError("observe() needs a preceding act()")
        index = min(self._k, len(self._schedule) - 1)
        K = self._schedule.gains[index]
        self._g_post = posterior_update(self._basis, self._g_prior, K, w_measured)
        self._k += 1
        return self._g_post


# =============================================================================
# Rollouts
# =============================================================================


@dataclass
class RolloutRecord:
    """One closed-loop run. Signal arrays are row-per-step and present only when kept."""

    seed: int
    status: RolloutStatus
    steps: int
    y_energy: np.ndarray  # cumulative Σ‖y_k‖², entry k-1 covers steps 1..k
    d_energy: np.ndarray  # cumulative Σ‖d_k‖²
    mean_energy: np.ndarray  # cumulative Σ‖𝔼d_k‖²
    w: Optional[np.ndarray] = None
    w_measured: Optional[np.ndarray] = None
    d_mean: Optional[np.ndarray] = None
    u_bar: Optional[np.ndarray] = None
    g_prior: Optional[np.ndarray] = None
    g_post: Optional[np.ndarray] = None
    P_trace: Optional[np.ndarray] = None

    @property
    def diverged(self) -> bool:
        return self.status == RolloutStatus.DIVERGED

    def gamma(self, T: int) -> float:
        """Γ_T, inf for a rollout that diverged before T and nan with no disturbance energy."""
        if T < 1:
            raise InvalidInputError("T must be at least 1")
        if T > self.steps:
            return math.inf if self.diverged else math.nan
        denom = float(self.d_energy[T - 1])
        if denom <= 0.0:
            return math.nan
        return math.sqrt(float(self.y_energy[T - 1]) / denom)

    def gamma_sequence(self) -> np.ndarray:
        with np.errstate(divide="ignore", invalid="ignore"):
            return np.sqrt(self.y_energy / np.where(self.d_energy > 0, self.d_energy, np.nan))

    def empirical_rho(self, trace_S_d: float) -> float:
        """Finite-horizon ρ of this rollout's forecast."""
        if not self.steps:
            return math.nan
        energy = float(self.mean_energy[self.steps - 1])
        denom = self.steps * trace_S_d + energy
        return energy / denom if denom > 0 else math.nan


@dataclass(frozen=True)
class LoopContext:
    """Read-only data shared by all rollouts of a campaign."""

    design: AnyDesign
    model: KernelModel
    dyn: ParamDynamics
    basis: BehaviorBasis
    noise: NoiseModel
    schedule: GainSchedule
    overflow_cap: float = DEFAULT_OVERFLOW_CAP

    @classmethod
    def build(
        cls,
        design: AnyDesign,
        model: KernelModel,
        dyn: ParamDynamics,
        basis: BehaviorBasis,
        noise: NoiseModel,
        horizon: int,
        overflow_cap: float = DEFAULT_OVERFLOW_CAP,
    ) -> "LoopContext":
        """Precompute the gain schedule from 𝒫_{0|0} = Fᵀ(I ⊗ S_n)F."""
        schedule = gain_schedule(dyn, basis, noise, initial_covariance(basis, noise), horizon)
        return cls(design, model, dyn, basis, noise, schedule, overflow_cap)


def run_closed_loop(
    ctx: LoopContext,
    forecast: Forecast,
    T: int,
    seed: int,
    sources: Optional[NoiseSources] = None,
    keep_signals: bool = True,
) -> RolloutRecord:
    """Warm up open loop for L+1 steps, then run the online loop for T steps.

    At step k: draw Δd_k and form d_k = 𝔼[d_k] + Δd_k; the controller computes
    ĝ_{k|k-1} and ū_k; draw Δu_k and apply u_k = ū_k + Δu_k; draw n_k, measure
    w_k^m = w_k + n_k and let the controller update ĝ_{k|k}. The controller
    never sees d_k or w_k.
    """
    if T < 1:
        raise InvalidInputError("T must be at least 1")
    model, basis = ctx.model, ctx.basis
    lay = basis.layout
    if (model.p, model.m, model.q) != (lay.p, lay.m, lay.q):
        raise InvalidInputError("Kernel model and basis layout disagree")
    if forecast.q != lay.q:
        raise InvalidInputError(f"Forecast has {forecast.q} channels, layout needs {lay.q}")
    sources = sources or NoiseSources.gaussian(ctx.noise)

    streams = [np.random.default_rng(s) for s in np.random.SeedSequence(seed).spawn(4)]
    dither_rng, d_rng, u_rng, n_rng = streams
    warm = lay.L + 1
    delta_d = sample_mixture(sources.disturbance, warm + T, d_rng)
    delta_u = sample_mixture(sources.input, T, u_rng)
    meas = sample_mixture(sources.measurement, warm + T, n_rng)

    # warmup: persistently exciting dither with 𝔼‖u‖² = tr(S_u)
    amplitude = math.sqrt(float(np.trace(ctx.noise.S_u)) / lay.m) if ctx.noise.S_u.size else 0.0
    history = [np.zeros(lay.w_dim) for _ in range(model.lag)]
    warm_measured = np.zeros((warm, lay.w_dim))
    d0 = forecast.mean(0)
    for j in range(warm):
        u = amplitude * dither_rng.standard_normal(lay.m)
        d = d0 + delta_d[j]
        y = step_plant(model, np.array(history[-model.lag :]) if model.lag else np.zeros((0, lay.w_dim)), u, d)
        w = np.concatenate([y, u, d])
        history.append(w)
        warm_measured[j] = w + meas[j]

    controller = Controller(ctx.design, ctx.dyn, basis, ctx.schedule)
    controller.start(warm_measured.ravel())

    y_energy = np.zeros(T)
    d_energy = np.zeros(T)
    mean_energy = np.zeros(T)
    signals = None
    if keep_signals:
        signals = {
            "w": np.zeros((T, lay.w_dim)),
            "w_measured": np.zeros((T, lay.w_dim)),
            "d_mean": np.zeros((T, lay.q)),
            "u_bar": np.zeros((T, lay.m)),
            "g_prior": np.zeros((T, basis.g_dim)),
            "g_post": np.zeros((T, basis.g_dim)),
            "P_trace": np.zeros(T),
        }

    status = RolloutStatus.COMPLETED
    acc_y = acc_d = acc_mean = 0.0
    steps = 0
    for k in range(1, T + 1):
        i = k - 1
        d_mean = forecast.mean(k)
        d = d_mean + delta_d[warm + i]
        u_bar = controller.act(d_mean)
        u = u_bar + delta_u[i]
        y = step_plant(model, np.array(history[-model.lag :]) if model.lag else np.zeros((0, lay.w_dim)), u, d)
        if not np.all(np.isfinite(y)) or float(np.linalg.norm(y)) > ctx.overflow_cap:
            status = RolloutStatus.DIVERGED
            logger.debug("Rollout %d diverged at step %d", seed, k)
            break
        w = np.concatenate([y, u, d])
        history.append(w)
        if len(history) > model.lag + 1:
            history.pop(0)
        w_measured = w + meas[warm + i]
        g_post = controller.observe(w_measured)

        acc_y += float(y @ y)
        acc_d += float(d @ d)
        acc_mean += float(d_mean @ d_mean)
        y_energy[i], d_energy[i], mean_energy[i] = acc_y, acc_d, acc_mean
        steps = k
        if signals is not None:
            signals["w"][i] = w
            signals["w_measured"][i] = w_measured
            signals["d_mean"][i] = d_mean
            signals["u_bar"][i] = u_bar
            signals["g_prior"][i] = controller.g_prior
            signals["g_post"][i] = g_post
            signals["P_trace"][i] = float(np.trace(controller.P_post))

    if signals is not None:
        signals = {name: arr[:steps] for name, arr in signals.items()}
    return RolloutRecord(
        seed=int(seed),
        status=status,
        steps=steps,
        y_energy=y_energy[:steps],
        d_energy=d_energy[:steps],
        mean_energy=mean_energy[:steps],
        **(signals or {}),
    )


# =============================================================================
# Campaigns
# =============================================================================


def rollout_seeds(seed: int, cohort: int) -> list[int]:
    """Independent per-rollout seeds spawned from one campaign seed."""
    return [int(child.generate_state(1)[0]) for child in np.random.SeedSequence(seed).spawn(cohort)]


def _run_chunk(args: tuple) -> list[RolloutRecord]:
    ctx, forecast, T, seeds, sources, keep_signals = args
    return [run_closed_loop(ctx, forecast, T, s, sources, keep_signals) for s in seeds]


@dataclass
class Campaign:
    """A cohort of rollouts ordered by seed index."""

    records: list[RolloutRecord]
    seeds: list[int]
    horizon: int
    label: str = ""
    sources: Optional[NoiseSources] = field(default=None, repr=False)

    @property
    def cohort(self) -> int:
        return len(self.records)

    @property
    def diverged(self) -> int:
        return sum(r.diverged for r in self.records)

    @property
    def diverged_fraction(self) -> float:
        return self.diverged / self.cohort if self.cohort else 0.0

    def gammas(self, T: int) -> np.ndarray:
        return np.array([r.gamma(T) for r in self.records])

    def empirical_rho(self, trace_S_d: float) -> float:
        values = [r.empirical_rho(trace_S_d) for r in self.records if r.steps]
        values = [v for v in values if not math.isnan(v)]
        return float(np.mean(values)) if values else math.nan


def run_campaign(
    ctx: LoopContext,
    forecast: Forecast,
    T: int,
    cohort: int = DEFAULT_COHORT,
    seed: int = 0,
    sources: Optional[NoiseSources] = None,
    workers: int = 1,
    keep_signals: bool = False,
    label: str = "",
) -> Campaign:
    """Run a cohort of independent rollouts, optionally across worker processes.

    Results are merged in seed order, so the campaign does not depend on the
    number of workers.
    """
    if cohort < 1:
        raise EmptyCohortError("Cohort size must be at least 1")
    seeds = rollout_seeds(seed, cohort)
    if workers <= 1:
        records = _run_chunk((ctx, forecast, T, seeds, sources, keep_signals))
    else:
        chunks = [seeds[i::workers] for i in range(workers)]
        with ProcessPoolExecutor(max_workers=workers) as pool:
            results = list(
                pool.map(_run_chunk, [(ctx, forecast, T, c, sources, keep_signals) for c in chunks if c])
            )
        by_seed = {r.seed: r for chunk in results for r in chunk}
        records = [by_seed[s] for s in seeds]
    campaign = Campaign(records=records, seeds=seeds, horizon=T, label=label, sources=sources)
    logger.info(
        "Campaign %s finished: cohort=%d T=%d diverged=%d",
        label or "-",
        cohort,
        T,
        campaign.diverged,
    )
    return campaign


# =============================================================================
# Dataset Generation
# =============================================================================


@dataclass(frozen=True)
class GeneratedDataset:
    data: TrajectorySet
    true_trajectories: list[np.ndarray]
    seed: int
    retries: int


def _open_loop_trajectory(
    model: KernelModel,
    layout: SignalLayout,
    T: int,
    input_scale: float,
    measurement: MixtureSpec,
    rng: np.random.Generator,
) -> tuple[np.ndarray, np.ndarray]:
    steps = T + 1
    lag = model.lag
    history = [np.concatenate([rng.standard_normal(layout.p), np.zeros(layout.m + layout.q)]) for _ in range(lag)]
    free = input_scale * rng.standard_normal((steps, layout.m + layout.q))
    out = np.zeros((steps, layout.w_dim))
    for k in range(steps):
        u, d = free[k, : layout.m], free[k, layout.m :]
        y = step_plant(model, np.array(history[-lag:]) if lag else np.zeros((0, layout.w_dim)), u, d)
        out[k] = np.concatenate([y, u, d])
        history.append(out[k])
    noise = sample_mixture(measurement, steps, rng)
    return out, out + noise


def generate_dataset(
    model: KernelModel,
    layout: SignalLayout,
    noise: NoiseModel,
    N: int,
    T: int,
    seed: int,
    input_scale: float = 1.0,
    measurement: Optional[MixtureSpec] = None,
    max_retries: int = 5,
) -> GeneratedDataset:
    """N noisy open-loop trajectories of T+1 steps with random (u, d) excitation.

    Each trajectory is redrawn from a fresh child seed while its free inputs
    fail the excitation check, up to max_retries redraws per trajectory.
    """
    if T < layout.min_length:
        raise NotExcitingError(
            f"T={T} is too short for persistent excitation (need T >= {layout.min_length})"
        )
    measurement = measurement or MixtureSpec.gaussian(noise.S_n)
    order = layout.L + layout.n_state + 1
    children = np.random.SeedSequence(seed).spawn(N)
    true_trajs, measured = [], []
    retries = 0
    for i, child in enumerate(children):
        attempts = child.spawn(max_retries + 1)
        for attempt, seq in enumerate(attempts):
            clean, noisy = _open_loop_trajectory(
                model, layout, T, input_scale, measurement, np.random.default_rng(seq)
            )
            if is_persistently_exciting(clean[:, layout.p :], order):
                break
            retries += 1
            logger.debug("Trajectory %d attempt %d not persistently exciting", i, attempt)
        else:
            raise NotExcitingError(
                f"Trajectory {i} failed the excitation check after {max_retries} retries",
                trajectory_index=i,
            )
        true_trajs.append(clean)
        measured.append(noisy)
    logger.info("Generated %d trajectories of T=%d (%d retries)", N, T, retries)
    return GeneratedDataset(
        data=TrajectorySet(measured, layout),
        true_trajectories=true_trajs,
        seed=seed,
        retries=retries,
    )


def simulate_open_loop_response(model: KernelModel, steps: int, seed: int, scale: float = 0.1) -> np.ndarray:
    """Output norms of the unforced plant from a small random initial output."""
    rng = np.random.default_rng(seed)
    history = [np.concatenate([scale * rng.standard_normal(model.p), np.zeros(model.m + model.q)]) for _ in range(model.lag)]
    norms = np.zeros(steps)
    for k in range(steps):
        y = step_plant(model, np.array(history[-model.lag :]), np.zeros(model.m), np.zeros(model.q))
        history.append(np.concatenate([y, np.zeros(model.m + model.q)]))
        norms[k] = float(np.linalg.norm(y))
    return norms


def campaign_seeds(seed: int, count: int) -> Sequence[int]:
    """Seeds for repeated campaigns in an outer test."""
    return rollout_seeds(seed + 1_000_003, count)
