"""Pipeline orchestration behind the command-line front end."""

from __future__ import annotations

import logging
import re
import time
import uuid
from contextlib import asynccontextmanager, contextmanager
from dataclasses import dataclass, field, replace
from datetime import datetime
from pathlib import Path
from typing import AsyncIterator, Iterator, Optional, Sequence, Union

import numpy as np
from pydantic import ValidationError

from . import formats
from . import sdp
from . import storage as storage_module
from .backends.base import ConicBackend
from .behavior import BehaviorBasis, TrajectorySet, learn_basis
from .errors import InvalidInputError, L2GainError, SchemaError, StageError, UndefinedRhoError
from .estimator import NoiseModel, SteadyState, solve_are
from .metrics import BoundTest, CdfCurve, bound_curve, gamma_cdf, gamma_grid, inner_test, outer_test
from .models import (
    CampaignSummary,
    DesignArtifact,
    DesignMode,
    EventType,
    GammaMode,
    RunConfig,
    RunStatus,
    SeedManifest,
    SolveStatus,
)
from .numerics import min_eigenvalue, symmetrize
from .paramdyn import ParamDynamics, decompose
from .plant import KernelModel
from .signals import (
    ConstantForecast,
    Forecast,
    MixtureSpec,
    PiecewiseForecast,
    ZeroForecast,
    forecast_from_config,
    forecast_levels,
)
from .simulator import (
    LoopContext,
    NoiseSources,
    campaign_seeds,
    generate_dataset,
    run_campaign,
    run_closed_loop,
)
from .synthesis import (
    ControllerDesign,
    GainProfile,
    PiecewiseDesign,
    STORAGE_TOL,
    SynthesisResult,
    assemble_controller,
    build_theorem1,
    build_theorem2,
    build_zero_mean,
    compute_rho,
    corollary1_gammas,
    design as design_controller,
    optimize_gammas,
    output_error_floor,
    with_gammas,
)

logger = logging.getLogger(__name__)

PathLike = Union[str, Path]

DATASET_FILENAME = "dataset.csv"
DESIGN_FILENAME = "design.json"
ARE_FILENAME = "are.txt"
REPORT_GROUPS = ("general", "constant", "constant_optimized", "zero")

_PANEL_COLUMN = re.compile(r"^(?:y|u|d|Ed)\d+$|^Gamma$")


@dataclass
class CommandResult:
    """Outcome of one command: ledger status, written files and a one-line message."""

    status: RunStatus
    outputs: list[Path] = field(default_factory=list)
    message: str = ""
    details: dict = field(default_factory=dict)

    @property
    def succeeded(self) -> bool:
        return self.status == RunStatus.SUCCEEDED


@dataclass
class _Run:
    run_id: str
    command: str
    created_at: datetime
    status: RunStatus = RunStatus.SUCCEEDED
    details: dict = field(default_factory=dict)


@contextmanager
def _stage(name: str) -> Iterator[None]:
    """Attribute any failure inside the block to a named pipeline stage."""
    try:
        yield
    except StageError:
        raise
    except (L2GainError, ValueError, ArithmeticError, np.linalg.LinAlgError) as exc:
        raise StageError(name, exc) from exc


def design_group(mode: DesignMode, gamma_mode: GammaMode) -> str:
    """Report group of a design: its mode, with optimized constant-mean designs kept apart."""
    if mode == DesignMode.CONSTANT and gamma_mode == GammaMode.OPTIMIZE:
        return "constant_optimized"
    return mode.value


class Workbench:
    """Runs the offline design and online validation pipeline for one configuration.

    Every command is recorded in the run ledger: one run row plus stage events.
    """

    def __init__(
        self,
        config: Optional[RunConfig] = None,
        out_dir: PathLike = ".",
        backend: Optional[ConicBackend] = None,
        storage: Optional[object] = None,
    ):
        """Initialize the workbench.

        Args:
            config: Run configuration. Defaults to the numerical example.
            out_dir: Directory receiving every emitted file.
            backend: Conic solver backend. Defaults to the cvxpy backend.
            storage: Optional storage provider for the run ledger.
        """
        self._config = config or RunConfig.example()
        self._out_dir = Path(out_dir)
        self._backend = backend
        self._storage = storage or storage_module

    @property
    def config(self) -> RunConfig:
        return self._config

    @property
    def out_dir(self) -> Path:
        return self._out_dir

    # =========================================================================
    # Run Ledger
    # =========================================================================

    async def _record(self, run: _Run, event_type: EventType, **details) -> None:
        if self._storage is None:
            return
        await self._storage.save_event(run.run_id, event_type, datetime.now(), details)

    async def _persist_run(self, run: _Run) -> None:
        if self._storage is None:
            return
        await self._storage.save_run(
            run_id=run.run_id,
            command=run.command,
            status=run.status,
            created_at=run.created_at,
            config_hash=self._config.config_hash(),
            details=run.details,
        )

    @asynccontextmanager
    async def _ledger(self, command: str) -> AsyncIterator[_Run]:
        run = _Run(run_id=uuid.uuid4().hex, command=command, created_at=datetime.now(), status=RunStatus.RUNNING)
        await self._persist_run(run)
        await self._record(run, EventType.RUN_STARTED, command=command)
        run.status = RunStatus.SUCCEEDED
        try:
            yield run
        except Exception as exc:
            run.status = RunStatus.FAILED
            run.details["error"] = str(exc)
            await self._record(run, EventType.ERROR, error=str(exc), kind=type(exc).__name__)
            await self._persist_run(run)
            raise
        await self._persist_run(run)

    # =========================================================================
    # Shared Helpers
    # =========================================================================

    def _seeds(self, **extra) -> SeedManifest:
        seeds = self._config.seeds
        return SeedManifest(data=seeds.data, simulation=seeds.simulation, mixture=seeds.mixture, **extra)

    def _model(self) -> KernelModel:
        kernel = self._config.kernel
        if kernel is None:
            raise InvalidInputError("This command needs a kernel model in the configuration")
        return KernelModel(R_y=np.array(kernel.R_y), R_u=np.array(kernel.R_u), R_d=np.array(kernel.R_d))

    def _noise(self) -> NoiseModel:
        def matrix(value: list) -> np.ndarray:
            arr = np.asarray(value, dtype=float)
            return np.diag(arr) if arr.ndim == 1 else arr

        cfg = self._config.noise
        return NoiseModel(S_d=matrix(cfg.S_d), S_u=matrix(cfg.S_u), S_n=matrix(cfg.S_n))

    def _sources(self, noise: NoiseModel, seed: Union[int, np.random.SeedSequence]) -> NoiseSources:
        mix = self._config.mixture
        if mix.components == 1 and mix.mean_spread == 0.0:
            return NoiseSources.gaussian(noise)
        return NoiseSources.random(
            noise,
            seed,
            components=mix.components,
            mean_spread=mix.mean_spread,
            covariance_jitter=mix.covariance_jitter,
        )

    def _path(self, name: str) -> Path:
        self._out_dir.mkdir(parents=True, exist_ok=True)
        return self._out_dir / name

    def _general_forecast(self, q: int) -> Forecast:
        disturbance = self._config.disturbance.model_copy(update={"mode": DesignMode.GENERAL})
        return forecast_from_config(disturbance, q)

    def _forecast_rho(self, forecast: Forecast, noise: NoiseModel, horizon: int) -> float:
        try:
            return compute_rho(forecast.sequence(horizon), noise.S_d)
        except UndefinedRhoError:
            logger.warning("rho is undefined for a zero forecast with S_d = 0; using 0")
            return 0.0

    def learn(self, data: TrajectorySet, noise: NoiseModel) -> BehaviorBasis:
        tol = self._config.tolerances
        layout = data.layout
        if self._config.n_state is not None and self._config.n_state != layout.n_state:
            layout = layout.with_state(self._config.n_state)
        with _stage("learn_basis"):
            return learn_basis(
                data,
                noise.S_n,
                layout,
                gap_tol=tol.gap_tol,
                auto_state=self._config.auto_state,
                rank_tol=tol.rank_tol,
            )

    def offline(self, basis: BehaviorBasis, noise: NoiseModel) -> tuple[ParamDynamics, SteadyState]:
        """Parameterizer decomposition and steady-state filter covariance of a basis."""
        tol = self._config.tolerances
        with _stage("decompose"):
            noise.check_layout(basis.layout)
            dyn = decompose(basis, cond_max=tol.cond_max, null_gap=tol.null_gap, rank_tol=tol.rank_tol)
        with _stage("solve_are"):
            ss = solve_are(dyn, basis, noise, max_iter=tol.max_iter, are_tol=tol.are_tol)
        return dyn, ss

    def _solver_options(self) -> dict:
        tol = self._config.tolerances
        return {
            "backend": self._backend,
            "feas_tol": tol.feas_tol,
            "max_iterations": tol.solver_iterations,
            "strict_margin": tol.strict_margin,
            "w_cond_max": tol.w_cond_max,
        }

    def gammas(self) -> tuple[Optional[float], Optional[float]]:
        """(γ1², γ2²) of the fixed or corollary gamma modes."""
        gm = self._config.gamma
        if gm.mode == GammaMode.COROLLARY1:
            return corollary1_gammas(gm.gamma, gm.p)
        return gm.gamma1_sq, gm.gamma2_sq

    def synthesize(
        self,
        mode: DesignMode,
        dyn: ParamDynamics,
        basis: BehaviorBasis,
        ss: SteadyState,
        noise: NoiseModel,
    ) -> SynthesisResult:
        """Build and solve the program of a mode with the configured gamma choice."""
        options = self._solver_options()
        d_bar = np.asarray(self._config.disturbance.d_bar, dtype=float) if mode == DesignMode.CONSTANT else None
        with _stage("synthesize"):
            if self._config.gamma.mode == GammaMode.OPTIMIZE:
                return optimize_gammas(dyn, basis, ss, noise, d_bar, **options)
            gamma1_sq, gamma2_sq = self.gammas()
            rho = None
            if mode == DesignMode.GENERAL:
                rho = self._forecast_rho(
                    self._general_forecast(basis.layout.q), noise, self._config.simulation.horizon
                )
            return design_controller(
                mode,
                dyn,
                basis,
                ss,
                noise,
                gamma1_sq=gamma1_sq,
                gamma2_sq=gamma2_sq,
                d_bar=d_bar,
                rho=rho,
                **options,
            )

    def restore(
        self, artifact: DesignArtifact, noise: NoiseModel
    ) -> tuple[ControllerDesign, BehaviorBasis, ParamDynamics, SteadyState]:
        """Rebuild a ControllerDesign from an artifact; the filter quantities are recomputed from F."""
        if artifact.config_hash != self._config.config_hash():
            logger.warning(
                "Design artifact was built with config %s, current config is %s",
                artifact.config_hash,
                self._config.config_hash(),
            )
        basis = formats.artifact_basis(artifact)
        dyn, ss = self.offline(basis, noise)
        solution = sdp.ConicSolution(
            assignments=formats.artifact_assignments(artifact),
            status=SolveStatus.FEASIBLE,
            min_eig_margin=min(artifact.block_margins.values(), default=0.0),
            objective_value=artifact.objective,
            block_margins=dict(artifact.block_margins),
            linear_margins=dict(artifact.linear_margins),
        )
        profile = artifact.profile
        with _stage("assemble"):
            restored = assemble_controller(
                solution,
                artifact.mode,
                dyn,
                basis,
                ss,
                noise,
                d_bar=None if artifact.d_bar is None else np.array(artifact.d_bar),
                rho=profile.rho,
                feas_tol=self._config.tolerances.feas_tol,
                w_cond_max=self._config.tolerances.w_cond_max,
            )
        restored = with_gammas(restored, profile.gamma1_sq or 0.0, profile.gamma2_sq)
        return restored, basis, dyn, ss

    # =========================================================================
    # Commands
    # =========================================================================

    async def generate(self) -> CommandResult:
        """Write noisy open-loop trajectories of the configured kernel model."""
        async with self._ledger("generate") as run:
            cfg = self._config
            model = self._model()
            noise = self._noise()
            layout = model.layout(cfg.L, cfg.n_state)
            noise.check_layout(layout)
            measurement = MixtureSpec.from_config(noise.S_n, cfg.mixture, cfg.seeds.mixture)
            with _stage("generate"):
                dataset = generate_dataset(
                    model,
                    layout,
                    noise,
                    cfg.data.trajectories,
                    cfg.data.length,
                    seed=cfg.seeds.data,
                    input_scale=cfg.data.input_scale,
                    measurement=measurement,
                    max_retries=cfg.data.max_retries,
                )
            path = formats.write_trajectories(
                self._path(DATASET_FILENAME),
                dataset.data,
                cfg.config_hash(),
                self._seeds(retries=dataset.retries),
            )
            run.details.update({"path": str(path), "trajectories": dataset.data.N, "retries": dataset.retries})
            await self._record(run, EventType.DATASET_WRITTEN, path=str(path), retries=dataset.retries)
            return CommandResult(
                status=run.status,
                outputs=[path],
                message=f"Wrote {dataset.data.N} trajectories to {path}",
                details=dict(run.details),
            )

    async def design(self, dataset: PathLike, mode: Optional[DesignMode] = None) -> CommandResult:
        """Learn the basis, solve the ARE and the mode's LMI program, and write the design artifact."""
        async with self._ledger("design") as run:
            mode = mode or self._config.disturbance.mode
            data, _ = formats.read_trajectories(dataset)
            noise = self._noise()
            basis = self.learn(data, noise)
            await self._record(
                run,
                EventType.BASIS_LEARNED,
                g_dim=basis.g_dim,
                spectral_gap=basis.spectral_gap,
                gap_warning=basis.gap_warning,
            )
            dyn, ss = self.offline(basis, noise)
            await self._record(run, EventType.ARE_SOLVED, iterations=ss.iterations, residual=ss.residual)

            result = self.synthesize(mode, dyn, basis, ss, noise)
            await self._record(run, EventType.DESIGN_SOLVED, mode=mode.value, status=result.status.value)
            run.details.update({"mode": mode.value, "solve_status": result.status.value})
            if result.design is None:
                run.status = RunStatus.INFEASIBLE
                floor = output_error_floor(basis, ss)
                run.details["output_error_floor"] = floor
                return CommandResult(
                    status=run.status,
                    message=f"{mode.value} design is {result.status.value} (output error floor {floor:.4g})",
                    details=dict(run.details),
                )

            artifact = formats.design_to_artifact(
                result.design,
                basis,
                ss,
                self._config.config_hash(),
                self._seeds(),
                gamma_mode=self._config.gamma.mode,
            )
            path = formats.write_design(self._path(DESIGN_FILENAME), artifact)
            profile = result.design.profile
            run.details.update(
                {
                    "path": str(path),
                    "gamma1_sq": profile.gamma1_sq,
                    "gamma2_sq": profile.gamma2_sq,
                    "rho": profile.rho,
                    "objective": result.design.objective,
                }
            )
            return CommandResult(
                status=run.status,
                outputs=[path],
                message=(
                    f"{mode.value} design: gamma1_sq={profile.gamma1_sq:.6g} "
                    f"gamma2_sq={profile.gamma2_sq:.6g} rho={profile.rho:.4f}"
                ),
                details=dict(run.details),
            )

    async def are(self, dataset: PathLike) -> CommandResult:
        """Steady-state filter covariance of the basis learned from a dataset."""
        async with self._ledger("are") as run:
            data, _ = formats.read_trajectories(dataset)
            noise = self._noise()
            basis = self.learn(data, noise)
            _, ss = self.offline(basis, noise)
            await self._record(run, EventType.ARE_SOLVED, iterations=ss.iterations, residual=ss.residual)
            text = formats.are_report(ss)
            path = self._path(ARE_FILENAME)
            path.write_text(text, encoding="utf-8")
            run.details.update({"iterations": ss.iterations, "residual": ss.residual})
            return CommandResult(status=run.status, outputs=[path], message=text.rstrip(), details=dict(run.details))

    async def check(self, design_path: PathLike) -> CommandResult:
        """Re-verify every LMI block and the storage matrix of a design artifact."""
        async with self._ledger("check") as run:
            artifact = formats.read_design(design_path)
            noise = self._noise()
            basis = formats.artifact_basis(artifact)
            dyn, ss = self.offline(basis, noise)
            tol = self._config.tolerances
            profile = artifact.profile
            with _stage("check"):
                if artifact.mode == DesignMode.GENERAL:
                    prog = build_theorem1(
                        dyn, basis, ss, noise, profile.gamma1_sq, profile.gamma2_sq, tol.strict_margin
                    )
                elif artifact.mode == DesignMode.CONSTANT:
                    prog = build_theorem2(
                        dyn,
                        basis,
                        ss,
                        noise,
                        np.array(artifact.d_bar),
                        profile.gamma1_sq,
                        profile.gamma2_sq,
                        tol.strict_margin,
                    )
                else:
                    prog = build_zero_mean(dyn, basis, ss, noise, profile.gamma2_sq, tol.strict_margin)
                values = formats.artifact_assignments(artifact)
                verification = sdp.verify(prog, values)
                M = np.linalg.inv(symmetrize(values["W"]))
                storage_margin = min_eigenvalue(M - basis.Pi_y_F.T @ basis.Pi_y_F)

            storage_ok = storage_margin >= -STORAGE_TOL * max(1.0, float(np.linalg.norm(M, 2)))
            passed = verification.passes(tol.feas_tol) and storage_ok
            run.status = RunStatus.SUCCEEDED if passed else RunStatus.FAILED
            run.details.update(
                {
                    "block_margins": verification.block_margins,
                    "linear_margins": verification.linear_margins,
                    "storage_margin": storage_margin,
                    "passed": passed,
                }
            )
            await self._record(run, EventType.CHECK_COMPLETED, passed=passed)
            lines = [f"{name}: {margin:.3e}" for name, margin in verification.block_margins.items()]
            lines += [f"{name}: {margin:.3e}" for name, margin in verification.linear_margins.items()]
            lines.append(f"storage: {storage_margin:.3e}")
            lines.append("PASS" if passed else "FAIL")
            return CommandResult(status=run.status, message="\n".join(lines), details=dict(run.details))

    # =========================================================================
    # Simulation
    # =========================================================================

    def _forecast_for(self, artifact: DesignArtifact) -> Forecast:
        q = artifact.q
        if artifact.mode == DesignMode.ZERO:
            return ZeroForecast(q)
        if artifact.mode == DesignMode.CONSTANT:
            levels = self._config.disturbance.levels
            if levels:
                return PiecewiseForecast(tuple(tuple(level) for level in levels), self._config.disturbance.hold)
            return ConstantForecast(np.asarray(artifact.d_bar, dtype=float))
        return forecast_from_config(self._config.disturbance, q)

    def _cdf_table(
        self,
        cdf: CdfCurve,
        profile: GainProfile,
        test: BoundTest,
        artifact: DesignArtifact,
        group: str,
        seeds: SeedManifest,
    ) -> Path:
        rows = np.column_stack([cdf.grid, cdf.values, bound_curve(profile, cdf.grid), cdf.standard_error()])
        return formats.write_table(
            self._path(formats.cdf_filename(artifact.mode, cdf.T, self._config.seeds.simulation, cdf.label)),
            ["gamma", "cdf", "bound", "stderr"],
            rows,
            kind="cdf",
            config_hash=self._config.config_hash(),
            seeds=seeds,
            extra={
                "group": group,
                "mode": artifact.mode.value,
                "T": cdf.T,
                "cohort": cdf.count,
                "gamma1_sq": profile.gamma1_sq,
                "gamma2_sq": profile.gamma2_sq,
                "rho": profile.rho,
                "inner_pass": test.passed,
            },
        )

    async def simulate(self, design_path: PathLike) -> CommandResult:
        """Monte Carlo campaign of a design: rollouts, Γ_T CDFs, bound tests and a summary."""
        async with self._ledger("simulate") as run:
            started = time.perf_counter()
            cfg = self._config
            sim = cfg.simulation
            artifact = formats.read_design(design_path)
            model = self._model()
            noise = self._noise()
            restored, basis, dyn, ss = self.restore(artifact, noise)
            if (model.p, model.m, model.q) != (artifact.p, artifact.m, artifact.q):
                raise InvalidInputError("Kernel model and design artifact disagree on signal dimensions")
            forecast = self._forecast_for(artifact)
            group = design_group(artifact.mode, artifact.gamma_mode)

            controller: Union[ControllerDesign, PiecewiseDesign] = restored
            profile = restored.profile
            levels = forecast_levels(forecast) if isinstance(forecast, PiecewiseForecast) else None
            if levels:
                with _stage("synthesize"):
                    controller = PiecewiseDesign.build(
                        levels,
                        dyn,
                        basis,
                        ss,
                        noise,
                        gamma1_sq=profile.gamma1_sq,
                        gamma2_sq=profile.gamma2_sq,
                        **self._solver_options(),
                    )
                profile = controller.worst_profile
            elif artifact.mode == DesignMode.GENERAL:
                profile = replace(profile, rho=self._forecast_rho(forecast, noise, sim.horizon))

            ctx = LoopContext.build(controller, model, dyn, basis, noise, sim.horizon, sim.overflow_cap)
            sources = self._sources(noise, cfg.seeds.mixture)
            with _stage("simulate"):
                campaign = run_campaign(
                    ctx,
                    forecast,
                    sim.horizon,
                    cohort=sim.cohort,
                    seed=cfg.seeds.simulation,
                    sources=sources,
                    workers=sim.workers,
                    label=group,
                )
                example = run_closed_loop(ctx, forecast, sim.horizon, campaign.seeds[0], sources, keep_signals=True)

            seeds = self._seeds(rollouts=campaign.seeds[:1])
            outputs = [
                formats.write_table(
                    self._path(formats.rollout_filename(artifact.mode, sim.horizon, cfg.seeds.simulation)),
                    formats.rollout_columns(basis.layout),
                    formats.rollout_rows(example),
                    kind="rollout",
                    config_hash=cfg.config_hash(),
                    seeds=seeds,
                    extra={"group": group, "mode": artifact.mode.value, "T": sim.horizon},
                )
            ]

            grid = gamma_grid(sim.gamma_min, sim.gamma_max, sim.gamma_points)
            horizons = sorted({T for T in sim.horizons if T <= sim.horizon} | {sim.horizon})
            inner_pass: dict[int, bool] = {}
            smallest = None
            with _stage("metrics"):
                for T in horizons:
                    cdf = gamma_cdf(campaign.records, T, grid, label=group)
                    test = inner_test(cdf, profile)
                    inner_pass[T] = test.passed
                    if test.passed and smallest is None:
                        smallest = T
                    outputs.append(self._cdf_table(cdf, profile, test, artifact, group, seeds))

            outer: list[BoundTest] = []
            if sim.campaigns > 1:
                outer, path = self._outer_campaigns(ctx, forecast, noise, profile, grid, artifact, group, seeds)
                outputs.append(path)

            summary = CampaignSummary(
                config_hash=cfg.config_hash(),
                seed=cfg.seeds.simulation,
                mode=artifact.mode,
                gamma_mode=artifact.gamma_mode,
                group=group,
                horizon=sim.horizon,
                cohort=campaign.cohort,
                campaigns=sim.campaigns,
                diverged=campaign.diverged,
                diverged_fraction=campaign.diverged_fraction,
                gamma1_sq=None if artifact.mode == DesignMode.ZERO else profile.gamma1_sq,
                gamma2_sq=profile.gamma2_sq,
                rho=profile.rho,
                empirical_rho=_finite_or_none(campaign.empirical_rho(restored.trace_S_d)),
                inner_pass=inner_pass,
                outer_pass=[t.passed for t in outer],
                outer_offending=[t.offending_gamma for t in outer],
                smallest_passing_horizon=smallest,
                runtime_s=time.perf_counter() - started,
            )
            summary_path = self._path(formats.summary_filename(artifact.mode, sim.horizon, cfg.seeds.simulation))
            summary_path.write_text(summary.model_dump_json(indent=2), encoding="utf-8")
            outputs.append(summary_path)

            await self._record(
                run,
                EventType.CAMPAIGN_FINISHED,
                group=group,
                cohort=campaign.cohort,
                diverged=campaign.diverged,
                inner_pass={str(T): ok for T, ok in inner_pass.items()},
            )
            run.details.update({"group": group, "summary": str(summary_path), "diverged": campaign.diverged})
            if campaign.diverged_fraction > sim.divergence_threshold:
                run.status = RunStatus.DIVERGED
                message = (
                    f"{campaign.diverged} of {campaign.cohort} rollouts diverged "
                    f"(threshold {sim.divergence_threshold:.3g})"
                )
            else:
                verdict = ", ".join(f"T={T}: {'pass' if ok else 'fail'}" for T, ok in inner_pass.items())
                message = f"{group} campaign of {campaign.cohort} rollouts; inner test {verdict}"
            return CommandResult(status=run.status, outputs=outputs, message=message, details=dict(run.details))

    def _outer_campaigns(
        self,
        ctx: LoopContext,
        forecast: Forecast,
        noise: NoiseModel,
        profile: GainProfile,
        grid: np.ndarray,
        artifact: DesignArtifact,
        group: str,
        seeds: SeedManifest,
    ) -> tuple[list[BoundTest], Path]:
        """Repeat the campaign under freshly randomized mixtures with the same covariances."""
        sim = self._config.simulation
        curves = []
        with _stage("simulate"):
            for index, seed in enumerate(campaign_seeds(self._config.seeds.simulation, sim.campaigns)):
                sources = self._sources(noise, np.random.SeedSequence(seed))
                campaign = run_campaign(
                    ctx,
                    forecast,
                    sim.horizon,
                    cohort=sim.cohort,
                    seed=seed,
                    sources=sources,
                    workers=sim.workers,
                    label=f"outer{index + 1}",
                )
                curves.append(gamma_cdf(campaign.records, sim.horizon, grid, label=campaign.label))
        tests = outer_test(curves, profile)
        rows = np.column_stack([grid, bound_curve(profile, grid)] + [c.values for c in curves])
        path = formats.write_table(
            self._path(formats.cdf_filename(artifact.mode, sim.horizon, self._config.seeds.simulation, "outer")),
            ["gamma", "bound"] + [f"cdf_{i + 1}" for i in range(len(curves))],
            rows,
            kind="outer_cdf",
            config_hash=self._config.config_hash(),
            seeds=seeds,
            extra={
                "group": group,
                "mode": artifact.mode.value,
                "T": sim.horizon,
                "outer_pass": ",".join("1" if t.passed else "0" for t in tests),
            },
        )
        return tests, path

    # =========================================================================
    # Reports
    # =========================================================================

    async def report(self, paths: Sequence[PathLike]) -> CommandResult:
        """Merge result files into plot-data overlays per design group and a summary table."""
        if not paths:
            raise InvalidInputError("report needs at least one result file")
        async with self._ledger("report") as run:
            rollouts: list[tuple[str, list[str], np.ndarray]] = []
            inner: dict[str, list[tuple[int, list[str], np.ndarray]]] = {}
            outer: dict[str, list[tuple[list[str], np.ndarray]]] = {}
            summaries: list[CampaignSummary] = []

            for raw in paths:
                path = Path(raw)
                if path.suffix.lower() == ".json":
                    summaries.append(_read_summary(path))
                    continue
                meta, columns, rows = formats.read_table(path)
                kind, group = meta.get("kind"), meta.get("group")
                if group not in REPORT_GROUPS:
                    raise SchemaError(f"unknown design group {group!r}", path=str(path))
                if kind == "rollout":
                    rollouts.append((group, columns, rows))
                elif kind == "cdf":
                    if columns[:3] != ["gamma", "cdf", "bound"]:
                        raise SchemaError("CDF table must start with gamma,cdf,bound", path=str(path))
                    inner.setdefault(group, []).append((int(meta.get("T", 0)), columns, rows))
                elif kind == "outer_cdf":
                    outer.setdefault(group, []).append((columns, rows))
                else:
                    raise SchemaError(f"unsupported result file kind {kind!r}", path=str(path))

            seeds = self._seeds()
            config_hash = self._config.config_hash()
            outputs: list[Path] = []
            if rollouts:
                outputs.append(self._trajectory_panel(rollouts, config_hash, seeds))
            for group, tables in inner.items():
                outputs.append(self._inner_overlay(group, tables, config_hash, seeds))
            for group, tables in outer.items():
                outputs.append(self._outer_overlay(group, tables, config_hash, seeds))
            if summaries:
                path = self._path("summary.txt")
                path.write_text(formats.summary_table([_summary_row(s) for s in summaries]), encoding="utf-8")
                outputs.append(path)

            run.details.update({"inputs": [str(p) for p in paths], "outputs": [str(p) for p in outputs]})
            await self._record(run, EventType.REPORT_WRITTEN, files=len(outputs))
            return CommandResult(
                status=run.status,
                outputs=outputs,
                message=f"Wrote {len(outputs)} report files to {self._out_dir}",
                details=dict(run.details),
            )

    def _trajectory_panel(
        self, rollouts: list[tuple[str, list[str], np.ndarray]], config_hash: str, seeds: SeedManifest
    ) -> Path:
        steps = max(rows.shape[0] for _, _, rows in rollouts)
        columns = ["k"]
        blocks = [np.arange(1, steps + 1, dtype=float)[:, None]]
        for group, names, rows in rollouts:
            keep = [i for i, name in enumerate(names) if _PANEL_COLUMN.match(name)]
            block = np.full((steps, len(keep)), np.nan)
            block[: rows.shape[0]] = rows[:, keep]
            blocks.append(block)
            columns.extend(f"{group}_{names[i]}" for i in keep)
        return formats.write_table(
            self._path("trajectories.csv"),
            columns,
            np.hstack(blocks),
            kind="trajectory_panel",
            config_hash=config_hash,
            seeds=seeds,
        )

    def _inner_overlay(
        self, group: str, tables: list[tuple[int, list[str], np.ndarray]], config_hash: str, seeds: SeedManifest
    ) -> Path:
        tables = sorted(tables, key=lambda item: item[0])
        grid = tables[0][2][:, 0]
        columns = ["gamma", "bound"]
        blocks = [grid[:, None], tables[0][2][:, 2:3]]
        for T, _, rows in tables:
            if rows.shape[0] != grid.size or not np.allclose(rows[:, 0], grid):
                raise SchemaError(f"CDF tables of group {group} use different gamma grids")
            columns.append(f"cdf_T{T}")
            blocks.append(rows[:, 1:2])
        return formats.write_table(
            self._path(f"inner_{group}.csv"),
            columns,
            np.hstack(blocks),
            kind="inner_overlay",
            config_hash=config_hash,
            seeds=seeds,
            extra={"group": group},
        )

    def _outer_overlay(
        self, group: str, tables: list[tuple[list[str], np.ndarray]], config_hash: str, seeds: SeedManifest
    ) -> Path:
        grid = tables[0][1][:, 0]
        columns = ["gamma", "bound"]
        blocks = [grid[:, None], tables[0][1][:, 1:2]]
        for columns_in, rows in tables:
            if rows.shape[0] != grid.size or not np.allclose(rows[:, 0], grid):
                raise SchemaError(f"outer CDF tables of group {group} use different gamma grids")
            for i in range(2, len(columns_in)):
                columns.append(f"cdf_{len(columns) - 1}")
                blocks.append(rows[:, i : i + 1])
        return formats.write_table(
            self._path(f"outer_{group}.csv"),
            columns,
            np.hstack(blocks),
            kind="outer_overlay",
            config_hash=config_hash,
            seeds=seeds,
            extra={"group": group},
        )


def _read_summary(path: Path) -> CampaignSummary:
    try:
        return CampaignSummary.model_validate_json(path.read_text(encoding="utf-8"))
    except OSError as exc:
        raise SchemaError(f"cannot read summary: {exc}", path=str(path)) from exc
    except ValidationError as exc:
        raise SchemaError(f"invalid summary: {exc}", path=str(path)) from exc


def _summary_row(summary: CampaignSummary) -> dict[str, object]:
    inner = " ".join(f"T{T}:{'pass' if ok else 'fail'}" for T, ok in sorted(summary.inner_pass.items()))
    outer = f"{sum(summary.outer_pass)}/{len(summary.outer_pass)}" if summary.outer_pass else "-"
    return {
        "group": summary.group or summary.mode.value,
        "gamma1_sq": "-" if summary.gamma1_sq is None else f"{summary.gamma1_sq:.4g}",
        "gamma2_sq": f"{summary.gamma2_sq:.4g}",
        "rho": f"{summary.rho:.4f}",
        "rho_emp": "-" if summary.empirical_rho is None else f"{summary.empirical_rho:.4f}",
        "T": summary.horizon,
        "cohort": summary.cohort,
        "diverged": summary.diverged,
        "inner": inner,
        "outer": outer,
        "T_pass": "-" if summary.smallest_passing_horizon is None else summary.smallest_passing_horizon,
        "runtime_s": f"{summary.runtime_s:.1f}",
    }


def _finite_or_none(value: float) -> Optional[float]:
    return value if np.isfinite(value) else None
