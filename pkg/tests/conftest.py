"""Shared pytest fixtures and helpers."""

from __future__ import annotations

from datetime import datetime
from pathlib import Path
import sys
from typing import Optional

import numpy as np
import pytest

PROJECT_ROOT = Path(__file__).resolve().parents[1]
SRC_ROOT = PROJECT_ROOT / "src"
if str(SRC_ROOT) not in sys.path:
    sys.path.insert(0, str(SRC_ROOT))

from stochastic_l2_gain.backends.base import BackendResult, ConicBackend
from stochastic_l2_gain.behavior import BehaviorBasis, TrajectorySet, exact_basis_from_kernel
from stochastic_l2_gain.estimator import NoiseModel, SteadyState, solve_are
from stochastic_l2_gain.models import EventType, RunConfig, RunStatus, SolveStatus
from stochastic_l2_gain.paramdyn import ParamDynamics, decompose
from stochastic_l2_gain.plant import KernelModel, simulate_open_loop


class FakeBackend(ConicBackend):
    """Returns a preset result and remembers every program it was handed."""

    name = "fake"

    def __init__(self, result: Optional[BackendResult] = None) -> None:
        self.result = result or BackendResult(status=SolveStatus.INFEASIBLE, detail="fake")
        self.programs: list = []

    def solve(self, program, feas_tol: float, max_iterations: int) -> BackendResult:
        self.programs.append(program)
        return self.result


class FakeStorage:
    def __init__(self) -> None:
        self.runs: list[dict] = []
        self.events: list[dict] = []

    async def save_run(
        self,
        run_id: str,
        command: str,
        status: RunStatus,
        created_at: datetime,
        config_hash: Optional[str],
        details: Optional[dict] = None,
    ) -> None:
        self.runs.append(
            {
                "run_id": run_id,
                "command": command,
                "status": status,
                "created_at": created_at,
                "config_hash": config_hash,
                "details": dict(details or {}),
            }
        )

    async def save_event(
        self,
        run_id: str,
        event_type: EventType,
        timestamp: datetime,
        details: Optional[dict] = None,
    ) -> None:
        self.events.append(
            {
                "run_id": run_id,
                "event_type": event_type,
                "timestamp": timestamp,
                "details": dict(details or {}),
            }
        )

    def event_types(self) -> list[EventType]:
        return [e["event_type"] for e in self.events]

    @property
    def final_status(self) -> Optional[RunStatus]:
        return self.runs[-1]["status"] if self.runs else None


def _clean_trajectories(model: KernelModel, layout, N: int, T: int, seed: int) -> TrajectorySet:
    """Noise-free open-loop trajectories with Gaussian (u, d) excitation."""
    rng = np.random.default_rng(seed)
    trajs = []
    for _ in range(N):
        u = rng.standard_normal((T + 1, model.m))
        d = rng.standard_normal((T + 1, model.q))
        history = np.hstack([rng.standard_normal((model.lag, model.p)), np.zeros((model.lag, model.m + model.q))])
        trajs.append(simulate_open_loop(model, u, d, history))
    return TrajectorySet(trajs, layout)


@pytest.fixture(scope="session")
def example_model() -> KernelModel:
    return KernelModel.example()


@pytest.fixture(scope="session")
def example_layout(example_model: KernelModel):
    return example_model.layout(4)


@pytest.fixture(scope="session")
def exact_basis(example_model: KernelModel, example_layout) -> BehaviorBasis:
    return exact_basis_from_kernel(example_model, example_layout)


@pytest.fixture(scope="session")
def example_dyn(exact_basis: BehaviorBasis) -> ParamDynamics:
    return decompose(exact_basis)


@pytest.fixture(scope="session")
def example_noise() -> NoiseModel:
    return NoiseModel.example()


@pytest.fixture(scope="session")
def example_steady_state(example_dyn: ParamDynamics, exact_basis: BehaviorBasis, example_noise: NoiseModel) -> SteadyState:
    return solve_are(example_dyn, exact_basis, example_noise)


@pytest.fixture
def clean_data(example_model: KernelModel):
    """Factory for noise-free datasets of the example plant."""

    def make(layout, N: int = 20, T: int = 40, seed: int = 0) -> TrajectorySet:
        return _clean_trajectories(example_model, layout, N, T, seed)

    return make


@pytest.fixture
def fake_backend() -> FakeBackend:
    return FakeBackend()


@pytest.fixture
def fake_storage() -> FakeStorage:
    return FakeStorage()


@pytest.fixture
def small_config() -> RunConfig:
    """Numerical example shrunk so a full command finishes in seconds."""
    return RunConfig.example(
        data={"trajectories": 40, "length": 40},
        simulation={
            "horizon": 20,
            "cohort": 30,
            "horizons": [5, 20],
            "gamma_points": 11,
            "divergence_threshold": 1.0,
        },
        seeds={"data": 3, "simulation": 4, "mixture": 5},
    )


@pytest.fixture
def workbench(small_config: RunConfig, fake_storage: FakeStorage, tmp_path: Path):
    from stochastic_l2_gain.workbench import Workbench

    return Workbench(small_config, out_dir=tmp_path, storage=fake_storage)
