from pathlib import Path

import numpy as np
import pytest

from stochastic_l2_gain import formats
from stochastic_l2_gain.errors import SchemaError
from stochastic_l2_gain.models import DesignMode, GammaMode, RolloutStatus, SeedManifest
from stochastic_l2_gain.simulator import RolloutRecord
from stochastic_l2_gain.synthesis import ControllerDesign, GainProfile

SEEDS = SeedManifest(data=3, simulation=4)


def _design(g: int) -> ControllerDesign:
    rng = np.random.default_rng(0)
    return ControllerDesign(
        mode=DesignMode.CONSTANT,
        W=2.0 * np.eye(g),
        X=np.eye(g),
        Y=rng.standard_normal((2, g)),
        M=0.5 * np.eye(g),
        A_cl=0.5 * np.eye(g),
        B_cl=np.zeros(g),
        P_storage=0.25 * np.eye(g),
        profile=GainProfile(gamma1_sq=0.81, gamma2_sq=0.64, rho=0.4),
        xi=np.array([0.1, -0.2]),
        d_bar=np.array([1.0, 1.0]),
        block_margins={"dissipation": 1e-3},
    )


def test_trajectories_round_trip_exactly(tmp_path: Path, clean_data, example_layout) -> None:
    data = clean_data(example_layout, N=2, T=12, seed=1)
    path = formats.write_trajectories(tmp_path / "dataset.csv", data, "abc123", SEEDS)
    text = path.read_text()
    assert text.startswith("# stochastic-l2-gain trajectories")
    assert "y1,y2,u1,u2,d1,d2" in text

    loaded, meta = formats.read_trajectories(path)
    assert meta["config_hash"] == "abc123"
    assert meta["kind"] == "trajectories"
    assert meta["seeds"] == "data=3,simulation=4,retries=0"
    assert loaded.layout == example_layout
    assert loaded.N == 2
    for a, b in zip(loaded.trajectories, data.trajectories):
        np.testing.assert_array_equal(a, b)


def test_dataset_with_wrong_columns_is_rejected(tmp_path: Path, clean_data, example_layout) -> None:
    path = formats.write_trajectories(
        tmp_path / "dataset.csv", clean_data(example_layout, N=1, T=12), "h", SEEDS
    )
    path.write_text(path.read_text().replace("y1,y2", "a,b"))
    with pytest.raises(SchemaError):
        formats.read_trajectories(path)

    bare = tmp_path / "bare.csv"
    bare.write_text("y1,y2\n1,2\n")
    with pytest.raises(SchemaError):
        formats.read_trajectories(bare)
    with pytest.raises(SchemaError):
        formats.read_trajectories(tmp_path / "missing.csv")


def test_table_round_trip(tmp_path: Path) -> None:
    rows = np.array([[1.0, 0.25], [2.0, 1.0 / 3.0]])
    path = formats.write_table(tmp_path / "cdf.csv", ["gamma", "F"], rows, "cdf", "h", SEEDS, {"T": 20})
    meta, columns, loaded = formats.read_table(path)
    assert meta["kind"] == "cdf"
    assert meta["T"] == "20"
    assert columns == ["gamma", "F"]
    np.testing.assert_array_equal(loaded, rows)

    with pytest.raises(SchemaError):
        formats.write_table(tmp_path / "bad.csv", ["a"], rows, "cdf", "h", SEEDS)
    empty = tmp_path / "empty.csv"
    empty.write_text("# only a comment\n")
    with pytest.raises(SchemaError):
        formats.read_table(empty)


def test_filenames() -> None:
    assert formats.rollout_filename(DesignMode.GENERAL, 100, 7) == "rollout_general_T100_seed7.csv"
    assert formats.cdf_filename(DesignMode.ZERO, 5, 1) == "cdf_zero_T5_seed1.csv"
    assert formats.cdf_filename(DesignMode.CONSTANT, 5, 1, "constant_optimized") == (
        "cdf_constant_T5_seed1_constant_optimized.csv"
    )
    assert formats.summary_filename(DesignMode.CONSTANT, 20, 0) == "summary_constant_T20_seed0.json"


def test_rollout_rows_match_columns(example_layout) -> None:
    record = RolloutRecord(
        seed=0,
        status=RolloutStatus.COMPLETED,
        steps=2,
        y_energy=np.array([1.0, 2.0]),
        d_energy=np.array([1.0, 2.0]),
        mean_energy=np.zeros(2),
        w=np.ones((2, 6)),
        w_measured=np.ones((2, 6)),
        d_mean=np.zeros((2, 2)),
        u_bar=np.zeros((2, 2)),
        P_trace=np.array([3.0, 2.0]),
    )
    rows = formats.rollout_rows(record)
    columns = formats.rollout_columns(example_layout)
    assert rows.shape == (2, len(columns))
    assert columns[0] == "k" and columns[-1] == "Gamma"
    np.testing.assert_array_equal(rows[:, 0], [1, 2])
    np.testing.assert_allclose(rows[:, -1], [1.0, 1.0])

    record.w = None
    with pytest.raises(SchemaError):
        formats.rollout_rows(record)


def test_design_artifact_round_trip(tmp_path: Path, exact_basis, example_steady_state) -> None:
    design = _design(exact_basis.g_dim)
    artifact = formats.design_to_artifact(
        design, exact_basis, example_steady_state, "h", SEEDS, gamma_mode=GammaMode.OPTIMIZE
    )
    assert artifact.storage_margin == pytest.approx(0.25)
    assert artifact.spectral_radius == pytest.approx(0.5)

    path = formats.write_design(tmp_path / "design.json", artifact)
    loaded = formats.read_design(path)
    assert loaded.mode == DesignMode.CONSTANT
    assert loaded.gamma_mode == GammaMode.OPTIMIZE
    assert loaded.profile.gamma2_sq == pytest.approx(0.64)
    assert loaded.block_margins == {"dissipation": 1e-3}

    basis = formats.artifact_basis(loaded)
    assert basis.layout == exact_basis.layout
    np.testing.assert_array_equal(basis.F, exact_basis.F)
    values = formats.artifact_assignments(loaded)
    np.testing.assert_array_equal(values["Y"], design.Y)
    assert values["xi"].shape == (2, 1)
    assert "K_d" not in values


def test_read_design_errors(tmp_path: Path) -> None:
    bad = tmp_path / "design.json"
    bad.write_text('{"mode": "constant"}')
    with pytest.raises(SchemaError):
        formats.read_design(bad)
    with pytest.raises(SchemaError):
        formats.read_design(tmp_path / "absent.json")


def test_reports(example_steady_state) -> None:
    report = formats.are_report(example_steady_state)
    assert f"iterations: {example_steady_state.iterations}" in report
    assert len([line for line in report.splitlines() if line.startswith("  ")]) == 22

    table = formats.summary_table([{"group": "zero", "T": 5}, {"group": "constant_optimized", "T": 100}])
    lines = table.splitlines()
    assert lines[0].startswith("group")
    assert lines[1].startswith("-" * len("constant_optimized"))
    assert formats.summary_table([]) == ""
