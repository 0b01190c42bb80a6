import json

import pytest
from pydantic import ValidationError

from stochastic_l2_gain.errors import SchemaError
from stochastic_l2_gain.models import (
    DesignMode,
    GammaConfig,
    GammaMode,
    KernelConfig,
    RunConfig,
    SeedManifest,
)


def test_example_config_dimensions() -> None:
    config = RunConfig.example()
    assert config.dims == (2, 2, 2)
    assert config.L == 4
    assert config.disturbance.mode == DesignMode.GENERAL
    assert config.gamma.gamma1_sq == pytest.approx(4.0)


def test_config_hash_is_stable_and_sensitive() -> None:
    a = RunConfig.example()
    b = RunConfig.example()
    assert a.config_hash() == b.config_hash()
    assert len(a.config_hash()) == 16
    assert RunConfig.example(L=3).config_hash() != a.config_hash()


def test_signals_only_config() -> None:
    config = RunConfig.model_validate(
        {"signals": {"p": 1, "m": 1, "q": 0}, "noise": {"S_u": [0.1], "S_n": [0.2, 0.3]}, "disturbance": {"mode": "zero"}}
    )
    assert config.kernel is None
    assert config.dims == (1, 1, 0)


@pytest.mark.parametrize(
    "overrides",
    [
        {"noise": {"S_d": [0.4], "S_u": [0.2, 0.1], "S_n": [0.1] * 6}},
        {"disturbance": {"mode": "constant", "d_bar": [1.0]}},
        {"disturbance": {"mode": "constant", "d_bar": [1.0, 1.0], "levels": [[0.0]]}},
        {"gamma": {"mode": "optimize"}},
        {"simulation": {"gamma_min": 5.0, "gamma_max": 2.0}},
        {"simulation": {"cohort": 0}},
        {"signals": {"p": 3, "m": 2, "q": 2}},
    ],
)
def test_inconsistent_configs_are_rejected(overrides) -> None:
    with pytest.raises(ValidationError):
        RunConfig.example(**overrides)


def test_missing_kernel_and_signals_is_rejected() -> None:
    with pytest.raises(ValidationError):
        RunConfig.model_validate({"noise": {"S_u": [0.1], "S_n": [0.1]}})


def test_gamma_config_modes() -> None:
    with pytest.raises(ValidationError):
        GammaConfig(mode=GammaMode.COROLLARY1, gamma=2.0)
    corollary = GammaConfig(mode=GammaMode.COROLLARY1, gamma=2.0, p=0.1)
    assert corollary.p == pytest.approx(0.1)
    with pytest.raises(ValidationError):
        GammaConfig(mode=GammaMode.FIXED, gamma2_sq=None)
    with pytest.raises(ValidationError):
        GammaConfig(p=1.5)


def test_optimize_with_constant_mean_is_accepted() -> None:
    config = RunConfig.example(gamma={"mode": "optimize"}, disturbance={"mode": "constant", "d_bar": [1.0, 0.5]})
    assert config.gamma.mode == GammaMode.OPTIMIZE


def test_kernel_dims() -> None:
    assert KernelConfig.example().dims == (2, 2, 2)
    no_disturbance = KernelConfig(R_y=[[[1.0]], [[0.5]]], R_u=[[[1.0]], [[0.0]]])
    assert no_disturbance.dims == (1, 1, 0)


def test_from_file_reads_toml_and_json(tmp_path) -> None:
    toml_path = tmp_path / "run.toml"
    toml_path.write_text(
        "L = 3\n"
        "[signals]\np = 1\nm = 1\nq = 1\n"
        "[noise]\nS_d = [0.1]\nS_u = [0.2]\nS_n = [0.3, 0.3, 0.3]\n"
        "[disturbance]\nmode = \"constant\"\nd_bar = [0.5]\n"
    )
    config = RunConfig.from_file(toml_path)
    assert config.L == 3
    assert config.disturbance.d_bar == [0.5]

    json_path = tmp_path / "run.json"
    json_path.write_text(json.dumps(RunConfig.example().model_dump(mode="json")))
    assert RunConfig.from_file(json_path).config_hash() == RunConfig.example().config_hash()


def test_from_file_errors(tmp_path) -> None:
    with pytest.raises(SchemaError):
        RunConfig.from_file(tmp_path / "missing.toml")
    broken = tmp_path / "broken.toml"
    broken.write_text("L = = 3\n")
    with pytest.raises(SchemaError):
        RunConfig.from_file(broken)
    invalid = tmp_path / "invalid.json"
    invalid.write_text(json.dumps({"L": 0}))
    with pytest.raises(SchemaError) as excinfo:
        RunConfig.from_file(invalid)
    assert excinfo.value.path == str(invalid)


def test_seed_manifest_header() -> None:
    manifest = SeedManifest(data=1, simulation=2, rollouts=[5, 6])
    assert manifest.header() == "data=1,simulation=2,retries=0"
