import numpy as np
import pytest

from stochastic_l2_gain import cli
from stochastic_l2_gain.errors import (
    CertificateError,
    EmptyCohortError,
    NonConvergenceError,
    SchemaError,
    StageError,
)
from stochastic_l2_gain.models import DesignMode, RunStatus
from stochastic_l2_gain.workbench import CommandResult


def _args(*argv: str):
    return cli.build_parser().parse_args(list(argv))


class StubWorkbench:
    """Returns a fixed result for every command."""

    def __init__(self, result: CommandResult) -> None:
        self.result = result
        self.calls: list[tuple] = []

    async def generate(self) -> CommandResult:
        self.calls.append(("generate",))
        return self.result

    async def design(self, dataset) -> CommandResult:
        self.calls.append(("design", dataset))
        return self.result

    async def simulate(self, design) -> CommandResult:
        self.calls.append(("simulate", design))
        return self.result

    async def report(self, files) -> CommandResult:
        self.calls.append(("report", list(files)))
        return self.result

    async def are(self, dataset) -> CommandResult:
        self.calls.append(("are", dataset))
        return self.result

    async def check(self, design) -> CommandResult:
        self.calls.append(("check", design))
        return self.result


def test_parser_commands() -> None:
    args = _args("design", "data.csv", "--mode", "zero", "--seed", "7")
    assert args.command == "design"
    assert args.dataset == "data.csv"
    assert args.mode == "zero"
    assert args.seed == 7
    assert _args("report", "a.csv", "b.json").files == ["a.csv", "b.json"]
    with pytest.raises(SystemExit):
        _args("design", "--mode", "sideways", "x.csv")
    with pytest.raises(SystemExit):
        _args()


def test_load_config_applies_overrides() -> None:
    config = cli.load_config(_args("simulate", "d.json", "--seed", "9", "--cohort", "12", "--horizon", "30"))
    assert config.seeds.data == 9
    assert config.seeds.simulation == 9
    assert config.simulation.cohort == 12
    assert config.simulation.horizon == 30

    zero = cli.load_config(_args("generate", "--mode", "zero"))
    assert zero.disturbance.mode == DesignMode.ZERO


def test_load_config_rejects_bad_overrides() -> None:
    with pytest.raises(SchemaError):
        cli.load_config(_args("simulate", "d.json", "--cohort", "0"))
    with pytest.raises(SchemaError):
        cli.load_config(_args("simulate", "d.json", "--horizon", "-3"))


def test_exit_status_mapping() -> None:
    assert cli.exit_status(SchemaError("bad")) == cli.EXIT_INPUT
    assert cli.exit_status(EmptyCohortError("none")) == cli.EXIT_INPUT
    assert cli.exit_status(NonConvergenceError("stuck", residual=1.0)) == cli.EXIT_NUMERICAL
    assert cli.exit_status(CertificateError("bad storage")) == cli.EXIT_NUMERICAL
    assert cli.exit_status(StageError("solve_are", np.linalg.LinAlgError("singular"))) == cli.EXIT_NUMERICAL
    assert cli.exit_status(StageError("generate", SchemaError("short"))) == cli.EXIT_INPUT


@pytest.mark.asyncio
async def test_zero_cohort_exits_with_input_status(capsys) -> None:
    code = await cli.run(_args("simulate", "design.json", "--cohort", "0"))
    assert code == cli.EXIT_INPUT
    assert "cohort must be at least 1" in capsys.readouterr().err


@pytest.mark.asyncio
@pytest.mark.parametrize(
    ("status", "code"),
    [
        (RunStatus.SUCCEEDED, cli.EXIT_OK),
        (RunStatus.INFEASIBLE, cli.EXIT_INFEASIBLE),
        (RunStatus.DIVERGED, cli.EXIT_DIVERGED),
        (RunStatus.FAILED, cli.EXIT_NUMERICAL),
    ],
)
async def test_run_maps_result_status(status: RunStatus, code: int, capsys) -> None:
    bench = StubWorkbench(CommandResult(status=status, message="done"))
    assert await cli.run(_args("check", "design.json"), workbench=bench) == code
    assert bench.calls == [("check", "design.json")]
    assert "done" in capsys.readouterr().out


@pytest.mark.asyncio
async def test_run_reports_workbench_errors(capsys) -> None:
    class Failing(StubWorkbench):
        async def design(self, dataset) -> CommandResult:
            raise StageError("solve_are", NonConvergenceError("stuck", residual=2.0))

    code = await cli.run(_args("design", "data.csv"), workbench=Failing(CommandResult(RunStatus.SUCCEEDED)))
    assert code == cli.EXIT_NUMERICAL
    assert "[solve_are]" in capsys.readouterr().err
