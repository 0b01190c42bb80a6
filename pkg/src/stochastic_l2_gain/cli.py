"""Command-line front end: generate, design, simulate, report, are and check."""

from __future__ import annotations

import argparse
import asyncio
import logging
import sys
from typing import Optional, Sequence

from pydantic import ValidationError

from .errors import L2GainError, SchemaError, StageError
from .models import DesignMode, RunConfig, RunStatus
from .workbench import CommandResult, Workbench

logger = logging.getLogger(__name__)

EXIT_OK = 0
EXIT_NUMERICAL = 1
EXIT_INFEASIBLE = 2
EXIT_DIVERGED = 3
EXIT_INPUT = 4

_STATUS_EXIT = {
    RunStatus.SUCCEEDED: EXIT_OK,
    RunStatus.INFEASIBLE: EXIT_INFEASIBLE,
    RunStatus.DIVERGED: EXIT_DIVERGED,
    RunStatus.FAILED: EXIT_NUMERICAL,
}


def exit_status(exc: BaseException) -> int:
    """Exit status for an exception: input problems are 4, everything else numerical."""
    cause = exc.cause if isinstance(exc, StageError) else exc
    if isinstance(cause, ValueError):
        return EXIT_INPUT
    return EXIT_NUMERICAL


# =============================================================================
# Configuration
# =============================================================================


def load_config(args: argparse.Namespace) -> RunConfig:
    """Configuration file (or the numerical example) with command-line overrides applied."""
    config = RunConfig.from_file(args.config) if args.config else RunConfig.example()
    if args.cohort is not None and args.cohort < 1:
        raise SchemaError(f"cohort must be at least 1, got {args.cohort}", path="--cohort")
    if args.horizon is not None and args.horizon < 1:
        raise SchemaError(f"horizon must be at least 1, got {args.horizon}", path="--horizon")

    raw = config.model_dump(mode="json")
    if args.seed is not None:
        raw["seeds"].update({"data": args.seed, "simulation": args.seed})
    if args.mode is not None:
        raw["disturbance"]["mode"] = args.mode
    if args.cohort is not None:
        raw["simulation"]["cohort"] = args.cohort
    if args.horizon is not None:
        raw["simulation"]["horizon"] = args.horizon
    try:
        return RunConfig.model_validate(raw)
    except ValidationError as exc:
        raise SchemaError(f"invalid command-line overrides: {exc}") from exc


# =============================================================================
# Commands
# =============================================================================


async def cmd_generate(workbench: Workbench, args: argparse.Namespace) -> CommandResult:
    """Generate noisy open-loop trajectories.

    Args:
        workbench: Workbench holding the configuration and output directory.
        args: Parsed command line.

    Returns:
        Result naming the dataset file.
    """
    return await workbench.generate()


async def cmd_design(workbench: Workbench, args: argparse.Namespace) -> CommandResult:
    """Run the offline pipeline on a dataset and write the design artifact.

    Args:
        workbench: Workbench holding the configuration and output directory.
        args: Parsed command line with the dataset path.

    Returns:
        Result with INFEASIBLE status when the LMI program has no solution.
    """
    return await workbench.design(args.dataset)


async def cmd_simulate(workbench: Workbench, args: argparse.Namespace) -> CommandResult:
    """Run the Monte Carlo campaign of a design artifact.

    Returns:
        Result with DIVERGED status when too many rollouts blew up.
    """
    return await workbench.simulate(args.design)


async def cmd_report(workbench: Workbench, args: argparse.Namespace) -> CommandResult:
    return await workbench.report(args.files)


async def cmd_are(workbench: Workbench, args: argparse.Namespace) -> CommandResult:
    return await workbench.are(args.dataset)


async def cmd_check(workbench: Workbench, args: argparse.Namespace) -> CommandResult:
    return await workbench.check(args.design)


COMMANDS = {
    "generate": cmd_generate,
    "design": cmd_design,
    "simulate": cmd_simulate,
    "report": cmd_report,
    "are": cmd_are,
    "check": cmd_check,
}


# =============================================================================
# Entry Point
# =============================================================================


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="TOML or JSON run configuration (default: numerical example)")
    common.add_argument("--seed", type=int, help="override the data and simulation seeds")
    common.add_argument("--out", default=".", help="output directory (default: current directory)")
    common.add_argument("--mode", choices=[m.value for m in DesignMode], help="disturbance-mean mode")
    common.add_argument("--cohort", type=int, help="rollouts per campaign")
    common.add_argument("--horizon", type=int, help="simulation horizon T")
    common.add_argument("-v", "--verbose", action="store_true", help="debug logging")

    parser = argparse.ArgumentParser(
        prog="stochastic-l2-gain",
        description="Data-driven controller synthesis with probabilistic L2-gain guarantees.",
    )
    sub = parser.add_subparsers(dest="command", required=True)
    sub.add_parser("generate", parents=[common], help="generate an open-loop dataset")
    sub.add_parser("design", parents=[common], help="synthesize a controller").add_argument("dataset")
    sub.add_parser("simulate", parents=[common], help="run a Monte Carlo campaign").add_argument("design")
    sub.add_parser("report", parents=[common], help="assemble plot-data files").add_argument("files", nargs="*")
    sub.add_parser("are", parents=[common], help="print the steady-state covariance").add_argument("dataset")
    sub.add_parser("check", parents=[common], help="re-verify a design artifact").add_argument("design")
    return parser


async def run(args: argparse.Namespace, workbench: Optional[Workbench] = None) -> int:
    """Execute one parsed command and return its exit status."""
    try:
        if workbench is None:
            workbench = Workbench(load_config(args), out_dir=args.out)
        result = await COMMANDS[args.command](workbench, args)
    except L2GainError as e:
        print(f"Error: {e}", file=sys.stderr)
        return exit_status(e)
    except ValueError as e:
        print(f"Error: {e}", file=sys.stderr)
        return EXIT_INPUT

    if result.message:
        print(result.message)
    for path in result.outputs:
        logger.info("Wrote %s", path)
    return _STATUS_EXIT.get(result.status, EXIT_NUMERICAL)


def main(argv: Optional[Sequence[str]] = None) -> int:
    """Run the command line."""
    args = build_parser().parse_args(argv)
    logging.basicConfig(
        level=logging.DEBUG if args.verbose else logging.INFO,
        format="%(levelname)s %(name)s: %(message)s",
    )
    return asyncio.run(run(args))


if __name__ == "__main__":
    sys.exit(main())
