"""Text file formats: trajectory datasets, design artifacts, rollout and CDF tables.

Every file starts with `#` comment lines carrying the config hash and the
seed manifest. Floats are written with 17 significant digits so files
round-trip exactly.
"""

from __future__ import annotations

import json
import logging
from pathlib import Path
from typing import Mapping, Optional, Sequence, Union

import numpy as np
from pydantic import ValidationError

from .behavior import BehaviorBasis, SignalLayout, TrajectorySet
from .errors import L2GainError, SchemaError
from .estimator import SteadyState
from .models import DesignArtifact, DesignMode, GainProfileModel, GammaMode, SeedManifest
from .synthesis import ControllerDesign

logger = logging.getLogger(__name__)

PathLike = Union[str, Path]
FLOAT_FORMAT = "%.17g"


def _fmt(x: float) -> str:
    return FLOAT_FORMAT % x


def header_lines(kind: str, config_hash: str, seeds: SeedManifest, extra: Optional[Mapping] = None) -> list[str]:
    lines = [
        f"# stochastic-l2-gain {kind}",
        f"# config_hash={config_hash}",
        f"# seeds={seeds.header()}",
    ]
    for key, value in (extra or {}).items():
        lines.append(f"# {key}={value}")
    return lines


def _parse_header(lines: Sequence[str]) -> dict[str, str]:
    meta = {}
    for line in lines:
        body = line[1:].strip()
        if "=" in body:
            key, _, value = body.partition("=")
            meta[key.strip()] = value.strip()
        elif body:
            meta.setdefault("kind", body.split()[-1])
    return meta


# =============================================================================
# Trajectory Datasets
# =============================================================================


def write_trajectories(
    path: PathLike,
    data: TrajectorySet,
    config_hash: str,
    seeds: SeedManifest,
) -> Path:
    """One block per trajectory, blocks separated by a blank line."""
    path = Path(path)
    lay = data.layout
    lines = header_lines(
        "trajectories",
        config_hash,
        seeds,
        {"p": lay.p, "m": lay.m, "q": lay.q, "L": lay.L, "n_state": lay.n_state},
    )
    lines.append(",".join(lay.channel_names()))
    for i, traj in enumerate(data.trajectories):
        if i:
            lines.append("")
        lines.extend(",".join(_fmt(v) for v in row) for row in traj)
    path.write_text("\n".join(lines) + "\n", encoding="utf-8")
    logger.info("Wrote %d trajectories to %s", data.N, path)
    return path


def read_trajectories(path: PathLike) -> tuple[TrajectorySet, dict[str, str]]:
    """Parse a dataset file; the layout comes from its header."""
    path = Path(path)
    try:
        text = path.read_text(encoding="utf-8")
    except OSError as exc:
        raise SchemaError(f"cannot read dataset: {exc}", path=str(path)) from exc
    lines = text.splitlines()
    comments = [line for line in lines if line.startswith("#")]
    body = [line for line in lines if not line.startswith("#")]
    meta = _parse_header(comments)
    try:
        layout = SignalLayout(
            p=int(meta["p"]), m=int(meta["m"]), q=int(meta["q"]), L=int(meta["L"]), n_state=int(meta["n_state"])
        )
    except (KeyError, ValueError, ValidationError) as exc:
        raise SchemaError(f"dataset header is missing layout fields ({exc})", path=str(path)) from exc
    if not body or body[0].split(",") != layout.channel_names():
        raise SchemaError("dataset column header does not match the layout", path=str(path))

    blocks: list[list[list[float]]] = [[]]
    for line in body[1:]:
        if not line.strip():
            if blocks[-1]:
                blocks.append([])
            continue
        try:
            row = [float(v) for v in line.split(",")]
        except ValueError as exc:
            raise SchemaError(f"malformed row: {line[:40]}", path=str(path)) from exc
        if len(row) != layout.w_dim:
            raise SchemaError(f"row has {len(row)} values, expected {layout.w_dim}", path=str(path))
        blocks[-1].append(row)
    blocks = [b for b in blocks if b]
    try:
        data = TrajectorySet([np.array(b) for b in blocks], layout)
    except L2GainError as exc:
        raise SchemaError(str(exc), path=str(path)) from exc
    return data, meta


# =============================================================================
# Columnar Tables
# =============================================================================


def write_table(
    path: PathLike,
    columns: Sequence[str],
    rows: np.ndarray,
    kind: str,
    config_hash: str,
    seeds: SeedManifest,
    extra: Optional[Mapping] = None,
) -> Path:
    path = Path(path)
    rows = np.atleast_2d(np.asarray(rows, dtype=float))
    if rows.size and rows.shape[1] != len(columns):
        raise SchemaError(f"{len(columns)} columns but rows have {rows.shape[1]} values", path=str(path))
    lines = header_lines(kind, config_hash, seeds, extra)
    lines.append(",".join(columns))
    lines.extend(",".join(_fmt(v) for v in row) for row in rows if rows.size)
    path.write_text("\n".join(lines) + "\n", encoding="utf-8")
    return path


def read_table(path: PathLike) -> tuple[dict[str, str], list[str], np.ndarray]:
    path = Path(path)
    try:
        lines = path.read_text(encoding="utf-8").splitlines()
    except OSError as exc:
        raise SchemaError(f"cannot read table: {exc}", path=str(path)) from exc
    meta = _parse_header([line for line in lines if line.startswith("#")])
    body = [line for line in lines if line.strip() and not line.startswith("#")]
    if not body:
        raise SchemaError("table has no column header", path=str(path))
    columns = body[0].split(",")
    try:
        rows = np.array([[float(v) for v in line.split(",")] for line in body[1:]]).reshape(-1, len(columns))
    except ValueError as exc:
        raise SchemaError(f"malformed table body ({exc})", path=str(path)) from exc
    return meta, columns, rows


def rollout_filename(mode: DesignMode, T: int, seed: int) -> str:
    return f"rollout_{mode.value}_T{T}_seed{seed}.csv"


def cdf_filename(mode: DesignMode, T: int, seed: int, label: str = "") -> str:
    suffix = f"_{label}" if label else ""
    return f"cdf_{mode.value}_T{T}_seed{seed}{suffix}.csv"


def summary_filename(mode: DesignMode, T: int, seed: int) -> str:
    return f"summary_{mode.value}_T{T}_seed{seed}.json"


def rollout_columns(layout: SignalLayout) -> list[str]:
    names = layout.channel_names()
    return (
        ["k"]
        + names
        + [f"{n}_meas" for n in names]
        + [f"Ed{j + 1}" for j in range(layout.q)]
        + [f"ubar{j + 1}" for j in range(layout.m)]
        + ["trace_P", "y_energy", "d_energy", "Gamma"]
    )


def rollout_rows(record) -> np.ndarray:
    """Step-indexed signal table of a RolloutRecord kept with signals."""
    if record.w is None:
        raise SchemaError("rollout was run without keeping signals")
    k = np.arange(1, record.steps + 1)[:, None]
    return np.hstack(
        [
            k,
            record.w,
            record.w_measured,
            record.d_mean,
            record.u_bar,
            record.P_trace[:, None],
            record.y_energy[:, None],
            record.d_energy[:, None],
            record.gamma_sequence()[:, None],
        ]
    )


# =============================================================================
# Design Artifacts
# =============================================================================


def _matrix(a: Optional[np.ndarray]) -> Optional[list[list[float]]]:
    if a is None:
        return None
    return np.atleast_2d(np.asarray(a, dtype=float)).tolist()


def design_to_artifact(
    design: ControllerDesign,
    basis: BehaviorBasis,
    ss: SteadyState,
    config_hash: str,
    seeds: SeedManifest,
    gamma_mode: GammaMode = GammaMode.FIXED,
) -> DesignArtifact:
    lay = basis.layout
    return DesignArtifact(
        config_hash=config_hash,
        seeds=seeds,
        mode=design.mode,
        gamma_mode=gamma_mode,
        p=lay.p,
        m=lay.m,
        q=lay.q,
        L=lay.L,
        n_state=lay.n_state,
        F=_matrix(basis.F),
        W=_matrix(design.W),
        X=_matrix(design.X),
        Y=_matrix(design.Y),
        K_d=_matrix(design.K_d),
        xi=None if design.xi is None else np.asarray(design.xi, dtype=float).tolist(),
        d_bar=None if design.d_bar is None else np.asarray(design.d_bar, dtype=float).tolist(),
        profile=GainProfileModel(
            gamma1_sq=design.profile.gamma1_sq,
            gamma2_sq=design.profile.gamma2_sq,
            rho=design.profile.rho,
        ),
        objective=design.objective,
        block_margins=dict(design.block_margins),
        linear_margins=dict(design.linear_margins),
        storage_margin=design.storage_margin,
        spectral_radius=design.spectral_radius,
        spectral_gap=basis.spectral_gap if basis.spectral_gap is None or np.isfinite(basis.spectral_gap) else None,
        are_residual=ss.residual,
        are_iterations=ss.iterations,
    )


def write_design(path: PathLike, artifact: DesignArtifact) -> Path:
    path = Path(path)
    path.write_text(artifact.model_dump_json(indent=2), encoding="utf-8")
    logger.info("Wrote %s design artifact to %s", artifact.mode.value, path)
    return path


def read_design(path: PathLike) -> DesignArtifact:
    path = Path(path)
    try:
        return DesignArtifact.model_validate_json(path.read_text(encoding="utf-8"))
    except OSError as exc:
        raise SchemaError(f"cannot read design artifact: {exc}", path=str(path)) from exc
    except ValidationError as exc:
        raise SchemaError(f"invalid design artifact: {exc}", path=str(path)) from exc


def artifact_layout(artifact: DesignArtifact) -> SignalLayout:
    return SignalLayout(p=artifact.p, m=artifact.m, q=artifact.q, L=artifact.L, n_state=artifact.n_state)


def artifact_basis(artifact: DesignArtifact) -> BehaviorBasis:
    return BehaviorBasis(F=np.array(artifact.F, dtype=float), layout=artifact_layout(artifact))


def artifact_assignments(artifact: DesignArtifact) -> dict[str, np.ndarray]:
    values = {
        "W": np.array(artifact.W, dtype=float),
        "X": np.array(artifact.X, dtype=float),
        "Y": np.array(artifact.Y, dtype=float),
    }
    if artifact.K_d is not None:
        values["K_d"] = np.array(artifact.K_d, dtype=float).reshape(artifact.m, artifact.q)
    if artifact.xi is not None:
        values["xi"] = np.array(artifact.xi, dtype=float).reshape(-1, 1)
    return values


# =============================================================================
# Reports
# =============================================================================


def are_report(ss: SteadyState) -> str:
    """Eigenvalue spectrum, residual and iteration count of a steady state."""
    lines = [
        "Steady-state posterior covariance",
        f"iterations: {ss.iterations}",
        f"residual: {ss.residual:.3e}",
        f"trace(P): {float(np.trace(ss.P)):.6g}",
        "eigenvalues:",
    ]
    lines.extend(f"  {i + 1:3d}  {_fmt(v)}" for i, v in enumerate(ss.eigenvalues()))
    return "\n".join(lines) + "\n"


def summary_table(rows: Sequence[Mapping[str, object]]) -> str:
    """Fixed-width text table with one row per campaign."""
    if not rows:
        return ""
    columns = list(rows[0].keys())
    cells = [[str(r.get(c, "")) for c in columns] for r in rows]
    widths = [max(len(c), *(len(row[i]) for row in cells)) for i, c in enumerate(columns)]
    lines = ["  ".join(c.ljust(w) for c, w in zip(columns, widths))]
    lines.append("  ".join("-" * w for w in widths))
    lines.extend("  ".join(v.ljust(w) for v, w in zip(row, widths)) for row in cells)
    return "\n".join(lines) + "\n"


def dump_json(path: PathLike, payload: Mapping) -> Path:
    path = Path(path)
    path.write_text(json.dumps(payload, indent=2, sort_keys=True), encoding="utf-8")
    return path
