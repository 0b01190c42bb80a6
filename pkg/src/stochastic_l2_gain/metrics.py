"""Empirical distributions of the truncated gain Γ_T and the probability bound tests."""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from .errors import EmptyCohortError, InvalidInputError
from .simulator import RolloutRecord
from .synthesis import GainProfile

logger = logging.getLogger(__name__)

INNER_SLACK_SE = 1.5
INNER_SLACK_POINTS = 1


def gamma_grid(lo: float = 1.0, hi: float = 10.0, points: int = 51) -> np.ndarray:
    return np.linspace(lo, hi, points)


@dataclass(frozen=True)
class CdfCurve:
    """Fraction of a cohort with Γ_T ≤ γ at each grid point."""

    grid: np.ndarray
    values: np.ndarray
    count: int
    T: int
    label: str = ""

    def standard_error(self) -> np.ndarray:
        return np.sqrt(self.values * (1.0 - self.values) / max(self.count, 1))


def gamma_cdf(
    records: Sequence[RolloutRecord],
    T: int,
    grid: Sequence[float],
    label: str = "",
) -> CdfCurve:
    """Empirical CDF of Γ_T over the records.

    Rollouts that diverged before T count with Γ_T = ∞; rollouts without
    disturbance energy up to T are left out.
    """
    gammas = np.array([r.gamma(T) for r in records], dtype=float)
    gammas = gammas[~np.isnan(gammas)]
    if gammas.size == 0:
        raise EmptyCohortError(f"No rollout reaches T={T} with positive disturbance energy")
    grid = np.asarray(grid, dtype=float)
    ordered = np.sort(gammas)
    values = np.searchsorted(ordered, grid, side="right") / ordered.size
    return CdfCurve(grid=grid, values=values, count=int(ordered.size), T=T, label=label)


def bound_curve(profile: GainProfile, grid: Sequence[float]) -> np.ndarray:
    """max(0, 1 − (ρ·γ1² + (1−ρ)·γ2²)/γ²) on the grid."""
    grid = np.asarray(grid, dtype=float)
    if np.any(grid <= 0):
        raise InvalidInputError("gamma grid must be positive")
    return np.maximum(0.0, 1.0 - profile.weighted_sq / grid**2)


@dataclass(frozen=True)
class BoundTest:
    passed: bool
    violations: list[float] = field(default_factory=list)  # γ values where the CDF is below the bound
    worst_gap: float = 0.0  # largest bound − CDF, ≤ 0 when strictly above
    offending_gamma: Optional[float] = None


def _compare(cdf: CdfCurve, bound: np.ndarray) -> tuple[np.ndarray, float, Optional[float]]:
    gap = bound - cdf.values
    below = np.flatnonzero(gap > 0)
    worst = float(gap.max()) if gap.size else 0.0
    offending = float(cdf.grid[int(np.argmax(gap))]) if below.size else None
    return below, worst, offending


def inner_test(
    cdf: CdfCurve,
    profile: GainProfile,
    slack_se: float = INNER_SLACK_SE,
    slack_points: int = INNER_SLACK_POINTS,
) -> BoundTest:
    """CDF above the bound curve, allowing up to slack_points grid points within
    slack_se standard errors below it."""
    bound = bound_curve(profile, cdf.grid)
    below, worst, offending = _compare(cdf, bound)
    se = np.sqrt(np.clip(bound * (1.0 - bound), 0.0, None) / max(cdf.count, 1))
    gap = bound - cdf.values
    tolerated = [i for i in below if gap[i] <= slack_se * se[i]]
    passed = len(below) == 0 or (len(below) == len(tolerated) and len(tolerated) <= slack_points)
    return BoundTest(
        passed=passed,
        violations=[float(cdf.grid[i]) for i in below],
        worst_gap=worst,
        offending_gamma=offending,
    )


def outer_test(campaigns: Sequence[CdfCurve], profile: GainProfile) -> list[BoundTest]:
    """Strict pointwise comparison of each campaign's CDF with the bound."""
    if len(campaigns) < 2:
        raise InvalidInputError("The outer test needs at least two campaigns")
    results = []
    for cdf in campaigns:
        below, worst, offending = _compare(cdf, bound_curve(profile, cdf.grid))
        results.append(
            BoundTest(
                passed=below.size == 0,
                violations=[float(cdf.grid[i]) for i in below],
                worst_gap=worst,
                offending_gamma=offending,
            )
        )
    failed = sum(not r.passed for r in results)
    if failed:
        logger.info("Outer test: %d of %d campaigns below the bound", failed, len(results))
    return results


def smallest_passing_horizon(
    records: Sequence[RolloutRecord],
    horizons: Sequence[int],
    profile: GainProfile,
    grid: Sequence[float],
) -> Optional[int]:
    """Smallest T among horizons whose inner test passes, or None."""
    for T in sorted(horizons):
        try:
            cdf = gamma_cdf(records, T, grid)
        except EmptyCohortError:
            continue
        if inner_test(cdf, profile).passed:
            return int(T)
    return None


def energy_mismatch(record: RolloutRecord) -> float:
    """Relative difference between cumulative and batch-recomputed output energy."""
    if record.w is None or not record.steps:
        return math.nan
    p = record.w.shape[1] - (record.u_bar.shape[1] if record.u_bar is not None else 0) - (
        record.d_mean.shape[1] if record.d_mean is not None else 0
    )
    batch = float(np.sum(record.w[:, :p] ** 2))
    return abs(batch - float(record.y_energy[-1])) / max(batch, np.finfo(float).tiny)
