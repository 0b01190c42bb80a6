"""Random signal sources: zero-mean Gaussian mixtures and disturbance-mean forecasts."""

from __future__ import annotations

import logging
import math
from abc import ABC, abstractmethod
from dataclasses import dataclass
from typing import Optional, Sequence, Union

import numpy as np

from .errors import InvalidInputError
from .models import DisturbanceConfig, DesignMode, MixtureConfig
from .numerics import as_square, pinv, psd_sqrt, symmetrize

logger = logging.getLogger(__name__)

SeedLike = Union[int, np.random.SeedSequence, np.random.Generator, None]


def as_generator(seed: SeedLike) -> np.random.Generator:
    if isinstance(seed, np.random.Generator):
        return seed
    return np.random.default_rng(seed)


# =============================================================================
# Gaussian Mixtures
# =============================================================================


@dataclass(frozen=True)
class MixtureComponent:
    weight: float
    mean: np.ndarray
    cov: np.ndarray


@dataclass(frozen=True)
class MixtureSpec:
    """Zero-mean Gaussian mixture whose overall covariance equals target_cov.

    Components passed to the constructor are normalized: weights are scaled
    to sum to one, the means are shifted so the mixture mean is zero, and
    every component is transformed by A = T^½ Σ^{†½} so the mixture
    covariance Σ becomes the target T.
    """

    components: tuple[MixtureComponent, ...]
    target_cov: np.ndarray

    def __post_init__(self) -> None:
        target = symmetrize(as_square(self.target_cov, "target_cov")) if np.size(self.target_cov) else np.zeros((0, 0))
        dim = target.shape[0]
        if not self.components:
            raise InvalidInputError("A mixture needs at least one component")
        weights = np.array([c.weight for c in self.components], dtype=float)
        if np.any(weights <= 0):
            raise InvalidInputError("Mixture weights must be positive")
        weights = weights / weights.sum()
        means = np.array([np.asarray(c.mean, dtype=float).reshape(dim) for c in self.components])
        means = means.reshape(len(weights), dim)
        covs = [symmetrize(np.asarray(c.cov, dtype=float).reshape(dim, dim)) for c in self.components]

        means = means - weights @ means
        total = sum(w * (C + np.outer(mu, mu)) for w, mu, C in zip(weights, means, covs))
        A = psd_sqrt(target) @ pinv(psd_sqrt(symmetrize(total))) if dim else np.zeros((0, 0))

        normalized = tuple(
            MixtureComponent(weight=float(w), mean=A @ mu, cov=symmetrize(A @ C @ A.T))
            for w, mu, C in zip(weights, means, covs)
        )
        object.__setattr__(self, "components", normalized)
        object.__setattr__(self, "target_cov", target)

    @property
    def dim(self) -> int:
        return self.target_cov.shape[0]

    @property
    def weights(self) -> np.ndarray:
        return np.array([c.weight for c in self.components])

    def mean(self) -> np.ndarray:
        return sum(c.weight * c.mean for c in self.components) if self.dim else np.zeros(0)

    def covariance(self) -> np.ndarray:
        if not self.dim:
            return np.zeros((0, 0))
        mu = self.mean()
        return symmetrize(
            sum(c.weight * (c.cov + np.outer(c.mean - mu, c.mean - mu)) for c in self.components)
        )

    @classmethod
    def gaussian(cls, target_cov: np.ndarray) -> "MixtureSpec":
        target = np.atleast_2d(np.asarray(target_cov, dtype=float)) if np.size(target_cov) else np.zeros((0, 0))
        dim = target.shape[0]
        return cls(components=(MixtureComponent(1.0, np.zeros(dim), target),), target_cov=target)

    @classmethod
    def random(
        cls,
        target_cov: np.ndarray,
        components: int = 3,
        mean_spread: float = 1.0,
        covariance_jitter: float = 0.5,
        seed: SeedLike = None,
    ) -> "MixtureSpec":
        """Randomized mixture with the given covariance, one per call/seed."""
        target = np.atleast_2d(np.asarray(target_cov, dtype=float)) if np.size(target_cov) else np.zeros((0, 0))
        dim = target.shape[0]
        rng = as_generator(seed)
        weights = rng.dirichlet(np.ones(components))
        parts = []
        for w in weights:
            mean = mean_spread * rng.standard_normal(dim)
            scales = 1.0 + covariance_jitter * rng.uniform(-1.0, 1.0, size=dim)
            parts.append(MixtureComponent(float(w), mean, np.diag(scales)))
        return cls(components=tuple(parts), target_cov=target)

    @classmethod
    def from_config(cls, target_cov: np.ndarray, config: MixtureConfig, seed: SeedLike) -> "MixtureSpec":
        if config.components == 1 and config.mean_spread == 0.0:
            return cls.gaussian(target_cov)
        return cls.random(
            target_cov,
            components=config.components,
            mean_spread=config.mean_spread,
            covariance_jitter=config.covariance_jitter,
            seed=seed,
        )


def sample_mixture(spec: MixtureSpec, count: int, seed: SeedLike = None) -> np.ndarray:
    """count i.i.d. draws as a (count, dim) array; the same seed gives the same stream."""
    if count < 0:
        raise InvalidInputError("count must be nonnegative")
    rng = as_generator(seed)
    out = np.zeros((count, spec.dim))
    if not spec.dim or not count:
        return out
    labels = rng.choice(len(spec.components), size=count, p=spec.weights)
    for idx, comp in enumerate(spec.components):
        hits = np.flatnonzero(labels == idx)
        if hits.size:
            out[hits] = rng.multivariate_normal(comp.mean, comp.cov, size=hits.size, method="eigh")
    return out


# =============================================================================
# Disturbance-Mean Forecasts
# =============================================================================


class Forecast(ABC):
    """Known mean 𝔼[d_k] of the disturbance, indexed by step."""

    q: int

    @abstractmethod
    def mean(self, k: int) -> np.ndarray:
        """𝔼[d_k]."""

    def sequence(self, T: int, start: int = 1) -> np.ndarray:
        return np.array([self.mean(k) for k in range(start, start + T)]).reshape(T, self.q)

    @property
    def mode(self) -> DesignMode:
        return DesignMode.GENERAL


@dataclass(frozen=True)
class ZeroForecast(Forecast):
    q: int

    def mean(self, k: int) -> np.ndarray:
        return np.zeros(self.q)

    @property
    def mode(self) -> DesignMode:
        return DesignMode.ZERO


@dataclass(frozen=True)
class ConstantForecast(Forecast):
    d_bar: np.ndarray

    @property
    def q(self) -> int:  # type: ignore[override]
        return int(np.asarray(self.d_bar).size)

    def mean(self, k: int) -> np.ndarray:
        return np.asarray(self.d_bar, dtype=float).reshape(-1).copy()

    @property
    def mode(self) -> DesignMode:
        return DesignMode.CONSTANT


@dataclass(frozen=True)
class SinusoidStepForecast(Forecast):
    """offset + amplitude·sin(2πk/period + 2πj/q) + step_size·(⌊k/step_every⌋ mod 2) per channel j."""

    q: int
    offset: float = 0.0
    amplitude: float = 1.0
    period: float = 25.0
    step_every: int = 40
    step_size: float = 0.5

    def mean(self, k: int) -> np.ndarray:
        phases = 2.0 * math.pi * np.arange(self.q) / max(self.q, 1)
        wave = self.amplitude * np.sin(2.0 * math.pi * k / self.period + phases)
        step = self.step_size * ((k // self.step_every) % 2)
        return self.offset + wave + step


@dataclass(frozen=True)
class PiecewiseForecast(Forecast):
    """Cycles through a finite set of constant levels, holding each for `hold` steps."""

    levels: tuple[tuple[float, ...], ...]
    hold: int = 50

    def __post_init__(self) -> None:
        if not self.levels:
            raise InvalidInputError("Piecewise forecast needs at least one level")
        widths = {len(level) for level in self.levels}
        if len(widths) != 1:
            raise InvalidInputError("All piecewise levels must have the same length")

    @property
    def q(self) -> int:  # type: ignore[override]
        return len(self.levels[0])

    def mean(self, k: int) -> np.ndarray:
        index = (max(k, 1) - 1) // self.hold % len(self.levels)
        return np.array(self.levels[index], dtype=float)

    @property
    def mode(self) -> DesignMode:
        return DesignMode.CONSTANT


def forecast_from_config(config: DisturbanceConfig, q: int) -> Forecast:
    """Forecast implied by the disturbance section of a run configuration."""
    if config.mode == DesignMode.ZERO or q == 0:
        return ZeroForecast(q)
    if config.mode == DesignMode.CONSTANT:
        if config.levels:
            return PiecewiseForecast(tuple(tuple(level) for level in config.levels), config.hold)
        return ConstantForecast(np.asarray(config.d_bar, dtype=float))
    return SinusoidStepForecast(
        q=q,
        offset=config.offset,
        amplitude=config.amplitude,
        period=config.period,
        step_every=config.step_every,
        step_size=config.step_size,
    )


def forecast_levels(forecast: Forecast) -> Optional[Sequence[np.ndarray]]:
    """Distinct constant levels a forecast switches between, if it is piecewise constant."""
    if isinstance(forecast, PiecewiseForecast):
        return [np.array(level) for level in forecast.levels]
    if isinstance(forecast, ConstantForecast):
        return [np.asarray(forecast.d_bar, dtype=float)]
    return None
