import numpy as np
import pytest

from stochastic_l2_gain.errors import InvalidInputError
from stochastic_l2_gain.models import DesignMode, DisturbanceConfig, MixtureConfig
from stochastic_l2_gain.signals import (
    ConstantForecast,
    MixtureComponent,
    MixtureSpec,
    PiecewiseForecast,
    SinusoidStepForecast,
    ZeroForecast,
    forecast_from_config,
    forecast_levels,
    sample_mixture,
)

TARGET = np.diag([0.4, 0.35])


def test_mixture_is_normalized_to_target() -> None:
    spec = MixtureSpec.random(TARGET, components=4, seed=0)
    assert spec.weights.sum() == pytest.approx(1.0)
    np.testing.assert_allclose(spec.mean(), 0.0, atol=1e-12)
    np.testing.assert_allclose(spec.covariance(), TARGET, atol=1e-10)


def test_explicit_components_are_recentred() -> None:
    spec = MixtureSpec(
        components=(
            MixtureComponent(2.0, np.array([1.0, 0.0]), np.eye(2)),
            MixtureComponent(1.0, np.array([-1.0, 3.0]), 0.5 * np.eye(2)),
        ),
        target_cov=TARGET,
    )
    np.testing.assert_allclose(spec.weights, [2.0 / 3.0, 1.0 / 3.0])
    np.testing.assert_allclose(spec.mean(), 0.0, atol=1e-12)
    np.testing.assert_allclose(spec.covariance(), TARGET, atol=1e-10)


def test_mixture_rejects_bad_weights() -> None:
    with pytest.raises(InvalidInputError):
        MixtureSpec(components=(MixtureComponent(0.0, np.zeros(2), np.eye(2)),), target_cov=TARGET)
    with pytest.raises(InvalidInputError):
        MixtureSpec(components=(), target_cov=TARGET)


def test_samples_match_the_target_moments() -> None:
    spec = MixtureSpec.random(TARGET, seed=3)
    draws = sample_mixture(spec, 20_000, seed=1)
    assert draws.shape == (20_000, 2)
    np.testing.assert_allclose(draws.mean(axis=0), 0.0, atol=0.03)
    np.testing.assert_allclose(np.cov(draws.T), TARGET, atol=0.05)


def test_sampling_is_reproducible() -> None:
    spec = MixtureSpec.random(TARGET, seed=5)
    np.testing.assert_array_equal(sample_mixture(spec, 10, seed=7), sample_mixture(spec, 10, seed=7))
    assert not np.array_equal(sample_mixture(spec, 10, seed=7), sample_mixture(spec, 10, seed=8))
    # the mixture itself is a function of its seed
    np.testing.assert_allclose(
        MixtureSpec.random(TARGET, seed=5).components[0].mean, spec.components[0].mean
    )


def test_empty_mixture_samples_are_empty() -> None:
    spec = MixtureSpec.gaussian(np.zeros((0, 0)))
    assert spec.dim == 0
    assert sample_mixture(spec, 4, seed=0).shape == (4, 0)
    with pytest.raises(InvalidInputError):
        sample_mixture(spec, -1)


def test_mixture_from_config() -> None:
    single = MixtureSpec.from_config(TARGET, MixtureConfig(components=1, mean_spread=0.0), seed=0)
    assert len(single.components) == 1
    np.testing.assert_allclose(single.components[0].cov, TARGET, atol=1e-12)

    several = MixtureSpec.from_config(TARGET, MixtureConfig(components=3), seed=0)
    assert len(several.components) == 3


def test_zero_and_constant_forecasts() -> None:
    zero = ZeroForecast(2)
    assert zero.mode == DesignMode.ZERO
    np.testing.assert_array_equal(zero.sequence(3), np.zeros((3, 2)))

    const = ConstantForecast(np.array([1.0, -0.5]))
    assert const.q == 2
    assert const.mode == DesignMode.CONSTANT
    np.testing.assert_array_equal(const.mean(17), [1.0, -0.5])


def test_sinusoid_step_forecast() -> None:
    forecast = SinusoidStepForecast(q=2, offset=0.1, amplitude=1.0, period=4.0, step_every=3, step_size=0.5)
    assert forecast.mode == DesignMode.GENERAL
    # k = 1: sin(π/2) on channel 0, sin(π/2 + π) on channel 1, no step yet
    np.testing.assert_allclose(forecast.mean(1), [1.1, -0.9], atol=1e-12)
    # k = 3: first step level
    np.testing.assert_allclose(forecast.mean(3), [0.1 - 1.0 + 0.5, 0.1 + 1.0 + 0.5], atol=1e-12)
    assert forecast.sequence(5).shape == (5, 2)


def test_piecewise_forecast_cycles_levels() -> None:
    forecast = PiecewiseForecast(levels=((0.0, 1.0), (2.0, 3.0)), hold=2)
    means = forecast.sequence(6)
    np.testing.assert_array_equal(means[:, 0], [0.0, 0.0, 2.0, 2.0, 0.0, 0.0])
    assert forecast.mode == DesignMode.CONSTANT

    with pytest.raises(InvalidInputError):
        PiecewiseForecast(levels=())
    with pytest.raises(InvalidInputError):
        PiecewiseForecast(levels=((0.0,), (1.0, 2.0)))


def test_forecast_from_config() -> None:
    assert isinstance(forecast_from_config(DisturbanceConfig(mode=DesignMode.ZERO), 2), ZeroForecast)
    constant = forecast_from_config(DisturbanceConfig(mode=DesignMode.CONSTANT, d_bar=[0.5, 0.5]), 2)
    assert isinstance(constant, ConstantForecast)
    piecewise = forecast_from_config(
        DisturbanceConfig(mode=DesignMode.CONSTANT, d_bar=[0.5, 0.5], levels=[[0.0, 0.0], [1.0, 1.0]], hold=5),
        2,
    )
    assert isinstance(piecewise, PiecewiseForecast)
    assert piecewise.hold == 5
    assert isinstance(forecast_from_config(DisturbanceConfig(), 2), SinusoidStepForecast)
    # no disturbance channels means nothing to forecast
    assert isinstance(forecast_from_config(DisturbanceConfig(), 0), ZeroForecast)


def test_forecast_levels() -> None:
    assert forecast_levels(SinusoidStepForecast(q=1)) is None
    levels = forecast_levels(PiecewiseForecast(levels=((0.0,), (1.0,))))
    assert [lvl.tolist() for lvl in levels] == [[0.0], [1.0]]
    assert forecast_levels(ConstantForecast(np.array([2.0])))[0].tolist() == [2.0]
