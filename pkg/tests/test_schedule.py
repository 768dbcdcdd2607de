"""Tests for noise schedules and the bridge coefficient."""

import numpy as np
import pytest

from noisebridge.errors import ConfigurationError, DomainError
from noisebridge.schedule import (
    NoiseSchedule,
    bridge_k,
    bridge_k_array,
    build_linear_schedule,
    k_recursion_residual,
)


def test_two_step_schedule_is_direct_product():
    schedule = build_linear_schedule(2, 0.1, 0.1)
    np.testing.assert_allclose(schedule.alpha_bar, [0.9, 0.81], rtol=1e-15)
    np.testing.assert_allclose(schedule.one_minus_alpha_bar, [0.1, 0.19], rtol=1e-13)


def test_linear_schedule_matches_cumulative_product(schedule):
    expected = np.cumprod(1.0 - np.linspace(1e-4, 0.02, 100))
    np.testing.assert_allclose(schedule.alpha_bar, expected, rtol=1e-14)
    assert np.all(np.diff(schedule.alpha_bar) < 0)
    assert schedule.num_steps == 100
    assert schedule.last == 99


@pytest.mark.parametrize("n_steps", [1, 0, -3])
def test_too_few_steps_rejected(n_steps):
    with pytest.raises(ConfigurationError):
        build_linear_schedule(n_steps, 1e-4, 0.02)


def test_schedule_arrays_are_read_only(schedule):
    with pytest.raises(ValueError):
        schedule.k[0] = 1.0


def test_bridge_k_examples():
    assert bridge_k(0.01, 0.01) == pytest.approx(0.0, abs=1e-12)
    assert bridge_k(1.0, 0.01) == 1.0
    assert bridge_k(0.5, 0.01) == pytest.approx(0.6999642877, abs=1e-9)


@pytest.mark.parametrize("alpha_bar_t, alpha_bar_T", [(0.0, 0.01), (0.5, 1.0), (0.5, 0.0), (0.001, 0.01)])
def test_bridge_k_domain(alpha_bar_t, alpha_bar_T):
    with pytest.raises(DomainError):
        bridge_k(alpha_bar_t, alpha_bar_T)


def test_bridge_k_tends_to_one_near_clean_end():
    assert abs(bridge_k(1.0 - 1e-9, 0.01) - 1.0) < 1e-6


def test_terminal_k_is_exactly_zero(schedule):
    assert schedule.k[-1] == 0.0


def test_array_form_matches_scalar_form(schedule):
    scalar = [bridge_k(float(a), float(schedule.alpha_bar[-1])) for a in schedule.alpha_bar]
    np.testing.assert_allclose(schedule.k, scalar, atol=1e-13)
    np.testing.assert_allclose(bridge_k_array(schedule.alpha_bar), schedule.k, atol=1e-12)


def test_recursion_residual_is_tiny(schedule):
    residual = k_recursion_residual(schedule)
    assert residual.shape == (99,)
    assert residual.max() < 1e-10


def test_clean_path_coefficient_misses_terminal_condition(schedule):
    naive = np.sqrt(schedule.alpha_bar)
    assert k_recursion_residual(schedule.with_k(naive)).max() < 1e-10
    assert naive[-1] > 1e-3


def test_perturbed_coefficient_breaks_recursion(schedule):
    perturbed = schedule.k.copy()
    perturbed[40:60] += 0.01
    assert k_recursion_residual(schedule.with_k(perturbed)).max() > 1e-3


def test_two_step_schedule_residual_has_length_one():
    assert k_recursion_residual(build_linear_schedule(2, 0.1, 0.2)).shape == (1,)


def test_from_alpha_bar_accepts_noiseless_start():
    schedule = NoiseSchedule.from_alpha_bar([1.0, 0.5, 0.01])
    assert schedule.beta[0] == 0.0
    assert schedule.k[0] == 1.0
    assert schedule.k[-1] == 0.0


def test_from_alpha_bar_rejects_increasing_sequence():
    with pytest.raises(ConfigurationError):
        NoiseSchedule.from_alpha_bar([0.5, 0.6])


def test_recursion_residual_refuses_noiseless_start():
    with pytest.raises(DomainError):
        k_recursion_residual(NoiseSchedule.from_alpha_bar([1.0, 0.5, 0.01]))
    assert np.all(np.isfinite(k_recursion_residual(NoiseSchedule.from_alpha_bar([0.999, 0.5, 0.01]))))


@pytest.mark.parametrize("seed", range(20))
def test_random_linear_schedules_are_monotone(seed):
    """ab falls, sigma and k move monotonically for any valid linear betas."""
    draw = np.random.default_rng(seed)
    n_steps = int(draw.integers(2, 600))
    beta_start = float(draw.uniform(1e-5, 5e-2))
    beta_end = float(draw.uniform(beta_start, 0.2))
    schedule = build_linear_schedule(n_steps, beta_start, beta_end)
    assert np.all(np.diff(schedule.alpha_bar) < 0)
    assert np.all(np.diff(schedule.sigma) > 0)
    assert np.all(np.diff(schedule.k) < 0)
    assert schedule.k[0] <= 1.0
    assert schedule.k[-1] == 0.0
