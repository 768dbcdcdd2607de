"""Numerical self-checks of the schedule, the bridge and the solvers."""

import logging
from dataclasses import dataclass
from typing import List, Optional

import numpy as np

from noisebridge.bridge import epsilon_a_posterior_coefficient
from noisebridge.distill import ddim_solve, leapfrog_solve
from noisebridge.net import DenoiserNet
from noisebridge.schedule import NoiseSchedule, bridge_k, build_linear_schedule, k_recursion_residual

logger = logging.getLogger(__name__)

RESIDUAL_TOLERANCE = 1e-10
TERMINAL_TOLERANCE = 1e-12
LIMIT_TOLERANCE = 1e-6


@dataclass(frozen=True)
class VerificationResult:
    """Worst-case deviations found for one schedule."""

    n_steps: int
    max_recursion_residual: float
    max_eps_a_coefficient: float
    terminal_k: float
    limit_gap: float
    solver_gap: float

    @property
    def passed(self) -> bool:
        return (
            self.max_recursion_residual < RESIDUAL_TOLERANCE
            and self.max_eps_a_coefficient < RESIDUAL_TOLERANCE
            and self.terminal_k < TERMINAL_TOLERANCE
            and self.limit_gap < LIMIT_TOLERANCE
            and self.solver_gap == 0.0
        )


def verify_schedule(schedule: NoiseSchedule, rng: np.random.Generator, solver_cases: int = 8) -> VerificationResult:
    """Check the bridge coefficient identities and the leapfrog/DDIM agreement."""
    residual = float(np.max(k_recursion_residual(schedule)))
    coefficient = max(
        abs(epsilon_a_posterior_coefficient(t, schedule)) for t in range(1, schedule.num_steps)
    )
    terminal = abs(float(schedule.k[-1]))
    limit = abs(bridge_k(1.0 - 1e-9, float(schedule.alpha_bar[-1])) - 1.0)

    probe = DenoiserNet.create((3,), (8,), 4, rng, zero_init_output=False)
    solver_gap = 0.0
    for _ in range(solver_cases):
        t_from = int(rng.integers(1, schedule.num_steps))
        t_to = int(rng.integers(0, t_from))
        z = rng.standard_normal((4, 3))
        gap = leapfrog_solve(probe, z, t_from, t_to, 1.0, schedule) - ddim_solve(probe, z, t_from, t_to, schedule)
        solver_gap = max(solver_gap, float(np.max(np.abs(gap))))

    return VerificationResult(
        n_steps=schedule.num_steps,
        max_recursion_residual=residual,
        max_eps_a_coefficient=coefficient,
        terminal_k=terminal,
        limit_gap=limit,
        solver_gap=solver_gap,
    )


def random_schedules(count: int, rng: np.random.Generator, sizes=(10, 100, 500)) -> List[NoiseSchedule]:
    """Linear schedules with random sizes and beta ranges."""
    schedules = []
    for _ in range(count):
        n_steps = int(rng.choice(sizes))
        beta_start = float(rng.uniform(1e-4, 1e-3))
        beta_end = float(rng.uniform(max(beta_start, 5e-3), 5e-2))
        schedules.append(build_linear_schedule(n_steps, beta_start, beta_end))
    return schedules


def verify_suite(
    count: int = 50,
    seed: int = 0,
    schedule: Optional[NoiseSchedule] = None,
) -> List[VerificationResult]:
    """Verify ``schedule`` (if given) followed by ``count`` random schedules."""
    rng = np.random.default_rng(seed)
    candidates = ([schedule] if schedule is not None else []) + random_schedules(count, rng)
    results = [verify_schedule(candidate, rng) for candidate in candidates]
    failed = sum(not result.passed for result in results)
    logger.info("verified %d schedules, %d failed", len(results), failed)
    return results


__all__ = [
    "RESIDUAL_TOLERANCE",
    "VerificationResult",
    "verify_schedule",
    "random_schedules",
    "verify_suite",
]
