"""Discrete noise schedules and the noise-bridge coefficient.

The bridge coefficient ``k_t`` removes the adversarial perturbation from the
denoising posterior. It is precomputed on every :class:`NoiseSchedule` so
training loops only index into arrays.
"""

import math
from dataclasses import dataclass, replace
from typing import Optional

import numpy as np

from noisebridge.errors import ConfigurationError, DomainError


def _frozen(array: np.ndarray) -> np.ndarray:
    array = np.array(array, dtype=np.float64)
    array.flags.writeable = False
    return array


@dataclass(frozen=True)
class NoiseSchedule:
    """Immutable discrete diffusion schedule.

    Index ``num_steps - 1`` plays the role of the terminal time T.

    Attributes:
        beta: Per-step noise variances
        alpha: ``1 - beta``
        alpha_bar: Cumulative products of ``alpha``
        one_minus_alpha_bar: ``1 - alpha_bar`` computed without cancellation
        k: Bridge coefficient for every index
    """

    beta: np.ndarray
    alpha: np.ndarray
    alpha_bar: np.ndarray
    one_minus_alpha_bar: np.ndarray
    k: np.ndarray

    @property
    def num_steps(self) -> int:
        return int(self.alpha_bar.shape[0])

    @property
    def last(self) -> int:
        """Index of the terminal timestep."""
        return self.num_steps - 1

    @property
    def sqrt_alpha_bar(self) -> np.ndarray:
        return np.sqrt(self.alpha_bar)

    @property
    def sigma(self) -> np.ndarray:
        """Noise scale ``sqrt(1 - alpha_bar)``."""
        return np.sqrt(self.one_minus_alpha_bar)

    @classmethod
    def from_alpha_bar(cls, alpha_bar) -> "NoiseSchedule":
        """Build a schedule directly from cumulative products.

        Used for synthetic schedules in checks; the first entry may equal 1
        (a noiseless start), every later entry must be strictly smaller. The
        recursion oracles refuse a noiseless start, the forward process does not.

        Raises:
            ConfigurationError: If the sequence is not a valid schedule
        """
        alpha_bar = np.asarray(alpha_bar, dtype=np.float64)
        if alpha_bar.ndim != 1 or alpha_bar.shape[0] < 2:
            raise ConfigurationError("alpha_bar needs at least two entries")
        if np.any(alpha_bar <= 0) or np.any(alpha_bar > 1):
            raise ConfigurationError("alpha_bar entries must lie in (0, 1]")
        if np.any(np.diff(alpha_bar) >= 0):
            raise ConfigurationError("alpha_bar must be strictly decreasing")
        alpha = np.empty_like(alpha_bar)
        alpha[0] = alpha_bar[0]
        alpha[1:] = alpha_bar[1:] / alpha_bar[:-1]
        beta = 1.0 - alpha
        one_minus = 1.0 - alpha_bar
        return cls._assemble(beta, alpha, alpha_bar, one_minus)

    @classmethod
    def _assemble(cls, beta, alpha, alpha_bar, one_minus) -> "NoiseSchedule":
        k = bridge_k_array(alpha_bar, one_minus)
        return cls(
            beta=_frozen(beta),
            alpha=_frozen(alpha),
            alpha_bar=_frozen(alpha_bar),
            one_minus_alpha_bar=_frozen(one_minus),
            k=_frozen(k),
        )

    def with_k(self, k) -> "NoiseSchedule":
        """Copy of this schedule carrying a substitute coefficient array."""
        k = np.asarray(k, dtype=np.float64)
        if k.shape != self.k.shape:
            raise ConfigurationError(f"k must have shape {self.k.shape}, got {k.shape}")
        return replace(self, k=_frozen(k))


def build_linear_schedule(n_steps: int, beta_start: float, beta_end: float) -> NoiseSchedule:
    """Linear beta schedule with the bridge coefficients precomputed.

    Args:
        n_steps: Number of timesteps N (at least 2)
        beta_start: beta at index 0
        beta_end: beta at index N-1

    Raises:
        ConfigurationError: If ``n_steps < 2`` or the betas are outside (0, 1)

    Example:
        >>> schedule = build_linear_schedule(2, 0.1, 0.1)
        >>> schedule.alpha_bar
        array([0.9 , 0.81])
    """
    if int(n_steps) != n_steps or n_steps < 2:
        raise ConfigurationError(f"n_steps must be an integer >= 2, got {n_steps}")
    if not (0.0 < beta_start < 1.0 and 0.0 < beta_end < 1.0):
        raise ConfigurationError(f"betas must lie in (0, 1), got {beta_start} and {beta_end}")
    if beta_start > beta_end:
        raise ConfigurationError(f"beta_start {beta_start} exceeds beta_end {beta_end}")

    beta = np.linspace(beta_start, beta_end, int(n_steps), dtype=np.float64)
    alpha = 1.0 - beta
    alpha_bar = np.cumprod(alpha)
    one_minus = -np.expm1(np.cumsum(np.log1p(-beta)))
    schedule = NoiseSchedule._assemble(beta, alpha, alpha_bar, one_minus)
    if np.any(np.diff(schedule.alpha_bar) >= 0):
        raise ConfigurationError("alpha_bar is not strictly decreasing; betas underflow")
    return schedule


def bridge_k(alpha_bar_t: float, alpha_bar_T: float) -> float:
    """Closed-form bridge coefficient for one timestep.

    ``k_t = sqrt(ab_t) - ab_T (1 - ab_t) / (sqrt(ab_t) (1 - ab_T))``

    Raises:
        DomainError: If ``alpha_bar_t`` is 0, ``alpha_bar_T`` is 1, or the
            pair is not ordered along a decreasing schedule

    Example:
        >>> round(bridge_k(0.5, 0.01), 10)
        0.6999642877
    """
    if not 0.0 < alpha_bar_t <= 1.0:
        raise DomainError(f"alpha_bar_t must lie in (0, 1], got {alpha_bar_t}")
    if not 0.0 < alpha_bar_T < 1.0:
        raise DomainError(f"alpha_bar_T must lie in (0, 1), got {alpha_bar_T}")
    if alpha_bar_t < alpha_bar_T:
        raise DomainError(f"alpha_bar_t {alpha_bar_t} is below alpha_bar_T {alpha_bar_T}")
    root = math.sqrt(alpha_bar_t)
    return root - alpha_bar_T * (1.0 - alpha_bar_t) / (root * (1.0 - alpha_bar_T))


def bridge_k_array(alpha_bar: np.ndarray, one_minus_alpha_bar: Optional[np.ndarray] = None) -> np.ndarray:
    """Bridge coefficients for a whole schedule; the last entry is T.

    Evaluated as ``sqrt(ab_t) * (1 - ratio_t)`` so the terminal entry is
    exactly zero.
    """
    alpha_bar = np.asarray(alpha_bar, dtype=np.float64)
    if one_minus_alpha_bar is None:
        one_minus_alpha_bar = 1.0 - alpha_bar
    one_minus = np.asarray(one_minus_alpha_bar, dtype=np.float64)
    if alpha_bar[-1] >= 1.0:
        raise DomainError("terminal alpha_bar must be below 1")
    ratio = (alpha_bar[-1] * one_minus) / (alpha_bar * one_minus[-1])
    return np.sqrt(alpha_bar) * (1.0 - ratio)


def k_recursion_residual(schedule: NoiseSchedule) -> np.ndarray:
    """One-step residuals of the bridge recursion, for t = 1 .. N-1.

    The recursion, normalised by ``sqrt(ab_t)``, reads
    ``k_t/sqrt(ab_t) = (ab_t-1)/(ab_t-a_t) * k_{t-1}/sqrt(ab_{t-1}) + (1-a_t)/(ab_t-a_t)``.
    Each prediction starts from the schedule's own ``k_{t-1}``.

    Raises:
        DomainError: If a step before the terminal one is noiseless
            (``alpha_bar == 1``); the recursion divides by ``1 - alpha_bar``
    """
    k = schedule.k
    alpha_bar = schedule.alpha_bar
    one_minus = schedule.one_minus_alpha_bar
    if np.any(one_minus[:-1] == 0):
        raise DomainError("the bridge recursion is undefined after a noiseless step")
    alpha_t = schedule.alpha[1:]
    # ab_t - a_t = -a_t (1 - ab_{t-1})
    denom = -alpha_t * one_minus[:-1]
    normalised_prev = k[:-1] / np.sqrt(alpha_bar[:-1])
    predicted = (-one_minus[1:] / denom) * normalised_prev + schedule.beta[1:] / denom
    return np.abs(k[1:] - np.sqrt(alpha_bar[1:]) * predicted)


__all__ = [
    "NoiseSchedule",
    "build_linear_schedule",
    "bridge_k",
    "bridge_k_array",
    "k_recursion_residual",
]
