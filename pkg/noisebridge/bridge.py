"""Forward diffusion and the noise-bridge latent.

Batches are plain arrays whose first axis indexes examples. Timesteps are
either one integer for the whole batch or an integer array with one entry
per example.
"""

from typing import Optional, Union

import numpy as np

from noisebridge.errors import DomainError, ShapeMismatchError, TimestepError
from noisebridge.schedule import NoiseSchedule

Timesteps = Union[int, np.ndarray]


def check_timesteps(t: Timesteps, schedule: NoiseSchedule, minimum: int = 0) -> np.ndarray:
    """Validate timestep indices and return them as an integer array."""
    steps = np.asarray(t)
    if steps.dtype.kind not in "iu":
        if not np.all(np.equal(np.mod(steps, 1), 0)):
            raise TimestepError(f"timesteps must be integers, got {t!r}")
        steps = steps.astype(np.int64)
    if steps.size and (steps.min() < minimum or steps.max() > schedule.last):
        raise TimestepError(f"timesteps must lie in [{minimum}, {schedule.last}], got {t!r}")
    return steps


def per_example(values: np.ndarray, t: Timesteps, like: np.ndarray) -> np.ndarray:
    """Gather ``values[t]`` shaped to broadcast against the batch ``like``."""
    picked = np.asarray(values)[np.asarray(t)]
    if picked.ndim == 0:
        return picked
    if picked.shape[0] != like.shape[0]:
        raise ShapeMismatchError(f"got {picked.shape[0]} timesteps for a batch of {like.shape[0]}")
    return picked.reshape((-1,) + (1,) * (like.ndim - 1))


def _same_shape(a: np.ndarray, b: np.ndarray, what: str) -> None:
    if a.shape != b.shape:
        raise ShapeMismatchError(f"{what} has shape {b.shape}, expected {a.shape}")


def diffuse(z0: np.ndarray, t: Timesteps, eps: np.ndarray, schedule: NoiseSchedule) -> np.ndarray:
    """Sample ``z_t = sqrt(ab_t) z0 + sqrt(1 - ab_t) eps``.

    Example:
        >>> from noisebridge.schedule import NoiseSchedule
        >>> s = NoiseSchedule.from_alpha_bar([0.9, 0.5, 0.01])
        >>> float(diffuse(np.array([1.0]), 1, np.array([0.5]), s)[0])  # doctest: +ELLIPSIS
        1.0606...
    """
    z0 = np.asarray(z0, dtype=np.float64)
    eps = np.asarray(eps, dtype=np.float64)
    _same_shape(z0, eps, "eps")
    check_timesteps(t, schedule)
    scale = per_example(schedule.sqrt_alpha_bar, t, z0)
    noise = per_example(schedule.sigma, t, z0)
    return scale * z0 + noise * eps


def bridge_latent(
    z0: np.ndarray,
    eps: np.ndarray,
    eps_a: np.ndarray,
    t: Timesteps,
    schedule: NoiseSchedule,
) -> np.ndarray:
    """Noise-bridge latent ``z_t^a - k_t eps_a``.

    ``z_t^a`` diffuses the adversarial input ``z0 + eps_a``. At the terminal
    index ``k`` is exactly zero, so the bridge latent coincides with the
    diffused adversarial sample there.
    """
    z0 = np.asarray(z0, dtype=np.float64)
    eps_a = np.asarray(eps_a, dtype=np.float64)
    _same_shape(z0, eps_a, "eps_a")
    adversarial = diffuse(z0 + eps_a, t, eps, schedule)
    return adversarial - per_example(schedule.k, t, z0) * eps_a


def epsilon_a_posterior_coefficient(
    t: int,
    schedule: NoiseSchedule,
    k_override: Optional[np.ndarray] = None,
) -> float:
    """Coefficient of ``eps_a`` in the posterior mean of ``z_{t-1}``.

    Zero for every ``t >= 1`` when ``k`` is the bridge coefficient. Passing
    ``k_override`` (for example all zeros) shows the residual of a schedule
    without the bridge.

    Raises:
        DomainError: If step ``t - 1`` is noiseless, where the posterior
            collapses to a point
    """
    t = int(check_timesteps(t, schedule, minimum=1))
    if schedule.one_minus_alpha_bar[t - 1] == 0:
        raise DomainError(f"the eps_a posterior coefficient is undefined at t={t}: step {t - 1} is noiseless")
    k = schedule.k if k_override is None else np.asarray(k_override, dtype=np.float64)
    if k.shape != schedule.k.shape:
        raise ShapeMismatchError(f"k_override has shape {k.shape}, expected {schedule.k.shape}")
    alpha_t = schedule.alpha[t]
    beta_t = schedule.beta[t]
    root_alpha = np.sqrt(alpha_t)
    from_transition = root_alpha * (root_alpha * k[t - 1] - k[t]) / beta_t
    from_marginal = (np.sqrt(schedule.alpha_bar[t - 1]) - k[t - 1]) / schedule.one_minus_alpha_bar[t - 1]
    return float(from_transition - from_marginal)


__all__ = [
    "Timesteps",
    "check_timesteps",
    "per_example",
    "diffuse",
    "bridge_latent",
    "epsilon_a_posterior_coefficient",
]
