"""Teacher pretraining, ODE solvers and noise-bridge consistency distillation."""

import logging
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Tuple

import numpy as np
from tqdm.auto import tqdm

from noisebridge.attack import DataRange, ToyClassifier, accuracy, pgd
from noisebridge.bridge import Timesteps, bridge_latent, check_timesteps, diffuse, per_example
from noisebridge.config import AttackBudget, DistillConfig, NetConfig, TeacherConfig
from noisebridge.errors import ConvergenceError, DivergenceError, DomainError, ShapeMismatchError, TimestepError
from noisebridge.net import (
    DenoiserNet,
    EmaState,
    ParameterGradients,
    consistency_apply,
    consistency_backward,
    consistency_forward,
    ema_update,
    sgd_step,
)
from noisebridge.schedule import NoiseSchedule

logger = logging.getLogger(__name__)


def train_teacher(
    x: np.ndarray,
    schedule: NoiseSchedule,
    net_config: NetConfig,
    config: TeacherConfig,
    rng: np.random.Generator,
    verbose: bool = False,
) -> DenoiserNet:
    """Fit an unconditional epsilon-prediction network by SGD on the noise MSE."""
    x = np.asarray(x, dtype=np.float64)
    teacher = DenoiserNet.create(
        data_shape=x.shape[1:],
        hidden_sizes=net_config.hidden_sizes,
        time_embed_dim=net_config.time_embed_dim,
        rng=rng,
        zero_init_output=net_config.zero_init_output,
        sigma_data=net_config.sigma_data,
        timestep_scaling=net_config.timestep_scaling,
    )
    for iteration in tqdm(range(config.n_iters), desc="teacher", disable=not verbose):
        batch = x[rng.integers(0, x.shape[0], size=config.batch_size)]
        t = rng.integers(0, schedule.num_steps, size=batch.shape[0])
        eps = rng.standard_normal(batch.shape)
        eps_hat, cache = teacher.forward_with_cache(diffuse(batch, t, eps, schedule), t)
        diff = eps_hat - eps
        loss = float(np.mean(diff ** 2))
        if not np.isfinite(loss):
            raise DivergenceError(f"teacher training diverged at iteration {iteration}")
        grads = teacher.backward(2.0 * diff / diff.size, cache)
        sgd_step(teacher, grads, config.learning_rate)
    return teacher


def epsilon_mse(net: DenoiserNet, x: np.ndarray, schedule: NoiseSchedule, rng: np.random.Generator, n: int = 256) -> float:
    """Mean squared noise-prediction error on ``n`` random draws."""
    x = np.asarray(x, dtype=np.float64)
    batch = x[rng.integers(0, x.shape[0], size=n)]
    t = rng.integers(0, schedule.num_steps, size=n)
    eps = rng.standard_normal(batch.shape)
    return float(np.mean((net.forward(diffuse(batch, t, eps, schedule), t) - eps) ** 2))


def _solver_parts(
    teacher: DenoiserNet,
    z: np.ndarray,
    t_from: Timesteps,
    t_to: Timesteps,
    cond: Optional[np.ndarray],
    schedule: NoiseSchedule,
) -> Tuple[np.ndarray, np.ndarray]:
    z = np.asarray(z, dtype=np.float64)
    start = check_timesteps(t_from, schedule)
    end = check_timesteps(t_to, schedule)
    if np.any(end >= start):
        raise TimestepError(f"solvers step backwards in time: t_to {t_to!r} must be below t_from {t_from!r}")
    eps_hat = teacher.forward(z, t_from, cond if teacher.cond_dim else None)
    x0_hat = (z - per_example(schedule.sigma, t_from, z) * eps_hat) / per_example(schedule.sqrt_alpha_bar, t_from, z)
    position = per_example(schedule.sqrt_alpha_bar, t_to, z) * x0_hat
    velocity = per_example(schedule.sigma, t_to, z) * eps_hat
    return position, velocity


def ddim_solve(
    teacher: DenoiserNet,
    z: np.ndarray,
    t_from: Timesteps,
    t_to: Timesteps,
    schedule: NoiseSchedule,
    cond: Optional[np.ndarray] = None,
) -> np.ndarray:
    """Deterministic DDIM step from ``t_from`` down to ``t_to``."""
    position, velocity = _solver_parts(teacher, z, t_from, t_to, cond, schedule)
    return position + velocity


def leapfrog_solve(
    teacher: DenoiserNet,
    z: np.ndarray,
    t_from: Timesteps,
    t_to: Timesteps,
    h: float,
    schedule: NoiseSchedule,
    cond: Optional[np.ndarray] = None,
) -> np.ndarray:
    """DDIM step whose noise component is damped by the velocity factor ``h``.

    ``h = 1`` reproduces :func:`ddim_solve` exactly.
    """
    if not 0.0 <= h <= 1.0:
        raise DomainError(f"leapfrog h must lie in [0, 1], got {h}")
    position, velocity = _solver_parts(teacher, z, t_from, t_to, cond, schedule)
    return position + h * velocity


def distance(a: np.ndarray, b: np.ndarray, metric: str = "l2", delta: float = 1.0) -> Tuple[float, np.ndarray]:
    """Batch-mean of per-example distances and the gradient with respect to ``a``.

    ``l2`` is the per-example sum of squares; ``huber`` is the classic
    elementwise Huber loss summed per example.
    """
    if a.shape != b.shape:
        raise ShapeMismatchError(f"cannot compare shapes {a.shape} and {b.shape}")
    diff = a - b
    batch = diff.shape[0]
    if metric == "l2":
        return float(np.sum(diff ** 2) / batch), 2.0 * diff / batch
    if metric == "huber":
        magnitude = np.abs(diff)
        quadratic = magnitude <= delta
        values = np.where(quadratic, 0.5 * diff ** 2, delta * (magnitude - 0.5 * delta))
        grad = np.where(quadratic, diff, delta * np.sign(diff))
        return float(np.sum(values) / batch), grad / batch
    raise ValueError(f"unknown distance metric {metric!r}")


@dataclass
class LossResult:
    value: float
    grads: ParameterGradients


def consistency_pair_loss(
    student: DenoiserNet,
    target: DenoiserNet,
    z_student: np.ndarray,
    t_student: Timesteps,
    z_target: np.ndarray,
    t_target: Timesteps,
    schedule: NoiseSchedule,
    cond: Optional[np.ndarray] = None,
    metric: str = "l2",
    delta: float = 1.0,
) -> LossResult:
    """``d(f_student(z_student), f_target(z_target))`` with gradients for the student only."""
    anchor = consistency_apply(target, z_target, t_target, cond, schedule)
    out, cache = consistency_forward(student, z_student, t_student, cond, schedule)
    value, grad = distance(out, anchor, metric, delta)
    return LossResult(value, consistency_backward(student, grad, cache))


def _upper_timestep(n: Timesteps, config: DistillConfig, schedule: NoiseSchedule) -> np.ndarray:
    n = check_timesteps(n, schedule)
    upper = n + config.skip_interval
    if np.any(upper > schedule.last):
        raise TimestepError(f"n + k must not exceed {schedule.last}; got n={n!r}, k={config.skip_interval}")
    return upper


def cd_loss(
    student: DenoiserNet,
    ema: EmaState,
    teacher: DenoiserNet,
    z0: np.ndarray,
    eps: np.ndarray,
    eps_a: np.ndarray,
    n: Timesteps,
    config: DistillConfig,
    schedule: NoiseSchedule,
    cond: Optional[np.ndarray] = None,
) -> LossResult:
    """Consistency loss between the bridge latent at ``n + k`` and the solver estimate at ``n``."""
    upper = _upper_timestep(n, config, schedule)
    z_tilde = bridge_latent(z0, eps, eps_a, upper, schedule)
    z_hat = leapfrog_solve(teacher, z_tilde, upper, n, config.leapfrog_h, schedule, cond)
    return consistency_pair_loss(
        student, ema.shadow, z_tilde, upper, z_hat, n, schedule, cond, config.distance_metric, config.huber_delta,
    )


def rec_loss(
    student: DenoiserNet,
    z0: np.ndarray,
    eps: np.ndarray,
    eps_a: np.ndarray,
    t: Timesteps,
    config: DistillConfig,
    schedule: NoiseSchedule,
) -> LossResult:
    """Reconstruction loss of the null-conditioned student against the clean input."""
    z_tilde = bridge_latent(z0, eps, eps_a, t, schedule)
    out, cache = consistency_forward(student, z_tilde, t, None, schedule)
    value, grad = distance(out, np.asarray(z0, dtype=np.float64), config.distance_metric, config.huber_delta)
    return LossResult(value, consistency_backward(student, grad, cache))


@dataclass
class LossParts:
    total: float
    cd: float
    rec: Optional[float]


def distillation_loss(
    student: DenoiserNet,
    ema: EmaState,
    teacher: DenoiserNet,
    z0: np.ndarray,
    eps: np.ndarray,
    eps_a: np.ndarray,
    n: Timesteps,
    config: DistillConfig,
    schedule: NoiseSchedule,
    cond: Optional[np.ndarray] = None,
) -> Tuple[LossParts, ParameterGradients]:
    """``L_CD + lambda_rec * L_rec`` at ``t = n + k``.

    The reconstruction term reuses the bridge latent of the consistency term
    and always sees the null condition. With ``lambda_rec = 0`` it is not
    evaluated and reported as ``None``.
    """
    consistency = cd_loss(student, ema, teacher, z0, eps, eps_a, n, config, schedule, cond)
    if config.lambda_rec == 0:
        return LossParts(consistency.value, consistency.value, None), consistency.grads
    upper = _upper_timestep(n, config, schedule)
    reconstruction = rec_loss(student, z0, eps, eps_a, upper, config, schedule)
    total = consistency.value + config.lambda_rec * reconstruction.value
    grads = consistency.grads + reconstruction.grads.scaled(config.lambda_rec)
    return LossParts(total, consistency.value, reconstruction.value), grads


@dataclass
class LogEntry:
    iteration: int
    cd_loss: float
    rec_loss: Optional[float]
    total: float


@dataclass
class DistillationLog:
    """Per-iteration losses of one distillation run."""

    entries: List[LogEntry] = field(default_factory=list)

    def append(self, iteration: int, parts: LossParts) -> None:
        self.entries.append(LogEntry(iteration, parts.cd, parts.rec, parts.total))

    def decile_means(self) -> Tuple[float, float]:
        """Mean total loss over the first and the last tenth of the run."""
        totals = np.array([entry.total for entry in self.entries])
        if totals.size == 0:
            return float("nan"), float("nan")
        width = max(1, totals.size // 10)
        return float(totals[:width].mean()), float(totals[-width:].mean())

    def rows(self) -> List[Dict[str, object]]:
        return [
            {"iteration": e.iteration, "cd_loss": e.cd_loss, "rec_loss": "" if e.rec_loss is None else e.rec_loss, "total": e.total}
            for e in self.entries
        ]


def _dropped_condition(cond_maps: Optional[np.ndarray], index: np.ndarray, drop_p: float, rng: np.random.Generator) -> Optional[np.ndarray]:
    if cond_maps is None:
        return None
    cond = cond_maps[index].copy()
    dropped = rng.random(index.size) < drop_p
    cond[dropped] = 0.0
    return cond


def _broadcast_rows(mask: np.ndarray, like: np.ndarray) -> np.ndarray:
    return mask.reshape((-1,) + (1,) * (like.ndim - 1))


def run_distillation(
    x: np.ndarray,
    y: np.ndarray,
    teacher: DenoiserNet,
    victim: ToyClassifier,
    config: DistillConfig,
    budget: AttackBudget,
    schedule: NoiseSchedule,
    rng: np.random.Generator,
    conditions: Optional[np.ndarray] = None,
    data_range: DataRange = None,
    verbose: bool = False,
) -> Tuple[DenoiserNet, EmaState, DistillationLog]:
    """Train a consistency student with noise-bridge targets.

    Args:
        x, y: Clean training examples and labels
        teacher: Frozen epsilon-prediction network driving the solver
        victim: Classifier attacked by PGD to produce ``eps_a``
        conditions: Per-example condition vectors; ``None`` trains an
            unconditional student

    A ``config.clean_fraction`` share of every batch keeps ``eps_a = 0``,
    so the student also learns the plain consistency map of clean inputs.

    Raises:
        ConvergenceError: If the victim is too weak on ``x``
        DivergenceError: If a loss becomes non-finite
    """
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y)
    victim_acc = accuracy(victim, x, y)
    if victim_acc < 100.0 * config.min_victim_accuracy:
        raise ConvergenceError(
            f"victim accuracy {victim_acc:.2f}% is below {100.0 * config.min_victim_accuracy:.2f}%; refusing to distill"
        )
    if conditions is not None and conditions.shape[0] != x.shape[0]:
        raise ShapeMismatchError(f"{conditions.shape[0]} conditions for {x.shape[0]} examples")

    cond_dim = 0 if conditions is None else int(conditions.shape[1])
    student = DenoiserNet.from_teacher(teacher, cond_dim)
    ema = EmaState.from_net(student, config.ema_rate)
    log = DistillationLog()
    cached: Dict[int, np.ndarray] = {}
    max_n = schedule.last - config.skip_interval

    for iteration in tqdm(range(config.n_iters), desc="distill", disable=not verbose):
        index = rng.integers(0, x.shape[0], size=config.batch_size)
        z0 = x[index]
        if config.regenerate_attack:
            eps_a = pgd(victim, z0, y[index], budget, rng, data_range)
        else:
            missing = sorted({int(i) for i in index} - cached.keys())
            if missing:
                fresh = pgd(victim, x[missing], y[missing], budget, rng, data_range)
                cached.update(zip(missing, fresh))
            eps_a = np.stack([cached[int(i)] for i in index])
        if config.clean_fraction > 0:
            eps_a = np.where(_broadcast_rows(rng.random(index.size) < config.clean_fraction, eps_a), 0.0, eps_a)
        eps = rng.standard_normal(z0.shape)
        n = rng.integers(0, max_n + 1, size=index.size)
        cond = _dropped_condition(conditions, index, config.cond_dropout_p, rng)

        parts, grads = distillation_loss(student, ema, teacher, z0, eps, eps_a, n, config, schedule, cond)
        if not (np.isfinite(parts.total) and grads.is_finite()):
            raise DivergenceError(
                f"distillation diverged at iteration {iteration}: L_CD={parts.cd}, L_rec={parts.rec}"
            )
        sgd_step(student, grads, config.learning_rate)
        ema_update(ema, student)
        log.append(iteration, parts)
        if iteration % 500 == 0:
            logger.debug("iteration %d: total %.5f", iteration, parts.total)

    first, last = log.decile_means()
    logger.info("distillation finished: loss %.5f -> %.5f", first, last)
    return student, ema, log


def limit_gap(
    student: DenoiserNet,
    z0: np.ndarray,
    eps: np.ndarray,
    eps_a: np.ndarray,
    t: int,
    schedule: NoiseSchedule,
) -> Tuple[float, float]:
    """Mean distance between student outputs on adversarial and clean diffused inputs.

    Returns ``(gap, perturbation)`` where ``perturbation`` is the mean norm
    of ``eps_a``. As ``t`` goes to 0 the consistency map approaches the
    identity, so ``gap`` tends to ``perturbation``.
    """
    adversarial = consistency_apply(student, diffuse(z0 + eps_a, t, eps, schedule), t, None, schedule)
    clean = consistency_apply(student, diffuse(z0, t, eps, schedule), t, None, schedule)
    return _mean_norm(adversarial - clean), _mean_norm(np.asarray(eps_a))


def bridge_alignment(
    student: DenoiserNet,
    z0: np.ndarray,
    eps: np.ndarray,
    eps_a: np.ndarray,
    t: int,
    schedule: NoiseSchedule,
) -> float:
    """Mean distance between student outputs on the bridge latent and the clean latent."""
    bridged = consistency_apply(student, bridge_latent(z0, eps, eps_a, t, schedule), t, None, schedule)
    clean = consistency_apply(student, diffuse(z0, t, eps, schedule), t, None, schedule)
    return _mean_norm(bridged - clean)


def _mean_norm(values: np.ndarray) -> float:
    return float(np.mean(np.sqrt(np.sum(values.reshape(values.shape[0], -1) ** 2, axis=1))))


__all__ = [
    "train_teacher",
    "epsilon_mse",
    "ddim_solve",
    "leapfrog_solve",
    "distance",
    "LossResult",
    "consistency_pair_loss",
    "cd_loss",
    "rec_loss",
    "LossParts",
    "distillation_loss",
    "LogEntry",
    "DistillationLog",
    "run_distillation",
    "limit_gap",
    "bridge_alignment",
]
