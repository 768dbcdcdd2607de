"""Purification by consistency models and the robustness evaluation around it."""

import logging
import time
from typing import List, Optional, Protocol, Sequence, Tuple

import numpy as np
from pydantic import BaseModel, ConfigDict, Field
from skimage.metrics import peak_signal_noise_ratio, structural_similarity

from noisebridge.attack import DataRange, ToyClassifier, accuracy, pgd
from noisebridge.bridge import diffuse
from noisebridge.config import AttackBudget, PurifyConfig, SemanticConfig
from noisebridge.distill import ddim_solve
from noisebridge.errors import DatasetError, ShapeMismatchError, TimestepError, UntrainedModelError
from noisebridge.net import DenoiserNet
from noisebridge.schedule import NoiseSchedule
from noisebridge.semantic import edge_conditions

logger = logging.getLogger(__name__)

PSNR_CAP = 99.0
SSIM_WINDOW = 11


class ConsistencyModel(Protocol):
    """Anything that maps a noisy latent straight back to the data manifold."""

    cond_dim: int
    trained_iters: int

    def consistency(self, z: np.ndarray, t, cond: Optional[np.ndarray], schedule: NoiseSchedule) -> np.ndarray:
        ...


def resolve_timesteps(config: PurifyConfig, schedule: NoiseSchedule) -> Tuple[int, ...]:
    """Timesteps of the multi-step purification, starting at the terminal index."""
    if config.renoise_schedule:
        steps = tuple(int(t) for t in config.renoise_schedule)
    else:
        grid = np.linspace(schedule.last, 0, config.n_inference_steps + 1)[:-1]
        steps = tuple(int(t) for t in np.round(grid))
    if steps[0] != schedule.last or any(a <= b for a, b in zip(steps, steps[1:])) or steps[-1] < 0:
        raise TimestepError(f"purification timesteps {steps} must decrease strictly from {schedule.last}")
    return steps


def purify(
    student: ConsistencyModel,
    x_adv: np.ndarray,
    config: PurifyConfig,
    schedule: NoiseSchedule,
    rng: np.random.Generator,
    cond: Optional[np.ndarray] = None,
    data_range: DataRange = None,
) -> np.ndarray:
    """Diffuse to the terminal step and map back with the consistency function.

    Multi-step mode re-noises the estimate to each later timestep and maps
    it back again. ``cond`` holds one condition vector per example.

    Raises:
        UntrainedModelError: If the model has never been trained
    """
    if student.trained_iters <= 0:
        raise UntrainedModelError("purification needs a trained consistency model")
    x_adv = np.asarray(x_adv, dtype=np.float64)
    estimate = x_adv
    for t in resolve_timesteps(config, schedule):
        z = diffuse(estimate, t, rng.standard_normal(x_adv.shape), schedule)
        estimate = student.consistency(z, t, cond if student.cond_dim else None, schedule)
    if data_range is not None:
        estimate = np.clip(estimate, data_range[0], data_range[1])
    return estimate


class Purifier(Protocol):
    name: str

    def __call__(self, x: np.ndarray, rng: np.random.Generator) -> np.ndarray:
        ...


class IdentityPurifier:
    """No defence."""

    name = "identity"

    def __call__(self, x: np.ndarray, rng: np.random.Generator) -> np.ndarray:
        return np.array(x, dtype=np.float64)


class ConsistencyPurifier:
    """Student purification, building edge conditions on the fly when configured."""

    name = "consistency"

    def __init__(
        self,
        student: ConsistencyModel,
        config: PurifyConfig,
        schedule: NoiseSchedule,
        semantic: Optional[SemanticConfig] = None,
        cond_pool: int = 4,
        data_range: DataRange = None,
        workers: int = 1,
    ):
        self.student = student
        self.config = config
        self.schedule = schedule
        self.semantic = semantic
        self.cond_pool = cond_pool
        self.data_range = data_range
        self.workers = workers
        self.edge_seconds = 0.0

    def conditions(self, x: np.ndarray) -> Optional[np.ndarray]:
        if self.config.condition_mode != "fused_edge":
            return None
        if self.semantic is None:
            raise ValueError("fused_edge conditioning needs a semantic configuration")
        vectors, self.edge_seconds = edge_conditions(x, self.semantic, self.cond_pool, self.workers)
        return vectors

    def __call__(self, x: np.ndarray, rng: np.random.Generator) -> np.ndarray:
        return purify(self.student, x, self.config, self.schedule, rng, self.conditions(x), self.data_range)


class DdimPurifier:
    """Baseline: diffuse to the terminal step, then run a multi-step DDIM back to 0."""

    name = "ddim"

    def __init__(self, teacher: DenoiserNet, schedule: NoiseSchedule, steps: int = 50, data_range: DataRange = None):
        self.teacher = teacher
        self.schedule = schedule
        self.steps = steps
        self.data_range = data_range

    def timesteps(self) -> List[int]:
        grid = np.round(np.linspace(self.schedule.last, 0, self.steps + 1)).astype(int)
        return sorted(set(grid.tolist()), reverse=True)

    def __call__(self, x: np.ndarray, rng: np.random.Generator) -> np.ndarray:
        x = np.asarray(x, dtype=np.float64)
        z = diffuse(x, self.schedule.last, rng.standard_normal(x.shape), self.schedule)
        grid = self.timesteps()
        for t_from, t_to in zip(grid, grid[1:]):
            z = ddim_solve(self.teacher, z, t_from, t_to, self.schedule)
        if self.data_range is not None:
            z = np.clip(z, self.data_range[0], self.data_range[1])
        return z


def _check_pair(a: np.ndarray, b: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ShapeMismatchError(f"cannot compare images of shapes {a.shape} and {b.shape}")
    return a, b


def psnr(reference: np.ndarray, test: np.ndarray) -> float:
    """Peak signal-to-noise ratio in dB on [0, 1] images; identical images give ``inf``."""
    reference, test = _check_pair(reference, test)
    if np.array_equal(reference, test):
        return float("inf")
    return float(peak_signal_noise_ratio(reference, test, data_range=1.0))


def ssim(reference: np.ndarray, test: np.ndarray) -> float:
    """Gaussian-window SSIM (11 taps, sigma 1.5) on the 0-255 scale."""
    reference, test = _check_pair(reference, test)
    if reference.ndim != 2 or min(reference.shape) < SSIM_WINDOW:
        raise ShapeMismatchError(f"SSIM needs 2-D images of at least {SSIM_WINDOW}x{SSIM_WINDOW}, got {reference.shape}")
    return float(
        structural_similarity(
            reference * 255.0,
            test * 255.0,
            data_range=255.0,
            win_size=SSIM_WINDOW,
            gaussian_weights=True,
            sigma=1.5,
            use_sample_covariance=False,
        )
    )


class EvalReport(BaseModel):
    """Robustness and cost of one purification setting. Accuracies are percentages."""

    model_config = ConfigDict(frozen=True)

    n_images: int
    n_inference_steps: int
    condition_mode: str
    clean_acc: float = Field(description="Accuracy on purified clean inputs")
    robust_acc_undefended: float
    robust_acc_purified: float
    psnr_db: Optional[float] = None
    ssim: Optional[float] = None
    per_image_seconds: float
    edge_seconds: float = 0.0
    ddim_seconds: Optional[float] = None
    speedup: Optional[float] = None

    def to_row(self) -> dict:
        row = self.model_dump()
        if row["psnr_db"] is not None:
            row["psnr_db"] = min(row["psnr_db"], PSNR_CAP)
        return row


def median_seconds(purifier: Purifier, x: np.ndarray, n_images: int, seed: int = 0) -> Tuple[float, float]:
    """Median wall time of single-image purification and of its edge stage.

    The first value excludes edge construction, which is reported on its own.
    """
    rng = np.random.default_rng(seed)
    totals, edges = [], []
    for image in x[:n_images]:
        start = time.perf_counter()
        purifier(image[None], rng)
        elapsed = time.perf_counter() - start
        edge = getattr(purifier, "edge_seconds", 0.0)
        totals.append(max(0.0, elapsed - edge))
        edges.append(edge)
    if not totals:
        return 0.0, 0.0
    return float(np.median(totals)), float(np.median(edges))


def evaluate(
    purifier: Purifier,
    victim: ToyClassifier,
    x: np.ndarray,
    y: np.ndarray,
    budget: AttackBudget,
    config: PurifyConfig,
    rng: np.random.Generator,
    data_range: DataRange = None,
    adversarial: Optional[np.ndarray] = None,
    baseline: Optional[Purifier] = None,
) -> EvalReport:
    """Clean and robust accuracy, image quality and latency of ``purifier``.

    ``adversarial`` reuses precomputed attacks; otherwise PGD runs here.
    """
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y)
    if x.shape[0] == 0:
        raise DatasetError("cannot evaluate on an empty dataset")
    if adversarial is None:
        adversarial = x + pgd(victim, x, y, budget, rng, data_range)
    elif adversarial.shape != x.shape:
        raise ShapeMismatchError(f"adversarial batch has shape {adversarial.shape}, expected {x.shape}")

    purified_clean = purifier(x, rng)
    purified_adv = purifier(adversarial, rng)
    psnr_db = ssim_value = None
    if x.ndim == 3:
        psnr_db = float(np.mean([psnr(a, b) for a, b in zip(x, purified_adv)]))
        ssim_value = float(np.mean([ssim(a, b) for a, b in zip(x, purified_adv)]))

    seconds, edge_seconds = median_seconds(purifier, adversarial, config.timing_images)
    ddim_seconds = speedup = None
    if baseline is not None:
        ddim_seconds, _ = median_seconds(baseline, adversarial, config.timing_images)
        speedup = ddim_seconds / seconds if seconds > 0 else None

    report = EvalReport(
        n_images=int(x.shape[0]),
        n_inference_steps=config.n_inference_steps,
        condition_mode=config.condition_mode,
        clean_acc=accuracy(victim, purified_clean, y),
        robust_acc_undefended=accuracy(victim, adversarial, y),
        robust_acc_purified=accuracy(victim, purified_adv, y),
        psnr_db=psnr_db,
        ssim=ssim_value,
        per_image_seconds=seconds,
        edge_seconds=edge_seconds,
        ddim_seconds=ddim_seconds,
        speedup=speedup,
    )
    logger.info(
        "robust accuracy %.2f%% undefended, %.2f%% purified (%d steps)",
        report.robust_acc_undefended, report.robust_acc_purified, config.n_inference_steps,
    )
    return report


def sweep_inference_steps(
    make_purifier,
    victim: ToyClassifier,
    x: np.ndarray,
    y: np.ndarray,
    adversarial: np.ndarray,
    budget: AttackBudget,
    config: PurifyConfig,
    seed: int,
    steps: Optional[Sequence[int]] = None,
    data_range: DataRange = None,
) -> List[EvalReport]:
    """One report per inference-step count on a shared set of attacks.

    ``make_purifier`` builds a purifier from a :class:`PurifyConfig`.
    """
    reports = []
    for count in steps or config.sweep_steps:
        variant = config.model_copy(update={"n_inference_steps": int(count), "renoise_schedule": ()})
        reports.append(
            evaluate(make_purifier(variant), victim, x, y, budget, variant, np.random.default_rng(seed),
                     data_range=data_range, adversarial=adversarial)
        )
    return reports


__all__ = [
    "PSNR_CAP",
    "ConsistencyModel",
    "resolve_timesteps",
    "purify",
    "Purifier",
    "IdentityPurifier",
    "ConsistencyPurifier",
    "DdimPurifier",
    "psnr",
    "ssim",
    "EvalReport",
    "median_seconds",
    "evaluate",
    "sweep_inference_steps",
]
