"""Noise-bridge consistency distillation for adversarial purification.

This package trains a small diffusion teacher, distills it into a
one-step consistency model whose targets cancel the adversarial
perturbation, and purifies attacked inputs with it, optionally
conditioned on a fused multi-scale edge map.
"""

from noisebridge.bridge import bridge_latent, diffuse, epsilon_a_posterior_coefficient
from noisebridge.config import RunConfig, load_config
from noisebridge.distill import cd_loss, ddim_solve, leapfrog_solve, rec_loss, run_distillation, train_teacher
from noisebridge.errors import NoiseBridgeError
from noisebridge.net import DenoiserNet, EmaState, ema_update
from noisebridge.attack import pgd, train_toy_classifier
from noisebridge.pipeline import PurificationPipeline
from noisebridge.purify import EvalReport, evaluate, psnr, purify, ssim
from noisebridge.schedule import NoiseSchedule, bridge_k, build_linear_schedule
from noisebridge.semantic import build_condition, canny, otsu_threshold

__version__ = "0.1.0"
__all__ = [
    "NoiseSchedule",
    "build_linear_schedule",
    "bridge_k",
    "diffuse",
    "bridge_latent",
    "epsilon_a_posterior_coefficient",
    "DenoiserNet",
    "EmaState",
    "ema_update",
    "train_toy_classifier",
    "pgd",
    "train_teacher",
    "ddim_solve",
    "leapfrog_solve",
    "cd_loss",
    "rec_loss",
    "run_distillation",
    "otsu_threshold",
    "canny",
    "build_condition",
    "purify",
    "psnr",
    "ssim",
    "evaluate",
    "EvalReport",
    "RunConfig",
    "load_config",
    "PurificationPipeline",
    "NoiseBridgeError",
]
