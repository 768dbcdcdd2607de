"""Shared fixtures."""

import json

import numpy as np
import pytest

from noisebridge.net import DenoiserNet
from noisebridge.schedule import build_linear_schedule


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def schedule():
    return build_linear_schedule(100, 1e-4, 0.02)


@pytest.fixture
def small_schedule():
    return build_linear_schedule(10, 1e-3, 0.05)


@pytest.fixture
def tiny_net(rng):
    """Small denoiser with random output weights so gradients reach every layer."""
    return DenoiserNet.create((3,), (5, 4), 4, rng, cond_dim=2, zero_init_output=False)


@pytest.fixture
def tiny_config_file(tmp_path):
    """Write a toy2d config small enough to run end to end in seconds."""

    def write(**overrides):
        raw = {
            "seed": 3,
            "dataset": "toy2d",
            "output_dir": str(tmp_path / "run"),
            "data": {"n_train": 200, "n_test": 40},
            "schedule": {"n_steps": 20, "beta_start": 1e-3, "beta_end": 0.2},
            "net": {"hidden_sizes": [16], "time_embed_dim": 4},
            "classifier": {"hidden_sizes": [8], "n_epochs": 30, "min_accuracy": 0.0},
            "teacher": {"n_iters": 20, "n_val": 16},
            "attack": {"epsilon": 0.1, "n_iters": 2},
            "distill": {"k": 5, "n_iters": 5, "batch_size": 8, "min_victim_accuracy": 0.0},
            "purify": {"timing_images": 2, "ddim_steps": 5, "sweep_steps": [1, 2]},
        }
        raw.update(overrides)
        path = tmp_path / "config.json"
        path.write_text(json.dumps(raw))
        return path

    return write
