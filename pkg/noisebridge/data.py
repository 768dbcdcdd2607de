"""Synthetic datasets: a 2-D Gaussian mixture and 32x32 geometric shapes."""

import logging
from dataclasses import dataclass
from pathlib import Path
from typing import List, Optional, Tuple, Union

import numpy as np

from noisebridge.config import DataConfig
from noisebridge.errors import DatasetError, ShapeMismatchError
from noisebridge.tensor_io import load_tensors, read_labels, save_tensors, write_image, write_labels

logger = logging.getLogger(__name__)

SHAPES_SIZE = 32
SHAPE_NAMES = ("circle", "square", "triangle")


@dataclass
class Dataset:
    """Examples ``x`` with integer labels ``y``.

    ``data_range`` is ``(0.0, 1.0)`` for images and ``None`` for
    unbounded vector data.
    """

    x: np.ndarray
    y: np.ndarray
    num_classes: int
    data_range: Optional[Tuple[float, float]] = None

    def __post_init__(self):
        self.x = np.asarray(self.x, dtype=np.float64)
        self.y = np.asarray(self.y, dtype=np.int64)
        if self.x.shape[0] != self.y.shape[0]:
            raise ShapeMismatchError(f"{self.x.shape[0]} examples but {self.y.shape[0]} labels")

    def __len__(self) -> int:
        return int(self.x.shape[0])

    @property
    def example_shape(self) -> Tuple[int, ...]:
        return tuple(self.x.shape[1:])

    @property
    def is_image(self) -> bool:
        return self.x.ndim == 3

    def subset(self, index: np.ndarray) -> "Dataset":
        return Dataset(self.x[index], self.y[index], self.num_classes, self.data_range)

    def split(self, holdout_fraction: float, rng: np.random.Generator) -> Tuple["Dataset", "Dataset"]:
        """Random ``(rest, held_out)`` split; at least one example is held out.

        Raises:
            DatasetError: If nothing would be left outside the held-out part
        """
        order = rng.permutation(len(self))
        n_hold = max(1, int(round(holdout_fraction * len(self))))
        if n_hold >= len(self):
            raise DatasetError(f"holdout of {n_hold} leaves no examples out of {len(self)}")
        return self.subset(order[n_hold:]), self.subset(order[:n_hold])

    def require_nonempty(self) -> "Dataset":
        if len(self) == 0:
            raise DatasetError("dataset is empty")
        return self


def make_toy2d(n: int, rng: np.random.Generator, n_classes: int = 2, radius: float = 0.25, std: float = 0.06) -> Dataset:
    """Gaussian mixture with one isotropic component per class on a circle."""
    angles = 2.0 * np.pi * np.arange(n_classes) / n_classes
    centres = radius * np.stack([np.cos(angles), np.sin(angles)], axis=1)
    y = rng.integers(0, n_classes, size=n)
    x = centres[y] + std * rng.standard_normal((n, 2))
    return Dataset(x, y, n_classes, None)


def _shape_mask(kind: int, rng: np.random.Generator, size: int) -> np.ndarray:
    rows, cols = np.mgrid[0:size, 0:size].astype(np.float64)
    cx, cy = rng.uniform(10.0, size - 10.0, size=2)
    theta = rng.uniform(0.0, 2.0 * np.pi)
    dx, dy = cols - cx, rows - cy
    if kind == 0:
        r = rng.uniform(5.0, 9.0)
        return dx ** 2 + dy ** 2 <= r ** 2
    if kind == 1:
        half = rng.uniform(4.0, 8.0)
        u = np.cos(theta) * dx + np.sin(theta) * dy
        v = -np.sin(theta) * dx + np.cos(theta) * dy
        return np.maximum(np.abs(u), np.abs(v)) <= half
    r = rng.uniform(6.0, 10.0)
    vertex_angles = theta + 2.0 * np.pi * np.arange(3) / 3.0
    vx, vy = r * np.cos(vertex_angles), r * np.sin(vertex_angles)
    crosses = []
    for i in range(3):
        j = (i + 1) % 3
        crosses.append((vx[j] - vx[i]) * (dy - vy[i]) - (vy[j] - vy[i]) * (dx - vx[i]))
    crosses = np.stack(crosses)
    return np.all(crosses >= 0, axis=0) | np.all(crosses <= 0, axis=0)


def make_shapes32(n: int, rng: np.random.Generator, noise: float = 0.05) -> Dataset:
    """Gray 32x32 circles, squares and triangles on a darker noisy background."""
    y = rng.integers(0, len(SHAPE_NAMES), size=n)
    x = np.empty((n, SHAPES_SIZE, SHAPES_SIZE))
    for i, kind in enumerate(y):
        mask = _shape_mask(int(kind), rng, SHAPES_SIZE)
        background = rng.uniform(0.0, 0.3)
        foreground = rng.uniform(0.6, 1.0)
        image = np.where(mask, foreground, background)
        image = image + noise * rng.standard_normal(image.shape)
        x[i] = np.clip(image, 0.0, 1.0)
    return Dataset(x, y, len(SHAPE_NAMES), (0.0, 1.0))


def generate_dataset(dataset: str, config: DataConfig, rng: np.random.Generator) -> Tuple[Dataset, Dataset]:
    """Train and test splits of the named dataset."""
    total = config.n_train + config.n_test
    if dataset == "toy2d":
        full = make_toy2d(total, rng, config.toy2d_classes, config.toy2d_radius, config.toy2d_std)
    elif dataset == "shapes32":
        full = make_shapes32(total, rng, config.shapes_noise)
    else:
        raise DatasetError(f"unknown dataset {dataset!r}")
    train = full.subset(np.arange(config.n_train))
    test = full.subset(np.arange(config.n_train, total))
    logger.info("generated %s: %d train, %d test", dataset, len(train), len(test))
    return train, test


def save_dataset(directory: Union[str, Path], name: str, dataset: Dataset, preview: int = 0) -> List[Path]:
    """Write ``<name>.bin/.json`` and ``<name>_labels.csv``; optionally a few PGM previews."""
    directory = Path(directory)
    meta = {"kind": "dataset", "num_classes": dataset.num_classes,
            "data_range": list(dataset.data_range) if dataset.data_range else None}
    paths = save_tensors(directory / name, [dataset.x], meta)
    paths.append(write_labels(directory / f"{name}_labels.csv", dataset.y))
    if dataset.is_image:
        for i in range(min(preview, len(dataset))):
            paths.append(write_image(directory / "preview" / f"{name}_{i:03d}.pgm", dataset.x[i]))
    return paths


def load_dataset(directory: Union[str, Path], name: str) -> Dataset:
    directory = Path(directory)
    (x,), meta = load_tensors(directory / name)
    y = read_labels(directory / f"{name}_labels.csv")
    data_range = tuple(meta["data_range"]) if meta.get("data_range") else None
    return Dataset(x, y, int(meta["num_classes"]), data_range)


__all__ = [
    "Dataset",
    "SHAPE_NAMES",
    "make_toy2d",
    "make_shapes32",
    "generate_dataset",
    "save_dataset",
    "load_dataset",
]
