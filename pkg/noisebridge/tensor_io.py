"""On-disk formats: raw tensors with JSON sidecars, label CSVs and PGM/PPM images."""

import csv
import json
import logging
from pathlib import Path
from typing import Any, Dict, List, Sequence, Tuple, Union

import numpy as np
from PIL import Image

from noisebridge.errors import CheckpointNotFoundError, ShapeMismatchError

logger = logging.getLogger(__name__)

PathLike = Union[str, Path]

_DTYPE = np.dtype("<f8")


def tensor_paths(base: PathLike) -> Tuple[Path, Path]:
    """``(data, sidecar)`` paths for a tensor stored under ``base``."""
    base = Path(base)
    return base.with_suffix(".bin"), base.with_suffix(".json")


def save_tensors(base: PathLike, arrays: Sequence[np.ndarray], meta: Dict[str, Any]) -> List[Path]:
    """Write arrays back to back as little-endian float64 plus a JSON sidecar.

    The sidecar records every shape so :func:`load_tensors` can split the
    flat buffer again. ``meta`` is stored next to the shapes.
    """
    data_path, meta_path = tensor_paths(base)
    data_path.parent.mkdir(parents=True, exist_ok=True)
    shapes = [list(np.shape(array)) for array in arrays]
    flat = [np.ascontiguousarray(array, dtype=_DTYPE).ravel() for array in arrays]
    buffer = np.concatenate(flat) if flat else np.zeros(0, dtype=_DTYPE)
    data_path.write_bytes(buffer.tobytes())
    sidecar = {"shapes": shapes, "dtype": "float64-le", **meta}
    meta_path.write_text(json.dumps(sidecar, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    logger.debug("wrote %d tensors to %s", len(shapes), data_path)
    return [data_path, meta_path]


def load_tensors(base: PathLike) -> Tuple[List[np.ndarray], Dict[str, Any]]:
    """Read arrays written by :func:`save_tensors`.

    Raises:
        CheckpointNotFoundError: If either file is missing
        ShapeMismatchError: If the buffer does not match the recorded shapes
    """
    data_path, meta_path = tensor_paths(base)
    for path in (data_path, meta_path):
        if not path.is_file():
            raise CheckpointNotFoundError(f"checkpoint not found: {path}")
    meta = json.loads(meta_path.read_text(encoding="utf-8"))
    buffer = np.frombuffer(data_path.read_bytes(), dtype=_DTYPE)
    arrays = []
    offset = 0
    for shape in meta["shapes"]:
        size = int(np.prod(shape)) if shape else 1
        if offset + size > buffer.size:
            raise ShapeMismatchError(f"{data_path} is shorter than its sidecar describes")
        arrays.append(buffer[offset:offset + size].reshape(shape).astype(np.float64))
        offset += size
    if offset != buffer.size:
        raise ShapeMismatchError(f"{data_path} holds {buffer.size - offset} trailing values")
    return arrays, meta


def write_labels(path: PathLike, labels: np.ndarray) -> Path:
    """Write ``index,label`` rows."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", newline="", encoding="utf-8") as handle:
        writer = csv.writer(handle)
        writer.writerow(["index", "label"])
        for index, label in enumerate(np.asarray(labels, dtype=np.int64)):
            writer.writerow([index, int(label)])
    return path


def read_labels(path: PathLike) -> np.ndarray:
    path = Path(path)
    if not path.is_file():
        raise CheckpointNotFoundError(f"labels not found: {path}")
    with path.open(newline="", encoding="utf-8") as handle:
        rows = list(csv.DictReader(handle))
    rows.sort(key=lambda row: int(row["index"]))
    return np.array([int(row["label"]) for row in rows], dtype=np.int64)


def write_image(path: PathLike, image: np.ndarray) -> Path:
    """Save a [0, 1] image as binary PGM (gray) or PPM (RGB)."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    pixels = np.rint(np.clip(np.asarray(image, dtype=np.float64), 0.0, 1.0) * 255.0).astype(np.uint8)
    if pixels.ndim not in (2, 3):
        raise ShapeMismatchError(f"images must be (H, W) or (H, W, 3), got {pixels.shape}")
    Image.fromarray(pixels).save(path, format="PPM")
    return path


def read_image(path: PathLike) -> np.ndarray:
    """Load a PGM/PPM image into [0, 1] floats."""
    path = Path(path)
    if not path.is_file():
        raise CheckpointNotFoundError(f"image not found: {path}")
    with Image.open(path) as handle:
        return np.asarray(handle, dtype=np.float64) / 255.0


__all__ = [
    "tensor_paths",
    "save_tensors",
    "load_tensors",
    "write_labels",
    "read_labels",
    "write_image",
    "read_image",
]
