"""Multi-scale edge maps fused into a purification condition.

Each pyramid level blurs the (possibly adversarial) image, picks a Canny
threshold with Otsu's method and extracts binary edges. Per-pixel softmax
weights favour levels whose edge gradients agree with the image gradient.
"""

import logging
import math
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from fractions import Fraction
from typing import Optional, Sequence, Tuple

import numpy as np
from scipy import ndimage
from scipy.special import softmax

from noisebridge.config import SemanticConfig
from noisebridge.errors import DegenerateImageError, DomainError, ShapeMismatchError

logger = logging.getLogger(__name__)

MIN_HIGH_THRESHOLD = 1.0 / 255.0
_LUMA = np.array([0.299, 0.587, 0.114])


def as_gray_image(image: np.ndarray) -> np.ndarray:
    """Validate a [0, 1] image and convert colour input to luminance."""
    image = np.asarray(image, dtype=np.float64)
    if image.ndim == 3 and image.shape[2] == 3:
        image = image @ _LUMA
    if image.ndim != 2:
        raise ShapeMismatchError(f"expected an (H, W) or (H, W, 3) image, got {image.shape}")
    if image.size == 0:
        raise ShapeMismatchError("image is empty")
    if image.min() < 0.0 or image.max() > 1.0:
        raise DomainError("image values must lie in [0, 1]")
    return image


def gaussian_kernel1d(sigma: float) -> np.ndarray:
    """Normalised Gaussian taps with radius ``ceil(3 sigma)``."""
    radius = int(math.ceil(3.0 * sigma))
    offsets = np.arange(-radius, radius + 1, dtype=np.float64)
    kernel = np.exp(-(offsets ** 2) / (2.0 * sigma ** 2))
    return kernel / kernel.sum()


def gaussian_blur(image: np.ndarray, sigma: float) -> np.ndarray:
    """Separable Gaussian blur with mirrored borders; ``sigma = 0`` copies."""
    if sigma < 0:
        raise DomainError(f"sigma must be non-negative, got {sigma}")
    image = np.asarray(image, dtype=np.float64)
    if sigma == 0:
        return image.copy()
    kernel = gaussian_kernel1d(sigma)
    blurred = ndimage.correlate1d(image, kernel, axis=0, mode="reflect")
    return ndimage.correlate1d(blurred, kernel, axis=1, mode="reflect")


def quantize(image: np.ndarray) -> np.ndarray:
    return np.clip(np.rint(np.asarray(image) * 255.0), 0, 255).astype(np.int64)


def between_class_variance(hist: np.ndarray, k: int) -> Fraction:
    """Exact between-class variance when class 0 holds levels ``0..k``.

    Returns 0 when either class is empty.
    """
    hist = [int(count) for count in hist]
    levels = range(len(hist))
    n0 = sum(hist[: k + 1])
    n1 = sum(hist[k + 1:])
    if n0 == 0 or n1 == 0:
        return Fraction(0)
    s0 = sum(level * hist[level] for level in levels[: k + 1])
    s1 = sum(level * hist[level] for level in levels[k + 1:])
    total = n0 + n1
    return Fraction((s0 * n1 - s1 * n0) ** 2, n0 * n1 * total * total)


def otsu_threshold(image: np.ndarray) -> float:
    """Otsu threshold on a 256-bin histogram, returned on the [0, 1] scale.

    Candidates are compared exactly; ties go to the lowest level.

    Raises:
        DegenerateImageError: If the image has a single gray level
    """
    hist = np.bincount(quantize(image).ravel(), minlength=256)
    if np.count_nonzero(hist) < 2:
        raise DegenerateImageError("constant image has no Otsu threshold")
    levels = np.arange(256, dtype=np.float64)
    n0 = np.cumsum(hist)[:255].astype(np.float64)
    s0 = np.cumsum(hist * levels)[:255]
    n1 = n0[-1] + hist[255] - n0
    s1 = s0[-1] + 255.0 * hist[255] - s0
    with np.errstate(divide="ignore", invalid="ignore"):
        approx = np.where((n0 > 0) & (n1 > 0), (s0 * n1 - s1 * n0) ** 2 / (n0 * n1), 0.0)
    # Float screening only narrows the candidates; the winner is picked exactly.
    candidates = np.flatnonzero(approx >= approx.max() * (1.0 - 1e-9))
    best_k, best_value = None, Fraction(-1)
    for k in candidates:
        value = between_class_variance(hist, int(k))
        if value > best_value:
            best_k, best_value = int(k), value
    return best_k / 255.0


def sobel_gradients(image: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
    """Normalised Sobel derivatives ``(d/dx, d/dy)``; a unit step gives magnitude 1."""
    image = np.asarray(image, dtype=np.float64)
    gx = ndimage.sobel(image, axis=1, mode="reflect") / 4.0
    gy = ndimage.sobel(image, axis=0, mode="reflect") / 4.0
    return gx, gy


# Forward neighbour offsets for quantised gradient directions 0, 45, 90, 135 degrees.
_DIRECTIONS = ((0, 1), (1, 1), (1, 0), (1, -1))


def canny(image: np.ndarray, high_threshold: float) -> np.ndarray:
    """Binary Canny edges of an already smoothed image.

    Non-maximum suppression keeps a pixel whose magnitude beats the backward
    neighbour and ties or beats the forward one. Hysteresis links 8-connected
    pixels above ``0.5 * high_threshold`` to pixels above ``high_threshold``.
    """
    if not 0.0 < high_threshold <= 1.0:
        raise DomainError(f"high_threshold must lie in (0, 1], got {high_threshold}")
    gx, gy = sobel_gradients(image)
    magnitude = np.hypot(gx, gy)
    angle = np.mod(np.degrees(np.arctan2(gy, gx)), 180.0)
    sector = (np.floor((angle + 22.5) / 45.0).astype(np.int64)) % 4

    padded = np.pad(magnitude, 1)
    rows, cols = magnitude.shape
    keep = np.zeros(magnitude.shape, dtype=bool)
    for direction, (dr, dc) in enumerate(_DIRECTIONS):
        forward = padded[1 + dr: 1 + dr + rows, 1 + dc: 1 + dc + cols]
        backward = padded[1 - dr: 1 - dr + rows, 1 - dc: 1 - dc + cols]
        chosen = sector == direction
        keep |= chosen & (magnitude > backward) & (magnitude >= forward)
    keep &= magnitude > 0

    strong = keep & (magnitude >= high_threshold)
    weak = keep & (magnitude >= 0.5 * high_threshold)
    labels, _ = ndimage.label(weak, structure=np.ones((3, 3), dtype=bool))
    linked = np.unique(labels[strong])
    edges = np.isin(labels, linked[linked > 0])
    return edges.astype(np.uint8)


@dataclass(frozen=True)
class EdgePyramid:
    sigmas: Tuple[float, ...]
    maps: np.ndarray  # (levels, H, W) in {0, 1}
    thresholds: Tuple[Optional[float], ...]


@dataclass(frozen=True)
class FusedEdgeMap:
    weights: np.ndarray  # (levels, H, W), sums to 1 per pixel
    fused: np.ndarray  # (H, W) in [0, 1]
    pyramid: EdgePyramid


def edge_pyramid(
    image: np.ndarray,
    sigmas: Sequence[float],
    subsample: bool = False,
    fixed_threshold: Optional[float] = None,
) -> EdgePyramid:
    """Binary edge map per blur level at full resolution.

    A level whose blurred image is constant contributes an empty map.
    """
    gray = as_gray_image(image)
    height, width = gray.shape
    maps, thresholds = [], []
    for level, sigma in enumerate(sigmas):
        blurred = gaussian_blur(gray, sigma)
        if subsample and level:
            step = 2 ** level
            blurred = blurred[::step, ::step]
        if fixed_threshold is not None:
            threshold = fixed_threshold
        else:
            try:
                threshold = otsu_threshold(blurred)
            except DegenerateImageError:
                threshold = None
        if threshold is None:
            edges = np.zeros(blurred.shape, dtype=np.uint8)
        else:
            edges = canny(blurred, max(threshold, MIN_HIGH_THRESHOLD))
        if edges.shape != (height, width):
            scale = (height / edges.shape[0], width / edges.shape[1])
            upsampled = ndimage.zoom(edges.astype(np.float64), scale, order=1)[:height, :width]
            edges = (upsampled >= 0.5).astype(np.uint8)
        maps.append(edges)
        thresholds.append(threshold)
    return EdgePyramid(tuple(float(s) for s in sigmas), np.stack(maps), tuple(thresholds))


def fusion_softmax(distances: np.ndarray, temperature: float) -> np.ndarray:
    """Softmax of ``-distance / temperature`` over the level axis."""
    if temperature <= 0:
        raise DomainError(f"temperature must be positive, got {temperature}")
    return softmax(-np.asarray(distances, dtype=np.float64) / temperature, axis=0)


def fusion_weights(image: np.ndarray, pyramid: EdgePyramid, temperature: float) -> np.ndarray:
    """Per-pixel level weights from image/edge gradient disagreement."""
    gx, gy = sobel_gradients(as_gray_image(image))
    distances = []
    for edges in pyramid.maps:
        ex, ey = sobel_gradients(edges.astype(np.float64))
        distances.append(np.hypot(gx - ex, gy - ey))
    return fusion_softmax(np.stack(distances), temperature)


def fuse(pyramid: EdgePyramid, weights: np.ndarray) -> np.ndarray:
    """Weighted sum of the level maps, kept within the per-pixel level range."""
    maps = pyramid.maps.astype(np.float64)
    if weights.shape != maps.shape:
        raise ShapeMismatchError(f"weights have shape {weights.shape}, expected {maps.shape}")
    fused = np.sum(weights * maps, axis=0)
    return np.clip(fused, maps.min(axis=0), maps.max(axis=0))


def build_condition(
    image: np.ndarray,
    sigmas: Sequence[float] = (0.5, 1.0, 2.0),
    temperature: float = 1.0,
    levels: Optional[int] = None,
    subsample: bool = False,
    fixed_threshold: Optional[float] = None,
) -> FusedEdgeMap:
    """Fused edge map of an image, the semantic condition of the student."""
    if levels is not None and levels != len(sigmas):
        raise ShapeMismatchError(f"{levels} levels requested but {len(sigmas)} sigmas given")
    pyramid = edge_pyramid(image, sigmas, subsample=subsample, fixed_threshold=fixed_threshold)
    weights = fusion_weights(image, pyramid, temperature)
    return FusedEdgeMap(weights=weights, fused=fuse(pyramid, weights), pyramid=pyramid)


def build_condition_from_config(image: np.ndarray, config: SemanticConfig) -> FusedEdgeMap:
    return build_condition(
        image,
        config.sigmas,
        config.temperature,
        subsample=config.subsample,
        fixed_threshold=config.fixed_threshold,
    )


def pool_map(edge_map: np.ndarray, factor: int) -> np.ndarray:
    """Average-pool an (H, W) map by ``factor`` and flatten it."""
    height, width = edge_map.shape
    if height % factor or width % factor:
        raise ShapeMismatchError(f"pool factor {factor} does not divide {edge_map.shape}")
    blocks = edge_map.reshape(height // factor, factor, width // factor, factor)
    return blocks.mean(axis=(1, 3)).ravel()


def condition_dim(image_shape: Tuple[int, ...], factor: int) -> int:
    height, width = image_shape[:2]
    return (height // factor) * (width // factor)


def edge_conditions(
    images: np.ndarray,
    config: SemanticConfig,
    pool: int,
    workers: int = 1,
) -> Tuple[np.ndarray, float]:
    """Pooled fused-edge condition per image and the median build time in seconds."""

    def one(image):
        start = time.perf_counter()
        fused = build_condition_from_config(image, config).fused
        return pool_map(fused, pool), time.perf_counter() - start

    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as executor:
            results = list(executor.map(one, images))
    else:
        results = [one(image) for image in images]
    if not results:
        return np.zeros((0, condition_dim(images.shape[1:], pool))), 0.0
    vectors = np.stack([vector for vector, _ in results])
    seconds = float(np.median([elapsed for _, elapsed in results]))
    return vectors, seconds


__all__ = [
    "MIN_HIGH_THRESHOLD",
    "as_gray_image",
    "gaussian_kernel1d",
    "gaussian_blur",
    "quantize",
    "between_class_variance",
    "otsu_threshold",
    "sobel_gradients",
    "canny",
    "EdgePyramid",
    "FusedEdgeMap",
    "edge_pyramid",
    "fusion_softmax",
    "fusion_weights",
    "fuse",
    "build_condition",
    "build_condition_from_config",
    "pool_map",
    "condition_dim",
    "edge_conditions",
]
