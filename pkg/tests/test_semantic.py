"""Tests for blurring, Otsu thresholds, Canny edges and pyramid fusion."""

import numpy as np
import pytest

from noisebridge.config import SemanticConfig
from noisebridge.errors import DegenerateImageError, DomainError, ShapeMismatchError
from noisebridge.semantic import (
    EdgePyramid,
    as_gray_image,
    between_class_variance,
    build_condition,
    canny,
    edge_conditions,
    edge_pyramid,
    fuse,
    fusion_softmax,
    fusion_weights,
    gaussian_blur,
    gaussian_kernel1d,
    otsu_threshold,
    pool_map,
    quantize,
)


def step_image(size, column):
    image = np.zeros((size, size))
    image[:, column:] = 1.0
    return image


def pyramid_of(*maps):
    stacked = np.stack([np.asarray(m, dtype=np.uint8) for m in maps])
    return EdgePyramid(tuple(1.0 for _ in maps), stacked, tuple(None for _ in maps))


def test_gray_conversion_and_validation():
    rgb = np.ones((4, 4, 3)) * np.array([1.0, 0.0, 0.0])
    np.testing.assert_allclose(as_gray_image(rgb), np.full((4, 4), 0.299))
    with pytest.raises(DomainError):
        as_gray_image(np.full((2, 2), 1.5))
    with pytest.raises(ShapeMismatchError):
        as_gray_image(np.zeros((2, 2, 2)))


def test_blur_with_zero_sigma_copies(rng):
    image = rng.uniform(size=(6, 5))
    blurred = gaussian_blur(image, 0.0)
    assert np.array_equal(blurred, image)
    assert blurred is not image


def test_blur_keeps_constant_images(rng):
    np.testing.assert_allclose(gaussian_blur(np.full((9, 7), 0.3), 1.7), 0.3, rtol=1e-14)


def test_blur_of_impulse_is_sampled_gaussian():
    image = np.zeros((15, 15))
    image[7, 7] = 1.0
    kernel = gaussian_kernel1d(1.0)
    assert kernel.sum() == pytest.approx(1.0, abs=1e-12)
    assert kernel.size == 7
    blurred = gaussian_blur(image, 1.0)
    np.testing.assert_allclose(blurred[4:11, 4:11], np.outer(kernel, kernel), atol=1e-15)
    assert blurred.sum() == pytest.approx(1.0, abs=1e-6)


def test_negative_sigma_rejected():
    with pytest.raises(DomainError):
        gaussian_blur(np.zeros((3, 3)), -1.0)


def test_otsu_on_constant_image():
    with pytest.raises(DegenerateImageError):
        otsu_threshold(np.full((8, 8), 0.4))


def test_otsu_picks_lowest_level_of_a_plateau():
    image = np.full((8, 8), 10 / 255)
    image[4:] = 200 / 255
    assert otsu_threshold(image) == pytest.approx(10 / 255)


def test_otsu_matches_exhaustive_search(rng):
    image = rng.uniform(size=(16, 16)) ** 2
    hist = np.bincount(quantize(image).ravel(), minlength=256)
    best = max(between_class_variance(hist, k) for k in range(256))
    chosen = int(round(otsu_threshold(image) * 255))
    assert between_class_variance(hist, chosen) == best


def test_between_class_variance_with_empty_class():
    hist = np.zeros(256, dtype=int)
    hist[10] = 5
    assert between_class_variance(hist, 200) == 0


def test_canny_on_constant_image():
    assert not np.any(canny(np.full((8, 8), 0.5), 0.2))


def test_canny_step_gives_single_line():
    edges = canny(step_image(8, 4), 0.5)
    expected = np.zeros((8, 8), dtype=np.uint8)
    expected[:, 3] = 1
    assert np.array_equal(edges, expected)
    assert edges.dtype == np.uint8


def test_canny_checkerboard_is_deterministic():
    board = (np.indices((8, 8)).sum(axis=0) % 2).astype(np.float64)
    first = canny(board, 0.5)
    assert first.sum() > 0
    assert np.array_equal(first, canny(board, 0.5))


@pytest.mark.parametrize("threshold", [0.0, 1.5])
def test_canny_threshold_domain(threshold):
    with pytest.raises(DomainError):
        canny(np.zeros((4, 4)), threshold)


def test_single_level_weights_are_one(rng):
    image = rng.uniform(size=(8, 8))
    pyramid = pyramid_of(canny(image, 0.3))
    np.testing.assert_array_equal(fusion_weights(image, pyramid, 1.0), np.ones((1, 8, 8)))


def test_identical_levels_get_equal_weights(rng):
    image = rng.uniform(size=(8, 8))
    edges = canny(image, 0.3)
    weights = fusion_weights(image, pyramid_of(edges, edges), 0.7)
    np.testing.assert_allclose(weights, 0.5, rtol=1e-15)


def test_softmax_example():
    weights = fusion_softmax(np.array([[[0.2]], [[0.6]]]), 1.0)
    np.testing.assert_allclose(weights.ravel(), [0.5987, 0.4013], atol=1e-4)


def test_temperature_must_be_positive():
    with pytest.raises(DomainError):
        fusion_softmax(np.zeros((2, 1, 1)), 0.0)


def test_fuse_example():
    pyramid = pyramid_of([[1]], [[0]])
    assert fuse(pyramid, np.array([[[0.6]], [[0.4]]]))[0, 0] == pytest.approx(0.6)


def test_fuse_of_identical_levels_reproduces_map(rng):
    mask = (rng.uniform(size=(6, 6)) > 0.5).astype(np.uint8)
    weights = rng.dirichlet(np.ones(3), size=(6, 6)).transpose(2, 0, 1)
    assert np.array_equal(fuse(pyramid_of(mask, mask, mask), weights), mask.astype(np.float64))


def test_fuse_stays_within_level_range(rng):
    maps = (rng.uniform(size=(3, 6, 6)) > 0.5).astype(np.uint8)
    weights = rng.dirichlet(np.ones(3), size=(6, 6)).transpose(2, 0, 1)
    fused = fuse(pyramid_of(*maps), weights)
    assert np.all(fused >= maps.min(axis=0))
    assert np.all(fused <= maps.max(axis=0))


def test_fuse_shape_mismatch():
    with pytest.raises(ShapeMismatchError):
        fuse(pyramid_of([[1, 0]]), np.ones((2, 1, 2)))


def test_constant_image_gives_empty_condition():
    condition = build_condition(np.full((16, 16), 0.5))
    assert not np.any(condition.fused)
    assert condition.pyramid.thresholds == (None, None, None)


def test_step_edge_survives_fusion():
    condition = build_condition(step_image(16, 8), sigmas=(0.5, 1.0, 2.0), levels=3)
    assert condition.weights.shape == (3, 16, 16)
    assert np.all(condition.fused[:, 7] >= 0.5)
    assert np.array_equal(condition.fused, build_condition(step_image(16, 8)).fused)


def test_level_count_must_match_sigmas():
    with pytest.raises(ShapeMismatchError):
        build_condition(step_image(8, 4), sigmas=(1.0, 2.0), levels=3)


def test_subsampled_pyramid_keeps_full_resolution():
    pyramid = edge_pyramid(step_image(16, 8), (0.5, 1.0, 2.0), subsample=True)
    assert pyramid.maps.shape == (3, 16, 16)


def test_fixed_threshold_overrides_otsu():
    pyramid = edge_pyramid(step_image(8, 4), (0.5,), fixed_threshold=0.3)
    assert pyramid.thresholds == (0.3,)


def test_pool_map():
    edge_map = np.zeros((4, 4))
    edge_map[:2, :2] = 1.0
    np.testing.assert_array_equal(pool_map(edge_map, 2), [1.0, 0.0, 0.0, 0.0])
    with pytest.raises(ShapeMismatchError):
        pool_map(edge_map, 3)


def test_edge_conditions_are_independent_of_worker_count(rng):
    images = np.stack([step_image(8, 4), rng.uniform(size=(8, 8)), np.full((8, 8), 0.2)])
    config = SemanticConfig()
    serial, seconds = edge_conditions(images, config, pool=2)
    threaded, _ = edge_conditions(images, config, pool=2, workers=3)
    assert serial.shape == (3, 16)
    assert np.array_equal(serial, threaded)
    assert seconds >= 0.0
