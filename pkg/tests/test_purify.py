"""Tests for purification, the image metrics and the evaluation report."""

import math
import sys

import numpy as np
import pytest

from noisebridge.attack import ToyClassifier
from noisebridge.config import AttackBudget, PurifyConfig, SemanticConfig
from noisebridge.errors import DatasetError, ShapeMismatchError, TimestepError, UntrainedModelError
from noisebridge.net import DenoiserNet, Mlp
from noisebridge.purify import (
    ConsistencyPurifier,
    DdimPurifier,
    EvalReport,
    IdentityPurifier,
    evaluate,
    median_seconds,
    psnr,
    purify,
    resolve_timesteps,
    ssim,
    sweep_inference_steps,
)


class Oracle:
    """Consistency model that always answers with the known clean batch."""

    def __init__(self, clean, cond_dim=0):
        self.clean = clean
        self.cond_dim = cond_dim
        self.trained_iters = 1
        self.calls = []

    def consistency(self, z, t, cond, schedule):
        self.calls.append((t, None if cond is None else cond.shape))
        return self.clean.copy()


@pytest.fixture
def victim():
    return ToyClassifier(Mlp([(np.array([[4.0, -4.0], [0.0, 0.0]]), np.zeros(2))]), (2,), 2)


def test_oracle_student_recovers_clean_input(schedule, rng):
    clean = rng.standard_normal((5, 2))
    out = purify(Oracle(clean), clean + 0.3, PurifyConfig(), schedule, rng)
    np.testing.assert_array_equal(out, clean)


def test_untrained_student_rejected(schedule, rng):
    student = DenoiserNet.create((2,), (4,), 4, rng)
    with pytest.raises(UntrainedModelError):
        purify(student, np.zeros((1, 2)), PurifyConfig(), schedule, rng)


def test_multi_step_alternates_from_terminal_step(schedule, rng):
    oracle = Oracle(np.zeros((2, 2)))
    out = purify(oracle, np.ones((2, 2)), PurifyConfig(n_inference_steps=4), schedule, rng)
    assert [t for t, _ in oracle.calls] == [99, 74, 50, 25]
    assert np.all(np.isfinite(out))


def test_explicit_renoise_schedule_is_used(schedule):
    config = PurifyConfig(n_inference_steps=3, renoise_schedule=(99, 40, 10))
    assert resolve_timesteps(config, schedule) == (99, 40, 10)


def test_renoise_schedule_must_start_at_terminal_step(small_schedule):
    with pytest.raises(TimestepError):
        resolve_timesteps(PurifyConfig(n_inference_steps=2, renoise_schedule=(8, 3)), small_schedule)


def test_purified_output_is_clipped_and_deterministic(schedule):
    student = DenoiserNet.create((3,), (5,), 4, np.random.default_rng(0), zero_init_output=False)
    student.trained_iters = 1
    x = np.random.default_rng(1).uniform(size=(4, 3))
    first = purify(student, x, PurifyConfig(), schedule, np.random.default_rng(7), data_range=(0.0, 1.0))
    second = purify(student, x, PurifyConfig(), schedule, np.random.default_rng(7), data_range=(0.0, 1.0))
    assert np.array_equal(first, second)
    assert first.min() >= 0.0 and first.max() <= 1.0


def test_edge_conditions_reach_the_student(schedule, rng):
    images = rng.uniform(size=(2, 8, 8))
    oracle = Oracle(images, cond_dim=16)
    purifier = ConsistencyPurifier(
        oracle, PurifyConfig(condition_mode="fused_edge"), schedule, SemanticConfig(), cond_pool=2, data_range=(0.0, 1.0),
    )
    purifier(images, rng)
    assert oracle.calls == [(99, (2, 16))]
    assert purifier.edge_seconds >= 0.0


def test_unconditioned_purifier_passes_no_condition(schedule, rng):
    oracle = Oracle(np.zeros((3, 2)))
    ConsistencyPurifier(oracle, PurifyConfig(), schedule)(np.ones((3, 2)), rng)
    assert oracle.calls == [(99, None)]


def test_ddim_purifier_grid(schedule, rng):
    teacher = DenoiserNet.create((2,), (4,), 4, rng, zero_init_output=False)
    purifier = DdimPurifier(teacher, schedule, steps=5)
    assert purifier.timesteps() == [99, 79, 59, 40, 20, 0]
    assert purifier(np.zeros((3, 2)), rng).shape == (3, 2)


def test_psnr_values():
    a = np.full((8, 8), 0.5)
    assert psnr(a, a) == math.inf
    assert psnr(a, a + 16 / 255) == pytest.approx(20 * math.log10(255 / 16), abs=1e-3)
    assert psnr(np.zeros((4, 4)), np.ones((4, 4))) == pytest.approx(0.0, abs=1e-12)
    with pytest.raises(ShapeMismatchError):
        psnr(np.zeros((2, 2)), np.zeros((2, 3)))


def test_ssim_values(rng):
    a = rng.uniform(size=(16, 16))
    b = np.clip(a + 0.05 * rng.standard_normal((16, 16)), 0.0, 1.0)
    assert ssim(a, a) == pytest.approx(1.0)
    assert ssim(a, 1.0 - a) < 0.0
    assert ssim(a, b) == ssim(b, a)
    assert -1.0 <= ssim(a, b) <= 1.0


def test_ssim_needs_a_full_window():
    with pytest.raises(ShapeMismatchError):
        ssim(np.zeros((8, 8)), np.zeros((8, 8)))


def test_report_row_caps_psnr():
    report = EvalReport(
        n_images=1, n_inference_steps=1, condition_mode="none", clean_acc=100.0,
        robust_acc_undefended=0.0, robust_acc_purified=100.0, psnr_db=math.inf, ssim=1.0, per_image_seconds=0.01,
    )
    assert report.to_row()["psnr_db"] == 99.0
    assert report.psnr_db == math.inf


def test_identity_purifier_is_no_defence(victim, rng):
    x = np.concatenate([rng.normal([0.25, 0.0], 0.05, (20, 2)), rng.normal([-0.25, 0.0], 0.05, (20, 2))])
    y = np.repeat([0, 1], 20)
    budget = AttackBudget(epsilon=0.4, n_iters=5)
    report = evaluate(IdentityPurifier(), victim, x, y, budget, PurifyConfig(timing_images=2), rng)
    assert report.robust_acc_purified == report.robust_acc_undefended
    assert report.robust_acc_undefended < report.clean_acc
    assert report.psnr_db is None
    assert report.speedup is None


def test_image_reports_carry_quality_metrics(rng):
    images = rng.uniform(size=(3, 12, 12))
    victim = ToyClassifier(Mlp.init([144, 2], rng), (12, 12), 2)
    y = victim.predict(images)
    report = evaluate(
        IdentityPurifier(), victim, images, y, AttackBudget(), PurifyConfig(timing_images=1), rng,
        adversarial=images, baseline=IdentityPurifier(),
    )
    assert report.psnr_db == math.inf
    assert report.ssim == pytest.approx(1.0)
    assert report.ddim_seconds is not None


def test_empty_dataset_rejected(victim, rng):
    with pytest.raises(DatasetError):
        evaluate(IdentityPurifier(), victim, np.zeros((0, 2)), np.zeros(0, dtype=int), AttackBudget(), PurifyConfig(), rng)


def test_adversarial_batch_shape_checked(victim, rng):
    with pytest.raises(ShapeMismatchError):
        evaluate(IdentityPurifier(), victim, np.zeros((3, 2)), np.zeros(3, dtype=int), AttackBudget(), PurifyConfig(), rng,
                 adversarial=np.zeros((2, 2)))


def test_sweep_builds_one_report_per_step_count(victim, rng):
    x = rng.normal([0.25, 0.0], 0.05, (6, 2))
    y = np.zeros(6, dtype=int)
    built = []

    def make_purifier(config):
        built.append(config.n_inference_steps)
        return IdentityPurifier()

    reports = sweep_inference_steps(make_purifier, victim, x, y, x, AttackBudget(), PurifyConfig(timing_images=1), seed=0)
    assert built == [1, 2, 4]
    assert [r.n_inference_steps for r in reports] == [1, 2, 4]


class SlowEdgePurifier:
    """Advances a fake clock by one second per call, a quarter of it spent on edges."""

    name = "clock"

    def __init__(self, clock):
        self.clock = clock
        self.edge_seconds = 0.0

    def __call__(self, x, rng):
        self.clock.now += 1.0
        self.edge_seconds = 0.25
        return x


class FakeClock:
    def __init__(self):
        self.now = 0.0

    def __call__(self):
        return self.now


def test_purification_time_excludes_edge_construction(monkeypatch):
    clock = FakeClock()
    monkeypatch.setattr(sys.modules["noisebridge.purify"].time, "perf_counter", clock)
    seconds, edge_seconds = median_seconds(SlowEdgePurifier(clock), np.zeros((5, 2)), 5)
    assert seconds == pytest.approx(0.75)
    assert edge_seconds == pytest.approx(0.25)
