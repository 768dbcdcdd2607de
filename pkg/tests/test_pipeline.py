"""Tests for the stage runner and its on-disk artifacts."""

import csv
import json

import numpy as np
import pytest

from noisebridge.config import load_config
from noisebridge.data import Dataset, load_dataset, make_shapes32, save_dataset
from noisebridge.errors import CheckpointNotFoundError, ConfigurationError, DatasetError
from noisebridge.pipeline import THREADS_ENV, PurificationPipeline, thread_count
from noisebridge.tensor_io import read_image, read_labels


def read_rows(path):
    with open(path, newline="") as handle:
        return list(csv.DictReader(handle))


def test_thread_count(monkeypatch):
    """Worker count comes from the environment and is at least one."""
    monkeypatch.delenv(THREADS_ENV, raising=False)
    assert thread_count() == 1
    monkeypatch.setenv(THREADS_ENV, "0")
    assert thread_count() == 1
    monkeypatch.setenv(THREADS_ENV, "4")
    assert thread_count() == 4
    monkeypatch.setenv(THREADS_ENV, "many")
    with pytest.raises(ConfigurationError):
        thread_count()


def test_generated_data_is_reproducible(tiny_config_file, tmp_path):
    """The same seed writes byte-identical splits."""
    path = tiny_config_file()
    first = PurificationPipeline(load_config(path, [f"output_dir={tmp_path / 'a'}"]), verbose=False)
    second = PurificationPipeline(load_config(path, [f"output_dir={tmp_path / 'b'}"]), verbose=False)
    first.generate_data()
    second.generate_data()
    for name in ("train.bin", "test.bin", "train_labels.csv"):
        assert (tmp_path / "a" / "data" / name).read_bytes() == (tmp_path / "b" / "data" / name).read_bytes()


def test_manifest_records_hash_and_files(tiny_config_file):
    """Every stage leaves a manifest naming its outputs."""
    config = load_config(tiny_config_file())
    pipeline = PurificationPipeline(config, verbose=False)
    pipeline.generate_data()

    manifest = json.loads((pipeline.output_dir / "manifests" / "gen-data.json").read_text())
    assert manifest["command"] == "gen-data"
    assert manifest["config_hash"] == config.config_hash()
    assert "data/train.bin" in manifest["files"]
    assert manifest["files"] == sorted(manifest["files"])
    assert manifest["summary"] == {"n_train": 200, "n_test": 40}


def test_stage_order_is_enforced(tiny_config_file):
    """A stage without its inputs names the stage to run first."""
    pipeline = PurificationPipeline(load_config(tiny_config_file()), verbose=False)
    with pytest.raises(CheckpointNotFoundError, match="gen-data"):
        pipeline.train_classifier()
    pipeline.generate_data()
    with pytest.raises(CheckpointNotFoundError, match="train-classifier"):
        pipeline.attack()


def test_unknown_command(tiny_config_file):
    pipeline = PurificationPipeline(load_config(tiny_config_file()), verbose=False)
    with pytest.raises(ConfigurationError):
        pipeline.run("deploy")


def test_toy_run_end_to_end(tiny_config_file):
    """All stages run in order on the 2-D toy problem and write their reports."""
    pipeline = PurificationPipeline(load_config(tiny_config_file()), verbose=False)
    report = pipeline.run_all()

    for value in (report.clean_acc, report.robust_acc_undefended, report.robust_acc_purified):
        assert 0.0 <= value <= 100.0
    assert report.n_images == 40
    assert report.psnr_db is None
    assert report.ddim_seconds is not None

    out = pipeline.output_dir
    assert len(read_rows(out / "reports" / "distill_log.csv")) == 5
    assert [row["n_inference_steps"] for row in read_rows(out / "reports" / "sweep.csv")] == ["1", "2"]
    assert json.loads((out / "reports" / "eval.json").read_text())["n_images"] == 40
    for stage in ("gen-data", "train-classifier", "train-teacher", "distill", "attack", "purify", "eval"):
        assert (out / "manifests" / f"{stage}.json").is_file()
    assert pipeline.load_student().trained_iters == 5


def test_attack_stage_exports_labels_with_the_examples(tiny_config_file):
    """Attacked examples can be re-evaluated from disk without the test split."""
    pipeline = PurificationPipeline(load_config(tiny_config_file()), verbose=False)
    pipeline.generate_data()
    pipeline.train_classifier()
    pipeline.attack()

    out = pipeline.output_dir
    assert np.array_equal(read_labels(out / "attacks" / "test_adv_labels.csv"), pipeline.load_split("test").y)
    manifest = json.loads((out / "manifests" / "attack.json").read_text())
    assert "attacks/test_adv_labels.csv" in manifest["files"]


def test_shapes_run_with_edge_conditions(tiny_config_file):
    """The image track trains a conditioned student and reports image quality."""
    path = tiny_config_file(dataset="shapes32", data={"n_train": 24, "n_test": 6})
    pipeline = PurificationPipeline(load_config(path), verbose=False)
    report = pipeline.run_all()

    assert pipeline.config.purify.condition_mode == "fused_edge"
    assert pipeline.load_student().cond_dim == 64
    assert report.psnr_db is not None and 0.0 < report.psnr_db
    assert -1.0 <= report.ssim <= 1.0
    purified = sorted((pipeline.output_dir / "purified" / "preview").glob("*.pgm"))
    assert len(purified) == 6
    assert read_image(purified[0]).shape == (32, 32)


def test_verify_stage_writes_results(tiny_config_file):
    pipeline = PurificationPipeline(load_config(tiny_config_file()), verbose=False)
    assert pipeline.verify(count=3) is True
    results = json.loads((pipeline.output_dir / "reports" / "verify.json").read_text())
    assert len(results) == 4
    assert all(result["passed"] for result in results)


def test_dataset_files_round_trip(tmp_path, rng):
    data = make_shapes32(5, rng)
    paths = save_dataset(tmp_path, "test", data, preview=2)
    assert sum(p.suffix == ".pgm" for p in paths) == 2

    restored = load_dataset(tmp_path, "test")
    assert np.array_equal(restored.x, data.x)
    assert np.array_equal(restored.y, data.y)
    assert restored.data_range == (0.0, 1.0)
    preview = read_image(tmp_path / "preview" / "test_000.pgm")
    np.testing.assert_allclose(preview, data.x[0], atol=0.5 / 255 + 1e-12)


def test_vector_datasets_have_no_previews(tmp_path, rng):
    data = Dataset(rng.standard_normal((4, 2)), np.array([0, 1, 0, 1]), 2)
    paths = save_dataset(tmp_path, "train", data, preview=3)
    assert [p.suffix for p in paths] == [".bin", ".json", ".csv"]
    assert load_dataset(tmp_path, "train").data_range is None


def test_dataset_split(rng):
    data = Dataset(np.arange(20.0).reshape(10, 2), np.arange(10) % 2, 2)
    rest, held = data.split(0.3, rng)
    assert (len(rest), len(held)) == (7, 3)
    assert sorted(np.concatenate([rest.x[:, 0], held.x[:, 0]])) == list(np.arange(0.0, 20.0, 2.0))
    with pytest.raises(DatasetError):
        data.subset(np.arange(1)).split(0.5, rng)
