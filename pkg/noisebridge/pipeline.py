"""Stage runner for the purification experiments.

This module wires the numerical modules into resumable stages that share
one output directory: data generation, victim and teacher training,
distillation, attack generation, purification and evaluation.
"""

import logging
import os
from pathlib import Path
from typing import Callable, Dict, List, Optional, Tuple

import numpy as np

from noisebridge.attack import load_classifier, pgd, save_classifier, train_toy_classifier
from noisebridge.config import RunConfig
from noisebridge.data import Dataset, generate_dataset, load_dataset, save_dataset
from noisebridge.distill import epsilon_mse, run_distillation, train_teacher
from noisebridge.errors import CheckpointNotFoundError, ConfigurationError
from noisebridge.helpers import format_eval_report, format_sweep, format_verification, write_csv, write_json, write_manifest
from noisebridge.net import DenoiserNet, load_checkpoint, save_checkpoint
from noisebridge.purify import (
    ConsistencyPurifier,
    DdimPurifier,
    EvalReport,
    evaluate,
    sweep_inference_steps,
)
from noisebridge.schedule import build_linear_schedule
from noisebridge.semantic import edge_conditions
from noisebridge.tensor_io import load_tensors, save_tensors, tensor_paths, write_image, write_labels
from noisebridge.verify import verify_suite

logger = logging.getLogger(__name__)

THREADS_ENV = "NOISEBRIDGE_THREADS"

STAGES = ("gen-data", "train-classifier", "train-teacher", "distill", "attack", "purify", "eval", "verify")

# Stable per-stage stream ids so re-running one stage reproduces its draws.
_STAGE_STREAMS = {stage: index for index, stage in enumerate(STAGES)}

PREVIEW_IMAGES = 8


def thread_count() -> int:
    """Worker threads for per-image work, from ``NOISEBRIDGE_THREADS``."""
    raw = os.environ.get(THREADS_ENV, "1")
    try:
        value = int(raw)
    except ValueError as exc:
        raise ConfigurationError(f"{THREADS_ENV} must be an integer, got {raw!r}") from exc
    return max(1, value)


class PurificationPipeline:
    """Runs experiment stages against ``config.output_dir``.

    Each stage reads the artifacts of earlier stages from disk, so stages
    can be run one at a time from the command line or all at once with
    :meth:`run_all`.

    Args:
        config: Validated run configuration
        verbose: Print progress messages and bars

    Example:
        >>> pipeline = PurificationPipeline(RunConfig.for_dataset("toy2d"))
        >>> report = pipeline.run_all()
        >>> print(report.robust_acc_purified)
    """

    def __init__(self, config: RunConfig, verbose: bool = True):
        self.config = config
        self.verbose = verbose
        self.output_dir = Path(config.output_dir)
        self.schedule = build_linear_schedule(
            config.schedule.n_steps, config.schedule.beta_start, config.schedule.beta_end,
        )
        self.workers = thread_count()

    def _log(self, message: str):
        """Print progress if verbose is True."""
        logger.info(message)
        if self.verbose:
            print(f"[noisebridge] {message}")

    def _rng(self, stage: str) -> np.random.Generator:
        return np.random.default_rng([self.config.seed, _STAGE_STREAMS[stage]])

    def _path(self, *parts: str) -> Path:
        return self.output_dir.joinpath(*parts)

    def _require(self, base: Path, producer: str) -> Path:
        data_path, meta_path = tensor_paths(base)
        if not (data_path.is_file() and meta_path.is_file()):
            raise CheckpointNotFoundError(f"checkpoint not found: {data_path} (run `{producer}` first)")
        return base

    def _finish(self, stage: str, files: List[Path], summary: Optional[Dict] = None) -> List[Path]:
        write_manifest(self.output_dir, stage, self.config.config_hash(), files, summary)
        return files

    @property
    def data_range(self) -> Optional[Tuple[float, float]]:
        return (0.0, 1.0) if self.config.dataset == "shapes32" else None

    # Loading ---------------------------------------------------------------

    def load_split(self, name: str) -> Dataset:
        self._require(self._path("data", name), "gen-data")
        return load_dataset(self._path("data"), name)

    def load_victim(self):
        return load_classifier(self._require(self._path("checkpoints", "classifier"), "train-classifier"))

    def load_teacher(self) -> DenoiserNet:
        return load_checkpoint(self._require(self._path("checkpoints", "teacher"), "train-teacher"))

    def load_student(self) -> DenoiserNet:
        return load_checkpoint(self._require(self._path("checkpoints", "student"), "distill"))

    def load_adversarial(self) -> np.ndarray:
        (adversarial,), _ = load_tensors(self._require(self._path("attacks", "test_adv"), "attack"))
        return adversarial

    def make_purifier(self, student: DenoiserNet, purify_config=None) -> ConsistencyPurifier:
        return ConsistencyPurifier(
            student,
            purify_config or self.config.purify,
            self.schedule,
            semantic=self.config.semantic,
            cond_pool=self.config.net.cond_pool,
            data_range=self.data_range,
            workers=self.workers,
        )

    # Stages ----------------------------------------------------------------

    def generate_data(self) -> List[Path]:
        """Generate and store the train and test splits."""
        self._log(f"Generating {self.config.dataset} data...")
        train, test = generate_dataset(self.config.dataset, self.config.data, self._rng("gen-data"))
        files = save_dataset(self._path("data"), "train", train)
        files += save_dataset(self._path("data"), "test", test, preview=PREVIEW_IMAGES)
        self._log(f"Wrote {len(train)} train and {len(test)} test examples")
        return self._finish("gen-data", files, {"n_train": len(train), "n_test": len(test)})

    def train_classifier(self) -> List[Path]:
        train = self.load_split("train")
        self._log("Training victim classifier...")
        victim = train_toy_classifier(train, self.config.classifier, self._rng("train-classifier"), self.verbose)
        self._log(f"Held-out accuracy: {victim.holdout_accuracy:.2f}%")
        files = save_classifier(self._path("checkpoints", "classifier"), victim)
        return self._finish("train-classifier", files, {"holdout_accuracy": victim.holdout_accuracy})

    def train_teacher(self) -> List[Path]:
        train = self.load_split("train")
        rng = self._rng("train-teacher")
        self._log("Training teacher denoiser...")
        teacher = train_teacher(train.x, self.schedule, self.config.net, self.config.teacher, rng, self.verbose)
        mse = epsilon_mse(teacher, train.x, self.schedule, rng, self.config.teacher.n_val)
        self._log(f"Teacher epsilon MSE: {mse:.4f}")
        files = save_checkpoint(teacher, self._path("checkpoints", "teacher"), self.config.model_dump(mode="json"))
        return self._finish("train-teacher", files, {"epsilon_mse": mse})

    def training_conditions(self, train: Dataset) -> Optional[np.ndarray]:
        """Pooled fused-edge conditions of the clean training images, if conditioning is on."""
        if self.config.purify.condition_mode != "fused_edge":
            return None
        self._log("Building edge conditions for training images...")
        vectors, _ = edge_conditions(train.x, self.config.semantic, self.config.net.cond_pool, self.workers)
        return vectors

    def distill(self) -> List[Path]:
        train = self.load_split("train")
        victim = self.load_victim()
        teacher = self.load_teacher()
        self._log("Distilling noise-bridge consistency student...")
        student, ema, log = run_distillation(
            train.x,
            train.y,
            teacher,
            victim,
            self.config.distill,
            self.config.attack,
            self.schedule,
            self._rng("distill"),
            conditions=self.training_conditions(train),
            data_range=self.data_range,
            verbose=self.verbose,
        )
        first, last = log.decile_means()
        self._log(f"Loss {first:.5f} -> {last:.5f} over {len(log.entries)} iterations")
        meta = self.config.model_dump(mode="json")
        files = save_checkpoint(student, self._path("checkpoints", "student"), meta)
        files += save_checkpoint(ema.shadow, self._path("checkpoints", "ema"), meta)
        files.append(write_csv(self._path("reports", "distill_log.csv"), log.rows(),
                               ["iteration", "cd_loss", "rec_loss", "total"]))
        return self._finish("distill", files, {"first_decile": first, "last_decile": last})

    def attack(self) -> List[Path]:
        """PGD against the undefended victim on the test split."""
        test = self.load_split("test")
        victim = self.load_victim()
        self._log(f"Attacking {len(test)} test examples ({self.config.attack.norm}, eps={self.config.attack.epsilon:.4f})...")
        delta = pgd(victim, test.x, test.y, self.config.attack, self._rng("attack"), self.data_range)
        files = save_tensors(self._path("attacks", "test_adv"), [test.x + delta], {"kind": "adversarial"})
        files.append(write_labels(self._path("attacks", "test_adv_labels.csv"), test.y))
        return self._finish("attack", files)

    def purify(self) -> List[Path]:
        student = self.load_student()
        adversarial = self.load_adversarial()
        self._log(f"Purifying {adversarial.shape[0]} examples with {self.config.purify.n_inference_steps} step(s)...")
        purified = self.make_purifier(student)(adversarial, self._rng("purify"))
        files = save_tensors(self._path("purified", "test_purified"), [purified], {"kind": "purified"})
        if purified.ndim == 3:
            for i in range(min(PREVIEW_IMAGES, purified.shape[0])):
                files.append(write_image(self._path("purified", "preview", f"{i:03d}.pgm"), purified[i]))
        return self._finish("purify", files)

    def evaluate(self) -> EvalReport:
        """Evaluate the student, run the step sweep and write the reports."""
        student = self.load_student()
        victim = self.load_victim()
        test = self.load_split("test")
        adversarial = self.load_adversarial()
        baseline = None
        if self.config.purify.compare_ddim:
            baseline = DdimPurifier(self.load_teacher(), self.schedule, self.config.purify.ddim_steps, self.data_range)

        self._log("Evaluating purification...")
        report = evaluate(
            self.make_purifier(student),
            victim,
            test.x,
            test.y,
            self.config.attack,
            self.config.purify,
            self._rng("eval"),
            data_range=self.data_range,
            adversarial=adversarial,
            baseline=baseline,
        )
        self._log(format_eval_report(report))

        sweep = sweep_inference_steps(
            lambda variant: self.make_purifier(student, variant),
            victim,
            test.x,
            test.y,
            adversarial,
            self.config.attack,
            self.config.purify,
            seed=self.config.seed,
            data_range=self.data_range,
        )
        self._log(format_sweep(sweep))

        files = [
            write_csv(self._path("reports", "eval.csv"), [report.to_row()]),
            write_json(self._path("reports", "eval.json"), report.to_row()),
            write_csv(self._path("reports", "sweep.csv"), [r.to_row() for r in sweep]),
        ]
        self._finish("eval", files, {"robust_acc_purified": report.robust_acc_purified})
        return report

    def verify(self, count: int = 50) -> bool:
        """Check the configured schedule and ``count`` random ones."""
        results = verify_suite(count, self.config.seed, self.schedule)
        self._log(format_verification(results))
        passed = all(result.passed for result in results)
        files = [write_json(self._path("reports", "verify.json"),
                            [dict(vars(result), passed=result.passed) for result in results])]
        self._finish("verify", files, {"passed": passed})
        return passed

    def run(self, command: str):
        """Run one stage by its command name."""
        handlers: Dict[str, Callable] = {
            "gen-data": self.generate_data,
            "train-classifier": self.train_classifier,
            "train-teacher": self.train_teacher,
            "distill": self.distill,
            "attack": self.attack,
            "purify": self.purify,
            "eval": self.evaluate,
            "verify": self.verify,
        }
        if command not in handlers:
            raise ConfigurationError(f"unknown command {command!r}; expected one of {', '.join(STAGES)}")
        return handlers[command]()

    def run_all(self) -> EvalReport:
        """Every stage from data generation to evaluation."""
        for stage in STAGES[:6]:
            self.run(stage)
        return self.evaluate()


__all__ = ["THREADS_ENV", "STAGES", "thread_count", "PurificationPipeline"]
