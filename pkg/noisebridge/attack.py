"""Victim classifier and projected gradient descent."""

import logging
from dataclasses import dataclass
from pathlib import Path
from typing import List, Optional, Tuple, Union

import numpy as np
from scipy.special import log_softmax, softmax
from tqdm.auto import tqdm

from noisebridge.config import AttackBudget, ClassifierConfig
from noisebridge.data import Dataset
from noisebridge.errors import ConvergenceError, DatasetError, ShapeMismatchError
from noisebridge.net import Mlp, load_mlp, save_mlp

logger = logging.getLogger(__name__)

DataRange = Optional[Tuple[float, float]]


@dataclass
class ToyClassifier:
    """Softmax MLP over flattened inputs."""

    mlp: Mlp
    input_shape: Tuple[int, ...]
    num_classes: int
    holdout_accuracy: float = float("nan")

    def logits(self, x: np.ndarray) -> np.ndarray:
        x = np.asarray(x, dtype=np.float64)
        if x.shape[1:] != self.input_shape:
            raise ShapeMismatchError(f"classifier expects examples of shape {self.input_shape}, got {x.shape[1:]}")
        out, _ = self.mlp.forward(x.reshape(x.shape[0], -1))
        return out

    def predict(self, x: np.ndarray) -> np.ndarray:
        return np.argmax(self.logits(x), axis=1)

    def loss_and_input_grad(self, x: np.ndarray, y: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
        """Per-example cross-entropy and its gradient with respect to each input."""
        x = np.asarray(x, dtype=np.float64)
        logits, cache = self.mlp.forward(x.reshape(x.shape[0], -1))
        losses = cross_entropy(logits, y, reduce=False)
        _, grad_in = self.mlp.backward(_cross_entropy_grad(logits, y), cache)
        return losses, grad_in.reshape(x.shape)


def cross_entropy(logits: np.ndarray, y: np.ndarray, reduce: bool = True):
    picked = -log_softmax(logits, axis=1)[np.arange(logits.shape[0]), np.asarray(y)]
    return float(picked.mean()) if reduce else picked


def _cross_entropy_grad(logits: np.ndarray, y: np.ndarray) -> np.ndarray:
    grad = softmax(logits, axis=1)
    grad[np.arange(logits.shape[0]), np.asarray(y)] -= 1.0
    return grad


def accuracy(classifier: ToyClassifier, x: np.ndarray, y: np.ndarray) -> float:
    """Top-1 accuracy in percent."""
    if len(y) == 0:
        raise DatasetError("accuracy of an empty set is undefined")
    return 100.0 * float(np.mean(classifier.predict(x) == np.asarray(y)))


def train_toy_classifier(
    dataset: Dataset,
    config: ClassifierConfig,
    rng: np.random.Generator,
    verbose: bool = False,
) -> ToyClassifier:
    """Minibatch SGD on cross-entropy with a held-out accuracy check.

    Raises:
        DatasetError: If the dataset holds a single class
        ConvergenceError: If held-out accuracy stays below ``config.min_accuracy``
    """
    dataset.require_nonempty()
    if np.unique(dataset.y).size < 2:
        raise DatasetError("classifier training needs at least two classes")
    train, hold = dataset.split(config.holdout_fraction, rng)

    input_dim = int(np.prod(dataset.example_shape))
    mlp = Mlp.init([input_dim, *config.hidden_sizes, dataset.num_classes], rng)
    classifier = ToyClassifier(mlp, dataset.example_shape, dataset.num_classes)
    x_flat = train.x.reshape(len(train), -1)

    for _ in tqdm(range(config.n_epochs), desc="classifier", disable=not verbose):
        perm = rng.permutation(len(train))
        for start in range(0, perm.size, config.batch_size):
            batch = perm[start:start + config.batch_size]
            logits, cache = mlp.forward(x_flat[batch])
            grad = _cross_entropy_grad(logits, train.y[batch]) / batch.size
            grads, _ = mlp.backward(grad, cache)
            mlp.apply_gradients(grads, config.learning_rate)

    classifier.holdout_accuracy = accuracy(classifier, hold.x, hold.y)
    logger.info("classifier held-out accuracy %.2f%%", classifier.holdout_accuracy)
    if classifier.holdout_accuracy < 100.0 * config.min_accuracy:
        raise ConvergenceError(
            f"classifier reached {classifier.holdout_accuracy:.2f}% held-out accuracy, "
            f"below the required {100.0 * config.min_accuracy:.2f}%"
        )
    return classifier


def _flat_norm(values: np.ndarray) -> np.ndarray:
    return np.sqrt(np.sum(values.reshape(values.shape[0], -1) ** 2, axis=1))


def _broadcast(per_example: np.ndarray, like: np.ndarray) -> np.ndarray:
    return per_example.reshape((-1,) + (1,) * (like.ndim - 1))


def project(delta: np.ndarray, budget: AttackBudget) -> np.ndarray:
    """Project each example's perturbation onto the budget ball."""
    if budget.norm == "linf":
        return np.clip(delta, -budget.epsilon, budget.epsilon)
    norms = _flat_norm(delta)
    factor = np.minimum(1.0, budget.epsilon / np.maximum(norms, 1e-300))
    return delta * _broadcast(factor, delta)


def _clip_to_range(x: np.ndarray, delta: np.ndarray, data_range: DataRange) -> np.ndarray:
    if data_range is None:
        return delta
    return np.clip(x + delta, data_range[0], data_range[1]) - x


def _random_start(x: np.ndarray, budget: AttackBudget, rng: np.random.Generator) -> np.ndarray:
    if budget.norm == "linf":
        return rng.uniform(-budget.epsilon, budget.epsilon, size=x.shape)
    direction = rng.standard_normal(x.shape)
    direction /= _broadcast(np.maximum(_flat_norm(direction), 1e-300), x)
    dim = int(np.prod(x.shape[1:]))
    radius = budget.epsilon * rng.uniform(size=x.shape[0]) ** (1.0 / dim)
    return direction * _broadcast(radius, x)


def pgd(
    classifier: ToyClassifier,
    x: np.ndarray,
    y: np.ndarray,
    budget: AttackBudget,
    rng: np.random.Generator,
    data_range: DataRange = None,
) -> np.ndarray:
    """Untargeted PGD maximising cross-entropy inside the budget ball.

    Returns the perturbation with the highest loss seen along the
    trajectory, so the attacked loss is never below the clean loss.
    """
    x = np.asarray(x, dtype=np.float64)
    if budget.epsilon == 0:
        return np.zeros_like(x)
    alpha = budget.alpha
    delta = np.zeros_like(x)
    if budget.random_start:
        delta = _clip_to_range(x, project(_random_start(x, budget, rng), budget), data_range)

    best = np.zeros_like(x)
    best_loss = classifier.loss_and_input_grad(x, y)[0]
    for _ in range(budget.n_iters):
        loss, grad = classifier.loss_and_input_grad(x + delta, y)
        improved = loss > best_loss
        best[improved] = delta[improved]
        best_loss = np.where(improved, loss, best_loss)
        if budget.norm == "linf":
            step = np.sign(grad)
        else:
            step = grad / _broadcast(np.maximum(_flat_norm(grad), 1e-300), grad)
        delta = _clip_to_range(x, project(delta + alpha * step, budget), data_range)

    loss, _ = classifier.loss_and_input_grad(x + delta, y)
    improved = loss > best_loss
    best[improved] = delta[improved]
    return best


def save_classifier(base: Union[str, Path], classifier: ToyClassifier) -> List[Path]:
    meta = {
        "kind": "classifier",
        "input_shape": list(classifier.input_shape),
        "num_classes": classifier.num_classes,
        "holdout_accuracy": classifier.holdout_accuracy,
    }
    return save_mlp(base, classifier.mlp, meta)


def load_classifier(base: Union[str, Path]) -> ToyClassifier:
    mlp, meta = load_mlp(base)
    return ToyClassifier(mlp, tuple(meta["input_shape"]), int(meta["num_classes"]), float(meta["holdout_accuracy"]))


__all__ = [
    "ToyClassifier",
    "cross_entropy",
    "accuracy",
    "train_toy_classifier",
    "project",
    "pgd",
    "save_classifier",
    "load_classifier",
]
