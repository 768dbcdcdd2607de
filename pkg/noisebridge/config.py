"""Run configuration models.

Every stage of the pipeline reads its hyper-parameters from one JSON
document validated by :class:`RunConfig`. Sub-models mirror the package
modules (``schedule``, ``net``, ``attack``, ``distill``, ...).
"""

import copy
import hashlib
import json
from pathlib import Path
from typing import Any, Dict, Iterable, List, Literal, Optional, Tuple, Union

from pydantic import AliasChoices, BaseModel, ConfigDict, Field, ValidationError, model_validator

from noisebridge.errors import ConfigurationError

_MODEL_CONFIG = ConfigDict(frozen=True, extra="forbid", populate_by_name=True)


class DataConfig(BaseModel):
    """Synthetic dataset sizes and generator knobs."""

    model_config = _MODEL_CONFIG

    n_train: int = Field(2000, ge=2, description="Training examples to generate")
    n_test: int = Field(500, ge=1, description="Held-out test examples to generate")
    toy2d_classes: int = Field(2, ge=2, description="Mixture components (one class each) for toy2d")
    toy2d_radius: float = Field(0.25, gt=0, description="Radius of the circle carrying the class centres")
    toy2d_std: float = Field(0.06, gt=0, description="Per-axis standard deviation of each component")
    shapes_noise: float = Field(0.05, ge=0, description="Background noise std for shapes32")


class ScheduleConfig(BaseModel):
    """Discrete linear noise schedule."""

    model_config = _MODEL_CONFIG

    n_steps: int = Field(100, ge=2, description="Number of diffusion timesteps N")
    beta_start: float = Field(1e-4, gt=0, lt=1, description="beta at index 0")
    beta_end: float = Field(0.02, gt=0, lt=1, description="beta at index N-1")

    @model_validator(mode="after")
    def _ordered(self) -> "ScheduleConfig":
        if self.beta_start > self.beta_end:
            raise ValueError("beta_start must not exceed beta_end")
        return self


class NetConfig(BaseModel):
    """Denoiser network shape and consistency parameterisation."""

    model_config = _MODEL_CONFIG

    hidden_sizes: Tuple[int, ...] = Field((64, 64), description="Hidden layer widths of the MLP")
    time_embed_dim: int = Field(16, ge=2, description="Width of the sinusoidal time embedding")
    cond_pool: int = Field(4, ge=1, description="Average-pool factor applied to edge maps before concatenation")
    sigma_data: float = Field(0.5, gt=0, description="Data scale used by c_skip/c_out")
    timestep_scaling: float = Field(10.0, gt=0, description="Multiplier on the 1000-scale timestep in c_skip/c_out")
    zero_init_output: bool = Field(True, description="Start the final layer at zero so the initial prediction is 0")

    @model_validator(mode="after")
    def _even_embedding(self) -> "NetConfig":
        if self.time_embed_dim % 2:
            raise ValueError("time_embed_dim must be even")
        if any(width < 1 for width in self.hidden_sizes):
            raise ValueError("hidden_sizes entries must be positive")
        return self


class ClassifierConfig(BaseModel):
    """Victim classifier training."""

    model_config = _MODEL_CONFIG

    hidden_sizes: Tuple[int, ...] = Field((32,), description="Hidden layer widths")
    n_epochs: int = Field(60, ge=0, description="Passes over the training split")
    learning_rate: float = Field(0.1, gt=0, description="SGD step size")
    batch_size: int = Field(64, ge=1, description="Minibatch size")
    holdout_fraction: float = Field(0.2, gt=0, lt=1, description="Fraction held out for the accuracy check")
    min_accuracy: float = Field(0.95, ge=0, le=1, description="Held-out accuracy required to accept the victim")


class TeacherConfig(BaseModel):
    """Epsilon-prediction pretraining of the teacher denoiser."""

    model_config = _MODEL_CONFIG

    n_iters: int = Field(5000, ge=0, description="SGD iterations")
    learning_rate: float = Field(0.01, gt=0, description="SGD step size")
    batch_size: int = Field(64, ge=1, description="Minibatch size")
    n_val: int = Field(256, ge=1, description="Validation draws used for the MSE report")


class AttackBudget(BaseModel):
    """PGD threat model.

    ``step_size`` defaults to ``2.5 * epsilon / n_iters`` capped at
    ``2 * epsilon``.
    """

    model_config = _MODEL_CONFIG

    epsilon: float = Field(0.3, ge=0, description="Radius of the perturbation ball")
    step_size: Optional[float] = Field(None, gt=0, description="Step size alpha; derived when omitted")
    n_iters: int = Field(10, ge=1, description="PGD iterations")
    norm: Literal["linf", "l2"] = Field("linf", description="Norm of the perturbation ball")
    random_start: bool = Field(True, description="Start from a uniform draw inside the ball")

    @model_validator(mode="after")
    def _sane_step(self) -> "AttackBudget":
        if self.step_size is not None and self.epsilon > 0 and self.step_size > 2 * self.epsilon:
            raise ValueError("step_size must not exceed 2 * epsilon")
        return self

    @property
    def alpha(self) -> float:
        """Effective step size."""
        if self.step_size is not None:
            return self.step_size
        if self.epsilon == 0:
            return 0.0
        return min(2.0 * self.epsilon, 2.5 * self.epsilon / self.n_iters)


class DistillConfig(BaseModel):
    """Noise-bridge consistency distillation."""

    model_config = _MODEL_CONFIG

    skip_interval: int = Field(
        20, ge=1, validation_alias=AliasChoices("skip_interval", "k"),
        description="Skip interval k between the student and target timesteps",
    )
    leapfrog_h: float = Field(
        0.8, gt=0, le=1, validation_alias=AliasChoices("leapfrog_h", "h"),
        description="Velocity factor h of the leapfrog solver",
    )
    ema_rate: float = Field(
        0.95, ge=0, le=1, validation_alias=AliasChoices("ema_rate", "mu"),
        description="EMA rate mu of the target network",
    )
    lambda_rec: float = Field(1.0, ge=0, description="Weight of the reconstruction loss")
    n_iters: int = Field(5000, ge=1, description="Distillation iterations")
    learning_rate: float = Field(1e-3, gt=0, description="SGD step size")
    batch_size: int = Field(32, ge=1, description="Minibatch size")
    cond_dropout_p: float = Field(0.5, ge=0, le=1, description="Probability that the edge condition is replaced by the null condition")
    distance_metric: Literal["l2", "huber"] = Field("l2", description="Distance d used by both losses")
    huber_delta: float = Field(1.0, gt=0, description="Huber transition point")
    regenerate_attack: bool = Field(True, description="Run PGD every iteration instead of caching one perturbation per image")
    clean_fraction: float = Field(
        0.0, ge=0, lt=1, description="Share of each batch trained with eps_a = 0 so clean inputs keep their class",
    )
    min_victim_accuracy: float = Field(0.95, ge=0, le=1, description="Victim accuracy below which distillation aborts")


class SemanticConfig(BaseModel):
    """Edge pyramid used as the purification condition."""

    model_config = _MODEL_CONFIG

    sigmas: Tuple[float, ...] = Field((0.5, 1.0, 2.0), min_length=1, description="Blur width per pyramid level")
    temperature: float = Field(1.0, gt=0, description="Softmax temperature T* of the fusion weights")
    subsample: bool = Field(False, description="Downsample each level by 2**l and upsample its edges back")
    fixed_threshold: Optional[float] = Field(
        None, gt=0, le=1, description="Use this Canny high threshold instead of Otsu (ablation preset)",
    )

    @model_validator(mode="after")
    def _positive_sigmas(self) -> "SemanticConfig":
        if any(sigma <= 0 for sigma in self.sigmas):
            raise ValueError("sigmas must be positive")
        return self

    @property
    def levels(self) -> int:
        return len(self.sigmas)


class PurifyConfig(BaseModel):
    """Inference-time purification and evaluation."""

    model_config = _MODEL_CONFIG

    n_inference_steps: int = Field(1, ge=1, description="Consistency applications per image")
    condition_mode: Literal["none", "fused_edge"] = Field("none", description="Condition fed to the student")
    renoise_schedule: Tuple[int, ...] = Field((), description="Explicit timesteps for multi-step mode; derived when empty")
    ddim_steps: int = Field(50, ge=1, description="Steps of the DDIM baseline purifier")
    timing_images: int = Field(20, ge=1, description="Images timed individually for the median latency")
    sweep_steps: Tuple[int, ...] = Field((1, 2, 4), description="Step counts of the inference-step sweep")
    compare_ddim: bool = Field(True, description="Time the DDIM baseline during evaluation")

    @model_validator(mode="after")
    def _decreasing(self) -> "PurifyConfig":
        steps = self.renoise_schedule
        if steps:
            if len(steps) != self.n_inference_steps:
                raise ValueError("renoise_schedule length must equal n_inference_steps")
            if any(a <= b for a, b in zip(steps, steps[1:])):
                raise ValueError("renoise_schedule must be strictly decreasing")
        return self


DatasetName = Literal["toy2d", "shapes32"]


class RunConfig(BaseModel):
    """Complete experiment description."""

    model_config = _MODEL_CONFIG

    seed: int = Field(0, description="Root seed for every random draw")
    dataset: DatasetName = Field("toy2d", description="Synthetic dataset family")
    output_dir: str = Field("runs/default", description="Directory receiving every artifact")
    data: DataConfig = Field(default_factory=DataConfig)
    schedule: ScheduleConfig = Field(default_factory=ScheduleConfig)
    net: NetConfig = Field(default_factory=NetConfig)
    classifier: ClassifierConfig = Field(default_factory=ClassifierConfig)
    teacher: TeacherConfig = Field(default_factory=TeacherConfig)
    attack: AttackBudget = Field(default_factory=AttackBudget)
    distill: DistillConfig = Field(default_factory=DistillConfig)
    semantic: SemanticConfig = Field(default_factory=SemanticConfig)
    purify: PurifyConfig = Field(default_factory=PurifyConfig)

    @model_validator(mode="after")
    def _cross_checks(self) -> "RunConfig":
        n = self.schedule.n_steps
        if self.distill.skip_interval >= n:
            raise ValueError(f"distill.skip_interval must be < schedule.n_steps ({n})")
        steps = self.purify.renoise_schedule
        if steps and (steps[0] != n - 1 or steps[-1] < 0):
            raise ValueError(f"purify.renoise_schedule must start at {n - 1} and stay non-negative")
        if self.dataset == "toy2d" and self.purify.condition_mode == "fused_edge":
            raise ValueError("fused_edge conditioning needs an image dataset")
        return self

    @classmethod
    def for_dataset(cls, dataset: str, **fields: Any) -> "RunConfig":
        """Build a config with the defaults suited to ``dataset``."""
        raw = _merge(dataset_defaults(dataset), fields)
        return cls.model_validate(raw)

    def config_hash(self) -> str:
        """SHA-256 of the canonical JSON form."""
        canonical = json.dumps(self.model_dump(mode="json"), sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(canonical.encode("utf-8")).hexdigest()


def dataset_defaults(dataset: str) -> Dict[str, Any]:
    """Raw defaults that differ between the toy2d and shapes32 tracks."""
    if dataset == "shapes32":
        return {
            "dataset": "shapes32",
            "net": {"hidden_sizes": [256, 256]},
            "classifier": {"hidden_sizes": [128], "n_epochs": 40, "learning_rate": 0.05},
            "attack": {"epsilon": 8 / 255, "step_size": 2 / 255},
            "distill": {"cond_dropout_p": 0.5},
            "purify": {"condition_mode": "fused_edge"},
        }
    if dataset == "toy2d":
        # linear victim: linf PGD ends on one corner per class, off the data axis
        return {
            "dataset": "toy2d",
            "data": {"toy2d_radius": 2.0, "toy2d_std": 0.2},
            "schedule": {"beta_end": 0.005},
            "classifier": {"hidden_sizes": []},
            "attack": {"epsilon": 3.0},
            "distill": {"cond_dropout_p": 1.0, "learning_rate": 0.01, "batch_size": 64, "clean_fraction": 0.5},
        }
    raise ConfigurationError(f"unknown dataset {dataset!r}", [("dataset", "expected 'toy2d' or 'shapes32'")])


def _merge(base: Dict[str, Any], update: Dict[str, Any]) -> Dict[str, Any]:
    merged = copy.deepcopy(base)
    for key, value in update.items():
        if isinstance(value, dict) and isinstance(merged.get(key), dict):
            merged[key] = _merge(merged[key], value)
        else:
            merged[key] = value
    return merged


def apply_overrides(raw: Dict[str, Any], overrides: Iterable[str]) -> Dict[str, Any]:
    """Apply ``dotted.key=value`` overrides to a raw config mapping.

    Values are parsed as JSON when possible and kept as strings otherwise.

    Example:
        >>> apply_overrides({}, ["distill.k=20"])
        {'distill': {'k': 20}}
    """
    result = copy.deepcopy(raw)
    for item in overrides:
        if "=" not in item:
            raise ConfigurationError(f"override {item!r} is not of the form key.path=value")
        path, text = item.split("=", 1)
        keys = [key for key in path.strip().split(".") if key]
        if not keys:
            raise ConfigurationError(f"override {item!r} has an empty key path")
        try:
            value = json.loads(text)
        except json.JSONDecodeError:
            value = text
        node = result
        for key in keys[:-1]:
            child = node.get(key)
            if not isinstance(child, dict):
                child = {}
                node[key] = child
            node = child
        node[keys[-1]] = value
    return result


def validate_config(raw: Dict[str, Any]) -> RunConfig:
    """Validate a raw mapping, layering it over the dataset defaults."""
    dataset = raw.get("dataset", "toy2d")
    if dataset not in ("toy2d", "shapes32"):
        raise ConfigurationError("invalid configuration", [("dataset", f"unknown dataset {dataset!r}")])
    merged = _merge(dataset_defaults(dataset), raw)
    try:
        return RunConfig.model_validate(merged)
    except ValidationError as exc:
        raise ConfigurationError("invalid configuration", format_validation_errors(exc)) from exc


def load_config(path: Union[str, Path], overrides: Optional[List[str]] = None) -> RunConfig:
    """Read, override and validate a JSON run configuration.

    Args:
        path: JSON file
        overrides: ``dotted.key=value`` strings applied after parsing

    Raises:
        ConfigurationError: If the file is missing, malformed or invalid
    """
    path = Path(path)
    if not path.is_file():
        raise ConfigurationError(f"config file not found: {path}")
    try:
        raw = json.loads(path.read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise ConfigurationError(f"config file {path} is not valid JSON: {exc}") from exc
    if not isinstance(raw, dict):
        raise ConfigurationError(f"config file {path} must hold a JSON object")
    return validate_config(apply_overrides(raw, overrides or []))


def format_validation_errors(exc: ValidationError) -> List[Tuple[str, str]]:
    """Turn a pydantic error into ``(field.path, message)`` pairs."""
    pairs = []
    for error in exc.errors():
        path = ".".join(str(part) for part in error.get("loc", ())) or "<root>"
        pairs.append((path, error.get("msg", "invalid value")))
    return pairs


__all__ = [
    "DataConfig",
    "ScheduleConfig",
    "NetConfig",
    "ClassifierConfig",
    "TeacherConfig",
    "AttackBudget",
    "DistillConfig",
    "SemanticConfig",
    "PurifyConfig",
    "RunConfig",
    "dataset_defaults",
    "apply_overrides",
    "validate_config",
    "load_config",
    "format_validation_errors",
]
