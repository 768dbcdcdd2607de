"""NumPy MLP denoiser with hand-written backpropagation.

The denoiser predicts the noise ``eps`` from the concatenation of the
flattened latent, a sinusoidal time embedding and an optional condition
vector. Hidden layers use SiLU, the output layer is linear.
"""

import logging
from dataclasses import dataclass
from pathlib import Path
from typing import Any, Dict, List, Optional, Sequence, Tuple, Union

import numpy as np
from scipy.special import expit

from noisebridge.bridge import Timesteps, check_timesteps, per_example
from noisebridge.errors import ShapeMismatchError
from noisebridge.schedule import NoiseSchedule
from noisebridge.tensor_io import load_tensors, save_tensors

logger = logging.getLogger(__name__)

Layer = Tuple[np.ndarray, np.ndarray]


def silu(x: np.ndarray) -> np.ndarray:
    return x * expit(x)


def silu_grad(x: np.ndarray) -> np.ndarray:
    sig = expit(x)
    return sig * (1.0 + x * (1.0 - sig))


def sinusoidal_embedding(t: np.ndarray, dim: int, max_period: float = 10000.0) -> np.ndarray:
    """Transformer-style embedding of integer timesteps, shape ``(B, dim)``."""
    t = np.asarray(t, dtype=np.float64).reshape(-1)
    half = dim // 2
    freqs = np.exp(-np.log(max_period) * np.arange(half, dtype=np.float64) / half)
    angles = t[:, None] * freqs[None, :]
    return np.concatenate([np.sin(angles), np.cos(angles)], axis=1)


@dataclass
class ParameterGradients:
    """Per-layer ``(dW, db)`` pairs, in layer order."""

    layers: List[Layer]

    def __add__(self, other: "ParameterGradients") -> "ParameterGradients":
        return ParameterGradients([(w1 + w2, b1 + b2) for (w1, b1), (w2, b2) in zip(self.layers, other.layers)])

    def scaled(self, factor: float) -> "ParameterGradients":
        return ParameterGradients([(factor * w, factor * b) for w, b in self.layers])

    def flat(self) -> np.ndarray:
        return np.concatenate([np.concatenate([w.ravel(), b.ravel()]) for w, b in self.layers])

    def is_finite(self) -> bool:
        return all(np.all(np.isfinite(w)) and np.all(np.isfinite(b)) for w, b in self.layers)


class Mlp:
    """Dense network stored as ``(W, b)`` with ``W`` of shape ``(in, out)``."""

    def __init__(self, layers: Sequence[Layer]):
        if not layers:
            raise ShapeMismatchError("an MLP needs at least one layer")
        for (w_prev, _), (w_next, _) in zip(layers, layers[1:]):
            if w_prev.shape[1] != w_next.shape[0]:
                raise ShapeMismatchError(f"layer widths do not chain: {w_prev.shape} then {w_next.shape}")
        self.layers: List[Layer] = [(np.array(w, dtype=np.float64), np.array(b, dtype=np.float64)) for w, b in layers]

    @classmethod
    def init(cls, sizes: Sequence[int], rng: np.random.Generator, zero_last: bool = False) -> "Mlp":
        """He-style initialisation for the layer widths ``sizes``."""
        layers = []
        for index, (fan_in, fan_out) in enumerate(zip(sizes, sizes[1:])):
            last = index == len(sizes) - 2
            if last and zero_last:
                w = np.zeros((fan_in, fan_out))
            else:
                w = rng.standard_normal((fan_in, fan_out)) * np.sqrt(2.0 / fan_in)
            layers.append((w, np.zeros(fan_out)))
        return cls(layers)

    @property
    def input_dim(self) -> int:
        return int(self.layers[0][0].shape[0])

    @property
    def output_dim(self) -> int:
        return int(self.layers[-1][0].shape[1])

    @property
    def shapes(self) -> List[List[int]]:
        result = []
        for w, b in self.layers:
            result.extend([list(w.shape), list(b.shape)])
        return result

    def arrays(self) -> List[np.ndarray]:
        return [array for layer in self.layers for array in layer]

    def forward(self, x: np.ndarray) -> Tuple[np.ndarray, List[Layer]]:
        """Return the output and the ``(input, pre-activation)`` cache per layer."""
        if x.ndim != 2 or x.shape[1] != self.input_dim:
            raise ShapeMismatchError(f"MLP expects (B, {self.input_dim}) inputs, got {x.shape}")
        cache = []
        h = x
        last = len(self.layers) - 1
        for index, (w, b) in enumerate(self.layers):
            pre = h @ w + b
            cache.append((h, pre))
            h = silu(pre) if index < last else pre
        return h, cache

    def backward(self, grad_out: np.ndarray, cache: Optional[List[Layer]]) -> Tuple[ParameterGradients, np.ndarray]:
        """Backpropagate ``grad_out``; returns parameter and input gradients."""
        if cache is None:
            raise ValueError("backward needs the cache of a forward pass")
        if len(cache) != len(self.layers):
            raise ShapeMismatchError("cache does not belong to this network")
        grads: List[Layer] = [None] * len(self.layers)  # type: ignore[list-item]
        g = grad_out
        last = len(self.layers) - 1
        for index in range(last, -1, -1):
            h, pre = cache[index]
            if index < last:
                g = g * silu_grad(pre)
            w, _ = self.layers[index]
            grads[index] = (h.T @ g, g.sum(axis=0))
            g = g @ w.T
        return ParameterGradients(grads), g

    def apply_gradients(self, grads: ParameterGradients, learning_rate: float) -> None:
        """Plain SGD step."""
        self.layers = [(w - learning_rate * dw, b - learning_rate * db) for (w, b), (dw, db) in zip(self.layers, grads.layers)]

    def get_flat(self) -> np.ndarray:
        return np.concatenate([np.concatenate([w.ravel(), b.ravel()]) for w, b in self.layers])

    def set_flat(self, vector: np.ndarray) -> None:
        vector = np.asarray(vector, dtype=np.float64)
        layers = []
        offset = 0
        for w, b in self.layers:
            layer = []
            for array in (w, b):
                layer.append(vector[offset:offset + array.size].reshape(array.shape).copy())
                offset += array.size
            layers.append(tuple(layer))
        if offset != vector.size:
            raise ShapeMismatchError(f"expected {offset} parameters, got {vector.size}")
        self.layers = layers

    def copy(self) -> "Mlp":
        return Mlp([(w.copy(), b.copy()) for w, b in self.layers])


@dataclass
class NetCache:
    """Activations kept by :meth:`DenoiserNet.forward_with_cache`."""

    layers: List[Layer]
    batch_shape: Tuple[int, ...]


@dataclass
class DenoiserNet:
    """Noise-prediction network ``eps_hat(z, t, cond)``.

    Attributes:
        mlp: Underlying dense layers
        data_shape: Shape of one example, e.g. ``(2,)`` or ``(32, 32)``
        time_embed_dim: Width of the sinusoidal embedding
        cond_dim: Width of the condition vector; 0 for unconditional nets
        sigma_data: Data scale in the consistency skip scales
        timestep_scaling: Multiplier of the rescaled timestep in the skip scales
        trained_iters: Optimiser steps taken so far
    """

    mlp: Mlp
    data_shape: Tuple[int, ...]
    time_embed_dim: int
    cond_dim: int = 0
    sigma_data: float = 0.5
    timestep_scaling: float = 10.0
    trained_iters: int = 0

    @classmethod
    def create(
        cls,
        data_shape: Sequence[int],
        hidden_sizes: Sequence[int],
        time_embed_dim: int,
        rng: np.random.Generator,
        cond_dim: int = 0,
        zero_init_output: bool = True,
        sigma_data: float = 0.5,
        timestep_scaling: float = 10.0,
    ) -> "DenoiserNet":
        data_shape = tuple(int(d) for d in data_shape)
        data_dim = int(np.prod(data_shape))
        sizes = [data_dim + time_embed_dim + cond_dim, *hidden_sizes, data_dim]
        return cls(
            mlp=Mlp.init(sizes, rng, zero_last=zero_init_output),
            data_shape=data_shape,
            time_embed_dim=int(time_embed_dim),
            cond_dim=int(cond_dim),
            sigma_data=float(sigma_data),
            timestep_scaling=float(timestep_scaling),
        )

    @classmethod
    def from_teacher(cls, teacher: "DenoiserNet", cond_dim: int) -> "DenoiserNet":
        """Student initialised from the teacher, with zero weights on new condition inputs."""
        layers = [(w.copy(), b.copy()) for w, b in teacher.mlp.layers]
        first_w, first_b = layers[0]
        keep = teacher.data_dim + teacher.time_embed_dim
        extra = np.zeros((cond_dim, first_w.shape[1]))
        layers[0] = (np.concatenate([first_w[:keep], extra], axis=0), first_b)
        return cls(
            mlp=Mlp(layers),
            data_shape=teacher.data_shape,
            time_embed_dim=teacher.time_embed_dim,
            cond_dim=int(cond_dim),
            sigma_data=teacher.sigma_data,
            timestep_scaling=teacher.timestep_scaling,
        )

    @property
    def data_dim(self) -> int:
        return int(np.prod(self.data_shape))

    def copy(self) -> "DenoiserNet":
        return DenoiserNet(
            mlp=self.mlp.copy(),
            data_shape=self.data_shape,
            time_embed_dim=self.time_embed_dim,
            cond_dim=self.cond_dim,
            sigma_data=self.sigma_data,
            timestep_scaling=self.timestep_scaling,
            trained_iters=self.trained_iters,
        )

    def _inputs(self, z: np.ndarray, t: Timesteps, cond: Optional[np.ndarray]) -> np.ndarray:
        z = np.asarray(z, dtype=np.float64)
        if z.shape[1:] != self.data_shape:
            raise ShapeMismatchError(f"latent batch has example shape {z.shape[1:]}, expected {self.data_shape}")
        batch = z.shape[0]
        steps = np.broadcast_to(np.asarray(t), (batch,))
        parts = [z.reshape(batch, -1), sinusoidal_embedding(steps, self.time_embed_dim)]
        if self.cond_dim:
            if cond is None:
                cond = np.zeros((batch, self.cond_dim))
            cond = np.asarray(cond, dtype=np.float64)
            if cond.shape != (batch, self.cond_dim):
                raise ShapeMismatchError(f"condition has shape {cond.shape}, expected {(batch, self.cond_dim)}")
            parts.append(cond)
        elif cond is not None:
            raise ShapeMismatchError("this network takes no condition")
        return np.concatenate(parts, axis=1)

    def forward(self, z: np.ndarray, t: Timesteps, cond: Optional[np.ndarray] = None) -> np.ndarray:
        """Predicted noise, shaped like ``z``. ``cond=None`` is the null condition."""
        eps_hat, _ = self.forward_with_cache(z, t, cond)
        return eps_hat

    def forward_with_cache(self, z: np.ndarray, t: Timesteps, cond: Optional[np.ndarray] = None) -> Tuple[np.ndarray, NetCache]:
        out, layers = self.mlp.forward(self._inputs(z, t, cond))
        z = np.asarray(z)
        return out.reshape(z.shape), NetCache(layers=layers, batch_shape=z.shape)

    def backward(self, grad_out: np.ndarray, cache: Optional[NetCache]) -> ParameterGradients:
        """Parameter gradients for an upstream gradient on the predicted noise."""
        if cache is None:
            raise ValueError("backward needs the cache of a forward pass")
        grad_out = np.asarray(grad_out, dtype=np.float64)
        if grad_out.shape != cache.batch_shape:
            raise ShapeMismatchError(f"gradient has shape {grad_out.shape}, expected {cache.batch_shape}")
        grads, _ = self.mlp.backward(grad_out.reshape(grad_out.shape[0], -1), cache.layers)
        return grads

    def consistency(self, z: np.ndarray, t: Timesteps, cond: Optional[np.ndarray], schedule: NoiseSchedule) -> np.ndarray:
        return consistency_apply(self, z, t, cond, schedule)


@dataclass(frozen=True)
class SkipScales:
    """Boundary-condition scales ``c_skip`` and ``c_out`` per timestep."""

    c_skip: np.ndarray
    c_out: np.ndarray


def skip_scales(net: DenoiserNet, schedule: NoiseSchedule) -> SkipScales:
    """LCM-style scales on the 1000-step timescale; index 0 is the boundary.

    ``c_skip(0) = 1`` and ``c_out(0) = 0`` exactly.
    """
    steps = np.arange(schedule.num_steps, dtype=np.float64)
    scaled = net.timestep_scaling * (steps * 1000.0 / schedule.num_steps)
    sigma_sq = net.sigma_data ** 2
    c_skip = sigma_sq / (scaled ** 2 + sigma_sq)
    c_out = scaled / np.sqrt(scaled ** 2 + sigma_sq)
    return SkipScales(c_skip=c_skip, c_out=c_out)


@dataclass
class ConsistencyCache:
    net_cache: NetCache
    grad_scale: np.ndarray


def consistency_forward(
    net: DenoiserNet,
    z: np.ndarray,
    t: Timesteps,
    cond: Optional[np.ndarray],
    schedule: NoiseSchedule,
    scales: Optional[SkipScales] = None,
) -> Tuple[np.ndarray, ConsistencyCache]:
    """``f(z, t) = c_skip z + c_out (z - sigma_t eps_hat) / sqrt(ab_t)`` plus a backward cache."""
    z = np.asarray(z, dtype=np.float64)
    check_timesteps(t, schedule)
    scales = scales or skip_scales(net, schedule)
    eps_hat, net_cache = net.forward_with_cache(z, t, cond)
    c_skip = per_example(scales.c_skip, t, z)
    c_out = per_example(scales.c_out, t, z)
    root = per_example(schedule.sqrt_alpha_bar, t, z)
    sigma = per_example(schedule.sigma, t, z)
    x0_hat = (z - sigma * eps_hat) / root
    out = c_skip * z + c_out * x0_hat
    return out, ConsistencyCache(net_cache=net_cache, grad_scale=-c_out * sigma / root)


def consistency_apply(
    net: DenoiserNet,
    z: np.ndarray,
    t: Timesteps,
    cond: Optional[np.ndarray],
    schedule: NoiseSchedule,
    scales: Optional[SkipScales] = None,
) -> np.ndarray:
    out, _ = consistency_forward(net, z, t, cond, schedule, scales)
    return out


def consistency_backward(net: DenoiserNet, grad_out: np.ndarray, cache: ConsistencyCache) -> ParameterGradients:
    """Parameter gradients of the consistency output; ``z`` is treated as data."""
    return net.backward(cache.grad_scale * grad_out, cache.net_cache)


def sgd_step(net: DenoiserNet, grads: ParameterGradients, learning_rate: float) -> None:
    net.mlp.apply_gradients(grads, learning_rate)
    net.trained_iters += 1


@dataclass
class EmaState:
    """Exponential moving average of a network's parameters."""

    shadow: DenoiserNet
    rate: float

    @classmethod
    def from_net(cls, net: DenoiserNet, rate: float) -> "EmaState":
        return cls(shadow=net.copy(), rate=float(rate))


def ema_update(ema: EmaState, live: DenoiserNet) -> EmaState:
    """``shadow <- rate * shadow + (1 - rate) * live``, in place."""
    if [list(a.shape) for a in ema.shadow.mlp.arrays()] != [list(a.shape) for a in live.mlp.arrays()]:
        raise ShapeMismatchError("EMA shadow and live network have different shapes")
    mu = ema.rate
    ema.shadow.mlp.layers = [
        (mu * ws + (1.0 - mu) * wl, mu * bs + (1.0 - mu) * bl)
        for (ws, bs), (wl, bl) in zip(ema.shadow.mlp.layers, live.mlp.layers)
    ]
    ema.shadow.trained_iters = live.trained_iters
    return ema


def save_mlp(base: Union[str, Path], mlp: Mlp, meta: Dict[str, Any]) -> List[Path]:
    return save_tensors(base, mlp.arrays(), meta)


def load_mlp(base: Union[str, Path]) -> Tuple[Mlp, Dict[str, Any]]:
    arrays, meta = load_tensors(base)
    if len(arrays) % 2:
        raise ShapeMismatchError(f"{base} does not hold (W, b) pairs")
    layers = [(arrays[i], arrays[i + 1]) for i in range(0, len(arrays), 2)]
    return Mlp(layers), meta


def save_checkpoint(net: DenoiserNet, base: Union[str, Path], config: Optional[Dict[str, Any]] = None) -> List[Path]:
    """Write ``<base>.bin`` and ``<base>.json``."""
    meta = {
        "kind": "denoiser",
        "data_shape": list(net.data_shape),
        "time_embed_dim": net.time_embed_dim,
        "cond_dim": net.cond_dim,
        "sigma_data": net.sigma_data,
        "timestep_scaling": net.timestep_scaling,
        "trained_iters": net.trained_iters,
        "config": config or {},
    }
    paths = save_mlp(base, net.mlp, meta)
    logger.info("saved denoiser checkpoint %s (%d iterations)", paths[0], net.trained_iters)
    return paths


def load_checkpoint(base: Union[str, Path]) -> DenoiserNet:
    """Inverse of :func:`save_checkpoint`.

    Raises:
        CheckpointNotFoundError: If the files are missing
    """
    mlp, meta = load_mlp(base)
    return DenoiserNet(
        mlp=mlp,
        data_shape=tuple(meta["data_shape"]),
        time_embed_dim=int(meta["time_embed_dim"]),
        cond_dim=int(meta["cond_dim"]),
        sigma_data=float(meta["sigma_data"]),
        timestep_scaling=float(meta["timestep_scaling"]),
        trained_iters=int(meta["trained_iters"]),
    )


__all__ = [
    "silu",
    "sinusoidal_embedding",
    "ParameterGradients",
    "Mlp",
    "NetCache",
    "DenoiserNet",
    "SkipScales",
    "skip_scales",
    "ConsistencyCache",
    "consistency_forward",
    "consistency_apply",
    "consistency_backward",
    "sgd_step",
    "EmaState",
    "ema_update",
    "save_mlp",
    "load_mlp",
    "save_checkpoint",
    "load_checkpoint",
]
