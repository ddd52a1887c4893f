"""Coordinate-regression landmarker.

A small convolutional network: ``len(widths)`` blocks of
conv3x3 (zero padding) -> ReLU -> 2x2 average pooling, then one
fully-connected layer to ``2K`` outputs squashed by a sigmoid and scaled
to the input side. Predictions therefore always fall inside the image,
and the map from weights to coordinates is differentiable end to end.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .container import load_arrays, save_arrays
from .errors import CheckpointError, ConfigError, DimensionError


@dataclass(frozen=True)
class ArchConfig:
    side: int = 64
    widths: tuple[int, ...] = (8, 16, 32)
    n_landmarks: int = 16
    in_channels: int = 1

    def __post_init__(self):
        object.__setattr__(self, "widths", tuple(int(w) for w in self.widths))
        if self.side <= 0 or self.n_landmarks <= 0 or self.in_channels <= 0:
            raise ConfigError(f"invalid architecture {self}")
        if not self.widths or any(w <= 0 for w in self.widths):
            raise ConfigError(f"widths must be positive, got {self.widths}")
        if self.side % (2 ** len(self.widths)):
            raise ConfigError(
                f"side {self.side} is not divisible by 2**{len(self.widths)} (one pool per block)")

    @property
    def feature_side(self) -> int:
        return self.side // 2 ** len(self.widths)

    def param_shapes(self) -> dict[str, tuple[int, ...]]:
        shapes = {}
        cin = self.in_channels
        for i, cout in enumerate(self.widths):
            shapes[f"conv{i}.w"] = (cout, cin, 3, 3)
            shapes[f"conv{i}.b"] = (cout,)
            cin = cout
        flat = cin * self.feature_side ** 2
        shapes["fc.w"] = (flat, 2 * self.n_landmarks)
        shapes["fc.b"] = (2 * self.n_landmarks,)
        return shapes

    def n_params(self) -> int:
        return sum(math.prod(s) for s in self.param_shapes().values())

    def to_dict(self) -> dict:
        d = asdict(self)
        d["widths"] = list(self.widths)
        return d


def glorot_bound(fan_in: int, fan_out: int) -> float:
    return math.sqrt(6.0 / (fan_in + fan_out))


@dataclass
class Landmarker:
    arch: ArchConfig
    params: dict[str, np.ndarray]
    seed: int | None = None
    meta: dict = field(default_factory=dict)

    def tensors(self, requires_grad: bool = True) -> dict[str, Tensor]:
        return {k: Tensor(v, requires_grad=requires_grad, dtype=v.dtype)
                for k, v in self.params.items()}

    def copy(self) -> "Landmarker":
        return Landmarker(self.arch, {k: v.copy() for k, v in self.params.items()},
                          self.seed, dict(self.meta))

    def astype(self, dtype) -> "Landmarker":
        return Landmarker(self.arch, {k: v.astype(dtype) for k, v in self.params.items()},
                          self.seed, dict(self.meta))

    def save(self, path) -> None:
        save_checkpoint(self, path)

    @classmethod
    def load(cls, path) -> "Landmarker":
        return load_checkpoint(path)


def init_random(arch: ArchConfig, seed: int, dtype=np.float32) -> Landmarker:
    """Glorot-uniform weights and zero biases, deterministic in ``seed``."""
    rng = np.random.default_rng(seed)
    params = {}
    for name, shape in arch.param_shapes().items():
        if name.endswith(".b"):
            params[name] = np.zeros(shape, dtype=dtype)
            continue
        if len(shape) == 4:
            rf = shape[2] * shape[3]
            fan_in, fan_out = shape[1] * rf, shape[0] * rf
        else:
            fan_in, fan_out = shape
        a = glorot_bound(fan_in, fan_out)
        params[name] = rng.uniform(-a, a, size=shape).astype(dtype)
    return Landmarker(arch, params, seed)


def forward(arch: ArchConfig, params: dict, images) -> Tensor:
    """Batch forward pass: (N, S, S, C) images -> (N, K, 2) coordinates in pixels."""
    w = params["fc.w"]
    # images follow the weights' precision so float32 training stays float32
    x = ad._as_tensor(images if isinstance(images, ad.Tensor) else np.asarray(images, dtype=w.dtype))
    if x.ndim == 3:
        x = ad.reshape(x, (1,) + x.shape)
    if x.shape[1:] != (arch.side, arch.side, arch.in_channels):
        raise DimensionError(
            f"landmarker expects images of shape {(arch.side, arch.side, arch.in_channels)}, "
            f"got {x.shape[1:]}")
    n = x.shape[0]
    h = ad.transpose(x, (0, 3, 1, 2))
    for i in range(len(arch.widths)):
        h = ad.conv2d(h, params[f"conv{i}.w"], params[f"conv{i}.b"], padding=1)
        h = ad.avg_pool2d(ad.relu(h), 2)
    h = ad.reshape(h, (n, -1))
    z = ad.add(ad.matmul(h, params["fc.w"]), params["fc.b"])
    coords = ad.mul(ad.sigmoid(z), float(arch.side))
    return ad.reshape(coords, (n, arch.n_landmarks, 2))


def predict_batch(model: Landmarker, images, orig_hw=None) -> np.ndarray:
    """Landmarks for preprocessed images, mapped back to ``orig_hw`` if given."""
    with ad.precision(model.params["fc.w"].dtype):
        out = forward(model.arch, model.params, np.asarray(images, dtype=model.params["fc.w"].dtype)).data
    out = out.astype(np.float64)
    side = model.arch.side
    # float32 sigmoid saturates to exactly 0 or 1; keep predictions strictly inside
    out = np.clip(out, side * 1e-6, side * (1 - 1e-6))
    if orig_hw is not None:
        hw = np.asarray(orig_hw, dtype=np.float64).reshape(-1, 2)
        scale = np.stack([hw[:, 1] / side, hw[:, 0] / side], axis=-1)[:, None, :]
        out = out * scale
    return out


def predict(model: Landmarker, img, orig_hw=None) -> np.ndarray:
    """(K, 2) landmarks of one preprocessed (S, S, C) image."""
    img = np.asarray(img)
    if img.ndim != 3:
        raise DimensionError(f"predict expects one (S, S, C) image, got shape {img.shape}")
    return predict_batch(model, img[None], None if orig_hw is None else [orig_hw])[0]


def save_checkpoint(model: Landmarker, path) -> None:
    meta = {"kind": "landmarker", "arch": model.arch.to_dict(), "seed": model.seed,
            "dtype": str(model.params["fc.w"].dtype), **model.meta}
    save_arrays(path, model.params, meta)


def load_checkpoint(path) -> Landmarker:
    arrays, meta = load_arrays(path)
    if meta.get("kind") != "landmarker" or "arch" not in meta:
        raise CheckpointError(f"{path}: not a landmarker checkpoint")
    arch = ArchConfig(**meta["arch"])
    expected = arch.param_shapes()
    if set(arrays) != set(expected) or any(arrays[k].shape != tuple(s) for k, s in expected.items()):
        raise CheckpointError(f"{path}: parameters do not match architecture {arch}")
    params = {k: arrays[k] for k in expected}
    extra = {k: v for k, v in meta.items() if k not in ("kind", "arch", "seed", "dtype")}
    return Landmarker(arch, params, meta.get("seed"), extra)
