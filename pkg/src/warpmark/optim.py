"""Loss terms of the warping objective and the Adam optimiser.

Every loss is a squared Frobenius norm taken per sample; when inputs carry
a leading batch axis the per-sample values are averaged over it.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor, _as_tensor
from .errors import ConfigError, DimensionError, NumericError
from .imageops import gradient_field
from .warpfield import WarpParams, warp_landmarks


@dataclass
class LossWeights:
    src: float = 1.0
    grad: float = 1.0
    warp: float = 1.0
    pseudo: float = 1.0

    def __post_init__(self):
        for k, v in vars(self).items():
            if v < 0:
                raise ConfigError(f"loss weight {k} must be nonnegative, got {v}")


def _sq_frobenius(diff: Tensor, sample_ndim: int) -> Tensor:
    """Sum of squares over the trailing ``sample_ndim`` axes, batch-averaged."""
    axes = tuple(range(diff.ndim - sample_ndim, diff.ndim))
    per = ad.sum(ad.square(diff), axis=axes)
    return ad.mean(per) if per.ndim else per


def _result(t: Tensor, *inputs):
    return t if any(isinstance(x, Tensor) for x in inputs) else float(t.data)


def _check_landmarks(name: str, a: Tensor, b: Tensor) -> None:
    if a.shape[-2:] != b.shape[-2:] or a.shape[-1] != 2:
        raise DimensionError(f"{name}: landmark shapes {a.shape} and {b.shape} differ")


def landmark_mse(pred, gt):
    """||pred - gt||_F^2 over the K x 2 coordinates."""
    p = _as_tensor(pred)
    g = _as_tensor(gt, p)
    _check_landmarks("landmark_mse", p, g)
    return _result(_sq_frobenius(ad.sub(p, g), 2), pred, gt)


def pseudo_landmark_loss(pred_now, pseudo):
    """||pred_now - pseudo||_F^2 with ``pseudo`` treated as a constant."""
    p = _as_tensor(pred_now)
    q = _as_tensor(pseudo.data if isinstance(pseudo, Tensor) else pseudo, p)
    _check_landmarks("pseudo_landmark_loss", p, q)
    return _result(_sq_frobenius(ad.sub(p, q), 2), pred_now)


def landmark_warp_error(gamma: WarpParams, centers, pred, real_gt):
    """||w(pred) - real_gt||_F^2 with the field's kernels centred on ``centers``."""
    p = _as_tensor(pred)
    g = _as_tensor(real_gt, p)
    _check_landmarks("landmark_warp_error", p, g)
    warped = warp_landmarks(gamma, centers, pred)
    warped = _as_tensor(warped, p)
    tensors = (gamma.omegas, gamma.V, gamma.b, centers, pred, real_gt)
    return _result(_sq_frobenius(ad.sub(warped, g), 2), *tensors)


def _check_images(name, a: Tensor, b: Tensor) -> None:
    if a.shape[-3:-1] != b.shape[-3:-1]:
        raise DimensionError(f"{name}: image sizes {a.shape} and {b.shape} differ")


def gradient_discrepancy(warped, target, op: str = "sobel", grayscale: bool = True):
    """||grad(warped) - grad(target)||_F^2 over the H x W x 2 gradient fields."""
    a = _as_tensor(warped)
    b = _as_tensor(target, a)
    _check_images("gradient_discrepancy", a, b)
    ga = gradient_field(a, op, grayscale)
    gb = gradient_field(b, op, grayscale)
    return _result(_sq_frobenius(ad.sub(ga, gb), 3), warped, target)


def pixel_mse(warped, target):
    """||warped - target||_F^2 over raw pixel values."""
    a = _as_tensor(warped)
    b = _as_tensor(target, a)
    _check_images("pixel_mse", a, b)
    if a.shape[-1] != b.shape[-1]:
        raise DimensionError(f"pixel_mse: channel counts {a.shape} and {b.shape} differ")
    return _result(_sq_frobenius(ad.sub(a, b), 3), warped, target)


def image_loss(warped, target, kind: str = "sobel", grayscale: bool = True):
    """Image-alignment term selected by name: "sobel", "laplacian" or "mse"."""
    if kind == "mse":
        if grayscale:
            from .imageops import to_grayscale
            warped, target = to_grayscale(warped), to_grayscale(target)
        return pixel_mse(warped, target)
    return gradient_discrepancy(warped, target, kind, grayscale)


class Adam:
    """Adam with bias correction, updating numpy arrays in place.

    ``params`` and ``grads`` are dicts keyed by parameter name; moment
    buffers are created lazily on first use.
    """

    def __init__(self, lr: float = 1e-3, beta1: float = 0.9, beta2: float = 0.999,
                 eps: float = 1e-8):
        if lr < 0:
            raise ConfigError(f"learning rate must be nonnegative, got {lr}")
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.t = 0
        self.m: dict[str, np.ndarray] = {}
        self.v: dict[str, np.ndarray] = {}

    def step(self, params: dict[str, np.ndarray], grads: dict[str, np.ndarray]) -> None:
        bad = [k for k in params if not np.all(np.isfinite(grads[k]))]
        if bad:
            raise NumericError(f"adam_step: non-finite gradients in {bad} at step {self.t + 1}")
        self.t += 1
        bc1 = 1.0 - self.beta1 ** self.t
        bc2 = 1.0 - self.beta2 ** self.t
        for k, p in params.items():
            g = grads[k]
            if g.shape != p.shape:
                raise DimensionError(f"adam_step: gradient for {k} has shape {g.shape}, expected {p.shape}")
            if k not in self.m:
                self.m[k] = np.zeros_like(p)
                self.v[k] = np.zeros_like(p)
            m, v = self.m[k], self.v[k]
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * (g * g)
            if self.lr:
                p -= (self.lr * (m / bc1) / (np.sqrt(v / bc2) + self.eps)).astype(p.dtype)

    def state_dict(self) -> dict:
        return {"t": self.t, "m": {k: v.copy() for k, v in self.m.items()},
                "v": {k: v.copy() for k, v in self.v.items()}}


def adam_step(state: Adam, params: dict[str, np.ndarray], grads: dict[str, np.ndarray]) -> None:
    state.step(params, grads)
