"""Thin-plate-spline warping field conditioned on predicted landmarks.

The field maps a pixel ``y`` of the stylized image to a position in the
real image::

    w(y) = sum_k omega_k * phi(|y - c_k|) + V y + b,    phi(r) = r^2 log r

where the kernel centres ``c_k`` are the landmarks predicted on the
stylized face. Sampling the real image along ``w`` (inverse mapping)
produces the real face warped into the stylized face's geometry.

All functions accept numpy arrays or tensors and broadcast over leading
batch axes: centres ``(..., K, 2)``, points ``(..., P, 2)``, omegas
``(..., K, 2)``, ``V`` ``(..., 2, 2)``, ``b`` ``(..., 2)``.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor, _as_tensor
from .errors import DomainError, SingularSystemError, UsageError
from .imageops import bilinear_sample


@dataclass
class WarpParams:
    """Kernel weights ``omegas`` (K, 2), affine matrix ``V`` (2, 2), offset ``b`` (2,)."""

    omegas: np.ndarray | Tensor
    V: np.ndarray | Tensor
    b: np.ndarray | Tensor

    @classmethod
    def identity(cls, k: int, dtype=np.float64) -> "WarpParams":
        return cls(np.zeros((k, 2), dtype), np.eye(2, dtype=dtype), np.zeros(2, dtype))

    @classmethod
    def translation(cls, k: int, offset, dtype=np.float64) -> "WarpParams":
        return cls(np.zeros((k, 2), dtype), np.eye(2, dtype=dtype), np.asarray(offset, dtype))

    @property
    def n_kernels(self) -> int:
        return self.omegas.shape[-2]

    def tensors(self, requires_grad: bool = True) -> "WarpParams":
        """Copy into fresh leaf tensors (for optimisation)."""
        return WarpParams(*(Tensor(_data(a).copy(), requires_grad=requires_grad)
                            for a in (self.omegas, self.V, self.b)))

    def numpy(self) -> "WarpParams":
        return WarpParams(*(np.array(_data(a)) for a in (self.omegas, self.V, self.b)))

    def as_dict(self) -> dict[str, np.ndarray]:
        return {"omegas": np.array(_data(self.omegas)), "V": np.array(_data(self.V)),
                "b": np.array(_data(self.b))}

    @classmethod
    def from_dict(cls, d: dict) -> "WarpParams":
        return cls(np.asarray(d["omegas"]), np.asarray(d["V"]), np.asarray(d["b"]))

    def leaves(self) -> list[Tensor]:
        return [self.omegas, self.V, self.b]


def _data(a):
    return a.data if isinstance(a, Tensor) else np.asarray(a)


def _any_tensor(*xs) -> bool:
    return any(isinstance(x, Tensor) for x in xs)


def tps_kernel(r):
    """phi(r) = r^2 ln r with phi(0) = 0; accepts scalars or arrays."""
    r = np.asarray(r, dtype=np.float64)
    if np.any(r < 0):
        raise DomainError("tps_kernel: negative radius")
    safe = np.where(r > 0, r, 1.0)
    out = np.where(r > 0, r * r * np.log(safe), 0.0)
    return float(out) if out.ndim == 0 else out


def _kernel_matrix(pts: Tensor, centers: Tensor) -> Tensor:
    """phi(|p_i - c_k|) for every point/centre pair, shape (..., P, K)."""
    d = ad.sub(ad.reshape(pts, pts.shape[:-1] + (1, 2)),
               ad.reshape(centers, centers.shape[:-2] + (1,) + centers.shape[-2:]))
    return ad.tps_phi(d)


def _float(x):
    if isinstance(x, Tensor):
        return x
    x = np.asarray(x)
    return x if np.issubdtype(x.dtype, np.floating) else x.astype(np.float64)


def warp_points(gamma: WarpParams, centers, pts):
    """Evaluate the field at every point of ``pts`` (..., P, 2).

    Reductions are elementwise multiply-and-sum rather than matmul so each
    point's value does not depend on how many points are evaluated together.
    """
    pts_t = _as_tensor(_float(pts))
    c = _as_tensor(_float(centers), pts_t)
    om = _as_tensor(_float(gamma.omegas), pts_t)
    V = _as_tensor(_float(gamma.V), pts_t)
    b = _as_tensor(_float(gamma.b), pts_t)
    phi = _kernel_matrix(pts_t, c)  # (..., P, K)
    bend = ad.sum(ad.mul(ad.reshape(phi, phi.shape + (1,)),
                         ad.reshape(om, om.shape[:-2] + (1,) + om.shape[-2:])), axis=-2)
    lin = ad.sum(ad.mul(ad.reshape(pts_t, pts_t.shape[:-1] + (1, 2)),
                        ad.reshape(V, V.shape[:-2] + (1, 2, 2))), axis=-1)
    out = ad.add(ad.add(bend, lin), ad.reshape(b, b.shape[:-1] + (1, 2)))
    if _any_tensor(pts, centers, gamma.omegas, gamma.V, gamma.b):
        return out
    return out.data


def warp_eval(gamma: WarpParams, centers, y):
    """Field value at a single point ``y`` (2,)."""
    pts = ad.reshape(y, (1, 2)) if isinstance(y, Tensor) else _float(y).reshape(1, 2)
    return warp_points(gamma, centers, pts)[0]


def warp_landmarks(gamma: WarpParams, centers, pts):
    """Apply the field to a landmark set; used for the landmark warping error."""
    return warp_points(gamma, centers, pts)


def pixel_grid(h: int, w: int, dtype=np.float64) -> np.ndarray:
    """(H, W, 2) array with grid[v, u] = (u, v)."""
    if h <= 0 or w <= 0:
        raise UsageError(f"grid size must be positive, got {(h, w)}")
    uu, vv = np.meshgrid(np.arange(w, dtype=dtype), np.arange(h, dtype=dtype))
    return np.stack([uu, vv], axis=-1)


def warp_grid(gamma: WarpParams, centers, h: int, w: int):
    """Dense field: ``field[..., v, u, :] = w((u, v))``."""
    c = _data(centers)
    dtype = c.dtype if np.issubdtype(c.dtype, np.floating) else ad.get_default_dtype()
    pts = pixel_grid(h, w, dtype).reshape(h * w, 2)
    lead = np.broadcast_shapes(c.shape[:-2], _data(gamma.omegas).shape[:-2],
                               _data(gamma.V).shape[:-2], _data(gamma.b).shape[:-1])
    if lead:
        pts = np.broadcast_to(pts, lead + pts.shape)
    out = warp_points(gamma, centers, pts)
    shape = lead + (h, w, 2)
    return ad.reshape(out, shape) if isinstance(out, Tensor) else out.reshape(shape)


def warp_image(src, gamma: WarpParams, centers, out_hw: tuple[int, int] | None = None):
    """Real image resampled into the geometry defined by ``centers``.

    ``src`` is (H, W, C) or (N, H, W, C); output defaults to the same
    spatial size.
    """
    s = _data(src)
    h, w = out_hw or s.shape[-3:-1]
    grid = warp_grid(gamma, centers, h, w)
    return bilinear_sample(src, grid)


def tps_fit(src_pts, dst_pts, reg: float = 0.0) -> WarpParams:
    """Closed-form TPS with ``w(src_k) = dst_k`` (exactly when ``reg == 0``).

    Solves the standard bordered system with side conditions
    ``sum_k omega_k = 0`` and ``sum_k omega_k src_k^T = 0``; ``reg`` adds
    ``reg * I`` to the kernel block to trade exactness for smoothness.
    Differentiable in both point sets when given tensors, and batched over
    leading axes. No degeneracy check: see :func:`tps_fit_exact`.
    """
    src = _as_tensor(src_pts)
    dst = _as_tensor(dst_pts, src)
    k = src.shape[-2]
    lead = src.shape[:-2]
    phi = _kernel_matrix(src, src)
    if reg:
        phi = ad.add(phi, reg * np.eye(k, dtype=src.dtype))
    ones = np.ones(lead + (k, 1), dtype=src.dtype)
    P = ad.concat([src, ones], axis=-1)  # (..., K, 3)
    top = ad.concat([phi, P], axis=-1)
    bottom = ad.concat([ad.transpose(P, tuple(range(len(lead))) + (len(lead) + 1, len(lead))),
                        np.zeros(lead + (3, 3), dtype=src.dtype)], axis=-1)
    L = ad.concat([top, bottom], axis=-2)
    rhs = ad.concat([dst, np.zeros(lead + (3, 2), dtype=src.dtype)], axis=-2)
    sol = ad.solve(L, rhs)  # (..., K+3, 2)
    omegas = sol[..., :k, :]
    A = sol[..., k:, :]
    V = ad.transpose(A[..., :2, :], tuple(range(len(lead))) + (len(lead) + 1, len(lead)))
    b = A[..., 2, :]
    if _any_tensor(src_pts, dst_pts):
        return WarpParams(omegas, V, b)
    return WarpParams(omegas.data, V.data, b.data)


def tps_fit_exact(src_pts, dst_pts, reg: float = 0.0) -> WarpParams:
    """Non-differentiable closed-form fit on one correspondence set (float64).

    Raises :class:`SingularSystemError` for collinear or duplicated centres
    when ``reg == 0``.
    """
    src = np.asarray(_data(src_pts), dtype=np.float64)
    dst = np.asarray(_data(dst_pts), dtype=np.float64)
    if src.ndim != 2 or src.shape[-1] != 2 or dst.shape != src.shape:
        raise UsageError(f"tps_fit_exact: expected matching (K, 2) point sets, got {src.shape}, {dst.shape}")
    k = src.shape[0]
    if k < 3:
        raise UsageError(f"tps_fit_exact: need at least 3 points, got {k}")
    if reg < 0:
        raise UsageError("tps_fit_exact: reg must be nonnegative")
    if reg == 0:
        centred = src - src.mean(axis=0)
        sv = np.linalg.svd(centred, compute_uv=False)
        scale = max(float(np.abs(centred).max()), 1.0)
        min_gap = min(np.linalg.norm(src[i] - src[j]) for i in range(k) for j in range(i))
        if sv[-1] <= 1e-9 * scale * np.sqrt(k) or min_gap <= 1e-9 * scale:
            raise SingularSystemError(
                "tps_fit_exact: centres are collinear or duplicated; use reg > 0")
    with ad.precision(np.float64):
        fit = tps_fit(src, dst, reg)
    return fit
