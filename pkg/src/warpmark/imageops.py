"""Image-level operators: grayscale, gradient fields and bilinear sampling.

Images are channel-last, ``(H, W, C)`` or batched ``(N, H, W, C)``, with
values in [0, 1]. A pixel coordinate ``(u, v)`` is (column, row) with the
origin at the top-left pixel centre. Every operator accepts numpy arrays or
:class:`~warpmark.autodiff.Tensor` and is differentiable in the latter case.
"""

from __future__ import annotations

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor, _as_tensor, _make
from .errors import DimensionError, UsageError

GRAY_WEIGHTS = (0.299, 0.587, 0.114)

SOBEL_U = np.array([[-1.0, 0.0, 1.0],
                    [-2.0, 0.0, 2.0],
                    [-1.0, 0.0, 1.0]]) / 8.0
SOBEL_V = SOBEL_U.T.copy()
LAPLACIAN = np.array([[0.0, 1.0, 0.0],
                      [1.0, -4.0, 1.0],
                      [0.0, 1.0, 0.0]])


def _check_image(x: Tensor, name: str) -> None:
    if x.ndim not in (3, 4):
        raise DimensionError(f"{name}: expected (H, W, C) or (N, H, W, C), got shape {x.shape}")


def to_grayscale(img):
    """Luma conversion 0.299 R + 0.587 G + 0.114 B; identity on one channel."""
    x = _as_tensor(img)
    _check_image(x, "to_grayscale")
    c = x.shape[-1]
    if c == 1:
        out = x
    elif c == 3:
        w = np.asarray(GRAY_WEIGHTS, dtype=x.dtype).reshape(3, 1)
        out = ad.matmul(x, w)
    else:
        raise DimensionError(f"to_grayscale: expected 1 or 3 channels, got {c}")
    return out if isinstance(img, Tensor) else out.data


def _sobel_pair(p: Tensor) -> tuple[Tensor, Tensor]:
    # separable form: central difference along one axis, [1, 2, 1] smoothing along
    # the other; differences of equal values are exactly zero, so flat regions give 0
    du = ad.sub(p[..., :, 2:], p[..., :, :-2])
    gu = ad.add(ad.add(du[..., :-2, :], ad.mul(du[..., 1:-1, :], 2.0)), du[..., 2:, :])
    dv = ad.sub(p[..., 2:, :], p[..., :-2, :])
    gv = ad.add(ad.add(dv[..., :, :-2], ad.mul(dv[..., :, 1:-1], 2.0)), dv[..., :, 2:])
    return ad.mul(gu, 0.125), ad.mul(gv, 0.125)


def _laplacian_pair(p: Tensor) -> tuple[Tensor, Tensor]:
    centre = p[..., 1:-1, 1:-1]
    ring = ad.add(ad.add(p[..., :-2, 1:-1], p[..., 2:, 1:-1]), ad.add(p[..., 1:-1, :-2], p[..., 1:-1, 2:]))
    lap = ad.sub(ring, ad.mul(centre, 4.0))
    return lap, lap


def _field(img, stencil, name: str, grayscale: bool):
    x = _as_tensor(img)
    _check_image(x, name)
    if x.shape[-3] < 3 or x.shape[-2] < 3:
        raise DimensionError(f"{name}: image must be at least 3x3, got {x.shape[-3:-1]}")
    batched = x.ndim == 4
    if not batched:
        x = ad.reshape(x, (1,) + x.shape)
    if grayscale:
        x = to_grayscale(x)
    n, h, w, c = x.shape
    planes = ad.pad(ad.transpose(x, (0, 3, 1, 2)), 1, mode="edge")  # (n, c, h+2, w+2)
    a, b = stencil(planes)
    out = ad.stack([a, b], axis=-1)  # (n, c, h, w, 2)
    out = ad.reshape(ad.transpose(out, (0, 2, 3, 1, 4)), (n, h, w, 2 * c))
    if not batched:
        out = ad.reshape(out, out.shape[1:])
    return out if isinstance(img, Tensor) else out.data


def sobel_field(img, grayscale: bool = True):
    """(d/du, d/dv) per pixel using the 1/8-normalised Sobel pair.

    Equivalent to correlating with ``SOBEL_U`` and ``SOBEL_V``. Borders
    replicate the edge pixels. With ``grayscale=False`` the field is
    computed per channel and has ``2*C`` components ordered
    ``[u0, v0, u1, v1, ...]``.
    """
    return _field(img, _sobel_pair, "sobel_field", grayscale)


def laplacian_field(img, grayscale: bool = True):
    """Discrete Laplacian (``LAPLACIAN`` stencil), copied into both field components."""
    return _field(img, _laplacian_pair, "laplacian_field", grayscale)


def gradient_field(img, op: str = "sobel", grayscale: bool = True):
    if op == "sobel":
        return sobel_field(img, grayscale)
    if op == "laplacian":
        return laplacian_field(img, grayscale)
    raise UsageError(f"unknown gradient operator {op!r}")


def bilinear_sample(img, coords):
    """Sample ``img`` at continuous ``(u, v)`` positions.

    ``coords`` has shape ``(H', W', 2)`` (or ``(N, H', W', 2)`` for a
    batched image) and the result is ``(H', W', C)``. Coordinates are
    clamped to the image rectangle, so far out-of-range samples repeat
    the border, and the coordinate gradient vanishes where clamping is
    active.
    """
    x = _as_tensor(img)
    g = _as_tensor(coords, x)
    _check_image(x, "bilinear_sample")
    batched = x.ndim == 4
    if not batched:
        x = ad.reshape(x, (1,) + x.shape)
        g = ad.reshape(g, (1,) + g.shape)
    if g.ndim != 4 or g.shape[-1] != 2 or g.shape[0] != x.shape[0]:
        raise DimensionError(
            f"bilinear_sample: coords shape {g.shape} does not match image {x.shape}")
    out = _sample(x, g)
    if not batched:
        out = ad.reshape(out, out.shape[1:])
    return out if isinstance(img, Tensor) or isinstance(coords, Tensor) else out.data


def _sample(x: Tensor, g: Tensor) -> Tensor:
    n, h, w, c = x.shape
    _, ho, wo, _ = g.shape
    u = g.data[..., 0]
    v = g.data[..., 1]
    uc = np.clip(u, 0, w - 1)
    vc = np.clip(v, 0, h - 1)
    u0 = np.clip(np.floor(uc), 0, max(w - 2, 0)).astype(np.int64)
    v0 = np.clip(np.floor(vc), 0, max(h - 2, 0)).astype(np.int64)
    u1 = np.minimum(u0 + 1, w - 1)
    v1 = np.minimum(v0 + 1, h - 1)
    fu = (uc - u0).astype(x.dtype)[..., None]
    fv = (vc - v0).astype(x.dtype)[..., None]
    base = (np.arange(n) * h * w).reshape(n, 1, 1)
    i00 = base + v0 * w + u0
    i01 = base + v0 * w + u1
    i10 = base + v1 * w + u0
    i11 = base + v1 * w + u1
    flat = x.data.reshape(n * h * w, c)
    p00, p01, p10, p11 = flat[i00], flat[i01], flat[i10], flat[i11]
    # weighted form keeps integer coordinates bit-exact
    top = (1 - fu) * p00 + fu * p01
    bot = (1 - fu) * p10 + fu * p11
    out = (1 - fv) * top + fv * bot
    inside_u = ((u >= 0) & (u <= w - 1))[..., None]
    inside_v = ((v >= 0) & (v <= h - 1))[..., None]

    def back(go):
        gx = gg = None
        if x.requires_grad:
            wts = ((1 - fu) * (1 - fv), fu * (1 - fv), (1 - fu) * fv, fu * fv)
            acc = np.zeros((n * h * w, c), dtype=go.dtype)
            for idx, wt in zip((i00, i01, i10, i11), wts):
                contrib = (go * wt).reshape(-1, c)
                for ch in range(c):
                    acc[:, ch] += np.bincount(idx.reshape(-1), weights=contrib[:, ch],
                                              minlength=n * h * w)
            gx = acc.reshape(n, h, w, c)
        if g.requires_grad:
            du = ((1 - fv) * (p01 - p00) + fv * (p11 - p10)) * inside_u
            dv = (bot - top) * inside_v
            gg = np.stack([(go * du).sum(-1), (go * dv).sum(-1)], axis=-1)
        return gx, gg

    return _make("bilinear_sample", out, (x, g), back)


def resize_bilinear(img: np.ndarray, out_h: int, out_w: int) -> np.ndarray:
    """Resize by sampling output pixel (u, v) at (u*W/out_w, v*H/out_h).

    Pure scaling, matching how landmark coordinates are rescaled; no
    anti-aliasing.
    """
    img = np.asarray(img)
    h, w = img.shape[:2]
    if (h, w) == (out_h, out_w):
        return img.copy()
    uu = np.arange(out_w) * (w / out_w)
    vv = np.arange(out_h) * (h / out_h)
    grid = np.stack(np.meshgrid(uu, vv), axis=-1)
    with ad.precision(np.float64):
        out = bilinear_sample(img.astype(np.float64), grid)
    return out.astype(img.dtype)
