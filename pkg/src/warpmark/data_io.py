"""Image and landmark files, preprocessing, and dataset directories.

Supported image formats are binary PGM (P5), binary PPM (P6) and 8-bit
non-interlaced grayscale/RGB PNG. Landmarks use the 300W ``.pts``
grammar::

    version: 1
    n_points: K
    {
    u v
    ...
    }
"""

from __future__ import annotations

import json
import struct
import zlib
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from .errors import FormatError, ParseError
from .imageops import resize_bilinear, to_grayscale

PNG_MAGIC = b"\x89PNG\r\n\x1a\n"


# images

def load_image(path) -> np.ndarray:
    """Read an image as a float64 (H, W, C) array with values in [0, 1]."""
    path = Path(path)
    try:
        raw = path.read_bytes()
    except OSError as exc:
        raise OSError(f"{path}: {exc.strerror}") from exc
    if raw.startswith(PNG_MAGIC):
        return _decode_png(raw, path)
    if raw[:2] in (b"P5", b"P6"):
        return _decode_pnm(raw, path)
    raise FormatError(f"{path}: unknown image format (magic {raw[:4]!r})")


def save_image(img, path) -> None:
    """Write ``img`` as PNG, PGM or PPM depending on the file extension."""
    path = Path(path)
    arr = np.asarray(img, dtype=np.float64)
    if arr.ndim == 2:
        arr = arr[..., None]
    if arr.ndim != 3 or arr.shape[-1] not in (1, 3):
        raise FormatError(f"{path}: cannot save image of shape {arr.shape}")
    q = np.round(np.clip(arr, 0, 1) * 255).astype(np.uint8)
    ext = path.suffix.lower()
    if ext == ".png":
        data = _encode_png(q)
    elif ext in (".pgm", ".ppm"):
        if ext == ".pgm":
            q = q if q.shape[-1] == 1 else np.round(to_grayscale(arr.clip(0, 1)) * 255).astype(np.uint8)
        elif q.shape[-1] == 1:
            q = np.repeat(q, 3, axis=-1)
        magic = b"P5" if ext == ".pgm" else b"P6"
        data = magic + f"\n{q.shape[1]} {q.shape[0]}\n255\n".encode() + q.tobytes()
    else:
        raise FormatError(f"{path}: unsupported image extension {ext!r}")
    try:
        path.write_bytes(data)
    except OSError as exc:
        raise OSError(f"{path}: {exc.strerror}") from exc


def _decode_pnm(raw: bytes, path) -> np.ndarray:
    channels = 1 if raw[:2] == b"P5" else 3
    fields = []
    pos = 2
    while len(fields) < 3:
        while pos < len(raw) and raw[pos:pos + 1].isspace():
            pos += 1
        if pos >= len(raw):
            raise OSError(f"{path}: truncated header")
        if raw[pos:pos + 1] == b"#":
            while pos < len(raw) and raw[pos:pos + 1] not in (b"\n", b"\r"):
                pos += 1
            continue
        start = pos
        while pos < len(raw) and not raw[pos:pos + 1].isspace():
            pos += 1
        try:
            fields.append(int(raw[start:pos]))
        except ValueError:
            raise FormatError(f"{path}: malformed header field {raw[start:pos]!r}") from None
    pos += 1  # single whitespace byte after maxval
    w, h, maxval = fields
    if not 0 < maxval < 65536:
        raise FormatError(f"{path}: invalid maxval {maxval}")
    dtype = np.dtype(">u2") if maxval > 255 else np.dtype(np.uint8)
    n = w * h * channels
    body = raw[pos:pos + n * dtype.itemsize]
    if len(body) < n * dtype.itemsize:
        raise OSError(f"{path}: truncated pixel data")
    arr = np.frombuffer(body, dtype=dtype).reshape(h, w, channels)
    return arr.astype(np.float64) / maxval


def _encode_png(q: np.ndarray) -> bytes:
    h, w, c = q.shape
    color = 0 if c == 1 else 2
    rows = np.concatenate([np.zeros((h, 1), np.uint8), q.reshape(h, w * c)], axis=1)

    def chunk(tag: bytes, body: bytes) -> bytes:
        return struct.pack(">I", len(body)) + tag + body + struct.pack(">I", zlib.crc32(tag + body))

    ihdr = struct.pack(">IIBBBBB", w, h, 8, color, 0, 0, 0)
    return (PNG_MAGIC + chunk(b"IHDR", ihdr) + chunk(b"IDAT", zlib.compress(rows.tobytes(), 6))
            + chunk(b"IEND", b""))


def _paeth(a: int, b: int, c: int) -> int:
    p = a + b - c
    pa, pb, pc = abs(p - a), abs(p - b), abs(p - c)
    if pa <= pb and pa <= pc:
        return a
    return b if pb <= pc else c


def _decode_png(raw: bytes, path) -> np.ndarray:
    pos = len(PNG_MAGIC)
    ihdr = None
    idat = []
    while True:
        if pos + 8 > len(raw):
            raise OSError(f"{path}: truncated PNG (missing IEND)")
        length, tag = struct.unpack(">I4s", raw[pos:pos + 8])
        body = raw[pos + 8:pos + 8 + length]
        if len(body) < length or pos + 12 + length > len(raw):
            raise OSError(f"{path}: truncated PNG chunk {tag!r}")
        pos += 12 + length
        if tag == b"IHDR":
            ihdr = struct.unpack(">IIBBBBB", body)
        elif tag == b"IDAT":
            idat.append(body)
        elif tag == b"IEND":
            break
    if ihdr is None:
        raise FormatError(f"{path}: PNG without IHDR")
    w, h, depth, color, _, _, interlace = ihdr
    if depth != 8 or color not in (0, 2) or interlace != 0:
        raise FormatError(f"{path}: only 8-bit non-interlaced grayscale/RGB PNG is supported "
                          f"(depth={depth}, color={color}, interlace={interlace})")
    c = 1 if color == 0 else 3
    try:
        data = zlib.decompress(b"".join(idat))
    except zlib.error as exc:
        raise OSError(f"{path}: corrupt image data ({exc})") from None
    stride = w * c
    if len(data) < h * (stride + 1):
        raise OSError(f"{path}: truncated image data")
    out = np.zeros((h, stride), dtype=np.uint8)
    prev = np.zeros(stride, dtype=np.int64)
    for y in range(h):
        ftype = data[y * (stride + 1)]
        line = np.frombuffer(data, np.uint8, stride, y * (stride + 1) + 1).astype(np.int64)
        if ftype == 0:
            cur = line
        elif ftype == 1:
            cur = np.cumsum(line.reshape(w, c), axis=0).reshape(-1) % 256
        elif ftype == 2:
            cur = (line + prev) % 256
        elif ftype in (3, 4):
            cur = np.zeros(stride, dtype=np.int64)
            for i in range(stride):
                a = cur[i - c] if i >= c else 0
                b = prev[i]
                if ftype == 3:
                    cur[i] = (line[i] + (a + b) // 2) % 256
                else:
                    cl = prev[i - c] if i >= c else 0
                    cur[i] = (line[i] + _paeth(a, b, cl)) % 256
        else:
            raise FormatError(f"{path}: invalid PNG filter type {ftype} on row {y}")
        out[y] = cur
        prev = cur
    return out.reshape(h, w, c).astype(np.float64) / 255.0


# landmarks

def save_pts(landmarks, path) -> None:
    pts = np.asarray(landmarks, dtype=np.float64)
    lines = ["version: 1", f"n_points: {len(pts)}", "{"]
    lines += [f"{u:.6f} {v:.6f}" for u, v in pts]
    lines.append("}")
    try:
        Path(path).write_text("\n".join(lines) + "\n")
    except OSError as exc:
        raise OSError(f"{path}: {exc.strerror}") from exc


def load_pts(path) -> np.ndarray:
    """Parse a ``.pts`` file into a (K, 2) float64 array."""
    lines = Path(path).read_text().splitlines()
    it = iter(enumerate(lines, start=1))

    def next_line(expect: str):
        for no, text in it:
            if text.strip():
                return no, text.strip()
        raise ParseError(f"{path}: unexpected end of file, expected {expect}", len(lines) + 1)

    no, text = next_line("version header")
    if text.replace(" ", "") != "version:1":
        raise ParseError(f"{path}: expected 'version: 1', got {text!r}", no)
    no, text = next_line("n_points header")
    key, _, val = text.partition(":")
    if key.strip() != "n_points":
        raise ParseError(f"{path}: expected 'n_points: <K>', got {text!r}", no)
    try:
        k = int(val)
    except ValueError:
        raise ParseError(f"{path}: invalid point count {val.strip()!r}", no) from None
    no, text = next_line("'{'")
    if text != "{":
        raise ParseError(f"{path}: expected '{{', got {text!r}", no)
    pts = []
    while True:
        no, text = next_line("'}'")
        if text == "}":
            if len(pts) != k:
                raise ParseError(f"{path}: n_points is {k} but {len(pts)} points were listed", no)
            break
        if len(pts) == k:
            raise ParseError(f"{path}: more than n_points={k} points listed", no)
        parts = text.split()
        try:
            if len(parts) != 2:
                raise ValueError
            pts.append((float(parts[0]), float(parts[1])))
        except ValueError:
            raise ParseError(f"{path}: cannot parse point {text!r}", no) from None
    return np.asarray(pts, dtype=np.float64).reshape(k, 2)


# overlays

PRED_COLOR = (0.0, 1.0, 0.0)
GT_COLOR = (1.0, 0.0, 0.0)


def draw_markers(img, landmarks, color=PRED_COLOR) -> np.ndarray:
    """Copy of ``img`` (as RGB) with a 3x3 marker at each landmark, clipped to the image."""
    arr = np.asarray(img, dtype=np.float64)
    if arr.ndim == 2:
        arr = arr[..., None]
    out = np.repeat(arr, 3, axis=-1) if arr.shape[-1] == 1 else arr.copy()
    h, w = out.shape[:2]
    for u, v in np.asarray(landmarks, dtype=np.float64):
        cu, cv = int(np.round(u)), int(np.round(v))
        u0, u1 = max(cu - 1, 0), min(cu + 2, w)
        v0, v1 = max(cv - 1, 0), min(cv + 2, h)
        if u0 < u1 and v0 < v1:
            out[v0:v1, u0:u1] = color
    return out


def overlay(img, landmarks, path, gt=None) -> np.ndarray:
    """Write ``img`` with predicted (green) and optional ground-truth (red) markers as PNG."""
    out = np.asarray(img, dtype=np.float64)
    if gt is not None:
        out = draw_markers(out, gt, GT_COLOR)
    out = draw_markers(out, landmarks, PRED_COLOR)
    path = Path(path)
    save_image(out, path if path.suffix.lower() == ".png" else path.with_suffix(".png"))
    return out


# samples and preprocessing

@dataclass
class Sample:
    image: np.ndarray
    landmarks: np.ndarray | None = None
    domain: str = "source"
    orig_hw: tuple[int, int] = field(default=None)

    def __post_init__(self):
        if self.orig_hw is None:
            self.orig_hw = tuple(self.image.shape[:2])


def preprocess(sample: Sample, side: int, grayscale: bool = True) -> Sample:
    """Resize to ``side`` x ``side`` and rescale landmarks by (side/W, side/H).

    The resampling grid uses the same pure scaling as the landmarks, so a
    point at (u, v) in the original lands at (u*side/W, v*side/H). The
    original size is kept for mapping predictions back.
    """
    img = np.asarray(sample.image, dtype=np.float64)
    h, w = img.shape[:2]
    if (h, w) != (side, side):
        img = resize_bilinear(img, side, side)
    if grayscale:
        img = to_grayscale(img)
    lms = sample.landmarks
    if lms is not None:
        lms = np.asarray(lms, dtype=np.float64) * np.array([side / w, side / h])
    return replace(sample, image=img, landmarks=lms)


def to_original(landmarks, side: int, orig_hw) -> np.ndarray:
    h, w = orig_hw
    return np.asarray(landmarks, dtype=np.float64) * np.array([w / side, h / side])


# dataset directories

@dataclass
class Split:
    """A set of equally sized images with optional landmarks."""

    images: np.ndarray
    landmarks: np.ndarray | None
    domain: str
    name: str = ""

    def __len__(self) -> int:
        return len(self.images)

    @property
    def labeled(self) -> bool:
        return self.landmarks is not None


def write_split(split: Split, directory, gt: np.ndarray | None = None) -> None:
    """Write ``img_%05d.png`` files, sibling ``.pts`` for labels and ``gt/`` for hidden truth."""
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    for i, img in enumerate(split.images):
        save_image(img, d / f"img_{i:05d}.png")
        if split.landmarks is not None:
            save_pts(split.landmarks[i], d / f"img_{i:05d}.pts")
    if gt is not None:
        (d / "gt").mkdir(exist_ok=True)
        for i, lm in enumerate(gt):
            save_pts(lm, d / "gt" / f"img_{i:05d}.pts")


def read_split(directory, domain: str, with_gt: bool = False) -> Split:
    """Read a split written by :func:`write_split`.

    Sibling ``.pts`` files become labels; with ``with_gt`` the hidden
    ground truth under ``gt/`` is used instead (evaluation only).
    """
    d = Path(directory)
    files = sorted(d.glob("img_*.png"))
    if not files:
        raise FileNotFoundError(f"{d}: no images found")
    images = np.stack([load_image(f) for f in files])
    label_dir = d / "gt" if with_gt else d
    pts_files = [label_dir / (f.stem + ".pts") for f in files]
    landmarks = None
    if all(p.exists() for p in pts_files):
        landmarks = np.stack([load_pts(p) for p in pts_files])
    return Split(images, landmarks, domain, d.name)


def write_manifest(root, payload: dict) -> None:
    Path(root, "manifest.json").write_text(json.dumps(payload, indent=2, sort_keys=True) + "\n")


def read_manifest(root) -> dict:
    return json.loads(Path(root, "manifest.json").read_text())
