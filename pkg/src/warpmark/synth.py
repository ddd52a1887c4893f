"""Procedural two-domain face benchmark.

Source faces are simple portraits (head ellipse, eyebrows, eyes, nose,
mouth) rendered from a 16-point landmark template after a random
similarity transform and small per-point noise. A face is rendered by
fitting a thin-plate spline from its landmarks to the template and
evaluating an analytic template picture along that field, so image
geometry always agrees with the landmarks.

Target ("stylized") faces start from a source-style landmark set and
apply a hidden TPS deformation: a caricature-like exaggeration of random
strength plus bounded random displacements. They are rendered with
thicker strokes, reduced contrast and optional inversion. Their ground
truth is kept apart from the images and is only used for evaluation.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import numpy as np

from .container import load_arrays, save_arrays
from .data_io import Split, read_manifest, read_split, write_manifest, write_split
from .errors import ConfigError
from .warpfield import WarpParams, pixel_grid, tps_fit_exact, warp_landmarks, warp_points

# 16-point schema on a 64 x 64 canvas:
# 0-4 contour (left cheek .. chin .. right cheek), 5-7 left eye (outer, centre, inner),
# 8-10 right eye (inner, centre, outer), 11-12 nose (bridge, tip), 13-15 mouth (left, bottom, right)
TEMPLATE = np.array([
    [12.0, 34.0], [17.86, 51.68], [32.0, 59.0], [46.14, 51.68], [52.0, 34.0],
    [20.0, 28.0], [24.0, 28.0], [28.0, 28.0],
    [36.0, 28.0], [40.0, 28.0], [44.0, 28.0],
    [32.0, 30.0], [32.0, 41.0],
    [25.0, 48.0], [32.0, 51.0], [39.0, 48.0],
])

# caricature direction per landmark (template units): narrow jaw, long chin,
# big wide-set eyes, long nose, wide low mouth
EXAGGERATION = np.array([
    [1.5, 0.0], [2.5, 1.5], [0.0, 3.5], [-2.5, 1.5], [-1.5, 0.0],
    [-3.5, -1.0], [-2.0, -1.0], [-0.5, -1.0],
    [0.5, -1.0], [2.0, -1.0], [3.5, -1.0],
    [0.0, -1.0], [0.0, 2.0],
    [-2.5, 2.5], [0.0, 3.5], [2.5, 2.5],
])

SPLIT_IDS = {("source", "train"): 0, ("source", "val"): 1, ("target", "train"): 2, ("target", "val"): 3}


@dataclass
class SynthConfig:
    n_train: int = 200
    n_val: int = 50
    canvas: int = 64
    n_landmarks: int = 16
    schema: str = "face16"
    # geometry
    scale_range: tuple[float, float] = (0.92, 1.08)
    rotation_deg: float = 6.0
    translation: float = 3.0
    point_noise: float = 0.6
    exaggeration: float = 1.0
    exaggeration_range: tuple[float, float] = (0.6, 1.4)
    deform_magnitude: float = 1.0
    # appearance
    appearance_shift: bool = True
    contrast_range: tuple[float, float] = (0.5, 0.8)
    invert_prob: float = 0.0
    stroke_range: tuple[float, float] = (1.8, 2.6)
    noise: float = 0.01
    seed: int = 42
    max_retries: int = 20

    def __post_init__(self):
        for name in ("scale_range", "exaggeration_range", "contrast_range", "stroke_range"):
            setattr(self, name, tuple(float(x) for x in getattr(self, name)))
        if self.schema != "face16" or self.n_landmarks != len(TEMPLATE):
            raise ConfigError(f"only the 16-point 'face16' schema is available, got "
                              f"{self.schema!r} with K={self.n_landmarks}")
        if self.n_train < 1 or self.n_val < 1 or self.canvas < 16:
            raise ConfigError(f"invalid split sizes or canvas in {self}")
        if self.deform_magnitude < 0 or self.exaggeration < 0 or not 0 <= self.invert_prob <= 1:
            raise ConfigError("deformation magnitudes must be nonnegative and invert_prob in [0, 1]")

    @classmethod
    def from_dict(cls, d: dict) -> "SynthConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown synth config keys: {sorted(unknown)}")
        return cls(**d)

    def to_dict(self) -> dict:
        return {k: list(v) if isinstance(v, tuple) else v for k, v in asdict(self).items()}

    @property
    def max_displacement(self) -> float:
        """Upper bound on how far the hidden field moves any landmark (pixels)."""
        s = self.canvas / 64 * self.scale_range[1]
        ex = np.linalg.norm(EXAGGERATION, axis=1).max() * self.exaggeration * self.exaggeration_range[1]
        return float(s * ex + self.deform_magnitude)


@dataclass
class HiddenFields:
    """Per-sample hidden deformation of a target split."""

    centers: np.ndarray
    omegas: np.ndarray
    V: np.ndarray
    b: np.ndarray
    source_landmarks: np.ndarray

    def params(self, i: int) -> WarpParams:
        return WarpParams(self.omegas[i], self.V[i], self.b[i])

    def apply(self, i: int, pts=None) -> np.ndarray:
        pts = self.source_landmarks[i] if pts is None else pts
        return warp_landmarks(self.params(i), self.centers[i], pts)


@dataclass
class SynthBenchmark:
    config: SynthConfig
    source_train: Split
    source_val: Split
    target_train: Split
    target_val: Split
    target_train_gt: np.ndarray
    target_val_gt: np.ndarray
    hidden: dict[str, HiddenFields] = field(default_factory=dict)

    def labeled_target(self, split: str = "val") -> Split:
        """Target split with its hidden ground truth attached (evaluation only)."""
        s = self.target_val if split == "val" else self.target_train
        gt = self.target_val_gt if split == "val" else self.target_train_gt
        return Split(s.images, gt, "target", s.name)

    def counts(self) -> dict[str, int]:
        return {"source/train": len(self.source_train), "source/val": len(self.source_val),
                "target/train": len(self.target_train), "target/val": len(self.target_val)}

    def save(self, root) -> None:
        root = Path(root)
        write_split(self.source_train, root / "source" / "train")
        write_split(self.source_val, root / "source" / "val")
        for name, split, gt in (("train", self.target_train, self.target_train_gt),
                                ("val", self.target_val, self.target_val_gt)):
            d = root / "target" / name
            write_split(split, d, gt=gt)
            h = self.hidden.get(name)
            if h is not None:
                save_arrays(d / "gt" / "hidden_fields.wmk",
                            {"centers": h.centers, "omegas": h.omegas, "V": h.V, "b": h.b,
                             "source_landmarks": h.source_landmarks, "gt": gt})
        write_manifest(root, {"config": self.config.to_dict(), "counts": self.counts(),
                              "schema": self.config.schema, "n_landmarks": self.config.n_landmarks})


def load_benchmark(root) -> SynthBenchmark:
    """Read a dataset directory; exact hidden fields and ground truth come from the gt container."""
    root = Path(root)
    manifest = read_manifest(root)
    cfg = SynthConfig.from_dict(manifest["config"])
    src_train = read_split(root / "source" / "train", "source")
    src_val = read_split(root / "source" / "val", "source")
    parts = {}
    hidden = {}
    for name in ("train", "val"):
        d = root / "target" / name
        split = read_split(d, "target")
        split.landmarks = None
        container = d / "gt" / "hidden_fields.wmk"
        if container.exists():
            arrays, _ = load_arrays(container)
            gt = arrays.pop("gt")
            hidden[name] = HiddenFields(**arrays)
        else:
            gt = read_split(d, "target", with_gt=True).landmarks
        parts[name] = (split, gt)
    return SynthBenchmark(cfg, src_train, src_val, parts["train"][0], parts["val"][0],
                          parts["train"][1], parts["val"][1], hidden)


# rendering

def _sigmoid(x):
    return 0.5 * (1 + np.tanh(0.5 * x))


def _segment_dist(p: np.ndarray, a, b) -> np.ndarray:
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    ab = b - a
    t = np.clip(((p - a) @ ab) / (ab @ ab), 0, 1)
    return np.linalg.norm(p - (a + t[..., None] * ab), axis=-1)


def _polyline_dist(p: np.ndarray, pts: np.ndarray) -> np.ndarray:
    return np.min([_segment_dist(p, pts[i], pts[i + 1]) for i in range(len(pts) - 1)], axis=0)


_MOUTH_CURVE = np.array([(1 - t) ** 2 * np.array([25.0, 48.0]) + 2 * t * (1 - t) * np.array([32.0, 54.0])
                         + t ** 2 * np.array([39.0, 48.0]) for t in np.linspace(0, 1, 17)])
_HEAD_C = np.array([32.0, 34.0])
_HEAD_AX = np.array([20.0, 25.0])


def render_template(p: np.ndarray, stroke: float = 1.0, edge: float = 0.6) -> np.ndarray:
    """Template picture evaluated at template-space points ``p`` (..., 2)."""
    val = np.full(p.shape[:-1], 0.15)

    def layer(sd, level):
        nonlocal val
        a = _sigmoid(-sd / edge)
        val = val * (1 - a) + level * a

    head_sd = (np.linalg.norm((p - _HEAD_C) / _HEAD_AX, axis=-1) - 1) * _HEAD_AX.min()
    layer(head_sd, 0.78)
    layer(np.abs(head_sd) - 0.6 * stroke, 0.3)
    layer(_segment_dist(p, (19, 22), (29, 21)) - 0.9 * stroke, 0.25)
    layer(_segment_dist(p, (35, 21), (45, 22)) - 0.9 * stroke, 0.25)
    for c in ((24.0, 28.0), (40.0, 28.0)):
        layer(np.linalg.norm(p - c, axis=-1) - 4.0, 0.12)
    nose = np.minimum(_segment_dist(p, (32, 30), (32, 41)), _segment_dist(p, (29, 41), (35, 41)))
    layer(nose - 0.6 * stroke, 0.4)
    layer(_polyline_dist(p, _MOUTH_CURVE) - 0.8 * stroke, 0.18)
    return val


def render_face(landmarks: np.ndarray, canvas: int, stroke: float = 1.0) -> np.ndarray:
    """Grayscale (canvas, canvas, 1) face whose features sit at ``landmarks``."""
    to_template = tps_fit_exact(landmarks, TEMPLATE)
    grid = pixel_grid(canvas, canvas).reshape(-1, 2)
    p = warp_points(to_template, landmarks, grid)
    edge = 0.6 * 64 / canvas
    return render_template(p, stroke, edge).reshape(canvas, canvas, 1)


def _similarity(rng: np.random.Generator, cfg: SynthConfig) -> tuple[np.ndarray, np.ndarray]:
    s = rng.uniform(*cfg.scale_range) * cfg.canvas / 64
    th = math.radians(rng.uniform(-cfg.rotation_deg, cfg.rotation_deg))
    R = s * np.array([[math.cos(th), -math.sin(th)], [math.sin(th), math.cos(th)]])
    t = rng.uniform(-cfg.translation, cfg.translation, size=2) * cfg.canvas / 64
    return R, t


def _source_landmarks(rng: np.random.Generator, cfg: SynthConfig) -> tuple[np.ndarray, np.ndarray]:
    R, t = _similarity(rng, cfg)
    centre = np.array([32.0, 40.0])
    lms = (TEMPLATE - centre) @ R.T + centre * cfg.canvas / 64 + t
    lms = lms + rng.normal(0, cfg.point_noise, size=lms.shape)
    return lms, R


def _disk(rng: np.random.Generator, n: int, radius: float) -> np.ndarray:
    ang = rng.uniform(0, 2 * np.pi, n)
    r = radius * np.sqrt(rng.uniform(0, 1, n))
    return np.stack([r * np.cos(ang), r * np.sin(ang)], axis=-1)


def _inside(lms: np.ndarray, canvas: int, margin: float = 1.0) -> bool:
    return bool(np.all(lms >= margin) and np.all(lms <= canvas - 1 - margin))


def _appearance(rng, img, cfg: SynthConfig, target: bool) -> np.ndarray:
    if target and cfg.appearance_shift:
        c = rng.uniform(*cfg.contrast_range)
        off = rng.uniform(-0.1, 0.1)
        img = 0.5 + c * (img - 0.5) + off
        if rng.uniform() < cfg.invert_prob:
            img = 1 - img
    else:
        g = rng.uniform(0.9, 1.1)
        off = rng.uniform(-0.05, 0.05)
        img = 0.5 + g * (img - 0.5) + off
    img = img + rng.normal(0, cfg.noise, size=img.shape)
    # quantise now so disk round trips are exact
    return np.round(np.clip(img, 0, 1) * 255) / 255


def _sample_rng(cfg: SynthConfig, domain: str, split: str, index: int) -> np.random.Generator:
    return np.random.default_rng([cfg.seed, SPLIT_IDS[(domain, split)], index])


def make_source_sample(cfg: SynthConfig, split: str, index: int) -> tuple[np.ndarray, np.ndarray]:
    rng = _sample_rng(cfg, "source", split, index)
    for _ in range(cfg.max_retries):
        lms, _ = _source_landmarks(rng, cfg)
        if _inside(lms, cfg.canvas):
            break
    else:
        raise ConfigError("source jitter keeps pushing landmarks off the canvas")
    img = render_face(lms, cfg.canvas, 1.0)
    return _appearance(rng, img, cfg, target=False), lms


def make_target_sample(cfg: SynthConfig, split: str, index: int):
    """(image, ground truth, hidden field params, centres, source-style landmarks)."""
    rng = _sample_rng(cfg, "target", split, index)
    for _ in range(cfg.max_retries):
        src, R = _source_landmarks(rng, cfg)
        strength = cfg.exaggeration * rng.uniform(*cfg.exaggeration_range)
        disp = strength * EXAGGERATION @ R.T + _disk(rng, len(src), cfg.deform_magnitude)
        field_params = tps_fit_exact(src, src + disp)
        gt = warp_landmarks(field_params, src, src)
        if _inside(gt, cfg.canvas) and _inside(src, cfg.canvas):
            break
    else:
        raise ConfigError(
            f"hidden deformation keeps pushing landmarks off the canvas after {cfg.max_retries} tries; "
            "reduce exaggeration or deform_magnitude")
    stroke = rng.uniform(*cfg.stroke_range) if cfg.appearance_shift else 1.0
    img = render_face(gt, cfg.canvas, stroke)
    return _appearance(rng, img, cfg, target=True), gt, field_params, src


def synth_generate(cfg: SynthConfig | None = None) -> SynthBenchmark:
    cfg = cfg or SynthConfig()
    splits = {}
    for split, n in (("train", cfg.n_train), ("val", cfg.n_val)):
        samples = [make_source_sample(cfg, split, i) for i in range(n)]
        splits[("source", split)] = Split(np.stack([s[0] for s in samples]),
                                          np.stack([s[1] for s in samples]), "source", split)
    gts = {}
    hidden = {}
    for split, n in (("train", cfg.n_train), ("val", cfg.n_val)):
        samples = [make_target_sample(cfg, split, i) for i in range(n)]
        splits[("target", split)] = Split(np.stack([s[0] for s in samples]), None, "target", split)
        gts[split] = np.stack([s[1] for s in samples])
        hidden[split] = HiddenFields(
            centers=np.stack([s[3] for s in samples]),
            omegas=np.stack([s[2].omegas for s in samples]),
            V=np.stack([s[2].V for s in samples]),
            b=np.stack([s[2].b for s in samples]),
            source_landmarks=np.stack([s[3] for s in samples]),
        )
    return SynthBenchmark(cfg, splits[("source", "train")], splits[("source", "val")],
                          splits[("target", "train")], splits[("target", "val")],
                          gts["train"], gts["val"], hidden)
