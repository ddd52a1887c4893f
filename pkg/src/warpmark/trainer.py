"""Source pretraining, alternating warper/landmarker optimisation and evaluation.

The alternating scheme runs ``M`` outer iterations. Each one first
optimises the warper objective (image-gradient discrepancy plus landmark
warping error) over the landmarker weights and the warp field, then
re-fits the landmarker on labeled source faces while a proximal term ties
its target predictions to a frozen snapshot taken at the start of that
phase.

Warp field parameters come in two flavours (``gamma_mode``):

* ``"per_pair"``: for every (stylized, real) pair the field is the
  closed-form TPS mapping the predicted stylized landmarks onto the real
  landmarks. It is recomputed differentiably at each step, so the
  image term sends gradients into the landmarker through the kernel
  centres and the fit itself.
* ``"shared"``: one set of field parameters shared by all pairs and
  updated by Adam alongside the landmarker.

Random streams are derived from ``(seed, m, phase)`` and every subproblem
starts a fresh Adam state, so resuming from a stored landmarker checkpoint
(plus the field sidecar) reproduces the uninterrupted run bit for bit.
"""

from __future__ import annotations

import json
import logging
import math
import time
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path
from typing import Callable, Iterator

import numpy as np

from . import autodiff as ad
from .container import load_arrays, save_arrays
from .data_io import Sample, Split, preprocess
from .errors import ConfigError, NumericError, TrainingAborted, UsageError
from .landmarker import ArchConfig, Landmarker, forward, init_random, load_checkpoint, predict_batch
from .optim import Adam, LossWeights, image_loss, landmark_mse, landmark_warp_error, pseudo_landmark_loss
from .warpfield import WarpParams, tps_fit, warp_image

log = logging.getLogger(__name__)

PHASES = {"pretrain": 0, "warper": 1, "landmarker": 2, "joint": 3}


@dataclass
class TrainConfig:
    M: int = 5
    L1: int = 2
    L2: int = 2
    batch_size: int = 8
    lr_warper: float = 3e-4
    lr_landmarker: float = 1e-3
    lr_gamma: float = 1e-2
    lr_pretrain: float = 1e-3
    pretrain_epochs: int = 30
    weights: LossWeights = field(default_factory=LossWeights)
    image_loss: str = "sobel"
    grayscale: bool = True
    gamma_mode: str = "per_pair"
    warm_start: bool = False
    tps_reg: float = 1e-3
    side: int = 64
    widths: tuple[int, ...] = (8, 16, 32)
    n_landmarks: int = 16
    seed: int = 42
    eval_every: int = 0

    def __post_init__(self):
        if isinstance(self.weights, dict):
            self.weights = LossWeights(**self.weights)
        self.widths = tuple(int(w) for w in self.widths)
        for name in ("L1", "L2", "batch_size"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be >= 1, got {getattr(self, name)}")
        # M = 0 is accepted and means "return the pretrained model"
        if self.M < 0 or self.pretrain_epochs < 0 or self.eval_every < 0:
            raise ConfigError("M, pretrain_epochs and eval_every must be nonnegative")
        for name in ("lr_warper", "lr_landmarker", "lr_gamma", "lr_pretrain"):
            if not getattr(self, name) > 0:
                raise ConfigError(f"{name} must be > 0, got {getattr(self, name)}")
        if self.image_loss not in ("sobel", "laplacian", "mse"):
            raise ConfigError(f"image_loss must be sobel, laplacian or mse, got {self.image_loss!r}")
        if self.gamma_mode not in ("per_pair", "shared"):
            raise ConfigError(f"gamma_mode must be per_pair or shared, got {self.gamma_mode!r}")
        if self.tps_reg < 0:
            raise ConfigError("tps_reg must be nonnegative")

    def arch(self, in_channels: int = 1) -> ArchConfig:
        return ArchConfig(self.side, self.widths, self.n_landmarks, in_channels)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["widths"] = list(self.widths)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown train config keys: {sorted(unknown)}")
        d = dict(d)
        if isinstance(d.get("weights"), dict):
            wk = {f.name for f in fields(LossWeights)}
            bad = set(d["weights"]) - wk
            if bad:
                raise ConfigError(f"unknown loss weight keys: {sorted(bad)}")
        return cls(**d)


@dataclass
class PairBatch:
    """N (stylized image, real image, real landmarks) triples plus their split indices."""

    target_images: np.ndarray
    source_images: np.ndarray
    source_landmarks: np.ndarray
    target_idx: np.ndarray
    source_idx: np.ndarray

    def __len__(self) -> int:
        return len(self.target_idx)

    def __iter__(self) -> Iterator[tuple[np.ndarray, np.ndarray, np.ndarray]]:
        return iter(zip(self.target_images, self.source_images, self.source_landmarks))


class MetricsLog:
    """Append-only list of per-step records, optionally mirrored to a JSONL file."""

    def __init__(self, path=None, append: bool = False):
        self.records: list[dict] = []
        self.path = Path(path) if path is not None else None
        if self.path is not None:
            self.path.parent.mkdir(parents=True, exist_ok=True)
            if append and self.path.exists():
                self.records = self.read(self.path)
            else:
                self.path.write_text("")

    def append(self, record: dict) -> None:
        self.records.append(record)
        if self.path is not None:
            with open(self.path, "a") as fh:
                fh.write(json.dumps(record, sort_keys=True) + "\n")

    def of_kind(self, kind: str) -> list[dict]:
        return [r for r in self.records if r["kind"] == kind]

    def __len__(self) -> int:
        return len(self.records)

    @staticmethod
    def read(path) -> list[dict]:
        return [json.loads(line) for line in Path(path).read_text().splitlines() if line.strip()]


@dataclass
class TrainData:
    """Preprocessed splits. Target validation labels are evaluation-only."""

    source_train: Split
    target_train: Split
    source_val: Split | None = None
    target_val: Split | None = None


@dataclass
class TrainResult:
    model: Landmarker
    log: MetricsLog
    gamma: WarpParams | None = None
    source_only: Landmarker | None = None


# data helpers

def prepare_split(split: Split, side: int, grayscale: bool = True) -> Split:
    """Resize every image to ``side`` and rescale its landmarks to match."""
    imgs, lms = [], []
    for i, img in enumerate(split.images):
        lm = None if split.landmarks is None else split.landmarks[i]
        s = preprocess(Sample(img, lm, split.domain), side, grayscale)
        imgs.append(s.image)
        lms.append(s.landmarks)
    return Split(np.stack(imgs), None if split.landmarks is None else np.stack(lms),
                 split.domain, split.name)


def sample_pairs(labeled: Split, unlabeled: Split, n: int, rng: np.random.Generator) -> PairBatch:
    """N independent uniform pairings of a stylized face with a labeled real face."""
    if len(labeled) == 0 or len(unlabeled) == 0:
        raise UsageError("sample_pairs: both splits must be nonempty")
    if labeled.landmarks is None:
        raise UsageError("sample_pairs: the real-face split has no landmarks")
    ti = rng.integers(0, len(unlabeled), size=n)
    si = rng.integers(0, len(labeled), size=n)
    return PairBatch(unlabeled.images[ti], labeled.images[si], labeled.landmarks[si], ti, si)


def steps_per_epoch(n: int, batch_size: int) -> int:
    return math.ceil(n / batch_size)


def _rng(cfg: TrainConfig, m: int, phase: str) -> np.random.Generator:
    return np.random.default_rng([cfg.seed, m, PHASES[phase]])


# evaluation

def nme(pred, gt, normalizer="diag", hw=None) -> np.ndarray:
    """Per-sample normalized mean error.

    ``normalizer`` is ``"diag"`` (image diagonal, needs ``hw``) or
    ``("pair", i, j)`` for the distance between two ground-truth landmarks.
    """
    pred = np.asarray(pred, dtype=np.float64).reshape(-1, *np.shape(gt)[-2:])
    gt = np.asarray(gt, dtype=np.float64).reshape(pred.shape)
    err = np.linalg.norm(pred - gt, axis=-1).mean(axis=-1)
    if normalizer == "diag":
        if hw is None:
            raise UsageError("nme: diagonal normalizer needs the image size")
        d = np.hypot(*hw)
    elif isinstance(normalizer, (tuple, list)) and len(normalizer) == 3 and normalizer[0] == "pair":
        i, j = int(normalizer[1]), int(normalizer[2])
        d = np.linalg.norm(gt[:, i] - gt[:, j], axis=-1)
        if np.any(d <= 0):
            raise UsageError(f"nme: landmarks {i} and {j} coincide, cannot normalise")
    else:
        raise UsageError(f"nme: unknown normalizer {normalizer!r}")
    return err / d


def evaluate_nme(model, eval_set: Split, normalizer="diag", batch_size: int = 64) -> float:
    """Mean NME of ``model`` (a Landmarker or an images -> landmarks callable) on ``eval_set``."""
    if eval_set.landmarks is None:
        raise UsageError(f"evaluate_nme: split {eval_set.name!r} has no ground truth")
    predict_fn = model if callable(model) else (lambda x: predict_batch(model, x))
    preds = np.concatenate([predict_fn(eval_set.images[i:i + batch_size])
                            for i in range(0, len(eval_set), batch_size)])
    return float(nme(preds, eval_set.landmarks, normalizer, eval_set.images.shape[1:3]).mean())


# loss assembly

def warper_terms(cfg: TrainConfig, arch: ArchConfig, params: dict, batch: PairBatch,
                 gamma: WarpParams | None) -> dict:
    """Image and landmark-warping terms on one batch of pairs (tensors)."""
    pred_u = forward(arch, params, batch.target_images)
    source = batch.source_images.astype(pred_u.dtype, copy=False)
    target = batch.target_images.astype(pred_u.dtype, copy=False)
    if cfg.gamma_mode == "per_pair":
        gamma = tps_fit(pred_u, batch.source_landmarks, cfg.tps_reg)
    warped = warp_image(source, gamma, pred_u)
    return {
        "image": image_loss(warped, target, cfg.image_loss, cfg.grayscale),
        "warp": landmark_warp_error(gamma, pred_u, pred_u, batch.source_landmarks),
    }


def _combine(terms: dict, weights: dict) -> ad.Tensor:
    total = None
    for k, t in terms.items():
        w = weights[k]
        if w == 0:
            continue
        part = ad.mul(t, float(w))
        total = part if total is None else ad.add(total, part)
    if total is None:
        raise ConfigError("every loss weight of this phase is zero")
    return total


def _step(loss: ad.Tensor, leaves: dict, opt: Adam, arrays: dict) -> None:
    g = ad.grad(loss, list(leaves.values()))
    opt.step(arrays, dict(zip(leaves, g)))


def _record(log: MetricsLog, m: int, phase: str, step: int, terms: dict, total, t0: float) -> None:
    vals = {k: float(v.data) for k, v in terms.items()}
    loss = float(total.data)
    if not math.isfinite(loss):
        raise NumericError(f"{phase}: non-finite loss {loss} at outer iteration {m}, step {step}")
    log.append({"kind": "train", "m": m, "phase": phase, "step": step, "loss": loss,
                "terms": vals, "time": round(time.perf_counter() - t0, 4)})


def _eval_record(log: MetricsLog, model: Landmarker, data: TrainData, m: int, phase: str,
                 step: int) -> None:
    rec = {"kind": "eval", "m": m, "phase": phase, "step": step}
    if data.source_val is not None and data.source_val.labeled:
        rec["nme_source"] = evaluate_nme(model, data.source_val)
    if data.target_val is not None and data.target_val.labeled:
        rec["nme_target"] = evaluate_nme(model, data.target_val)
    if len(rec) > 4:
        log.append(rec)


# phases

def pretrain_source(cfg: TrainConfig, labeled: Split, log: MetricsLog | None = None,
                    model: Landmarker | None = None) -> Landmarker:
    """Supervised landmark regression on the labeled source split."""
    if labeled is None or len(labeled) == 0 or labeled.landmarks is None:
        raise UsageError("pretrain_source: labeled source split is empty")
    arch = cfg.arch(labeled.images.shape[-1])
    model = init_random(arch, cfg.seed) if model is None else model.copy()
    rng = _rng(cfg, 0, "pretrain")
    opt = Adam(cfg.lr_pretrain)
    t0 = time.perf_counter()
    step = 0
    n = len(labeled)
    with ad.precision(np.float32):
        for epoch in range(cfg.pretrain_epochs):
            order = rng.permutation(n)
            for s in range(0, n, cfg.batch_size):
                idx = order[s:s + cfg.batch_size]
                leaves = model.tensors()
                loss = landmark_mse(forward(arch, leaves, labeled.images[idx]), labeled.landmarks[idx])
                if not math.isfinite(float(loss.data)):
                    raise NumericError(f"pretrain: non-finite loss at epoch {epoch}")
                _step(loss, leaves, opt, model.params)
                step += 1
                if log is not None:
                    log.append({"kind": "pretrain", "epoch": epoch, "step": step,
                                "loss": float(loss.data), "time": round(time.perf_counter() - t0, 4)})
    model.meta = {"stage": "source_only", "pretrain_steps": step}
    return model


def optimize_warper(cfg: TrainConfig, model: Landmarker, gamma: WarpParams | None, data: TrainData,
                    m: int = 0, log: MetricsLog | None = None) -> tuple[Landmarker, WarpParams | None]:
    """L1 epochs of Adam on the warper objective, updating the landmarker (and a shared field)."""
    model = model.copy()
    arch = model.arch
    rng = _rng(cfg, m, "warper")
    opt = Adam(cfg.lr_warper)
    opt_g = Adam(cfg.lr_gamma)
    shared = cfg.gamma_mode == "shared"
    if shared:
        gamma = _trainable_gamma(gamma, arch.n_landmarks)
    weights = {"image": cfg.weights.grad, "warp": cfg.weights.warp}
    spe = steps_per_epoch(len(data.target_train), cfg.batch_size)
    log = log if log is not None else MetricsLog()
    t0 = time.perf_counter()
    with ad.precision(np.float32):
        for step in range(cfg.L1 * spe):
            batch = sample_pairs(data.source_train, data.target_train, cfg.batch_size, rng)
            leaves = model.tensors()
            g_leaves = gamma.tensors() if shared else None
            terms = warper_terms(cfg, arch, leaves, batch, g_leaves)
            total = _combine(terms, weights)
            _record(log, m, "warper", step, terms, total, t0)
            if shared:
                all_leaves = {**leaves, **{f"gamma.{k}": v for k, v in zip(("omegas", "V", "b"), g_leaves.leaves())}}
                grads = dict(zip(all_leaves, ad.grad(total, list(all_leaves.values()))))
                opt.step(model.params, {k: grads[k] for k in leaves})
                opt_g.step(vars(gamma), {k: grads[f"gamma.{k}"] for k in ("omegas", "V", "b")})
            else:
                _step(total, leaves, opt, model.params)
            _maybe_eval(cfg, log, model, data, m, "warper", step)
    return model, gamma if shared else None


def pseudo_labels(model: Landmarker, images: np.ndarray, chunk: int = 64) -> np.ndarray:
    """Frozen landmark snapshot of ``model`` on ``images`` (float32, no graph).

    Uses the raw training forward pass (no output clipping) in balanced
    chunks, so re-evaluating the same weights on a training batch reproduces
    the snapshot and the pseudo term starts at exactly zero.
    """
    parts = np.array_split(np.arange(len(images)), max(1, math.ceil(len(images) / chunk)))
    with ad.precision(np.float32):
        out = [forward(model.arch, model.params, images[idx]).data for idx in parts]
    return np.concatenate(out).astype(np.float32)


def optimize_landmarker_proximal(cfg: TrainConfig, model: Landmarker, data: TrainData, m: int = 0,
                                 log: MetricsLog | None = None) -> Landmarker:
    """L2 epochs on source landmark error plus the frozen pseudo-landmark term."""
    snapshot = pseudo_labels(model, data.target_train.images)
    model = model.copy()
    arch = model.arch
    rng = _rng(cfg, m, "landmarker")
    opt = Adam(cfg.lr_landmarker)
    weights = {"source": cfg.weights.src, "pseudo": cfg.weights.pseudo}
    spe = steps_per_epoch(len(data.target_train), cfg.batch_size)
    log = log if log is not None else MetricsLog()
    t0 = time.perf_counter()
    with ad.precision(np.float32):
        for step in range(cfg.L2 * spe):
            batch = sample_pairs(data.source_train, data.target_train, cfg.batch_size, rng)
            leaves = model.tensors()
            terms = {
                "source": landmark_mse(forward(arch, leaves, batch.source_images), batch.source_landmarks),
                "pseudo": pseudo_landmark_loss(forward(arch, leaves, batch.target_images),
                                               snapshot[batch.target_idx]),
            }
            total = _combine(terms, weights)
            _record(log, m, "landmarker", step, terms, total, t0)
            _step(total, leaves, opt, model.params)
            _maybe_eval(cfg, log, model, data, m, "landmarker", step)
    return model


def _maybe_eval(cfg, log, model, data, m, phase, step):
    if cfg.eval_every and (step + 1) % cfg.eval_every == 0:
        _eval_record(log, model, data, m, phase, step)


# drivers

def _checkpoint_paths(out_dir: Path, stage: int) -> tuple[Path, Path]:
    return out_dir / f"theta_{stage:03d}.wmk", out_dir / f"gamma_{stage:03d}.wmk"


def save_stage(out_dir, stage: int, model: Landmarker, gamma: WarpParams | None, cfg: TrainConfig) -> None:
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    theta_path, gamma_path = _checkpoint_paths(out_dir, stage)
    model.meta = {**model.meta, "stage": stage}
    model.save(theta_path)
    arrays = gamma.as_dict() if gamma is not None else {}
    save_arrays(gamma_path, arrays, {"kind": "gamma", "mode": cfg.gamma_mode, "stage": stage})


def load_stage(out_dir, stage: int) -> tuple[Landmarker, WarpParams | None]:
    theta_path, gamma_path = _checkpoint_paths(Path(out_dir), stage)
    model = load_checkpoint(theta_path)
    arrays, _ = load_arrays(gamma_path)
    gamma = WarpParams.from_dict(arrays) if arrays else None
    return model, gamma


def _initial_gamma(cfg: TrainConfig, model: Landmarker, data: TrainData) -> WarpParams | None:
    if cfg.gamma_mode != "shared":
        return None
    k = model.arch.n_landmarks
    if not cfg.warm_start:
        return WarpParams.identity(k, np.float32)
    # closed-form fit from the mean predicted stylized shape to the mean real shape
    from .warpfield import tps_fit_exact
    pred = predict_batch(model, data.target_train.images).mean(axis=0)
    # kept in float64 so the fit stays exact; the optimizing phases cast their own copy
    return tps_fit_exact(pred, data.source_train.landmarks.mean(axis=0), cfg.tps_reg)


def _trainable_gamma(gamma: WarpParams | None, k: int) -> WarpParams:
    gamma = gamma or WarpParams.identity(k, np.float32)
    return WarpParams(*(np.array(a, dtype=np.float32) for a in (gamma.omegas, gamma.V, gamma.b)))


def _guarded(fn: Callable, fallback: Landmarker, out_dir, stage: int, phase: str, log: MetricsLog):
    try:
        return fn()
    except NumericError as exc:
        log.append({"kind": "abort", "phase": phase, "stage": stage, "reason": str(exc)})
        if out_dir is not None:
            fallback.save(_checkpoint_paths(Path(out_dir), stage)[0])
        raise TrainingAborted(f"{phase} aborted at stage {stage}: {exc}", fallback) from exc


def train_alternating(cfg: TrainConfig, data: TrainData, out_dir=None, log: MetricsLog | None = None,
                      source_only: Landmarker | None = None, resume: bool = False) -> TrainResult:
    """Pretrain on source, then M rounds of warper / proximal landmarker optimisation.

    ``source_only`` skips pretraining when a pretrained model is supplied.
    With ``resume`` the latest stage found in ``out_dir`` is loaded and the
    loop continues from there.
    """
    if log is None:
        log = MetricsLog(None if out_dir is None else Path(out_dir) / "metrics.jsonl", append=resume)
    start = 0
    if resume:
        if out_dir is None:
            raise UsageError("resume needs an output directory")
        stages = sorted(int(p.stem.split("_")[1]) for p in Path(out_dir).glob("theta_*.wmk"))
        if not stages:
            raise UsageError(f"{out_dir}: nothing to resume from")
        start = stages[-1] // 2
        model, gamma = load_stage(out_dir, stages[-1])
        base = source_only
    else:
        base = source_only if source_only is not None else pretrain_source(cfg, data.source_train, log)
        model = base
        gamma = _initial_gamma(cfg, model, data)
        if out_dir is not None:
            save_stage(out_dir, 0, model, gamma, cfg)
        _eval_record(log, model, data, 0, "pretrain", 0)
    for m in range(start, cfg.M):
        model, gamma = _guarded(lambda: optimize_warper(cfg, model, gamma, data, m, log),
                                model, out_dir, 2 * m, "warper", log)
        _eval_record(log, model, data, m, "warper", -1)
        model = _guarded(lambda: optimize_landmarker_proximal(cfg, model, data, m, log),
                         model, out_dir, 2 * m, "landmarker", log)
        _eval_record(log, model, data, m, "landmarker", -1)
        if out_dir is not None:
            save_stage(out_dir, 2 * m + 2, model, gamma, cfg)
        log_stage(m, log)
    return TrainResult(model, log, gamma, base)


def train_joint(cfg: TrainConfig, data: TrainData, out_dir=None, log: MetricsLog | None = None,
                source_only: Landmarker | None = None) -> TrainResult:
    """All three terms in every Adam step, with the alternating scheme's step budget."""
    log = log if log is not None else MetricsLog(None if out_dir is None else Path(out_dir) / "metrics.jsonl")
    base = source_only if source_only is not None else pretrain_source(cfg, data.source_train, log)
    model = base.copy()
    gamma = _initial_gamma(cfg, model, data)
    shared = cfg.gamma_mode == "shared"
    arch = model.arch
    if shared:
        gamma = _trainable_gamma(gamma, arch.n_landmarks)
    spe = steps_per_epoch(len(data.target_train), cfg.batch_size)
    budget = cfg.M * (cfg.L1 + cfg.L2) * spe
    weights = {"source": cfg.weights.src, "image": cfg.weights.grad, "warp": cfg.weights.warp}
    opt = Adam(cfg.lr_warper)
    opt_g = Adam(cfg.lr_gamma)
    rng = _rng(cfg, 0, "joint")
    _eval_record(log, model, data, 0, "pretrain", 0)
    t0 = time.perf_counter()
    good = model.copy()

    def run():
        with ad.precision(np.float32):
            for step in range(budget):
                batch = sample_pairs(data.source_train, data.target_train, cfg.batch_size, rng)
                leaves = model.tensors()
                g_leaves = gamma.tensors() if shared else None
                terms = {"source": landmark_mse(forward(arch, leaves, batch.source_images),
                                                batch.source_landmarks),
                         **warper_terms(cfg, arch, leaves, batch, g_leaves)}
                total = _combine(terms, weights)
                m = step // ((cfg.L1 + cfg.L2) * spe)
                _record(log, m, "joint", step, terms, total, t0)
                if shared:
                    all_leaves = {**leaves, **{f"gamma.{k}": v for k, v in
                                               zip(("omegas", "V", "b"), g_leaves.leaves())}}
                    grads = dict(zip(all_leaves, ad.grad(total, list(all_leaves.values()))))
                    opt.step(model.params, {k: grads[k] for k in leaves})
                    opt_g.step(vars(gamma), {k: grads[f"gamma.{k}"] for k in ("omegas", "V", "b")})
                else:
                    _step(total, leaves, opt, model.params)
                _maybe_eval(cfg, log, model, data, m, "joint", step)

    if out_dir is not None:
        save_stage(out_dir, 0, model, gamma, cfg)
    _guarded(run, good, out_dir, 0, "joint", log)
    _eval_record(log, model, data, cfg.M, "joint", -1)
    if out_dir is not None:
        save_stage(out_dir, 2 * cfg.M, model, gamma, cfg)
    return TrainResult(model, log, gamma, base)


def log_stage(m: int, log: MetricsLog) -> None:
    evals = [r for r in log.records if r["kind"] == "eval" and r["m"] == m]
    if evals:
        log_msg = ", ".join(f"{k}={v:.4f}" for k, v in evals[-1].items() if k.startswith("nme"))
        logging.getLogger(__name__).info("outer iteration %d done: %s", m, log_msg)
