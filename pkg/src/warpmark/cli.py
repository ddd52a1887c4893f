"""Command-line entry point: ``warpmark <subcommand> [flags] [key=value ...]``.

Exit codes: 0 success, 1 training aborted or other failure, 2 invalid
configuration or usage, 3 checkpoint problem, 4 I/O or file format error.
Set ``WARPMARK_LOG`` (DEBUG, INFO, WARNING, ...) to control verbosity.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import shutil
import sys
from pathlib import Path

import numpy as np

from .data_io import Sample, Split, load_image, load_pts, overlay, preprocess, read_split, save_image, save_pts, to_original
from .errors import (CheckpointError, ConfigError, FormatError, ParseError, SingularSystemError,
                     TrainingAborted, UsageError)
from .landmarker import Landmarker, load_checkpoint, predict_batch
from .optim import image_loss, landmark_warp_error
from .synth import SynthConfig, synth_generate
from .trainer import (MetricsLog, TrainConfig, TrainData, evaluate_nme, pretrain_source, prepare_split,
                      train_alternating, train_joint)
from .warpfield import WarpParams, tps_fit_exact, warp_image

log = logging.getLogger("warpmark")

EXIT_OK, EXIT_FAIL, EXIT_CONFIG, EXIT_CHECKPOINT, EXIT_IO = 0, 1, 2, 3, 4


# configuration plumbing

def parse_overrides(items: list[str]) -> dict:
    """``["M=0", "weights.grad=2"]`` -> ``{"M": 0, "weights": {"grad": 2}}``."""
    out: dict = {}
    for item in items:
        if "=" not in item:
            raise ConfigError(f"override {item!r} is not of the form key=value")
        key, raw = item.split("=", 1)
        try:
            value = json.loads(raw)
        except json.JSONDecodeError:
            value = raw
        node = out
        parts = key.split(".")
        for p in parts[:-1]:
            node = node.setdefault(p, {})
        node[parts[-1]] = value
    return out


def _merge(base: dict, extra: dict) -> dict:
    out = dict(base)
    for k, v in extra.items():
        out[k] = _merge(out.get(k, {}), v) if isinstance(v, dict) and isinstance(out.get(k), dict) else v
    return out


def load_config(path, section: str) -> dict:
    if path is None:
        return {}
    try:
        d = json.loads(Path(path).read_text())
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: invalid JSON ({exc})") from None
    if not isinstance(d, dict):
        raise ConfigError(f"{path}: expected a JSON object")
    return d.get(section, d) if section in d else d


def build_config(cls, args, section: str, overrides: list[str]):
    d = _merge(load_config(args.config, section), parse_overrides(overrides))
    if args.seed is not None:
        d["seed"] = args.seed
    try:
        return cls.from_dict(d)
    except TypeError as exc:
        raise ConfigError(str(exc)) from None


def _prepare_out(out: Path, force: bool) -> Path:
    if out.exists() and any(out.iterdir()):
        if not force:
            raise UsageError(f"{out} exists and is not empty; pass --force to overwrite")
        shutil.rmtree(out)
    out.mkdir(parents=True, exist_ok=True)
    return out


# subcommands

def cmd_synth(args) -> int:
    cfg = build_config(SynthConfig, args, "synth", args.overrides)
    out = _prepare_out(Path(args.out or "data"), args.force)
    bench = synth_generate(cfg)
    bench.save(out)
    for name, n in bench.counts().items():
        print(f"{name:<14}{n:>6}")
    return EXIT_OK


def load_dataset(root, side: int, grayscale: bool) -> TrainData:
    root = Path(root)
    src_train = read_split(root / "source" / "train", "source")
    tgt_train = read_split(root / "target" / "train", "target")
    tgt_train.landmarks = None  # hidden ground truth never reaches the trainer
    src_val = tgt_val = None
    if (root / "source" / "val").exists():
        src_val = read_split(root / "source" / "val", "source")
    if (root / "target" / "val" / "gt").exists():
        tgt_val = read_split(root / "target" / "val", "target", with_gt=True)
    prep = [None if s is None else prepare_split(s, side, grayscale) for s in (src_train, tgt_train, src_val, tgt_val)]
    return TrainData(*prep)


def cmd_train(args) -> int:
    cfg = build_config(TrainConfig, args, "train", args.overrides)
    out = Path(args.out or "run")
    if args.resume:
        out.mkdir(parents=True, exist_ok=True)
    else:
        _prepare_out(out, args.force)
    data = load_dataset(args.data, cfg.side, cfg.grayscale)
    (out / "config.json").write_text(json.dumps({"mode": args.mode, "source_only": args.source_only,
                                                 "train": cfg.to_dict()}, indent=2, sort_keys=True) + "\n")
    metrics = MetricsLog(out / "metrics.jsonl", append=args.resume)
    if args.source_only:
        model = pretrain_source(cfg, data.source_train, metrics)
    elif args.mode == "joint":
        model = train_joint(cfg, data, out_dir=out, log=metrics).model
    else:
        model = train_alternating(cfg, data, out_dir=out, log=metrics, resume=args.resume).model
    model.save(out / "final.wmk")
    summary = {}
    if data.source_val is not None:
        summary["nme_source_val"] = evaluate_nme(model, data.source_val)
    if data.target_val is not None:
        summary["nme_target_val"] = evaluate_nme(model, data.target_val)
    print(json.dumps(summary, sort_keys=True))
    return EXIT_OK


def _predict_images(model: Landmarker, paths: list[str]) -> list[tuple[Path, np.ndarray, np.ndarray]]:
    """(path, original image, landmarks in original coordinates) per input."""
    grayscale = model.arch.in_channels == 1
    out = []
    for p in paths:
        img = load_image(p)
        s = preprocess(Sample(img), model.arch.side, grayscale)
        if s.image.shape[-1] != model.arch.in_channels:
            raise CheckpointError(f"{p}: image has {s.image.shape[-1]} channels, model expects "
                                  f"{model.arch.in_channels}")
        pred = predict_batch(model, s.image[None])[0]
        out.append((Path(p), img, to_original(pred, model.arch.side, img.shape[:2])))
    return out


def cmd_predict(args) -> int:
    model = load_checkpoint(args.checkpoint)
    out = Path(args.out or "pred")
    out.mkdir(parents=True, exist_ok=True)
    for path, _, lms in _predict_images(model, args.images):
        save_pts(lms, out / f"{path.stem}.pts")
    print(f"wrote {len(args.images)} landmark files to {out}")
    return EXIT_OK


def cmd_overlay(args) -> int:
    model = load_checkpoint(args.checkpoint)
    out = Path(args.out or "overlay")
    out.mkdir(parents=True, exist_ok=True)
    for path, img, lms in _predict_images(model, args.images):
        save_pts(lms, out / f"{path.stem}.pts")
        gt = None
        if args.gt_dir:
            gt_path = Path(args.gt_dir) / f"{path.stem}.pts"
            gt = load_pts(gt_path) if gt_path.exists() else None
        overlay(img, lms, out / f"{path.stem}.png", gt=gt)
    print(f"wrote {len(args.images)} overlays to {out}")
    return EXIT_OK


def _warp_stats(real, styl, gamma, centers, real_lms) -> dict:
    warped = warp_image(real, gamma, centers, styl.shape[:2])
    return {
        "image_sobel": image_loss(warped, styl, "sobel", True),
        "image_mse": image_loss(warped, styl, "mse", True),
        "landmark_warp_error": landmark_warp_error(gamma, centers, centers, real_lms),
    }, warped


def cmd_warp(args) -> int:
    real = load_image(args.real)
    styl = load_image(args.stylized)
    model = load_checkpoint(args.checkpoint) if args.checkpoint else None
    if args.real_pts:
        real_lms = load_pts(args.real_pts)
    elif model is not None:
        real_lms = _predict_images(model, [args.real])[0][2]
    else:
        raise UsageError("warp needs --real-pts or --checkpoint for the real-face landmarks")
    if args.pts:
        styl_lms = load_pts(args.pts)
    elif model is not None:
        styl_lms = _predict_images(model, [args.stylized])[0][2]
    else:
        raise UsageError("warp needs --pts or --checkpoint for the stylized-face landmarks")
    if real.shape[-1] != styl.shape[-1]:
        from .imageops import to_grayscale
        real, styl = to_grayscale(real), to_grayscale(styl)
    k = len(styl_lms)
    before, _ = _warp_stats(real, styl, WarpParams.identity(k), styl_lms, real_lms)
    gamma = tps_fit_exact(styl_lms, real_lms, args.reg)
    after, warped = _warp_stats(real, styl, gamma, styl_lms, real_lms)
    out = Path(args.out or "warp")
    out.mkdir(parents=True, exist_ok=True)
    save_image(warped, out / "warped.png")
    stats = {"before": before, "after": after, "n_landmarks": k, "reg": args.reg}
    (out / "warp_stats.json").write_text(json.dumps(stats, indent=2, sort_keys=True) + "\n")
    print(json.dumps(stats, sort_keys=True))
    return EXIT_OK


def parse_normalizer(text: str):
    if text == "diag":
        return "diag"
    if text.startswith("pair:"):
        try:
            i, j = (int(x) for x in text[5:].split(","))
        except ValueError:
            raise UsageError(f"bad normalizer {text!r}; use pair:i,j") from None
        return ("pair", i, j)
    raise UsageError(f"unknown normalizer {text!r}; use diag or pair:i,j")


def evaluate_dataset(predict_fn, root, normalizer="diag") -> dict[str, float | None]:
    """NME per split of a dataset directory; splits without ground truth map to None."""
    root = Path(root)
    table = {}
    for domain in ("source", "target"):
        for name in ("train", "val"):
            d = root / domain / name
            if not d.exists():
                continue
            split = read_split(d, domain, with_gt=(domain == "target"))
            table[f"{domain}/{name}"] = None if split.landmarks is None else \
                evaluate_nme(predict_fn, split, normalizer)
    return table


def format_table(table: dict) -> str:
    lines = [f"{'split':<14}{'nme':>10}"]
    for k, v in table.items():
        lines.append(f"{k:<14}{'n/a' if v is None else f'{v:.6f}':>10}")
    return "\n".join(lines)


def cmd_eval(args) -> int:
    model = load_checkpoint(args.checkpoint)
    grayscale = model.arch.in_channels == 1
    side = model.arch.side

    def predict_fn(images):
        prepped = np.stack([preprocess(Sample(im), side, grayscale).image for im in images])
        preds = predict_batch(model, prepped)
        return np.stack([to_original(p, side, im.shape[:2]) for p, im in zip(preds, images)])

    table = evaluate_dataset(predict_fn, args.data, parse_normalizer(args.normalizer))
    out = Path(args.out or "eval")
    out.mkdir(parents=True, exist_ok=True)
    payload = {"normalizer": args.normalizer, "nme": table}
    (out / "eval.json").write_text(json.dumps(payload, indent=2, sort_keys=True) + "\n")
    text = format_table(table)
    (out / "eval.txt").write_text(text + "\n")
    print(text)
    return EXIT_OK


# parser

def _global_flags(suppress: bool) -> argparse.ArgumentParser:
    # subcommand copies suppress their defaults so flags given before the subcommand survive
    kw = {"default": argparse.SUPPRESS} if suppress else {}
    common = argparse.ArgumentParser(add_help=False)
    g = common.add_argument_group("global options")
    g.add_argument("--config", metavar="PATH", help="JSON config file (a 'synth'/'train' section or flat keys)", **kw)
    g.add_argument("--seed", type=int, metavar="N", help="override the config seed", **kw)
    g.add_argument("--out", metavar="DIR", help="output directory", **kw)
    g.add_argument("--threads", type=int, metavar="N", help="limit BLAS threads (1 gives bit-exact reruns)", **kw)
    g.add_argument("--force", action="store_true", help="overwrite a non-empty output directory", **kw)
    return common


def build_parser() -> argparse.ArgumentParser:
    common = _global_flags(suppress=True)
    parser = argparse.ArgumentParser(prog="warpmark", description="Warp-guided landmark adaptation toolkit.",
                                     parents=[_global_flags(suppress=False)])
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", parents=[common], help="generate the synthetic two-domain benchmark")
    p.add_argument("overrides", nargs="*", metavar="key=value", help="synth config overrides")
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("train", parents=[common], help="pretrain and run alternating or joint training")
    p.add_argument("--data", required=True, metavar="DIR", help="dataset root written by 'synth'")
    p.add_argument("--mode", choices=("alternating", "joint"), default="alternating")
    p.add_argument("--source-only", action="store_true", help="only run source pretraining")
    p.add_argument("--resume", action="store_true", help="continue from the latest checkpoint in --out")
    p.add_argument("overrides", nargs="*", metavar="key=value", help="train config overrides, e.g. M=0")
    p.set_defaults(func=cmd_train)

    for name, fn, what in (("predict", cmd_predict, "write one .pts file per image"),
                           ("overlay", cmd_overlay, "write .pts files and PNG overlays")):
        p = sub.add_parser(name, parents=[common], help=what)
        p.add_argument("--checkpoint", required=True, metavar="PATH")
        p.add_argument("images", nargs="+", metavar="IMAGE")
        if name == "overlay":
            p.add_argument("--gt-dir", metavar="DIR", help="directory of ground-truth .pts drawn in red")
        p.set_defaults(func=fn)

    p = sub.add_parser("warp", parents=[common], help="warp a real face onto a stylized face's geometry")
    p.add_argument("--real", required=True, metavar="IMAGE")
    p.add_argument("--stylized", required=True, metavar="IMAGE")
    p.add_argument("--checkpoint", metavar="PATH", help="predict missing landmarks with this model")
    p.add_argument("--pts", metavar="PATH", help="stylized-face landmarks")
    p.add_argument("--real-pts", metavar="PATH", help="real-face landmarks")
    p.add_argument("--reg", type=float, default=0.0, help="TPS smoothing (0 interpolates exactly)")
    p.set_defaults(func=cmd_warp)

    p = sub.add_parser("eval", parents=[common], help="NME per split of a dataset")
    p.add_argument("--checkpoint", required=True, metavar="PATH")
    p.add_argument("--data", required=True, metavar="DIR")
    p.add_argument("--normalizer", default="diag", metavar="diag|pair:i,j")
    p.set_defaults(func=cmd_eval)
    return parser


def main(argv=None) -> int:
    logging.basicConfig(level=os.environ.get("WARPMARK_LOG", "WARNING").upper(),
                        format="%(levelname)s %(name)s: %(message)s")
    args = build_parser().parse_args(argv)
    limiter = None
    if args.threads is not None:
        if args.threads < 1:
            print("error: --threads must be >= 1", file=sys.stderr)
            return EXIT_CONFIG
        from threadpoolctl import threadpool_limits
        limiter = threadpool_limits(args.threads)
    try:
        return args.func(args)
    except (ConfigError, UsageError, SingularSystemError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except CheckpointError as exc:
        print(f"checkpoint error: {exc}", file=sys.stderr)
        return EXIT_CHECKPOINT
    except (OSError, FormatError, ParseError) as exc:
        print(f"I/O error: {exc}", file=sys.stderr)
        return EXIT_IO
    except TrainingAborted as exc:
        print(f"training aborted: {exc}", file=sys.stderr)
        return EXIT_FAIL
    finally:
        if limiter is not None:
            limiter.unregister()


if __name__ == "__main__":
    sys.exit(main())
