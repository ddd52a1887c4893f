import argparse
import json

import numpy as np
import pytest

from warpmark.cli import build_parser, evaluate_dataset, main, parse_overrides
from warpmark.data_io import load_image, load_pts, read_split, save_pts
from warpmark.landmarker import load_checkpoint
from warpmark.trainer import MetricsLog, evaluate_nme, nme, steps_per_epoch

TINY_TRAIN = ["widths=[4,8,8]", "pretrain_epochs=1", "M=1", "L1=1", "L2=1", "batch_size=4"]


@pytest.fixture(scope="module")
def dataset(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli") / "data"
    assert main(["synth", "--out", str(root), "n_train=6", "n_val=2", "seed=3"]) == 0
    return root


@pytest.fixture(scope="module")
def trained(dataset, tmp_path_factory):
    out = tmp_path_factory.mktemp("cli") / "run"
    assert main(["train", "--data", str(dataset), "--out", str(out), *TINY_TRAIN]) == 0
    return out


def _records(run, kind="train"):
    return [r for r in MetricsLog.read(run / "metrics.jsonl") if r["kind"] == kind]


def _same_model(a, b):
    ma, mb = load_checkpoint(a), load_checkpoint(b)
    return all(np.array_equal(ma.params[k], mb.params[k]) for k in ma.params)


def test_every_subcommand_help_lists_its_flags(capsys):
    parser = build_parser()
    subs = next(a for a in parser._actions if isinstance(a, argparse._SubParsersAction))
    assert set(subs.choices) == {"synth", "train", "predict", "overlay", "warp", "eval"}
    for name, sub in subs.choices.items():
        with pytest.raises(SystemExit) as exc:
            main([name, "--help"])
        assert exc.value.code == 0
        text = capsys.readouterr().out
        flags = [s for a in sub._actions for s in a.option_strings]
        assert {"--config", "--seed", "--out", "--threads", "--force"} <= set(flags)
        for flag in flags:
            assert flag in text, (name, flag)


def test_overrides_parse_nested_json_values():
    assert parse_overrides(["M=0", "weights.grad=2.5", "widths=[4,8]", "image_loss=mse"]) == \
        {"M": 0, "weights": {"grad": 2.5}, "widths": [4, 8], "image_loss": "mse"}


def test_synth_counts_and_deterministic_manifest(dataset, tmp_path, capsys):
    manifest = json.loads((dataset / "manifest.json").read_text())
    assert manifest["counts"]["source/train"] == 6
    assert len(list((dataset / "source" / "train").glob("*.png"))) == 6
    other = tmp_path / "again"
    assert main(["synth", "--out", str(other), "n_train=6", "n_val=2", "seed=3"]) == 0
    assert (other / "manifest.json").read_bytes() == (dataset / "manifest.json").read_bytes()
    assert "source/train" in capsys.readouterr().out


def test_synth_refuses_non_empty_dir_unless_forced(tmp_path, capsys):
    out = tmp_path / "d"
    out.mkdir()
    (out / "junk.txt").write_text("x")
    assert main(["synth", "--out", str(out), "n_train=2", "n_val=1"]) == 2
    assert "--force" in capsys.readouterr().err
    assert main(["synth", "--out", str(out), "--force", "n_train=2", "n_val=1"]) == 0
    first = (out / "source" / "train" / "img_00000.png").read_bytes()
    assert not (out / "junk.txt").exists()
    assert main(["--force", "synth", "--out", str(out), "n_train=2", "n_val=1"]) == 0
    assert (out / "source" / "train" / "img_00000.png").read_bytes() == first


def test_seed_flag_overrides_config(tmp_path):
    cfg = tmp_path / "c.json"
    cfg.write_text(json.dumps({"synth": {"n_train": 2, "n_val": 1, "seed": 1}}))
    main(["synth", "--config", str(cfg), "--out", str(tmp_path / "a")])
    main(["synth", "--config", str(cfg), "--seed", "2", "--out", str(tmp_path / "b")])
    manifests = [json.loads((tmp_path / d / "manifest.json").read_text()) for d in "ab"]
    assert manifests[0]["config"]["seed"] == 1 and manifests[1]["config"]["seed"] == 2


def test_unknown_override_key_is_rejected_with_its_name(tmp_path, capsys):
    assert main(["synth", "--out", str(tmp_path / "x"), "n_trian=3"]) == 2
    assert "n_trian" in capsys.readouterr().err


def test_invalid_train_config_names_the_field(dataset, tmp_path, capsys):
    assert main(["train", "--data", str(dataset), "--out", str(tmp_path / "r"), "L1=0"]) == 2
    assert "L1" in capsys.readouterr().err


def test_train_writes_log_and_checkpoints(trained, capsys):
    spe = steps_per_epoch(6, 4)
    assert len(_records(trained)) == 1 * (1 + 1) * spe
    assert {"theta_000.wmk", "theta_002.wmk", "gamma_002.wmk", "final.wmk", "config.json"} <= \
        {p.name for p in trained.iterdir()}
    assert _same_model(trained / "final.wmk", trained / "theta_002.wmk")


def test_joint_mode_matches_the_step_budget(dataset, trained, tmp_path):
    out = tmp_path / "joint"
    assert main(["train", "--data", str(dataset), "--out", str(out), "--mode", "joint", *TINY_TRAIN]) == 0
    assert len(_records(out)) == len(_records(trained))
    assert {r["phase"] for r in _records(out)} == {"joint"}


def test_zero_outer_iterations_emit_the_source_only_model(dataset, tmp_path):
    a, b = tmp_path / "m0", tmp_path / "src"
    assert main(["train", "--data", str(dataset), "--out", str(a), *TINY_TRAIN, "M=0"]) == 0
    assert main(["train", "--data", str(dataset), "--out", str(b), "--source-only", *TINY_TRAIN]) == 0
    assert _same_model(a / "final.wmk", b / "final.wmk")
    assert _same_model(a / "final.wmk", a / "theta_000.wmk")
    assert not _records(a)


def test_resume_continues_to_the_same_result(dataset, trained, tmp_path):
    out = tmp_path / "r"
    assert main(["train", "--data", str(dataset), "--out", str(out), *TINY_TRAIN, "M=0"]) == 0
    assert main(["train", "--data", str(dataset), "--out", str(out), "--resume", *TINY_TRAIN]) == 0
    assert _same_model(out / "final.wmk", trained / "final.wmk")


def test_single_thread_reruns_are_bit_identical(dataset, tmp_path):
    runs = []
    for name in ("a", "b"):
        out = tmp_path / name
        assert main(["--threads", "1", "train", "--data", str(dataset), "--out", str(out), *TINY_TRAIN]) == 0
        runs.append(out)
    for f in ("final.wmk", "theta_002.wmk"):
        assert (runs[0] / f).read_bytes() == (runs[1] / f).read_bytes()
    strip = lambda rs: [{k: v for k, v in r.items() if k != "time"} for r in rs]  # noqa: E731
    assert strip(MetricsLog.read(runs[0] / "metrics.jsonl")) == strip(MetricsLog.read(runs[1] / "metrics.jsonl"))


def test_predict_writes_one_file_per_image_matching_evaluation(dataset, trained, tmp_path):
    images = sorted((dataset / "source" / "val").glob("*.png"))
    out = tmp_path / "pred"
    assert main(["predict", "--checkpoint", str(trained / "final.wmk"), "--out", str(out),
                 *map(str, images)]) == 0
    files = sorted(out.glob("*.pts"))
    assert [f.stem for f in files] == [p.stem for p in images]
    split = read_split(dataset / "source" / "val", "source")
    model = load_checkpoint(trained / "final.wmk")
    for i, f in enumerate(files):
        pred = load_pts(f)
        got = nme(pred, split.landmarks[i], "diag", split.images.shape[1:3])[0]
        single = type(split)(split.images[i:i + 1], split.landmarks[i:i + 1], "source")
        assert got == pytest.approx(evaluate_nme(model, single), abs=1e-6)


def test_overlay_writes_png_and_pts(dataset, trained, tmp_path):
    img = dataset / "target" / "val" / "img_00000.png"
    out = tmp_path / "ov"
    assert main(["overlay", "--checkpoint", str(trained / "final.wmk"), "--out", str(out),
                 "--gt-dir", str(dataset / "target" / "val" / "gt"), str(img)]) == 0
    assert load_image(out / "img_00000.png").shape == (64, 64, 3)
    assert load_pts(out / "img_00000.pts").shape == (16, 2)


def test_warp_identity_pair_reproduces_the_input(dataset, tmp_path):
    img = dataset / "source" / "val" / "img_00000.png"
    pts = dataset / "source" / "val" / "img_00000.pts"
    out = tmp_path / "w"
    assert main(["warp", "--real", str(img), "--stylized", str(img), "--pts", str(pts),
                 "--real-pts", str(pts), "--out", str(out)]) == 0
    assert np.abs(load_image(out / "warped.png") - load_image(img)).max() <= 1 / 255 + 1e-12


def test_warp_exact_fit_and_sobel_improvement(dataset, tmp_path):
    real, styl = dataset / "source" / "val" / "img_00000", dataset / "target" / "val" / "img_00000"
    out = tmp_path / "w"
    assert main(["warp", "--real", f"{real}.png", "--stylized", f"{styl}.png",
                 "--pts", str(dataset / "target" / "val" / "gt" / "img_00000.pts"),
                 "--real-pts", f"{real}.pts", "--out", str(out)]) == 0
    stats = json.loads((out / "warp_stats.json").read_text())
    assert stats["after"]["landmark_warp_error"] <= 1e-6
    assert stats["after"]["image_sobel"] <= stats["before"]["image_sobel"]


def test_warp_without_landmarks_is_a_usage_error(dataset, tmp_path, capsys):
    img = str(dataset / "source" / "val" / "img_00000.png")
    assert main(["warp", "--real", img, "--stylized", img, "--out", str(tmp_path / "w")]) == 2
    assert "needs --real-pts or --checkpoint" in capsys.readouterr().err


def test_eval_json_and_text_agree(dataset, trained, tmp_path):
    out = tmp_path / "ev"
    assert main(["eval", "--checkpoint", str(trained / "final.wmk"), "--data", str(dataset),
                 "--out", str(out)]) == 0
    table = json.loads((out / "eval.json").read_text())["nme"]
    assert set(table) == {"source/train", "source/val", "target/train", "target/val"}
    rows = dict(line.split() for line in (out / "eval.txt").read_text().splitlines()[1:])
    for k, v in table.items():
        assert rows[k] == f"{v:.6f}"


def test_eval_lists_splits_without_truth_as_na(tmp_path, trained):
    root = tmp_path / "d"
    assert main(["synth", "--out", str(root), "n_train=2", "n_val=1"]) == 0
    for f in (root / "target" / "train" / "gt").glob("*.pts"):
        f.unlink()
    out = tmp_path / "ev"
    assert main(["eval", "--checkpoint", str(trained / "final.wmk"), "--data", str(root),
                 "--out", str(out)]) == 0
    assert json.loads((out / "eval.json").read_text())["nme"]["target/train"] is None
    assert "n/a" in (out / "eval.txt").read_text()


def test_perfect_oracle_scores_zero_everywhere(dataset):
    truth = {}
    for domain in ("source", "target"):
        for name in ("train", "val"):
            s = read_split(dataset / domain / name, domain, with_gt=domain == "target")
            truth.update({im.tobytes(): lm for im, lm in zip(s.images, s.landmarks)})
    table = evaluate_dataset(lambda imgs: np.stack([truth[im.tobytes()] for im in imgs]), dataset)
    assert table == {"source/train": 0.0, "source/val": 0.0, "target/train": 0.0, "target/val": 0.0}


def test_normalizers_differ_by_their_ratio(tmp_path, trained):
    root = tmp_path / "one"
    assert main(["synth", "--out", str(root), "n_train=1", "n_val=1", "seed=11"]) == 0
    res = {}
    for norm in ("diag", "pair:0,4"):
        out = tmp_path / norm.replace(":", "_").replace(",", "_")
        assert main(["eval", "--checkpoint", str(trained / "final.wmk"), "--data", str(root),
                     "--normalizer", norm, "--out", str(out)]) == 0
        res[norm] = json.loads((out / "eval.json").read_text())["nme"]
    gt = load_pts(root / "source" / "val" / "img_00000.pts")
    ratio = np.linalg.norm(gt[0] - gt[4]) / np.hypot(64, 64)
    assert res["diag"]["source/val"] / res["pair:0,4"]["source/val"] == pytest.approx(ratio, rel=1e-9)


def test_bad_normalizer_is_a_usage_error(dataset, trained, tmp_path):
    assert main(["eval", "--checkpoint", str(trained / "final.wmk"), "--data", str(dataset),
                 "--normalizer", "pair:0", "--out", str(tmp_path / "e")]) == 2


def test_bad_checkpoint_exit_code(dataset, tmp_path):
    bad = tmp_path / "bad.wmk"
    bad.write_bytes(b"not a checkpoint")
    img = str(dataset / "source" / "val" / "img_00000.png")
    assert main(["predict", "--checkpoint", str(bad), "--out", str(tmp_path / "p"), img]) == 3


def test_missing_and_malformed_inputs_exit_four(trained, tmp_path):
    ck = str(trained / "final.wmk")
    assert main(["predict", "--checkpoint", ck, "--out", str(tmp_path / "p"), str(tmp_path / "none.png")]) == 4
    odd = tmp_path / "odd.png"
    odd.write_bytes(b"BM not an image")
    assert main(["predict", "--checkpoint", ck, "--out", str(tmp_path / "p"), str(odd)]) == 4
    pts = tmp_path / "bad.pts"
    pts.write_text("version: 1\nn_points: 2\n{\n1 2\n}\n")
    real = str(tmp_path / "r.png")
    from warpmark.data_io import save_image
    save_image(np.zeros((8, 8, 1)), real)
    assert main(["warp", "--real", real, "--stylized", real, "--pts", str(pts), "--real-pts", str(pts),
                 "--out", str(tmp_path / "w")]) == 4


def test_cli_does_not_touch_its_inputs(dataset, trained, tmp_path):
    before = {p: p.read_bytes() for p in dataset.rglob("*") if p.is_file()}
    main(["eval", "--checkpoint", str(trained / "final.wmk"), "--data", str(dataset), "--out", str(tmp_path / "e")])
    assert before == {p: p.read_bytes() for p in dataset.rglob("*") if p.is_file()}
