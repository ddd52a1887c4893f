import hashlib

import numpy as np
import pytest

from warpmark.errors import ConfigError
from warpmark.landmarker import ArchConfig
from warpmark.synth import SynthConfig, load_benchmark, render_face, synth_generate, TEMPLATE
from warpmark.trainer import TrainConfig, evaluate_nme, pretrain_source


def _digest(root):
    h = hashlib.sha256()
    for p in sorted(root.rglob("*")):
        if p.is_file():
            h.update(str(p.relative_to(root)).encode())
            h.update(p.read_bytes())
    return h.hexdigest()


def test_shapes_ranges_and_counts(synth_small):
    b = synth_small
    assert b.counts() == {"source/train": 12, "source/val": 4, "target/train": 12, "target/val": 4}
    for split in (b.source_train, b.source_val, b.target_train, b.target_val):
        assert split.images.shape[1:] == (64, 64, 1)
        assert split.images.min() >= 0 and split.images.max() <= 1
    assert b.target_train.landmarks is None


def test_landmarks_inside_canvas(synth_small):
    for lms in (synth_small.source_train.landmarks, synth_small.target_train_gt, synth_small.target_val_gt):
        assert lms.min() >= 0 and lms.max() <= 63


def test_hidden_field_reproduces_ground_truth_exactly(synth_small):
    for name, gt in (("train", synth_small.target_train_gt), ("val", synth_small.target_val_gt)):
        h = synth_small.hidden[name]
        for i in range(len(gt)):
            assert np.array_equal(h.apply(i), gt[i])


def test_split_hygiene(synth_small):
    train = {im.tobytes() for im in synth_small.source_train.images}
    assert not any(im.tobytes() in train for im in synth_small.source_val.images)


def test_rendering_follows_landmarks():
    # the template itself renders dark eye disks at the eye centres
    img = render_face(TEMPLATE, 64)
    assert img[28, 24, 0] < 0.2 and img[28, 40, 0] < 0.2 and img[34, 32 - 10, 0] > 0.6


def test_deterministic_dataset_bytes(tmp_path):
    cfg = SynthConfig(n_train=3, n_val=2, seed=5)
    synth_generate(cfg).save(tmp_path / "a")
    synth_generate(cfg).save(tmp_path / "b")
    assert _digest(tmp_path / "a") == _digest(tmp_path / "b")


def test_disk_round_trip_is_exact(tmp_path, synth_small):
    synth_small.save(tmp_path / "d")
    back = load_benchmark(tmp_path / "d")
    assert np.array_equal(back.source_train.images, synth_small.source_train.images)
    assert np.array_equal(back.target_val.images, synth_small.target_val.images)
    np.testing.assert_allclose(back.source_train.landmarks, synth_small.source_train.landmarks, atol=5e-7)
    assert np.array_equal(back.target_val_gt, synth_small.target_val_gt)
    assert (tmp_path / "d" / "target" / "val" / "gt" / "img_00000.pts").exists()
    assert (tmp_path / "d" / "manifest.json").exists()


def test_off_canvas_deformation_raises_config_error():
    with pytest.raises(ConfigError, match="off the canvas"):
        synth_generate(SynthConfig(n_train=1, n_val=1, exaggeration=40.0, max_retries=3))


def test_unknown_schema():
    with pytest.raises(ConfigError):
        SynthConfig(n_landmarks=68)


def test_no_shift_config_matches_source_difficulty():
    cfg = SynthConfig(n_train=60, n_val=30, exaggeration=0.0, deform_magnitude=0.0,
                      appearance_shift=False, seed=3)
    b = synth_generate(cfg)
    model = pretrain_source(TrainConfig(pretrain_epochs=8, seed=0, widths=(4, 8, 8)), b.source_train)
    src = evaluate_nme(model, b.source_val)
    tgt = evaluate_nme(model, b.labeled_target("val"))
    assert abs(tgt - src) <= 0.35 * src


def test_empty_validation_split_rejected():
    with pytest.raises(ConfigError):
        SynthConfig(n_val=0)
