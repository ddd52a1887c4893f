import math

import numpy as np
import pytest

from warpmark import autodiff as ad
from warpmark.autodiff import grad_check
from warpmark.errors import CheckpointError, ConfigError, DimensionError
from warpmark.landmarker import (ArchConfig, Landmarker, forward, glorot_bound, init_random, load_checkpoint,
                                 predict, predict_batch)


def test_default_param_count():
    arch = ArchConfig()
    assert arch.n_params() == 71456
    assert sum(p.size for p in init_random(arch, 0).params.values()) == arch.n_params()


def test_side_must_divide_by_pool_factor():
    with pytest.raises(ConfigError):
        ArchConfig(side=60, widths=(8, 16, 32))


def test_init_deterministic_and_seed_dependent():
    arch = ArchConfig(side=16, widths=(4, 8), n_landmarks=3)
    a, b, c = init_random(arch, 1), init_random(arch, 1), init_random(arch, 2)
    for k in a.params:
        assert np.array_equal(a.params[k], b.params[k])
    assert any(not np.array_equal(a.params[k], c.params[k]) for k in a.params if k.endswith(".w"))


def test_glorot_bound_value():
    assert math.isclose(glorot_bound(32, 32), 0.30618621784789724, rel_tol=1e-12)


def test_init_respects_bounds():
    arch = ArchConfig(side=16, widths=(4, 8), n_landmarks=3)
    m = init_random(arch, 3)
    a0 = glorot_bound(1 * 9, 4 * 9)
    assert np.abs(m.params["conv0.w"]).max() <= a0
    assert np.all(m.params["conv0.b"] == 0)


def test_output_shape_and_zero_weights_centre():
    arch = ArchConfig(side=16, widths=(4, 8), n_landmarks=5)
    m = init_random(arch, 0)
    img = np.random.default_rng(0).uniform(size=(16, 16, 1))
    assert predict(m, img).shape == (5, 2)
    zero = Landmarker(arch, {k: np.zeros_like(v) for k, v in m.params.items()})
    np.testing.assert_allclose(predict(zero, img), 8.0)
    np.testing.assert_allclose(predict(zero, img, orig_hw=(40, 100)), [[50.0, 20.0]] * 5)


def test_predictions_inside_image_even_when_saturated():
    arch = ArchConfig(side=16, widths=(4,), n_landmarks=2)
    m = init_random(arch, 0)
    m.params["fc.b"][:] = [1e4, -1e4, 50, -50]
    out = predict(m, np.zeros((16, 16, 1), np.float32))
    assert np.all(out > 0) and np.all(out < 16)


def test_wrong_input_size():
    m = init_random(ArchConfig(side=16, widths=(4,), n_landmarks=2), 0)
    with pytest.raises(DimensionError):
        predict(m, np.zeros((20, 20, 1)))


def test_landmarker_gradient_every_weight_32px():
    arch = ArchConfig(side=32, widths=(2, 2), n_landmarks=2)
    m = init_random(arch, 4, dtype=np.float64)
    img = np.random.default_rng(1).uniform(size=(1, 32, 32, 1))
    for name in m.params:
        def f(t, name=name):
            params = dict(m.params)
            params[name] = t
            return ad.mean(forward(arch, params, img))
        assert grad_check(f, m.params[name]) <= 1e-5, name


def test_checkpoint_round_trip_bit_exact(tmp_path):
    arch = ArchConfig(side=16, widths=(4, 8), n_landmarks=3)
    m = init_random(arch, 5)
    m.save(tmp_path / "m.wmk")
    back = load_checkpoint(tmp_path / "m.wmk")
    assert back.arch == arch and back.seed == 5
    for k in m.params:
        assert np.array_equal(back.params[k], m.params[k]) and back.params[k].dtype == m.params[k].dtype
    img = np.random.default_rng(2).uniform(size=(2, 16, 16, 1))
    assert np.array_equal(predict_batch(m, img), predict_batch(back, img))


def test_checkpoint_arch_mismatch(tmp_path):
    from warpmark.container import load_arrays, save_arrays
    m = init_random(ArchConfig(side=16, widths=(4,), n_landmarks=2), 0)
    m.save(tmp_path / "m.wmk")
    arrays, meta = load_arrays(tmp_path / "m.wmk")
    meta["arch"]["n_landmarks"] = 3
    save_arrays(tmp_path / "bad.wmk", arrays, meta)
    with pytest.raises(CheckpointError):
        load_checkpoint(tmp_path / "bad.wmk")


def test_predict_is_pure():
    m = init_random(ArchConfig(side=16, widths=(4,), n_landmarks=2), 0)
    img = np.random.default_rng(3).uniform(size=(16, 16, 1))
    before = {k: v.copy() for k, v in m.params.items()}
    assert np.array_equal(predict(m, img), predict(m, img))
    assert all(np.array_equal(before[k], m.params[k]) for k in before)
