import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from warpmark import autodiff as ad
from warpmark.autodiff import Tensor, grad_check, precision
from warpmark.errors import DimensionError
from warpmark.imageops import (bilinear_sample, gradient_field, laplacian_field, resize_bilinear,
                               sobel_field, to_grayscale)
from warpmark.warpfield import pixel_grid


def test_grayscale_white_is_one():
    np.testing.assert_allclose(to_grayscale(np.ones((4, 4, 3))), 1.0, rtol=0, atol=1e-15)


def test_grayscale_identity_on_gray():
    img = np.random.default_rng(0).uniform(size=(5, 4, 1))
    np.testing.assert_array_equal(to_grayscale(img), img)


def test_grayscale_pure_red():
    red = np.zeros((2, 2, 3))
    red[..., 0] = 1.0
    np.testing.assert_allclose(to_grayscale(red), 0.299)


def test_grayscale_rejects_two_channels():
    with pytest.raises(DimensionError):
        to_grayscale(np.zeros((3, 3, 2)))


def test_sobel_constant_is_zero():
    np.testing.assert_array_equal(sobel_field(np.full((6, 7, 1), 0.4)), 0.0)


def test_sobel_ramp_interior():
    h, w = 6, 8
    img = np.tile(np.arange(w) / (w - 1), (h, 1))[..., None]
    f = sobel_field(img)
    assert f.shape == (h, w, 2)
    np.testing.assert_allclose(f[:, 1:-1, 0], 1 / (w - 1), rtol=1e-12)
    np.testing.assert_allclose(f[..., 1], 0.0, atol=1e-15)
    # replicate padding halves the slope at the border columns
    np.testing.assert_allclose(f[:, 0, 0], 0.5 / (w - 1), rtol=1e-12)


def test_sobel_unit_slope_ramp_gives_unit_gradient():
    img = np.tile(np.arange(9.0), (5, 1))[..., None]
    np.testing.assert_allclose(sobel_field(img)[:, 1:-1, 0], 1.0)


def test_sobel_transpose_symmetry():
    img = np.random.default_rng(1).uniform(size=(7, 5, 1))
    f = sobel_field(img)
    ft = sobel_field(img.transpose(1, 0, 2))
    np.testing.assert_allclose(ft[..., 0], f[..., 1].T, atol=1e-15)
    np.testing.assert_allclose(ft[..., 1], f[..., 0].T, atol=1e-15)


def test_sobel_too_small():
    with pytest.raises(DimensionError):
        sobel_field(np.zeros((2, 5, 1)))


def test_laplacian_constant_zero():
    np.testing.assert_array_equal(laplacian_field(np.full((5, 5, 1), 0.7)), 0.0)


def test_laplacian_impulse():
    img = np.zeros((5, 5, 1))
    img[2, 2] = 1.0
    f = laplacian_field(img)
    assert f[2, 2, 0] == -4.0 and f[2, 2, 1] == -4.0
    for v, u in ((1, 2), (3, 2), (2, 1), (2, 3)):
        assert f[v, u, 0] == 1.0
    assert f[0, 0, 0] == 0.0


def test_laplacian_annihilates_ramp_interior():
    uu, vv = np.meshgrid(np.arange(8.0), np.arange(6.0))
    img = (0.03 * uu + 0.05 * vv)[..., None]
    np.testing.assert_allclose(laplacian_field(img)[1:-1, 1:-1], 0.0, atol=1e-14)


def test_per_channel_field_has_two_components_per_channel():
    img = np.random.default_rng(2).uniform(size=(6, 6, 3))
    assert gradient_field(img, "sobel", grayscale=False).shape == (6, 6, 6)
    assert gradient_field(img, "sobel", grayscale=True).shape == (6, 6, 2)


@settings(max_examples=25, deadline=None)
@given(arrays(np.float64, (5, 6, 1), elements=st.floats(0, 1)), st.floats(0, 1))
def test_sobel_linearity(img, a):
    np.testing.assert_allclose(sobel_field(a * img), a * sobel_field(img), atol=1e-14)


@settings(max_examples=25, deadline=None)
@given(st.integers(3, 9), st.integers(3, 9))
def test_fields_preserve_size(h, w):
    img = np.random.default_rng(h * 10 + w).uniform(size=(h, w, 1))
    assert sobel_field(img).shape == (h, w, 2)
    assert laplacian_field(img).shape == (h, w, 2)


def test_sample_identity_grid_bit_exact():
    img = np.random.default_rng(3).uniform(size=(7, 9, 2))
    out = bilinear_sample(img, pixel_grid(7, 9))
    assert np.array_equal(out, img)


def test_sample_midpoint():
    img = np.array([[[0.0], [1.0]]])
    out = bilinear_sample(img, np.array([[[0.5, 0.0]]]))
    assert out[0, 0, 0] == 0.5


def test_sample_far_out_of_bounds_clamps_to_column_zero():
    img = np.random.default_rng(4).uniform(size=(4, 5, 1))
    out = bilinear_sample(img, np.array([[[-3.0, 2.0]]]))
    assert out[0, 0, 0] == img[2, 0, 0]


def test_sample_values_stay_in_unit_range():
    rng = np.random.default_rng(5)
    img = rng.uniform(size=(6, 6, 1))
    coords = rng.uniform(-4, 10, size=(10, 10, 2))
    out = bilinear_sample(img, coords)
    assert out.min() >= 0 and out.max() <= 1


def test_sampler_coordinate_gradient():
    rng = np.random.default_rng(6)
    img = rng.uniform(size=(6, 7, 2))
    coords = rng.uniform(0.1, 4.9, size=(3, 4, 2))
    # integer coordinates are kinks; stay off them
    coords = np.where(np.abs(coords - np.round(coords)) < 0.05, coords + 0.2, coords)
    w = rng.normal(size=(3, 4, 2))
    assert grad_check(lambda c: ad.sum(ad.mul(bilinear_sample(img, c), w)), coords) <= 1e-5


def test_sampler_image_gradient():
    rng = np.random.default_rng(7)
    coords = rng.uniform(0.2, 3.7, size=(3, 3, 2))
    w = rng.normal(size=(3, 3, 1))
    img = rng.uniform(size=(5, 5, 1))
    assert grad_check(lambda t: ad.sum(ad.square(ad.mul(bilinear_sample(t, coords), w))), img) <= 1e-5


def test_sobel_gradient_through_image():
    rng = np.random.default_rng(8)
    img = rng.uniform(size=(5, 6, 3))
    assert grad_check(lambda t: ad.sum(ad.square(sobel_field(t))), img) <= 1e-5


def test_resize_identity_and_scaling():
    img = np.random.default_rng(9).uniform(size=(8, 8, 1))
    np.testing.assert_array_equal(resize_bilinear(img, 8, 8), img)
    up = resize_bilinear(img, 16, 16)
    # even output pixels land exactly on input pixels
    np.testing.assert_allclose(up[::2, ::2], img, atol=1e-15)


def test_sobel_matches_kernel_correlation():
    from warpmark.imageops import LAPLACIAN, SOBEL_U, SOBEL_V
    img = np.random.default_rng(10).uniform(size=(6, 7, 1))
    p = np.pad(img[..., 0], 1, mode="edge")

    def corr(k):
        return np.array([[(p[i:i + 3, j:j + 3] * k).sum() for j in range(7)] for i in range(6)])

    np.testing.assert_allclose(sobel_field(img)[..., 0], corr(SOBEL_U), atol=1e-15)
    np.testing.assert_allclose(sobel_field(img)[..., 1], corr(SOBEL_V), atol=1e-15)
    np.testing.assert_allclose(laplacian_field(img)[..., 0], corr(LAPLACIAN), atol=1e-14)
