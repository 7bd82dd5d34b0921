import numpy as np
import pytest
from hypothesis import given, strategies as st
from numpy.testing import assert_allclose, assert_array_equal

from dirnet.gradcheck import numeric_grad, rel_error
from dirnet.resampler import invert_dvf, warp, warp_gradient
from dirnet.tensorcore import ShapeError
from dirnet.transformer import ControlGrid, DisplacementField, grid_to_dvf


def const_field(h, w, dy, dx):
    return DisplacementField(np.stack([np.full((h, w), dy), np.full((h, w), dx)]))


@given(st.integers(0, 2 ** 31), st.integers(1, 9), st.integers(1, 9))
def test_zero_field_is_bit_exact_identity(seed, h, w):
    img = np.random.default_rng(seed).standard_normal((h, w))
    assert_array_equal(warp(img, DisplacementField.zeros(h, w)), img)


def test_integer_shift_on_ramp():
    h, w = 6, 4
    ramp = np.repeat((np.arange(h) / (h - 1))[:, None], w, axis=1)
    out = warp(ramp, const_field(h, w, 1.0, 0.0))
    assert_allclose(out[:-1], ramp[1:], atol=1e-15)
    assert_allclose(out[-1], ramp[-1], atol=1e-15)


def test_half_pixel_shift_with_edge_clamp():
    out = warp(np.array([[0.0, 1.0]]), const_field(1, 2, 0.0, 0.5))
    assert_allclose(out, [[0.5, 1.0]])


def test_interpolation_bounds():
    rng = np.random.default_rng(2)
    img = rng.uniform(size=(9, 9))
    dvf = DisplacementField(rng.uniform(-3, 3, (2, 9, 9)))
    out = warp(img, dvf)
    ys = np.clip(np.arange(9)[:, None] + dvf.d[0], 0, 8)
    xs = np.clip(np.arange(9)[None, :] + dvf.d[1], 0, 8)
    for i in range(9):
        for j in range(9):
            y0, x0 = min(int(ys[i, j]), 7), min(int(xs[i, j]), 7)
            nb = img[y0:y0 + 2, x0:x0 + 2]
            assert nb.min() - 1e-15 <= out[i, j] <= nb.max() + 1e-15


def test_integer_shift_composition():
    img = np.random.default_rng(4).uniform(size=(12, 12))
    two_steps = warp(warp(img, const_field(12, 12, 2.0, 0.0)), const_field(12, 12, 3.0, 0.0))
    one_step = warp(img, const_field(12, 12, 5.0, 0.0))
    assert_array_equal(two_steps[:7], one_step[:7])


def test_gradient_zero_cases():
    rng = np.random.default_rng(0)
    dvf = DisplacementField(rng.uniform(-1, 1, (2, 5, 5)))
    assert_array_equal(warp_gradient(np.zeros((5, 5)), rng.uniform(size=(5, 5)), dvf), 0.0)
    assert_array_equal(warp_gradient(rng.standard_normal((5, 5)), np.full((5, 5), 0.3), dvf), 0.0)


@pytest.mark.parametrize("seed", range(20))
def test_gradient_matches_finite_differences_off_lattice(seed):
    rng = np.random.default_rng(seed)
    yy, xx = np.mgrid[:8, :8] / 8
    img = np.sin(3 * yy + rng.uniform()) * np.cos(2 * xx + rng.uniform())
    d = rng.uniform(-1.5, 1.5, (2, 8, 8))
    frac = d - np.floor(d)
    d = np.where((frac < 0.05) | (frac > 0.95), d + 0.1, d)
    dvf = DisplacementField(d)
    up = rng.standard_normal((8, 8))
    num = numeric_grad(lambda: float((warp(img, dvf) * up).sum()), dvf.d, h=1e-4)
    assert rel_error(warp_gradient(up, img, dvf), num) <= 1e-4


def test_shape_errors():
    with pytest.raises(ShapeError):
        warp(np.zeros((4, 4)), DisplacementField.zeros(4, 5))
    with pytest.raises(ShapeError):
        warp_gradient(np.zeros((3, 3)), np.zeros((4, 4)), DisplacementField.zeros(4, 4))


def test_inverse_field_composes_to_identity():
    rng = np.random.default_rng(9)
    grid = ControlGrid.for_image(rng.uniform(-1.5, 1.5, (2, 7, 7)), 28, 28)
    d = grid_to_dvf(grid, 28, 28)
    inv = invert_dvf(d, tol=1e-6)
    # r(p) + d(p + r(p)) == 0 away from the clamped border
    resid = inv.d + np.stack([warp(d.d[0], inv), warp(d.d[1], inv)])
    assert np.abs(resid[:, 4:-4, 4:-4]).max() <= 1e-5
