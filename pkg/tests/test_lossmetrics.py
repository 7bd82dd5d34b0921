import math

import numpy as np
import pytest
from hypothesis import given, strategies as st
from hypothesis.extra.numpy import arrays
from numpy.testing import assert_allclose, assert_array_equal

from dirnet.gradcheck import numeric_grad, rel_error
from dirnet.lossmetrics import (MetricError, boundary, dice, ncc, ncc_batch, ncc_loss, surface_distances,
                                warp_mask)
from dirnet.tensorcore import ShapeError, Tape, Tensor
from dirnet.transformer import DisplacementField

images = arrays(np.float64, (5, 6), elements=st.floats(-5, 5))
masks = st.integers(1, 12).flatmap(
    lambda h: st.integers(1, 12).flatmap(lambda w: arrays(bool, (h, w))))


def brute_dice(a, b):
    ia = {(i, j) for i, j in zip(*np.nonzero(a))}
    ib = {(i, j) for i, j in zip(*np.nonzero(b))}
    return 1.0 if not ia and not ib else 2 * len(ia & ib) / (len(ia) + len(ib))


def brute_surface(a, b, pixel_size=1.0):
    def edge(m):
        h, w = m.shape
        pts = []
        for i in range(h):
            for j in range(w):
                if not m[i, j]:
                    continue
                nbrs = [(i - 1, j), (i + 1, j), (i, j - 1), (i, j + 1)]
                if any(not (0 <= y < h and 0 <= x < w) or not m[y, x] for y, x in nbrs):
                    pts.append((i, j))
        return pts

    ea, eb = edge(a), edge(b)
    dists = [min(math.sqrt((p[0] - q[0]) ** 2 + (p[1] - q[1]) ** 2) for q in eb) for p in ea]
    dists += [min(math.sqrt((p[0] - q[0]) ** 2 + (p[1] - q[1]) ** 2) for q in ea) for p in eb]
    dists = [d * pixel_size for d in dists]
    ranked = sorted(dists)
    return math.fsum(dists) / len(dists), ranked[math.ceil(0.95 * len(ranked)) - 1]


def test_ncc_basic_identities(rng):
    img = rng.uniform(size=(7, 7))
    assert abs(ncc(img, img) - 1) <= 1e-14
    assert abs(ncc(img, 2.5 * img + 3) - 1) <= 1e-14
    assert abs(ncc(img, -img) + 1) <= 1e-14


def test_ncc_degenerate_is_zero_with_flag():
    value, flag = ncc_batch(np.zeros((2, 4, 4)), np.random.default_rng(0).uniform(size=(2, 4, 4)))
    assert_array_equal(value, 0.0) and flag.all()
    assert ncc(np.ones((3, 3)), np.eye(3)) == 0.0


@given(images, images)
def test_ncc_symmetric_and_bounded(a, b):
    assert abs(ncc(a, b) - ncc(b, a)) <= 1e-14
    assert abs(ncc(a, b)) <= 1 + 1e-12


@given(images, images, st.floats(0.1, 10), st.floats(-10, 10))
def test_ncc_positive_affine_invariance(a, b, s, t):
    if np.ptp(a) < 1e-3 or np.ptp(b) < 1e-3:
        return
    assert abs(ncc(a, s * b + t) - ncc(a, b)) <= 1e-9


def test_ncc_loss_at_optimum(rng):
    img = rng.uniform(size=(1, 6, 6))
    w = Tensor(img.copy(), requires_grad=True)
    with Tape() as tape:
        loss = ncc_loss(img, w)
    tape.backward(loss)
    assert abs(float(loss.data) + 1) <= 1e-14
    assert abs((w.grad * (img - img.mean())).sum()) <= 1e-14


def test_ncc_loss_constant_warped_has_no_gradient(rng):
    w = Tensor(np.full((1, 5, 5), 0.4), requires_grad=True)
    with Tape() as tape:
        loss = ncc_loss(rng.uniform(size=(1, 5, 5)), w)
    tape.backward(loss)
    assert float(loss.data) == 0.0
    assert_array_equal(w.grad, 0.0)


@pytest.mark.parametrize("seed", range(30))
def test_ncc_loss_gradient_matches_finite_differences(seed):
    rng = np.random.default_rng(seed)
    fixed = rng.uniform(size=(3, 5, 6))
    w = Tensor(rng.uniform(size=(3, 5, 6)), requires_grad=True)
    with Tape() as tape:
        loss = ncc_loss(fixed, w)
    tape.backward(loss)
    num = numeric_grad(lambda: float(ncc_loss(fixed, Tensor(w.data)).data), w.data)
    assert rel_error(w.grad, num) <= 1e-6


def test_ncc_loss_is_mean_over_pairs(rng):
    f, m = rng.uniform(size=(2, 4, 5, 5))
    expected = -np.mean([ncc(f[i], m[i]) for i in range(4)])
    assert abs(float(ncc_loss(f, Tensor(m)).data) - expected) <= 1e-15


def test_dice_examples():
    a = np.zeros((2, 2), bool)
    a[0, 0] = a[0, 1] = True
    b = np.zeros((2, 2), bool)
    b[0, 1] = b[1, 1] = True
    assert dice(a, b) == 0.5
    assert dice(a, a) == 1.0
    assert dice(a, ~a) == 0.0
    assert dice(np.zeros((3, 3)), np.zeros((3, 3))) == 1.0


@given(masks.flatmap(lambda a: st.tuples(st.just(a), arrays(bool, a.shape))))
def test_dice_symmetric(pair):
    a, b = pair
    assert dice(a, b) == dice(b, a)


@given(masks.flatmap(lambda a: st.tuples(st.just(a), arrays(bool, a.shape), arrays(bool, a.shape))))
def test_dice_monotone_in_shared_pixels(triple):
    a, b, extra = triple
    assert dice(a | extra, b | extra) >= dice(a, b) - 1e-15


def test_surface_distance_examples():
    a = np.zeros((1, 5), bool)
    b = np.zeros((1, 5), bool)
    a[0, 0] = True
    b[0, 3] = True
    assert surface_distances(a, b) == (3.0, 3.0)
    sq = np.zeros((6, 6), bool)
    sq[1:4, 1:4] = True
    assert surface_distances(sq, sq) == (0.0, 0.0)
    shifted = np.roll(sq, 1, axis=1)
    assert boundary(sq).sum() == 8
    assert surface_distances(sq, shifted) == brute_surface(sq, shifted)


def test_surface_distance_empty_mask():
    with pytest.raises(MetricError):
        surface_distances(np.zeros((3, 3), bool), np.eye(3, dtype=bool))


def test_metrics_match_brute_force_on_random_masks():
    rng = np.random.default_rng(21)
    done = 0
    while done < 50:
        h, w = rng.integers(1, 13, size=2)
        a = rng.uniform(size=(h, w)) < rng.uniform(0.2, 0.8)
        b = rng.uniform(size=(h, w)) < rng.uniform(0.2, 0.8)
        if not a.any() or not b.any():
            continue
        ps = float(rng.choice([1.0, 1.28]))
        assert dice(a, b) == brute_dice(a, b)
        assert surface_distances(a, b, ps) == brute_surface(a, b, ps)
        assert surface_distances(a, b, ps) == surface_distances(b, a, ps)
        done += 1


def test_warp_mask():
    m = np.zeros((8, 8), bool)
    m[2:5, 3:6] = True
    assert_array_equal(warp_mask(m, DisplacementField.zeros(8, 8)), m)
    shift = DisplacementField(np.stack([np.full((8, 8), 1.0), np.zeros((8, 8))]))
    assert_array_equal(warp_mask(m, shift)[1:4], m[2:5])


def test_warp_mask_half_pixel_line_matches_sampling_oracle():
    line = np.zeros((6, 7), bool)
    line[:, 3] = True
    dvf = DisplacementField(np.stack([np.zeros((6, 7)), np.full((6, 7), 0.5)]))
    expected = np.zeros((6, 7), bool)
    for i in range(6):
        for j in range(7):
            x = min(j + 0.5, 6)
            x0 = min(int(x), 5)
            t = x - x0
            expected[i, j] = (1 - t) * line[i, x0] + t * line[i, x0 + 1] >= 0.5
    assert_array_equal(warp_mask(line, dvf), expected)
    with pytest.raises(ShapeError):
        warp_mask(line, DisplacementField.zeros(6, 6))
