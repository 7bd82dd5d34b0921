"""Central finite-difference checks of every differentiable primitive.

Each check builds a scalar probe ``sum(op(inputs) * R)`` with a random
weighting ``R``, differentiates it on a tape, and compares against central
differences over every input entry. The error metric is
``||analytic - numeric|| / max(||analytic||, ||numeric||)`` per input tensor.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

from . import tensorcore as tc
from .lossmetrics import ncc_loss
from .network import build, pipeline, preset_config
from .resampler import warp_batch
from .tensorcore import DownsampleKind, Tape, Tensor
from .transformer import SplineOrder, dvf_batch

FD_STEP = 1e-5
OP_TOL = 1e-5
E2E_TOL = 1e-4


def rel_error(a: np.ndarray, b: np.ndarray) -> float:
    scale = max(np.linalg.norm(a), np.linalg.norm(b))
    if scale == 0.0:
        return 0.0
    return float(np.linalg.norm(a - b) / scale)


def numeric_grad(f: Callable[[], float], x: np.ndarray, h: float = FD_STEP) -> np.ndarray:
    """Central differences of ``f`` w.r.t. every entry of ``x`` (perturbed in place)."""
    g = np.zeros_like(x)
    flat, gflat = x.reshape(-1), g.reshape(-1)
    for i in range(flat.size):
        old = flat[i]
        flat[i] = old + h
        fp = f()
        flat[i] = old - h
        fm = f()
        flat[i] = old
        gflat[i] = (fp - fm) / (2 * h)
    return g


def check(op: Callable[..., Tensor], inputs: Sequence[Tensor], rng: np.random.Generator,
          h: float = FD_STEP) -> float:
    """Worst relative error over the inputs that require gradients."""
    probe = rng.standard_normal(op(*inputs).shape)

    def value():
        return float((op(*inputs).data * probe).sum())

    for t in inputs:
        t.grad = None
    with Tape() as tape:
        loss = tc.weighted_sum(op(*inputs), probe)
    tape.backward(loss)
    worst = 0.0
    for t in inputs:
        if t.requires_grad:
            analytic = t.grad if t.grad is not None else np.zeros_like(t.data)
            worst = max(worst, rel_error(analytic, numeric_grad(value, t.data, h)))
    return worst


def _p(rng, *shape, scale=1.0):
    return Tensor(rng.standard_normal(shape) * scale, requires_grad=True)


def _smooth(rng, n, h, w):
    yy, xx = np.mgrid[:h, :w] / max(h, w)
    out = np.zeros((n, h, w))
    for k in range(n):
        for _ in range(3):
            a, b, c, d = rng.uniform(1, 4, 4)
            out[k] += np.sin(a * 3 * yy + b) * np.cos(c * 3 * xx + d)
    return out


def _seeded(fn):
    def run(seed: int) -> float:
        return fn(np.random.default_rng(seed))
    return run


@_seeded
def case_conv2d(rng):
    stride = int(rng.integers(1, 3))
    c, k = int(rng.integers(1, 4)), int(rng.integers(1, 4))
    hh, ww = int(rng.integers(3, 9)), int(rng.integers(3, 9))
    return check(lambda x, kk, b: tc.conv2d(x, kk, b, stride),
                 [_p(rng, 2, c, hh, ww), _p(rng, k, c, 3, 3), _p(rng, k)], rng)


@_seeded
def case_conv1x1(rng):
    c, k = int(rng.integers(1, 5)), int(rng.integers(1, 5))
    return check(tc.conv1x1, [_p(rng, 2, c, 5, 6), _p(rng, k, c, 1, 1), _p(rng, k)], rng)


@_seeded
def case_avg_pool(rng):
    hh, ww = int(rng.integers(2, 9)), int(rng.integers(2, 9))
    return check(lambda x: tc.downsample2x(x, DownsampleKind.AVERAGE_POOL), [_p(rng, 2, 2, hh, ww)], rng)


@_seeded
def case_max_pool(rng):
    hh, ww = int(rng.integers(2, 9)), int(rng.integers(2, 9))
    return check(lambda x: tc.downsample2x(x, DownsampleKind.MAX_POOL), [_p(rng, 2, 2, hh, ww)], rng)


@_seeded
def case_strided_conv(rng):
    hh, ww = int(rng.integers(2, 9)), int(rng.integers(2, 9))
    return check(lambda x, k: tc.downsample2x(x, DownsampleKind.STRIDED_CONV, k),
                 [_p(rng, 2, 3, hh, ww), _p(rng, 3, 3, 3, 3)], rng)


@_seeded
def case_batch_norm_train(rng):
    c = int(rng.integers(1, 4))
    rm, rv = Tensor(np.zeros(c)), Tensor(np.ones(c))
    return check(lambda x, s, b: tc.batch_norm(x, s, b, rm, rv, train=True),
                 [_p(rng, 3, c, 4, 5), _p(rng, c), _p(rng, c)], rng)


@_seeded
def case_batch_norm_infer(rng):
    c = int(rng.integers(1, 4))
    rm, rv = Tensor(rng.standard_normal(c)), Tensor(rng.uniform(0.5, 2.0, c))
    return check(lambda x, s, b: tc.batch_norm(x, s, b, rm, rv, train=False),
                 [_p(rng, 2, c, 4, 4), _p(rng, c), _p(rng, c)], rng)


@_seeded
def case_elu(rng):
    return check(tc.elu, [_p(rng, 2, 3, 5, 5, scale=2.0)], rng)


def _grid_case(order):
    @_seeded
    def run(rng):
        gh, gw = int(rng.integers(2, 5)), int(rng.integers(2, 5))
        hh, ww = int(rng.integers(gh, 13)), int(rng.integers(gw, 13))
        return check(lambda p: dvf_batch(p, hh, ww, order), [_p(rng, 2, 2, gh, gw)], rng)
    return run


case_grid_cubic = _grid_case(SplineOrder.CUBIC)
case_grid_quadratic = _grid_case(SplineOrder.QUADRATIC)


def _offlattice_dvf(rng, n, h, w, margin=0.05):
    # keep sample positions away from integer coordinates where bilinear has kinks
    base = rng.uniform(-1.5, 1.5, size=(n, 2, h, w))
    frac = base - np.floor(base)
    return base + np.where(frac < margin, margin, 0.0) - np.where(frac > 1 - margin, margin, 0.0)


@_seeded
def case_warp(rng):
    hh, ww = int(rng.integers(4, 9)), int(rng.integers(4, 9))
    moving = Tensor(_smooth(rng, 2, hh, ww), requires_grad=True)
    dvf = Tensor(_offlattice_dvf(rng, 2, hh, ww), requires_grad=True)
    return check(warp_batch, [moving, dvf], rng)


@_seeded
def case_ncc_loss(rng):
    hh, ww = int(rng.integers(3, 9)), int(rng.integers(3, 9))
    fixed = rng.standard_normal((2, hh, ww))
    return check(lambda w: ncc_loss(fixed, w), [_p(rng, 2, hh, ww)], rng)


@_seeded
def case_end_to_end(rng):
    """16x16 pairs through the full MNIST-preset pipeline in training mode.

    The zero-initialised output layer is replaced by small random weights so
    gradients reach every hidden parameter; displacements stay below a pixel
    scale where sample positions sit safely off the integer lattice.
    """
    cfg = preset_config("mnist", kernels_per_layer=4)
    params = build(cfg, int(rng.integers(2 ** 31)))
    params["out.kernel"].data[...] = rng.standard_normal(params["out.kernel"].shape) * 0.1
    params["out.bias"].data[...] = rng.uniform(0.2, 0.6, 2) * rng.choice([-1, 1], 2)
    fixed = _smooth(rng, 2, 16, 16)
    moving = _smooth(rng, 2, 16, 16)

    def value():
        return float(pipeline(params, cfg, fixed, moving, train=True).loss.data)

    params.zero_grad()
    with Tape() as tape:
        out = pipeline(params, cfg, fixed, moving, train=True)
    tape.backward(out.loss)
    worst = 0.0
    for name in params.trainable_names():
        t = params[name]
        analytic = t.grad if t.grad is not None else np.zeros_like(t.data)
        worst = max(worst, rel_error(analytic, numeric_grad(value, t.data)))
    return worst


OP_CASES: dict[str, Callable[[int], float]] = {
    "conv2d": case_conv2d,
    "conv1x1": case_conv1x1,
    "avg_pool": case_avg_pool,
    "max_pool": case_max_pool,
    "strided_conv": case_strided_conv,
    "batch_norm_train": case_batch_norm_train,
    "batch_norm_infer": case_batch_norm_infer,
    "elu": case_elu,
    "grid_to_dvf_cubic": case_grid_cubic,
    "grid_to_dvf_quadratic": case_grid_quadratic,
    "warp": case_warp,
    "ncc_loss": case_ncc_loss,
}


@dataclass
class GradCheckRow:
    op: str
    seed: int
    rel_error: float
    threshold: float

    @property
    def passed(self) -> bool:
        return self.rel_error <= self.threshold


def run_suite(seed: int = 0, seeds_per_op: int = 20, e2e_seeds: int = 20) -> list[GradCheckRow]:
    rows = []
    for name, case in OP_CASES.items():
        for s in range(seeds_per_op):
            rows.append(GradCheckRow(name, seed * 1000 + s, case(seed * 1000 + s), OP_TOL))
    for s in range(e2e_seeds):
        rows.append(GradCheckRow("end_to_end", seed * 1000 + s, case_end_to_end(seed * 1000 + s), E2E_TOL))
    return rows
