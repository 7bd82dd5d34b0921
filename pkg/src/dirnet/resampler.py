"""Backward bilinear warping: ``out(p) = moving(p + d(p))``.

Sample coordinates are clamped to the image rectangle (edge replication). In
each unit cell the interpolation uses the cell whose top-left corner is
``floor`` of the coordinate, except on the last row/column where the cell to
the left/up is used; the derivative follows the same cell.
"""
from __future__ import annotations

import numpy as np

from .tensorcore import ShapeError, Tensor, _record
from .transformer import DisplacementField


def _axis_sampling(coord: np.ndarray, n: int):
    """Clamped coordinate split into (lower index, upper index, weight, inside mask)."""
    inside = (coord >= 0) & (coord <= n - 1)
    c = np.clip(coord, 0, n - 1)
    if n == 1:
        zero = np.zeros(c.shape, dtype=np.intp)
        return zero, zero, np.zeros_like(c), np.zeros_like(inside)
    i0 = np.minimum(np.floor(c).astype(np.intp), n - 2)
    return i0, i0 + 1, c - i0, inside


class _Sampler:
    def __init__(self, n: int, h: int, w: int, dvf: np.ndarray):
        ys = np.arange(h, dtype=np.float64)[None, :, None] + dvf[:, 0]
        xs = np.arange(w, dtype=np.float64)[None, None, :] + dvf[:, 1]
        self.y0, self.y1, self.wy, self.in_y = _axis_sampling(ys, h)
        self.x0, self.x1, self.wx, self.in_x = _axis_sampling(xs, w)
        self.nidx = np.arange(n)[:, None, None]

    def corners(self, img: np.ndarray):
        n = self.nidx
        return (img[n, self.y0, self.x0], img[n, self.y0, self.x1],
                img[n, self.y1, self.x0], img[n, self.y1, self.x1])

    def sample(self, img: np.ndarray) -> np.ndarray:
        a, b, c, d = self.corners(img)
        wy, wx = self.wy, self.wx
        return (1 - wy) * ((1 - wx) * a + wx * b) + wy * ((1 - wx) * c + wx * d)

    def grad_disp(self, img: np.ndarray) -> np.ndarray:
        a, b, c, d = self.corners(img)
        wy, wx = self.wy, self.wx
        gy = (1 - wx) * (c - a) + wx * (d - b)
        gx = (1 - wy) * (b - a) + wy * (d - c)
        return np.stack([gy * self.in_y, gx * self.in_x], axis=1)

    def scatter(self, g: np.ndarray, shape) -> np.ndarray:
        out = np.zeros(shape)
        n = np.broadcast_to(self.nidx, g.shape)
        wy, wx = self.wy, self.wx
        for yi, xi, wgt in ((self.y0, self.x0, (1 - wy) * (1 - wx)), (self.y0, self.x1, (1 - wy) * wx),
                            (self.y1, self.x0, wy * (1 - wx)), (self.y1, self.x1, wy * wx)):
            np.add.at(out, (n, yi, xi), g * wgt)
        return out


def warp_batch(moving: Tensor, dvf: Tensor) -> Tensor:
    """Differentiable warp of a batch: moving [N,H,W], dvf [N,2,H,W] -> [N,H,W]."""
    if moving.data.ndim != 3 or dvf.data.ndim != 4 or dvf.shape[1] != 2:
        raise ShapeError("warp expects moving [N,H,W] and dvf [N,2,H,W]")
    n, h, w = moving.shape
    if dvf.shape != (n, 2, h, w):
        raise ShapeError(f"dvf shape {dvf.shape} does not match moving images {moving.shape}")
    s = _Sampler(n, h, w, dvf.data)
    out = s.sample(moving.data)

    def vjp(g):
        gd = s.grad_disp(moving.data) * g[:, None] if dvf.requires_grad else None
        gm = s.scatter(g, moving.shape) if moving.requires_grad else None
        return gm, gd
    return _record(out, (moving, dvf), vjp)


def _check_pair(moving: np.ndarray, dvf: DisplacementField) -> np.ndarray:
    moving = np.asarray(moving, dtype=np.float64)
    if moving.ndim != 2 or moving.shape != (dvf.h, dvf.w):
        raise ShapeError(f"image shape {moving.shape} does not match field ({dvf.h}, {dvf.w})")
    return moving


def warp(moving: np.ndarray, dvf: DisplacementField) -> np.ndarray:
    moving = _check_pair(moving, dvf)
    h, w = moving.shape
    return _Sampler(1, h, w, dvf.d[None]).sample(moving[None])[0]


def warp_gradient(upstream: np.ndarray, moving: np.ndarray, dvf: DisplacementField) -> np.ndarray:
    """d(sum(upstream * warp(moving, dvf))) / d dvf, shape [2, h, w]."""
    moving = _check_pair(moving, dvf)
    upstream = np.asarray(upstream, dtype=np.float64)
    if upstream.shape != moving.shape:
        raise ShapeError("upstream gradient must match the image shape")
    h, w = moving.shape
    return _Sampler(1, h, w, dvf.d[None]).grad_disp(moving[None])[0] * upstream[None]


def invert_dvf(dvf: DisplacementField, tol: float = 1e-3, max_iter: int = 200) -> DisplacementField:
    """Fixed-point inverse r with r(p) = -d(p + r(p)); stops when the update is below tol px."""
    inv = -dvf.d.copy()
    for _ in range(max_iter):
        probe = DisplacementField(inv)
        new = -np.stack([warp(dvf.d[0], probe), warp(dvf.d[1], probe)])
        step = np.abs(new - inv).max()
        inv = new
        if step < tol:
            break
    return DisplacementField(inv)
