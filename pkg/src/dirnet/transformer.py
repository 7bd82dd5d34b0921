"""B-spline spatial transformer: control-point displacements to a dense field.

Control point ``(i, j)`` sits at pixel ``(i*spacing_y, j*spacing_x)``. Stencil
indices that fall outside the grid are clamped to the edge, so a constant grid
yields a constant field everywhere and the parameter count equals the grid
size. Because the B-spline tensor product is separable, the whole map for one
channel is ``Wy @ phi @ Wx.T`` with fixed weight matrices; the adjoint is the
transposed product.
"""
from __future__ import annotations

import enum
import math
from dataclasses import dataclass
from functools import lru_cache

import numpy as np

from .tensorcore import ShapeError, Tensor, UsageError, _record


class SplineOrder(enum.Enum):
    CUBIC = "cubic"
    QUADRATIC = "quadratic"


def _check_unit(u: float) -> None:
    if not 0.0 <= u < 1.0:
        raise ValueError(f"basis parameter must lie in [0, 1), got {u}")


def basis_cubic(u: float) -> tuple[float, float, float, float]:
    _check_unit(u)
    return _cubic(u)


def basis_quadratic(u: float) -> tuple[float, float, float]:
    _check_unit(u)
    return _quadratic(u)


def _cubic(u):
    u2 = u * u
    u3 = u2 * u
    return ((1 - u) ** 3 / 6, (3 * u3 - 6 * u2 + 4) / 6, (-3 * u3 + 3 * u2 + 3 * u + 1) / 6, u3 / 6)


def _quadratic(u):
    return ((1 - u) ** 2 / 2, (-2 * u * u + 2 * u + 1) / 2, u * u / 2)


def stencil(t: float, order: SplineOrder) -> tuple[int, tuple[float, ...]]:
    """First (unclamped) control index and the basis weights at grid coordinate t."""
    if order is SplineOrder.CUBIC:
        i = math.floor(t)
        return i - 1, _cubic(t - i)
    c = math.floor(t + 0.5)
    # the 3-point support straddles the nearest control point
    return c - 1, _quadratic(t - c + 0.5)


@dataclass
class ControlGrid:
    """Displacements in pixels at control points; channel 0 is y (row), 1 is x (column)."""

    disp: np.ndarray
    spacing_y: float
    spacing_x: float

    def __post_init__(self):
        self.disp = np.asarray(self.disp, dtype=np.float64)
        if self.disp.ndim != 3 or self.disp.shape[0] != 2:
            raise ShapeError("control grid displacements must have shape [2, gh, gw]")
        if self.spacing_y <= 0 or self.spacing_x <= 0:
            raise ValueError("control point spacing must be positive")

    @property
    def gh(self) -> int:
        return self.disp.shape[1]

    @property
    def gw(self) -> int:
        return self.disp.shape[2]

    @classmethod
    def for_image(cls, disp, h: int, w: int) -> "ControlGrid":
        disp = np.asarray(disp, dtype=np.float64)
        return cls(disp, h / disp.shape[1], w / disp.shape[2])


@dataclass
class DisplacementField:
    """Dense per-pixel displacement d, shape [2, h, w], same channel order as ControlGrid."""

    d: np.ndarray

    def __post_init__(self):
        self.d = np.asarray(self.d, dtype=np.float64)
        if self.d.ndim != 3 or self.d.shape[0] != 2:
            raise ShapeError("displacement field must have shape [2, h, w]")

    @property
    def h(self) -> int:
        return self.d.shape[1]

    @property
    def w(self) -> int:
        return self.d.shape[2]

    @classmethod
    def zeros(cls, h: int, w: int) -> "DisplacementField":
        return cls(np.zeros((2, h, w)))


@lru_cache(maxsize=64)
def _weights_cached(n: int, g: int, spacing: float, order: SplineOrder) -> np.ndarray:
    mat = np.zeros((n, g))
    for p in range(n):
        first, ws = stencil(p / spacing, order)
        for l, wgt in enumerate(ws):
            mat[p, min(max(first + l, 0), g - 1)] += wgt
    mat.setflags(write=False)
    return mat


def weight_matrix(n: int, g: int, spacing: float, order: SplineOrder) -> np.ndarray:
    """[n, g] matrix mapping g control values along one axis to n pixel values."""
    if n < 1 or g < 1:
        raise UsageError("target and grid dimensions must be positive")
    return _weights_cached(int(n), int(g), float(spacing), order)


def _expand(wy: np.ndarray, phi: np.ndarray, wx: np.ndarray) -> np.ndarray:
    """Tensor-product evaluation [N,2,gh,gw] -> [N,2,h,w].

    Rows of the weight matrices sum to one, so the field is evaluated relative
    to the per-channel median control value. A constant grid then maps to
    exactly that constant, and regions of a sparse grid stay exactly zero.
    """
    ref = np.median(phi, axis=(2, 3), keepdims=True)
    return ref + np.einsum("pi,ncij,qj->ncpq", wy, phi - ref, wx, optimize=True)


def dvf_batch(phi: Tensor, h: int, w: int, order: SplineOrder = SplineOrder.CUBIC,
              spacing: tuple[float, float] | None = None) -> Tensor:
    """Differentiable grid-to-field map for a batch: [N,2,gh,gw] -> [N,2,h,w].

    Spacing defaults to ``image_dim / grid_dim`` per axis.
    """
    if h < 1 or w < 1:
        raise UsageError("target dimensions must be positive")
    if phi.data.ndim != 4 or phi.shape[1] != 2:
        raise ShapeError("control grid batch must have shape [N, 2, gh, gw]")
    gh, gw = phi.shape[2:]
    sy, sx = spacing if spacing is not None else (h / gh, w / gw)
    wy = weight_matrix(h, gh, sy, order)
    wx = weight_matrix(w, gw, sx, order)
    out = _expand(wy, phi.data, wx)

    def vjp(g):
        return (np.einsum("pi,ncpq,qj->ncij", wy, g, wx, optimize=True),)
    return _record(out, (phi,), vjp)


def grid_to_dvf(grid: ControlGrid, h: int, w: int,
                order: SplineOrder = SplineOrder.CUBIC) -> DisplacementField:
    if h < 1 or w < 1:
        raise UsageError("target dimensions must be positive")
    wy = weight_matrix(h, grid.gh, grid.spacing_y, order)
    wx = weight_matrix(w, grid.gw, grid.spacing_x, order)
    return DisplacementField(_expand(wy, grid.disp[None], wx)[0])


def dvf_gradient_wrt_grid(upstream: np.ndarray, grid: ControlGrid,
                          order: SplineOrder = SplineOrder.CUBIC) -> np.ndarray:
    """Adjoint of :func:`grid_to_dvf`: pulls a [2,h,w] field gradient back to [2,gh,gw]."""
    upstream = np.asarray(upstream, dtype=np.float64)
    if upstream.ndim != 3 or upstream.shape[0] != 2:
        raise ShapeError("upstream gradient must have shape [2, h, w]")
    h, w = upstream.shape[1:]
    wy = weight_matrix(h, grid.gh, grid.spacing_y, order)
    wx = weight_matrix(w, grid.gw, grid.spacing_x, order)
    return np.einsum("pi,cpq,qj->cij", wy, upstream, wx, optimize=True)


def grid_shape_for(h: int, w: int, num_downsamplings: int) -> tuple[int, int]:
    """Control grid produced by a regressor with the given number of 2x reductions."""
    gh, gw = h, w
    for _ in range(num_downsamplings):
        gh, gw = -(-gh // 2), -(-gw // 2)
    return gh, gw
