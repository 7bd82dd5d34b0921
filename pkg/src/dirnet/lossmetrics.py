"""Normalized cross correlation (loss and score) and overlap/contour metrics."""
from __future__ import annotations

import logging
import math
from dataclasses import dataclass

import numpy as np
from scipy import ndimage

from .resampler import warp
from .tensorcore import ShapeError, Tensor, _record
from .transformer import DisplacementField

log = logging.getLogger(__name__)

# product of centred sums of squares below this counts as a constant image
DEGENERATE_TOL = 1e-20


class MetricError(ValueError):
    pass


def _ncc_parts(a: np.ndarray, b: np.ndarray):
    """Per-image NCC over trailing two axes; returns (ncc, degenerate, centred a, centred b, sums)."""
    ac = a - a.mean(axis=(-2, -1), keepdims=True)
    bc = b - b.mean(axis=(-2, -1), keepdims=True)
    sab = (ac * bc).sum(axis=(-2, -1))
    saa = (ac * ac).sum(axis=(-2, -1))
    sbb = (bc * bc).sum(axis=(-2, -1))
    denom = np.sqrt(saa * sbb)
    degenerate = saa * sbb <= DEGENERATE_TOL
    safe = np.where(degenerate, 1.0, denom)
    value = np.where(degenerate, 0.0, sab / safe)
    return value, degenerate, ac, bc, sab, sbb, safe


def ncc_batch(a: np.ndarray, b: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """NCC per pair for stacks [..., H, W]; also returns the degenerate-pair mask."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ShapeError(f"image shapes differ: {a.shape} vs {b.shape}")
    value, degenerate, *_ = _ncc_parts(a, b)
    return value, degenerate


def ncc(a: np.ndarray, b: np.ndarray) -> float:
    """NCC of two images; 0 (with a logged warning) if either is constant."""
    value, degenerate = ncc_batch(a, b)
    if degenerate:
        log.warning("ncc of a constant image; returning 0")
    return float(value)


def ncc_loss(fixed: np.ndarray, warped: Tensor) -> Tensor:
    """Mean over the batch of -NCC(fixed_n, warped_n); inputs are [N,H,W].

    Degenerate pairs contribute a loss of 0 and no gradient.
    """
    fixed = np.asarray(fixed, dtype=np.float64)
    if fixed.shape != warped.shape or fixed.ndim != 3:
        raise ShapeError(f"fixed {fixed.shape} and warped {warped.shape} must both be [N,H,W]")
    n = fixed.shape[0]
    value, degenerate, ac, bc, sab, sbb, denom = _ncc_parts(fixed, warped.data)
    if degenerate.any():
        log.warning("%d of %d pairs have a constant image; NCC taken as 0", int(degenerate.sum()), n)

    def vjp(g):
        coef = np.where(degenerate, 0.0, -float(g) / n / denom)
        ratio = (sab / np.where(degenerate, 1.0, sbb))[:, None, None]
        return (coef[:, None, None] * (ac - ratio * bc),)
    return _record(np.array(-value.mean()), (warped,), vjp)


# ---------------------------------------------------------------- masks

def dice(a: np.ndarray, b: np.ndarray) -> float:
    a = np.asarray(a, dtype=bool)
    b = np.asarray(b, dtype=bool)
    if a.shape != b.shape:
        raise ShapeError("mask shapes differ")
    total = int(a.sum()) + int(b.sum())
    if total == 0:
        return 1.0
    return 2.0 * int((a & b).sum()) / total


def boundary(mask: np.ndarray) -> np.ndarray:
    """Mask pixels with at least one 4-neighbour outside the mask (or the image)."""
    m = np.asarray(mask, dtype=bool)
    p = np.pad(m, 1, constant_values=False)
    interior = p[:-2, 1:-1] & p[2:, 1:-1] & p[1:-1, :-2] & p[1:-1, 2:]
    return m & ~interior


def _directed(src: np.ndarray, dst: np.ndarray) -> np.ndarray:
    # exact EDT to the nearest dst pixel, distance rebuilt from integer offsets
    _, (iy, ix) = ndimage.distance_transform_edt(~dst, return_indices=True)
    ys, xs = np.nonzero(src)
    dy = (ys - iy[ys, xs]).astype(np.float64)
    dx = (xs - ix[ys, xs]).astype(np.float64)
    return np.sqrt(dy * dy + dx * dx)


def nearest_rank(values: np.ndarray, q: float) -> float:
    s = np.sort(values)
    k = max(1, math.ceil(q * len(s)))
    return float(s[k - 1])


def surface_distances(a: np.ndarray, b: np.ndarray, pixel_size: float = 1.0) -> tuple[float, float]:
    """(mean absolute surface distance, 95th percentile) over both directed distance sets."""
    a = np.asarray(a, dtype=bool)
    b = np.asarray(b, dtype=bool)
    if a.shape != b.shape:
        raise ShapeError("mask shapes differ")
    if not a.any() or not b.any():
        raise MetricError("surface distance is undefined for an empty mask")
    ba, bb = boundary(a), boundary(b)
    dist = np.concatenate([_directed(ba, bb), _directed(bb, ba)]) * pixel_size
    # fsum makes the mean independent of summation order
    return math.fsum(dist) / len(dist), nearest_rank(dist, 0.95)


def warp_mask(mask: np.ndarray, dvf: DisplacementField) -> np.ndarray:
    """Bilinearly warp a binary mask and threshold at 0.5."""
    return warp(np.asarray(mask, dtype=np.float64), dvf) >= 0.5


@dataclass
class MetricReport:
    pair_id: str
    ncc_before: float
    ncc_after: float
    dice: float | None = None
    mad: float | None = None
    sd95: float | None = None
    error: str | None = None
