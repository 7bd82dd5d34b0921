"""Dataset readers and synthetic pairs, with the binary and text file formats.

Formats
-------
IDX (read/write)
    big-endian u32 magic ``0x00000803`` (images) or ``0x00000801`` (labels),
    big-endian u32 dims, unsigned-byte payload. ``.gz`` files are accepted.
PGM
    binary ``P5`` with maxval 255.
DVF0
    ``b"DVF0"``, u32 h, u32 w, then the row/y channel and the column/x
    channel, row-major little-endian float64.
DIRN checkpoint
    ``b"DIRN"``, u32 version (1), u32 config length + UTF-8 JSON config,
    u32 tensor count, then per tensor: u16 name length, name, u8 rank,
    u32 dims, little-endian float64 payload.

All integers outside IDX are little-endian.
"""
from __future__ import annotations

import csv
import gzip
import io
import json
import math
import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np
from scipy import ndimage

from .network import NetConfig, build
from .resampler import warp
from .tensorcore import ModelParams
from .transformer import ControlGrid, DisplacementField, grid_to_dvf, SplineOrder

IDX_IMAGES_MAGIC = 0x00000803
IDX_LABELS_MAGIC = 0x00000801
DVF_MAGIC = b"DVF0"
CKPT_MAGIC = b"DIRN"
CKPT_VERSION = 1
METRICS_HEADER = ("pair_id", "ncc_before", "ncc_after", "dice", "mad", "sd95")
CURVE_HEADER = ("iter", "train_loss", "val_loss")


class FormatError(ValueError):
    pass


class DatasetError(ValueError):
    pass


def _read_bytes(path) -> bytes:
    path = Path(path)
    raw = path.read_bytes()
    if raw[:2] == b"\x1f\x8b":
        raw = gzip.decompress(raw)
    return raw


# ---------------------------------------------------------------- IDX

def _parse_idx(raw: bytes, magic: int, ndim: int) -> np.ndarray:
    header = 4 + 4 * ndim
    if len(raw) < header:
        raise FormatError(f"IDX file too short for its header ({len(raw)} bytes)")
    found = struct.unpack(">I", raw[:4])[0]
    if found != magic:
        raise FormatError(f"bad IDX magic: expected 0x{magic:08x}, found 0x{found:08x}")
    dims = struct.unpack(f">{ndim}I", raw[4:header])
    size = math.prod(dims)
    if len(raw) - header != size:
        raise FormatError(f"IDX payload holds {len(raw) - header} bytes, header declares {size}")
    return np.frombuffer(raw, dtype=np.uint8, offset=header).reshape(dims)


def load_idx_images(path) -> list[np.ndarray]:
    arr = _parse_idx(_read_bytes(path), IDX_IMAGES_MAGIC, 3)
    scaled = arr.astype(np.float64) / 255.0
    return list(scaled)


def load_idx_labels(path) -> list[int]:
    return [int(v) for v in _parse_idx(_read_bytes(path), IDX_LABELS_MAGIC, 1)]


def write_idx_images(path, images: np.ndarray) -> None:
    images = np.asarray(images, dtype=np.uint8)
    Path(path).write_bytes(struct.pack(">4I", IDX_IMAGES_MAGIC, *images.shape) + images.tobytes())


def write_idx_labels(path, labels) -> None:
    labels = np.asarray(labels, dtype=np.uint8)
    Path(path).write_bytes(struct.pack(">2I", IDX_LABELS_MAGIC, len(labels)) + labels.tobytes())


@dataclass
class DatasetMnist:
    images: list[np.ndarray]
    labels: list[int]

    def __post_init__(self):
        if len(self.images) != len(self.labels):
            raise DatasetError(f"{len(self.images)} images but {len(self.labels)} labels")

    def of_class(self, digit: int, cap: int | None = None) -> list[np.ndarray]:
        out = [im for im, lab in zip(self.images, self.labels) if lab == digit]
        return out[:cap] if cap is not None else out


_MNIST_NAMES = {
    "train": ("train-images-idx3-ubyte", "train-labels-idx1-ubyte"),
    "test": ("t10k-images-idx3-ubyte", "t10k-labels-idx1-ubyte"),
}


def _find(directory: Path, stem: str) -> Path:
    for cand in (stem, stem + ".gz", stem.replace("-idx", ".idx")):
        p = directory / cand
        if p.exists():
            return p
    raise FileNotFoundError(f"no {stem}[.gz] in {directory}")


def load_mnist(directory, split: str = "train") -> DatasetMnist:
    directory = Path(directory)
    img_name, lab_name = _MNIST_NAMES[split]
    return DatasetMnist(load_idx_images(_find(directory, img_name)),
                        load_idx_labels(_find(directory, lab_name)))


# ---------------------------------------------------------------- synthetic data

@dataclass
class SyntheticPair:
    fixed: np.ndarray
    moving: np.ndarray
    truth_dvf: DisplacementField
    truth_grid: ControlGrid
    fixed_mask: np.ndarray | None = None
    moving_mask: np.ndarray | None = None


def ring_image(h: int = 28, w: int = 28, inner: float | None = None, outer: float | None = None,
               center: tuple[float, float] | None = None, blur: float = 1.0):
    """Smooth annulus image with a dimmer disc inside, and the annulus mask.

    A procedural stand-in for a short-axis myocardium slice.
    """
    cy, cx = center if center is not None else ((h - 1) / 2, (w - 1) / 2)
    s = min(h, w)
    inner = inner if inner is not None else 0.18 * s
    outer = outer if outer is not None else 0.32 * s
    yy, xx = np.mgrid[:h, :w]
    r = np.hypot(yy - cy, xx - cx)
    mask = (r >= inner) & (r <= outer)
    img = mask * 1.0 + 0.4 * (r < inner)
    img = ndimage.gaussian_filter(img, blur) if blur > 0 else img
    return np.clip(img, 0.0, 1.0), mask


def ring_family(n: int, h: int = 28, w: int = 28, seed: int = 0) -> list[tuple[np.ndarray, np.ndarray]]:
    """Rings with jittered centre and radii; a synthetic training pool."""
    rng = np.random.default_rng(seed)
    s = min(h, w)
    out = []
    for _ in range(n):
        c = ((h - 1) / 2 + rng.uniform(-0.08, 0.08) * s, (w - 1) / 2 + rng.uniform(-0.08, 0.08) * s)
        inner = rng.uniform(0.14, 0.22) * s
        outer = inner + rng.uniform(0.10, 0.16) * s
        out.append(ring_image(h, w, inner, outer, c))
    return out


def make_synthetic_pair(base: np.ndarray, max_disp: float, spacing: float, seed: int,
                        mask: np.ndarray | None = None,
                        order: SplineOrder = SplineOrder.CUBIC) -> SyntheticPair:
    """moving = warp(base, truth_dvf) for a random B-spline field with |phi| <= max_disp."""
    if max_disp < 0:
        raise ValueError("max_disp must be non-negative")
    base = np.asarray(base, dtype=np.float64)
    h, w = base.shape
    gh, gw = max(2, round(h / spacing)), max(2, round(w / spacing))
    rng = np.random.default_rng(seed)
    grid = ControlGrid.for_image(rng.uniform(-max_disp, max_disp, size=(2, gh, gw)), h, w)
    dvf = grid_to_dvf(grid, h, w, order)
    moving = warp(base, dvf)
    moving_mask = None
    if mask is not None:
        moving_mask = warp(np.asarray(mask, dtype=np.float64), dvf) >= 0.5
    return SyntheticPair(base, moving, dvf, grid, None if mask is None else np.asarray(mask, bool),
                         moving_mask)


# ---------------------------------------------------------------- PGM

def save_pgm(path, image: np.ndarray) -> None:
    img = np.asarray(image, dtype=np.float64)
    if img.ndim != 2:
        raise FormatError("PGM images must be 2-D")
    data = np.rint(np.clip(img, 0.0, 1.0) * 255.0).astype(np.uint8)
    h, w = data.shape
    Path(path).write_bytes(f"P5\n{w} {h}\n255\n".encode("ascii") + data.tobytes())


def _pgm_tokens(raw: bytes, count: int) -> tuple[list[int], int]:
    tokens: list[int] = []
    pos = 2
    while len(tokens) < count:
        while pos < len(raw) and raw[pos:pos + 1].isspace():
            pos += 1
        if raw[pos:pos + 1] == b"#":
            while pos < len(raw) and raw[pos:pos + 1] not in (b"\n", b"\r"):
                pos += 1
            continue
        start = pos
        while pos < len(raw) and raw[pos:pos + 1].isdigit():
            pos += 1
        if start == pos:
            raise FormatError("malformed PGM header")
        tokens.append(int(raw[start:pos]))
    return tokens, pos + 1


def load_pgm(path) -> np.ndarray:
    raw = Path(path).read_bytes()
    if raw[:2] != b"P5":
        raise FormatError(f"not a binary PGM (magic {raw[:2]!r})")
    (w, h, maxval), start = _pgm_tokens(raw, 3)
    if not 0 < maxval < 256:
        raise FormatError(f"unsupported PGM maxval {maxval}")
    if len(raw) - start != w * h:
        raise FormatError(f"PGM payload holds {len(raw) - start} bytes, header declares {w * h}")
    data = np.frombuffer(raw, dtype=np.uint8, offset=start).reshape(h, w)
    return data.astype(np.float64) / maxval


def load_mask(path) -> np.ndarray:
    return load_pgm(path) > 0


# ---------------------------------------------------------------- DVF

def save_dvf(path, dvf: DisplacementField) -> None:
    d = np.ascontiguousarray(dvf.d, dtype="<f8")
    Path(path).write_bytes(DVF_MAGIC + struct.pack("<2I", dvf.h, dvf.w) + d.tobytes())


def load_dvf(path) -> DisplacementField:
    raw = Path(path).read_bytes()
    if raw[:4] != DVF_MAGIC:
        raise FormatError(f"bad DVF magic {raw[:4]!r}")
    if len(raw) < 12:
        raise FormatError("truncated DVF header")
    h, w = struct.unpack("<2I", raw[4:12])
    if len(raw) - 12 != 2 * h * w * 8:
        raise FormatError(f"DVF payload holds {len(raw) - 12} bytes, header declares {2 * h * w * 8}")
    return DisplacementField(np.frombuffer(raw, dtype="<f8", offset=12).reshape(2, h, w).astype(np.float64))


# ---------------------------------------------------------------- checkpoints

def checkpoint_bytes(params: ModelParams, cfg: NetConfig) -> bytes:
    buf = io.BytesIO()
    conf = json.dumps(cfg.to_dict(), sort_keys=True).encode("utf-8")
    buf.write(CKPT_MAGIC + struct.pack("<I", CKPT_VERSION) + struct.pack("<I", len(conf)) + conf)
    buf.write(struct.pack("<I", len(params.entries)))
    for name, t in params:
        nb = name.encode("utf-8")
        buf.write(struct.pack("<H", len(nb)) + nb + struct.pack("<B", t.data.ndim))
        buf.write(struct.pack(f"<{t.data.ndim}I", *t.shape))
        buf.write(np.ascontiguousarray(t.data, dtype="<f8").tobytes())
    return buf.getvalue()


def save_checkpoint(path, params: ModelParams, cfg: NetConfig) -> None:
    Path(path).write_bytes(checkpoint_bytes(params, cfg))


class _Reader:
    def __init__(self, raw: bytes):
        self.raw, self.pos = raw, 0

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.raw):
            raise FormatError("checkpoint is truncated")
        out = self.raw[self.pos:self.pos + n]
        self.pos += n
        return out

    def unpack(self, fmt: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))


def parse_checkpoint(raw: bytes) -> tuple[ModelParams, NetConfig]:
    r = _Reader(raw)
    if r.take(4) != CKPT_MAGIC:
        raise FormatError("bad checkpoint magic")
    (version,) = r.unpack("<I")
    if version != CKPT_VERSION:
        raise FormatError(f"unsupported checkpoint version {version}")
    (clen,) = r.unpack("<I")
    try:
        cfg = NetConfig.from_dict(json.loads(r.take(clen).decode("utf-8")))
    except (ValueError, TypeError, KeyError) as exc:
        raise FormatError(f"bad checkpoint config block: {exc}") from exc
    skeleton = build(cfg, 0)
    (count,) = r.unpack("<I")
    if count != len(skeleton.entries):
        raise FormatError(f"checkpoint has {count} tensors, config implies {len(skeleton.entries)}")
    for _ in range(count):
        (nlen,) = r.unpack("<H")
        name = r.take(nlen).decode("utf-8")
        (rank,) = r.unpack("<B")
        dims = r.unpack(f"<{rank}I")
        if name not in skeleton or skeleton[name].shape != tuple(dims):
            raise FormatError(f"unexpected tensor {name!r} with shape {dims}")
        payload = r.take(8 * math.prod(dims))
        skeleton[name].data[...] = np.frombuffer(payload, dtype="<f8").reshape(dims)
    if r.pos != len(raw):
        raise FormatError(f"{len(raw) - r.pos} trailing bytes after the last tensor")
    return skeleton, cfg


def load_checkpoint(path) -> tuple[ModelParams, NetConfig]:
    return parse_checkpoint(Path(path).read_bytes())


# ---------------------------------------------------------------- CSV

def _fmt(v) -> str:
    if v is None:
        return ""
    return repr(float(v))


def write_metrics_csv(path, reports: Iterable) -> None:
    with open(path, "w", newline="") as fh:
        out = csv.writer(fh, lineterminator="\n")
        out.writerow(METRICS_HEADER)
        for r in reports:
            out.writerow([r.pair_id] + [_fmt(getattr(r, k)) for k in METRICS_HEADER[1:]])


def write_curve_csv(path, rows: Sequence[tuple[int, float, float]]) -> None:
    with open(path, "w", newline="") as fh:
        out = csv.writer(fh, lineterminator="\n")
        out.writerow(CURVE_HEADER)
        for it, tr, va in rows:
            out.writerow([it, _fmt(tr), _fmt(va)])


def read_curve_csv(path) -> list[tuple[int, float, float]]:
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    if tuple(rows[0]) != CURVE_HEADER:
        raise FormatError(f"unexpected curve header {rows[0]}")
    return [(int(a), float(b), float(c)) for a, b, c in rows[1:]]


@dataclass
class ManifestRow:
    fixed: Path
    moving: Path
    fixed_mask: Path | None
    moving_mask: Path | None


def read_manifest(path) -> list[ManifestRow]:
    """CSV with columns ``fixed,moving[,fixed_mask,moving_mask]``; relative paths resolve next to it."""
    path = Path(path)
    base = path.parent
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        if reader.fieldnames is None or not {"fixed", "moving"} <= set(reader.fieldnames):
            raise FormatError("manifest needs at least the columns fixed,moving")
        rows = []
        for rec in reader:
            def p(key):
                v = (rec.get(key) or "").strip()
                return (base / v) if v else None
            rows.append(ManifestRow(p("fixed"), p("moving"), p("fixed_mask"), p("moving_mask")))
    return rows
