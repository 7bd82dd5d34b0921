"""Regressor training and the iterative per-pair baseline, plus evaluation helpers."""
from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from . import tensorcore as tc
from .lossmetrics import MetricError, MetricReport, dice, ncc, ncc_batch, ncc_loss, \
    surface_distances, warp_mask
from .network import NetConfig, RegistrationResult, build, pipeline, preset_config, register_batch
from .resampler import warp_batch
from .tensorcore import ModelParams, Tape, Tensor, UsageError
from .transformer import ControlGrid, DisplacementField, SplineOrder, dvf_batch

log = logging.getLogger(__name__)


class NumericFailure(FloatingPointError):
    pass


def split_train_val(images: Sequence, seed: int) -> tuple[list, list]:
    """Seeded shuffle, one sixth (rounded) held out for validation."""
    n = len(images)
    if n < 6:
        raise UsageError("need at least 6 images to split off a validation sixth")
    order = np.random.default_rng(seed).permutation(n)
    n_val = int(round(n / 6))
    val = [images[i] for i in order[:n_val]]
    train = [images[i] for i in order[n_val:]]
    return train, val


class PairSampler:
    """Uniform draws of ordered (fixed, moving) index pairs with fixed != moving."""

    def __init__(self, pool: Sequence, rng: np.random.Generator):
        if len(pool) < 2:
            raise UsageError("a pair pool needs at least 2 images")
        self.pool = pool
        self.rng = rng

    def draw_indices(self, k: int) -> np.ndarray:
        n = len(self.pool)
        i = self.rng.integers(0, n, size=k)
        j = self.rng.integers(0, n - 1, size=k)
        j = j + (j >= i)
        return np.stack([i, j], axis=1)

    def draw(self, k: int) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        idx = self.draw_indices(k)
        fixed = np.stack([self.pool[a] for a in idx[:, 0]])
        moving = np.stack([self.pool[b] for b in idx[:, 1]])
        return fixed, moving, idx


@dataclass(frozen=True)
class TrainConfig:
    net: NetConfig = field(default_factory=lambda: preset_config("mnist"))
    batch_size: int = 32
    iterations: int = 5000
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    seed: int = 0
    validation_every: int = 100
    validation_pairs: int = 256

    def __post_init__(self):
        if self.batch_size < 1 or self.iterations < 1 or self.validation_every < 1:
            raise UsageError("batch_size, iterations and validation_every must be >= 1")
        if not self.lr > 0:
            raise UsageError("learning rate must be positive")

    def to_dict(self) -> dict:
        d = {k: getattr(self, k) for k in self.__dataclass_fields__ if k != "net"}
        d["net"] = self.net.to_dict()
        return d


@dataclass
class LearningCurve:
    rows: list[tuple[int, float, float]] = field(default_factory=list)

    def add(self, iteration: int, train_loss: float, val_loss: float) -> None:
        if self.rows and iteration <= self.rows[-1][0]:
            raise ValueError("learning curve iterations must increase")
        self.rows.append((iteration, train_loss, val_loss))

    @property
    def val_losses(self) -> list[float]:
        return [r[2] for r in self.rows]


def validation_loss(params: ModelParams, cfg: NetConfig, fixed: np.ndarray, moving: np.ndarray,
                    chunk: int = 64) -> float:
    total = 0.0
    for s in range(0, len(fixed), chunk):
        out = pipeline(params, cfg, fixed[s:s + chunk], moving[s:s + chunk], train=False)
        total += float(out.loss.data) * len(fixed[s:s + chunk])
    return total / len(fixed)


def train_step(params: ModelParams, cfg: TrainConfig, fixed: np.ndarray, moving: np.ndarray) -> float:
    params.zero_grad()
    with Tape() as tape:
        out = pipeline(params, cfg.net, fixed, moving, train=True)
    loss = float(out.loss.data)
    if not math.isfinite(loss):
        raise NumericFailure(f"non-finite training loss {loss}")
    tape.backward(out.loss)
    tc.adam_step(params, params.grads(), cfg.lr, cfg.beta1, cfg.beta2, cfg.eps)
    return loss


def train(train_pool: Sequence[np.ndarray], val_pool: Sequence[np.ndarray], cfg: TrainConfig,
          progress: Callable[[int, float, float], None] | None = None) -> tuple[ModelParams, LearningCurve]:
    """Mini-batch Adam on mean -NCC over random same-pool pairs.

    Validation pairs are drawn once from ``val_pool`` and scored in inference
    mode at iteration 0, every ``validation_every`` steps, and at the end.
    """
    rng = np.random.default_rng(cfg.seed)
    params = build(cfg.net, int(rng.integers(2 ** 31)))
    sampler = PairSampler(train_pool, rng)
    val_rng = np.random.default_rng([cfg.seed, 1])
    vf, vm, _ = PairSampler(val_pool, val_rng).draw(cfg.validation_pairs)
    curve = LearningCurve()
    window: list[float] = []
    val0 = validation_loss(params, cfg.net, vf, vm)
    for step in range(1, cfg.iterations + 1):
        fixed, moving, idx = sampler.draw(cfg.batch_size)
        try:
            loss = train_step(params, cfg, fixed, moving)
        except (NumericFailure, tc.NonFiniteGradientError) as exc:
            raise NumericFailure(f"iteration {step}: {exc}; pairs {idx.tolist()}") from exc
        if step == 1:
            curve.add(0, loss, val0)
        window.append(loss)
        if step % cfg.validation_every == 0 or step == cfg.iterations:
            row = (step, float(np.mean(window)), validation_loss(params, cfg.net, vf, vm))
            curve.add(*row)
            window = []
            log.info("iter %d train %.5f val %.5f", *row)
            if progress is not None:
                progress(*row)
    return params, curve


# ---------------------------------------------------------------- iterative baseline

def _half(img: np.ndarray) -> np.ndarray:
    return tc.avg_pool2x(Tensor(img[None, None])).data[0, 0]


def _optimize_grid(fixed, moving, phi0, order, iters, lr, beta1=0.9, beta2=0.999, eps=1e-8):
    params = ModelParams()
    phi = params.add("phi", phi0[None])
    f, m = fixed[None], Tensor(moving[None])
    h, w = fixed.shape
    best = (math.inf, phi0.copy())
    for it in range(iters + 1):
        params.zero_grad()
        with Tape() as tape:
            loss = ncc_loss(f, warp_batch(m, dvf_batch(phi, h, w, order)))
        value = float(loss.data)
        if not math.isfinite(value):
            raise NumericFailure(f"baseline iteration {it}: non-finite loss")
        if value < best[0]:
            best = (value, phi.data[0].copy())
        if it == iters:
            break
        tape.backward(loss)
        tc.adam_step(params, params.grads(), lr, beta1, beta2, eps)
    return best


def iterative_baseline(fixed: np.ndarray, moving: np.ndarray, spacing: float = 4.0,
                       order: SplineOrder = SplineOrder.CUBIC, iters: int = 300, lr: float = 0.1,
                       multiresolution: bool = False) -> RegistrationResult:
    """Direct Adam optimisation of control-point displacements against -NCC.

    The grid has ``round(dim / spacing)`` points per axis starting from the
    identity; the best iterate seen is returned. With ``multiresolution`` the
    first half of the iterations run on 2x-downsampled images.
    """
    if not spacing > 0 or iters < 1:
        raise UsageError("spacing must be positive and iters >= 1")
    fixed = np.asarray(fixed, dtype=np.float64)
    moving = np.asarray(moving, dtype=np.float64)
    h, w = fixed.shape
    gh, gw = max(2, round(h / spacing)), max(2, round(w / spacing))
    phi = np.zeros((2, gh, gw))
    if multiresolution and min(h, w) >= 4:
        coarse_iters = iters // 2
        fh, mh = _half(fixed), _half(moving)
        _, phi_half = _optimize_grid(fh, mh, phi, order, coarse_iters, lr / 2)
        phi = phi_half * np.array([h / fh.shape[0], w / fh.shape[1]])[:, None, None]
        iters -= coarse_iters
    loss, phi = _optimize_grid(fixed, moving, phi, order, iters, lr)
    grid = ControlGrid.for_image(phi, h, w)
    dvf = dvf_batch(Tensor(phi[None]), h, w, order).data[0]
    warped = warp_batch(Tensor(moving[None]), Tensor(dvf[None])).data[0]
    return RegistrationResult(warped, DisplacementField(dvf), grid, loss)


# ---------------------------------------------------------------- evaluation

@dataclass
class EvalPair:
    pair_id: str
    fixed: np.ndarray
    moving: np.ndarray
    fixed_mask: np.ndarray | None = None
    moving_mask: np.ndarray | None = None


Registrar = Callable[[np.ndarray, np.ndarray], RegistrationResult]


def network_registrar(params: ModelParams, cfg: NetConfig) -> Registrar:
    def run(fixed, moving):
        return register_batch(params, cfg, fixed[None], moving[None])[0]
    return run


def baseline_registrar(**kwargs) -> Registrar:
    def run(fixed, moving):
        return iterative_baseline(fixed, moving, **kwargs)
    return run


def score_pair(pair: EvalPair, result: RegistrationResult, pixel_size: float = 1.0) -> MetricReport:
    report = MetricReport(pair.pair_id, ncc(pair.fixed, pair.moving), ncc(pair.fixed, result.warped))
    if pair.fixed_mask is not None and pair.moving_mask is not None:
        warped_mask = warp_mask(pair.moving_mask, result.dvf)
        report.dice = dice(warped_mask, pair.fixed_mask)
        try:
            report.mad, report.sd95 = surface_distances(warped_mask, pair.fixed_mask, pixel_size)
        except MetricError as exc:
            report.error = str(exc)
    return report


def evaluate_registration(registrar: Registrar, pairs: Sequence[EvalPair],
                          pixel_size: float = 1.0) -> list[MetricReport]:
    reports = []
    for pair in pairs:
        try:
            result = registrar(pair.fixed, pair.moving)
            reports.append(score_pair(pair, result, pixel_size))
        except (MetricError, ValueError) as exc:
            log.warning("pair %s failed: %s", pair.pair_id, exc)
            reports.append(MetricReport(pair.pair_id, math.nan, math.nan, error=str(exc)))
    return reports


def aggregate(reports: Sequence[MetricReport]) -> dict[str, tuple[float, float, int]]:
    """mean, std and count per metric over the reports without errors."""
    good = [r for r in reports if r.error is None]
    out = {}
    for key in ("ncc_before", "ncc_after", "dice", "mad", "sd95"):
        vals = np.array([getattr(r, key) for r in good if getattr(r, key) is not None], dtype=float)
        out[key] = (float(vals.mean()), float(vals.std()), len(vals)) if len(vals) else (math.nan, math.nan, 0)
    return out


def format_aggregate(agg: dict[str, tuple[float, float, int]]) -> str:
    return "  ".join(f"{k} {m:.2f}±{s:.2f}" for k, (m, s, n) in agg.items() if n)
