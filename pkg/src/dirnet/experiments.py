"""Scaled-down experiment protocols shared by the scripts and the acceptance suite."""
from __future__ import annotations

import time
from dataclasses import dataclass, field

import numpy as np

from . import data_io
from .lossmetrics import ncc
from .network import preset_config, register_batch
from .resampler import invert_dvf
from .tensorcore import ModelParams
from .training import LearningCurve, PairSampler, TrainConfig, split_train_val, train

POOL_CAP = 500
HELD_OUT = 100


@dataclass(frozen=True)
class DeskConfig:
    digit: int = 4
    iterations: int = 1000
    batch_size: int = 32
    seed: int = 7
    test_pairs: int = 100
    pool_cap: int = POOL_CAP
    held_out: int = HELD_OUT


@dataclass
class DeskResult:
    params: ModelParams
    curve: LearningCurve
    train_cfg: TrainConfig
    ncc_before: np.ndarray
    ncc_after: np.ndarray
    seconds: float
    test_fixed: np.ndarray = field(repr=False)
    test_moving: np.ndarray = field(repr=False)

    @property
    def improvement(self) -> float:
        return float(np.mean(self.ncc_after - self.ncc_before))


def split_class_pool(images, cfg: DeskConfig):
    """First ``pool_cap`` class images; the last ``held_out`` of them never reach training."""
    pool = list(images[:cfg.pool_cap])
    if len(pool) <= cfg.held_out + 6:
        raise data_io.DatasetError(f"class pool of {len(pool)} images is too small")
    fit, test = pool[:-cfg.held_out], pool[-cfg.held_out:]
    tr, va = split_train_val(fit, cfg.seed)
    return tr, va, test


def mnist_desk_run(data_dir, cfg: DeskConfig = DeskConfig(), progress=None) -> DeskResult:
    ds = data_io.load_mnist(data_dir, "train")
    tr, va, test = split_class_pool(ds.of_class(cfg.digit), cfg)
    tcfg = TrainConfig(net=preset_config("mnist"), batch_size=cfg.batch_size, iterations=cfg.iterations,
                       seed=cfg.seed)
    start = time.perf_counter()
    params, curve = train(tr, va, tcfg, progress)
    seconds = time.perf_counter() - start
    f, m, _ = PairSampler(test, np.random.default_rng([cfg.seed, 2])).draw(cfg.test_pairs)
    results = register_batch(params, tcfg.net, f, m)
    before = np.array([ncc(a, b) for a, b in zip(f, m)])
    after = np.array([ncc(a, r.warped) for a, r in zip(f, results)])
    return DeskResult(params, curve, tcfg, before, after, seconds, f, m)


def endpoint_error(recovered: np.ndarray, truth_dvf, mask: np.ndarray | None = None) -> float:
    """Mean endpoint error of a recovered field against the inverse of the generating field.

    With ``mask`` the mean is taken over its pixels only; flat image regions
    leave the field unconstrained and would otherwise dominate the average.
    """
    err = np.hypot(*(recovered - invert_dvf(truth_dvf).d))
    return float(err[mask].mean() if mask is not None else err.mean())
