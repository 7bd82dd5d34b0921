"""``dirnet`` command line: train, register, baseline, evaluate, gradcheck.

Exit codes: 0 success, 1 usage error, 2 data/format error, 3 numeric failure.
"""
from __future__ import annotations

import argparse
import csv
import json
import logging
import sys
from pathlib import Path

import numpy as np

from . import data_io
from .gradcheck import run_suite
from .network import ConfigError, preset_config, register_pair
from .tensorcore import NonFiniteGradientError, ShapeError, UsageError
from .training import (EvalPair, NumericFailure, TrainConfig, aggregate, baseline_registrar,
                       evaluate_registration, format_aggregate, iterative_baseline,
                       network_registrar, split_train_val, train)
from .transformer import SplineOrder

log = logging.getLogger("dirnet")

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 0, 1, 2, 3


class _Usage(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise _Usage(f"{self.prog}: error: {message}")


def _parser() -> argparse.ArgumentParser:
    p = _Parser(prog="dirnet", description=__doc__.splitlines()[0])
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    t = sub.add_parser("train", help="train a regressor on one image pool")
    t.add_argument("--dataset", choices=["mnist", "rings"], required=True)
    t.add_argument("--data-dir", default="data/mnist", help="directory with the MNIST IDX files")
    t.add_argument("--digit", type=int, help="digit class to train on (mnist)")
    t.add_argument("--pool-cap", type=int, help="use at most this many images of the class")
    t.add_argument("--preset", default="mnist")
    t.add_argument("--iters", type=int, default=5000)
    t.add_argument("--batch", type=int, default=32)
    t.add_argument("--lr", type=float, default=1e-3)
    t.add_argument("--validation-every", type=int, default=100)
    t.add_argument("--seed", type=int, default=0)
    t.add_argument("--out-ckpt", required=True)
    t.add_argument("--out-curve", required=True)

    r = sub.add_parser("register", help="one-pass registration with a trained checkpoint")
    r.add_argument("--ckpt", required=True)
    r.add_argument("--fixed", required=True)
    r.add_argument("--moving", required=True)
    r.add_argument("--out-warped", required=True)
    r.add_argument("--out-dvf", required=True)

    b = sub.add_parser("baseline", help="iterative per-pair B-spline registration")
    b.add_argument("--fixed", required=True)
    b.add_argument("--moving", required=True)
    _baseline_flags(b)
    b.add_argument("--out-warped", required=True)
    b.add_argument("--out-dvf", required=True)

    e = sub.add_parser("evaluate", help="score registrations listed in a manifest")
    e.add_argument("--ckpt", help="checkpoint; without it the iterative baseline is used")
    _baseline_flags(e)
    e.add_argument("--pairs", required=True, help="manifest CSV: fixed,moving[,fixed_mask,moving_mask]")
    e.add_argument("--pixel-size", type=float, default=1.0)
    e.add_argument("--out-csv", required=True)
    e.add_argument("--emit-average", help="write the mean warped image as PGM")

    g = sub.add_parser("gradcheck", help="finite-difference checks of every adjoint")
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--seeds-per-op", type=int, default=20)
    g.add_argument("--report", required=True)
    return p


def _baseline_flags(p):
    p.add_argument("--spacing", type=float, default=4.0)
    p.add_argument("--order", choices=[o.value for o in SplineOrder], default="cubic")
    p.add_argument("--iters", type=int, default=300)
    p.add_argument("--lr", type=float, default=0.1)
    p.add_argument("--multiresolution", action="store_true")


def _need(*paths):
    for path in paths:
        if path is not None and not Path(path).exists():
            raise FileNotFoundError(f"input not found: {path}")


def _need_dir(*paths):
    for path in paths:
        parent = Path(path).resolve().parent
        if not parent.is_dir():
            raise _Usage(f"output directory does not exist: {parent}")


def _load_pair(fixed, moving):
    f, m = data_io.load_pgm(fixed), data_io.load_pgm(moving)
    if f.shape != m.shape:
        raise ShapeError(f"fixed {f.shape} and moving {m.shape} differ in size")
    return f, m


def cmd_train(a) -> int:
    _need_dir(a.out_ckpt, a.out_curve)
    if a.dataset == "mnist":
        if a.digit is None:
            raise _Usage("--digit is required for --dataset mnist")
        pool = data_io.load_mnist(a.data_dir, "train").of_class(a.digit, a.pool_cap)
    else:
        pool = [img for img, _ in data_io.ring_family(a.pool_cap or 600, seed=a.seed)]
    train_pool, val_pool = split_train_val(pool, a.seed)
    cfg = TrainConfig(net=preset_config(a.preset), batch_size=a.batch, iterations=a.iters,
                      lr=a.lr, seed=a.seed, validation_every=a.validation_every)
    log.info("train config %s", json.dumps({**cfg.to_dict(), "dataset": a.dataset, "digit": a.digit,
                                            "pool": len(pool)}, sort_keys=True))
    params, curve = train(train_pool, val_pool, cfg)
    data_io.save_checkpoint(a.out_ckpt, params, cfg.net)
    data_io.write_curve_csv(a.out_curve, curve.rows)
    return EXIT_OK


def cmd_register(a) -> int:
    _need(a.ckpt, a.fixed, a.moving)
    _need_dir(a.out_warped, a.out_dvf)
    params, cfg = data_io.load_checkpoint(a.ckpt)
    fixed, moving = _load_pair(a.fixed, a.moving)
    res = register_pair(params, cfg, fixed, moving)
    log.info("loss %.6f", res.loss)
    data_io.save_pgm(a.out_warped, res.warped)
    data_io.save_dvf(a.out_dvf, res.dvf)
    return EXIT_OK


def _baseline_kwargs(a) -> dict:
    return dict(spacing=a.spacing, order=SplineOrder(a.order), iters=a.iters, lr=a.lr,
                multiresolution=a.multiresolution)


def cmd_baseline(a) -> int:
    _need(a.fixed, a.moving)
    _need_dir(a.out_warped, a.out_dvf)
    fixed, moving = _load_pair(a.fixed, a.moving)
    res = iterative_baseline(fixed, moving, **_baseline_kwargs(a))
    log.info("loss %.6f", res.loss)
    data_io.save_pgm(a.out_warped, res.warped)
    data_io.save_dvf(a.out_dvf, res.dvf)
    return EXIT_OK


def cmd_evaluate(a) -> int:
    _need(a.ckpt, a.pairs)
    _need_dir(a.out_csv, *([a.emit_average] if a.emit_average else []))
    rows = data_io.read_manifest(a.pairs)
    for row in rows:
        _need(row.fixed, row.moving, row.fixed_mask, row.moving_mask)
    if a.ckpt:
        params, cfg = data_io.load_checkpoint(a.ckpt)
        registrar = network_registrar(params, cfg)
    else:
        registrar = baseline_registrar(**_baseline_kwargs(a))
    pairs = []
    for i, row in enumerate(rows):
        f, m = _load_pair(row.fixed, row.moving)
        fm = data_io.load_mask(row.fixed_mask) if row.fixed_mask else None
        mm = data_io.load_mask(row.moving_mask) if row.moving_mask else None
        pairs.append(EvalPair(str(i), f, m, fm, mm))
    warped_sum = []

    def recording(fixed, moving):
        res = registrar(fixed, moving)
        warped_sum.append(res.warped)
        return res

    reports = evaluate_registration(recording, pairs, a.pixel_size)
    data_io.write_metrics_csv(a.out_csv, reports)
    log.info("aggregate %s", format_aggregate(aggregate(reports)))
    if a.emit_average and warped_sum:
        data_io.save_pgm(a.emit_average, np.mean(warped_sum, axis=0))
    return EXIT_OK


def cmd_gradcheck(a) -> int:
    _need_dir(a.report)
    rows = run_suite(a.seed, a.seeds_per_op, a.seeds_per_op)
    with open(a.report, "w", newline="") as fh:
        out = csv.writer(fh, lineterminator="\n")
        out.writerow(["op", "seed", "rel_error", "threshold", "passed"])
        for r in rows:
            out.writerow([r.op, r.seed, repr(r.rel_error), repr(r.threshold), int(r.passed)])
    failed = [r for r in rows if not r.passed]
    for r in failed:
        log.error("gradient check failed: %s seed %d rel error %.3e", r.op, r.seed, r.rel_error)
    log.info("%d/%d gradient checks passed", len(rows) - len(failed), len(rows))
    # the exit status reflects the op-level checks; end-to-end rows are reported only
    return EXIT_NUMERIC if any(r.op != "end_to_end" for r in failed) else EXIT_OK


COMMANDS = {"train": cmd_train, "register": cmd_register, "baseline": cmd_baseline,
            "evaluate": cmd_evaluate, "gradcheck": cmd_gradcheck}


def main(argv=None) -> int:
    try:
        args = _parser().parse_args(argv)
    except _Usage as exc:
        print(exc, file=sys.stderr)
        return EXIT_USAGE
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.INFO,
                        format="%(levelname)s %(name)s: %(message)s", stream=sys.stderr)
    log.info("resolved arguments %s", json.dumps(vars(args), sort_keys=True))
    try:
        return COMMANDS[args.command](args)
    except _Usage as exc:
        print(f"dirnet: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (UsageError, ConfigError) as exc:
        print(f"dirnet: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (NumericFailure, NonFiniteGradientError, FloatingPointError) as exc:
        print(f"dirnet: numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (OSError, ValueError) as exc:
        print(f"dirnet: data error: {exc}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
