"""Command-line entry point: ``m2mil {gen,train,eval,gradcheck,sweep,report}``."""

from __future__ import annotations

import argparse
import csv
import json
import logging
import os
import sys
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import replace
from pathlib import Path

import numpy as np
from threadpoolctl import threadpool_limits

from .gradsuite import run_suite
from .metrics import aggregate_folds, margin_stats, write_report
from .network import M2UNetNet
from .phantom import DatasetError, PhantomConfig, dataset_root_is_empty, generate_dataset, read_manifest
from .tensor import CheckpointError
from .trainer import (DESK_PROFILE, PAPER_PROFILE, TrainConfig, TrainingDivergedError, cross_validate, evaluate,
                      load_cases, make_folds, split_cases)

log = logging.getLogger("m2mil")

EXIT_OK = 0
EXIT_FAILURE = 1
EXIT_USAGE = 2
EXIT_NO_DATASET = 3
EXIT_NO_CHECKPOINT = 4
EXIT_BAD_DATASET = 5

THREADS_ENV = "M2MIL_THREADS"
PROFILES = {"desk": DESK_PROFILE, "paper": PAPER_PROFILE}


class CliError(Exception):
    def __init__(self, message: str, code: int):
        super().__init__(message)
        self.code = code


def worker_limit() -> int:
    """Parallelism cap from ``M2MIL_THREADS`` (default: CPU count)."""
    raw = os.environ.get(THREADS_ENV)
    if raw is None:
        return os.cpu_count() or 1
    try:
        n = int(raw)
    except ValueError:
        raise CliError(f"{THREADS_ENV} must be a positive integer, got {raw!r}", EXIT_USAGE) from None
    if n < 1:
        raise CliError(f"{THREADS_ENV} must be a positive integer, got {raw!r}", EXIT_USAGE)
    return n


def _grid(text: str) -> list[float]:
    try:
        vals = [float(v) for v in text.split(",") if v.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"not a comma-separated list of numbers: {text!r}") from None
    if not vals:
        raise argparse.ArgumentTypeError("grid is empty")
    return vals


def _folds(text: str) -> list[int] | None:
    if text == "all":
        return None
    try:
        return [int(v) for v in text.split(",")]
    except ValueError:
        raise argparse.ArgumentTypeError(f"folds must be 'all' or comma-separated integers, got {text!r}") from None


def _positive_int(text: str) -> int:
    v = int(text)
    if v < 1:
        raise argparse.ArgumentTypeError(f"expected a positive integer, got {text}")
    return v


def build_config(args) -> TrainConfig:
    """Profile defaults overridden by any explicit flag."""
    cfg = PROFILES[args.profile]
    optim = cfg.optim
    if args.lr is not None:
        optim = replace(optim, lr0=args.lr)
    if args.epochs is not None:
        optim = replace(optim, epochs=args.epochs)
    optim = replace(optim, seed=args.seed)
    loss = cfg.loss if args.lam is None else replace(cfg.loss, lam=args.lam)
    cfg = replace(cfg, optim=optim, loss=loss, eval_draws=args.eval_draws)
    if args.bag_size is not None:
        cfg = replace(cfg, bag_size=args.bag_size)
    if args.patch_size is not None:
        cfg = replace(cfg, patch_size=args.patch_size)
    return cfg


def _write_snapshot(out: Path, command: str, payload: dict) -> None:
    out.mkdir(parents=True, exist_ok=True)
    (out / "config.json").write_text(json.dumps({"command": command, **payload}, indent=1, sort_keys=True))


def _load_dataset(root, crop_min_size: int):
    root = Path(root)
    if not (root / "manifest.json").is_file():
        raise CliError(f"no dataset at {root} (manifest.json missing)", EXIT_NO_DATASET)
    try:
        records = read_manifest(root)
        cases = load_cases(root, records, crop_min_size)
    except (DatasetError, FileNotFoundError) as exc:
        raise CliError(f"dataset at {root} is unreadable: {exc}", EXIT_BAD_DATASET) from exc
    return records, cases


# ---------------------------------------------------------------------------
# subcommands


def cmd_gen(args) -> int:
    if args.cases < 1:
        raise CliError("--cases must be at least 1", EXIT_USAGE)
    root = Path(args.out)
    if not args.force and not dataset_root_is_empty(root):
        raise CliError(f"{root} is not empty; pass --force to overwrite", EXIT_USAGE)
    config = PhantomConfig(tau=args.tau)
    records = generate_dataset(root, args.cases, seed=args.seed, mask_fraction=args.mask_fraction, config=config)
    _write_snapshot(root, "gen", {"cases": args.cases, "seed": args.seed, "mask_fraction": args.mask_fraction,
                                  "phantom": config.to_dict()})
    n_severe = sum(r.severe for r in records)
    n_mask = sum(r.mask_path is not None for r in records)
    print(f"{len(records)} cases: {n_severe} severe ({n_severe / len(records):.1%}), "
          f"{len(records) - n_severe} non-severe; {n_mask} with lobe masks")
    return EXIT_OK


def _run_cv(cfg: TrainConfig, data, out: Path, folds, fold_seed: int) -> dict:
    records, cases = _load_dataset(data, cfg.crop_min_size)
    try:
        plan = make_folds(records, seed=fold_seed)
    except ValueError as exc:
        raise CliError(f"dataset at {data} cannot be split into folds: {exc}", EXIT_BAD_DATASET) from exc
    (out / "folds.json").write_text(json.dumps(plan.to_dict(), indent=1))
    with threadpool_limits(worker_limit()):
        result = cross_validate(cases, cfg, plan, out, folds)
    summary = {"folds": result["folds"], "aggregate": result["aggregate"]}
    (out / "summary.json").write_text(json.dumps(summary, indent=1, sort_keys=True))
    return result


def cmd_train(args) -> int:
    cfg = build_config(args)
    out = Path(args.out)
    _write_snapshot(out, "train", {"data": str(args.data), "folds": args.folds, "train": cfg.to_dict()})
    t0 = time.perf_counter()
    result = _run_cv(cfg, args.data, out, args.folds, args.seed)
    (out / "timing.json").write_text(json.dumps({"seconds": time.perf_counter() - t0}))
    _print_aggregate(result["aggregate"])
    return EXIT_OK


def cmd_eval(args) -> int:
    ckpt = Path(args.checkpoint)
    if not ckpt.is_file():
        raise CliError(f"checkpoint {ckpt} not found", EXIT_NO_CHECKPOINT)
    try:
        net, meta = M2UNetNet.load(ckpt)
    except CheckpointError as exc:
        raise CliError(f"checkpoint {ckpt} is unreadable: {exc}", EXIT_NO_CHECKPOINT) from exc
    cfg = TrainConfig.from_dict(meta["config"])
    cfg = replace(cfg, eval_draws=args.eval_draws)
    records, cases = _load_dataset(args.data, cfg.crop_min_size)
    if args.split == "all":
        subset = cases
    else:
        fold = args.fold if args.fold is not None else int(meta.get("fold", 0))
        subset = split_cases(cases, make_folds(records, seed=int(meta.get("fold_seed", 0))), fold)[args.split]
    out = Path(args.out)
    _write_snapshot(out, "eval", {"data": str(args.data), "checkpoint": str(ckpt), "split": args.split,
                                  "fold": args.fold, "eval_draws": args.eval_draws})
    with threadpool_limits(worker_limit()):
        report = evaluate(net, subset, cfg, seed=args.seed, classify=cfg.loss.lam > 0)
    write_report(out, "eval_report", report)
    for k, v in sorted(report.flat().items()):
        print(f"{k:10s} {'n/a' if v is None else f'{v:.4f}'}")
    return EXIT_OK


def cmd_gradcheck(args) -> int:
    results = run_suite(n_points=args.points, seed=args.seed)
    print(f"{'component':10s} {'max rel err':>12s} {'points':>6s} {'seconds':>8s}  status")
    for r in results:
        print(f"{r.name:10s} {r.max_rel_error:12.3e} {r.n_points:6d} {r.seconds:8.2f}  {'PASS' if r.passed else 'FAIL'}")
    if args.out:
        out = Path(args.out)
        _write_snapshot(out, "gradcheck", {"points": args.points, "seed": args.seed})
        with open(out / "gradcheck.csv", "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["component", "max_rel_error", "points", "passed"])
            w.writerows([[r.name, r.max_rel_error, r.n_points, int(r.passed)] for r in results])
    return EXIT_OK if all(r.passed for r in results) else EXIT_FAILURE


def _sweep_cell(cfg: TrainConfig, data: str, out: str, folds, fold_seed: int) -> dict:
    out = Path(out)
    out.mkdir(parents=True, exist_ok=True)
    _write_snapshot(out, "sweep-cell", {"data": data, "folds": folds, "train": cfg.to_dict()})
    result = _run_cv(cfg, data, out, folds, fold_seed)
    margins = [m for rep in result["reports"] for m in rep.margins.get("margins", [])]
    with open(out / "margins.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["margin"])
        w.writerows([[m] for m in margins])
    return result["aggregate"]


def cmd_sweep(args) -> int:
    base = build_config(args)
    out = Path(args.out)
    lams = args.lambda_grid or [base.loss.lam]
    lrs = args.lr_grid or [base.optim.lr0]
    _write_snapshot(out, "sweep", {"data": str(args.data), "lambda_grid": lams, "lr_grid": lrs,
                                   "folds": args.folds, "base": base.to_dict()})
    _load_dataset(args.data, base.crop_min_size)  # fail fast before spawning workers
    cells = []
    for lam in lams:
        for lr in lrs:
            cfg = replace(base, loss=replace(base.loss, lam=lam), optim=replace(base.optim, lr0=lr))
            cells.append((lam, lr, cfg, str(out / f"lam{lam:g}_lr{lr:g}")))
    workers = min(worker_limit(), len(cells))
    if workers > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            futures = [pool.submit(_sweep_cell, cfg, str(args.data), d, args.folds, args.seed) for _, _, cfg, d in cells]
            aggs = [f.result() for f in futures]
    else:
        aggs = [_sweep_cell(cfg, str(args.data), d, args.folds, args.seed) for _, _, cfg, d in cells]
    keys = ("accuracy", "f1", "auc", "dsc")
    with open(out / "sweep_summary.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["lambda", "lr"] + [f"{k}_{s}" for k in keys for s in ("mean", "std")])
        for (lam, lr, _, _), agg in zip(cells, aggs):
            row = [lam, lr]
            for k in keys:
                row += [agg[k]["mean"], agg[k]["std"]] if k in agg else ["", ""]
            w.writerow(row)
            print(f"lambda={lam:g} lr={lr:g} " + " ".join(
                f"{k}={agg[k]['mean']:.3f}" for k in keys if k in agg))
    return EXIT_OK


def cmd_report(args) -> int:
    rows = []
    for run in args.runs:
        run = Path(run)
        fold_reports = sorted(run.glob("fold*/test_report.json"))
        if not fold_reports:
            raise CliError(f"no fold reports under {run}", EXIT_NO_DATASET)
        flats, margins = [], []
        for path in fold_reports:
            rep = json.loads(path.read_text())
            flat = dict(rep["classification"])
            flat["auc"] = rep["auc"]
            flat.update(rep["segmentation"])
            flats.append(flat)
            margins += rep["margins"].get("margins", [])
        agg = aggregate_folds(flats)
        rows.append((run, agg, margins))
    out = Path(args.out)
    _write_snapshot(out, "report", {"runs": [str(r) for r in args.runs]})
    with open(out / "report.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["run", "metric", "mean", "std", "n"])
        for run, agg, _ in rows:
            for k, v in sorted(agg.items()):
                w.writerow([str(run), k, v["mean"], v["std"], v["n"]])
    report = {}
    for run, agg, margins in rows:
        report[str(run)] = {"aggregate": agg}
        if margins:
            m = margin_stats(np.asarray(margins), np.zeros(len(margins)))
            report[str(run)]["margins"] = {k: m[k] for k in ("q1", "median", "q3", "whisker_low", "whisker_high",
                                                            "n_correct", "n")}
        print(run)
        _print_aggregate(agg)
    (out / "report.json").write_text(json.dumps(report, indent=1, sort_keys=True))
    return EXIT_OK


def _print_aggregate(agg: dict) -> None:
    for k in ("accuracy", "precision", "recall", "f1", "auc", "dsc", "sen", "ppv"):
        if k in agg:
            print(f"  {k:10s} {agg[k]['mean']:.3f} ± {agg[k]['std']:.3f}")


# ---------------------------------------------------------------------------
# parser


def _add_train_flags(p) -> None:
    p.add_argument("--data", required=True, help="dataset root written by `gen`")
    p.add_argument("--profile", choices=sorted(PROFILES), default="paper",
                   help="defaults bundle; 'desk' is bag 32, 20 epochs, reduced widths")
    p.add_argument("--lambda", dest="lam", type=float, default=None, help="MIL loss weight (default 0.01)")
    p.add_argument("--lr", type=float, default=None, help="initial learning rate (default 0.01)")
    p.add_argument("--epochs", type=_positive_int, default=None)
    p.add_argument("--bag-size", type=_positive_int, default=None)
    p.add_argument("--patch-size", type=_positive_int, default=None)
    p.add_argument("--folds", type=_folds, default=None, help="'all' (default) or e.g. 0,2")
    p.add_argument("--eval-draws", type=_positive_int, default=1)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="m2mil", description=__doc__)
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen", help="generate a phantom dataset")
    p.add_argument("--out", required=True, help="dataset root")
    p.add_argument("--cases", type=int, default=120)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--mask-fraction", type=float, default=0.3)
    p.add_argument("--tau", type=float, default=0.15)
    p.add_argument("--force", action="store_true")
    p.set_defaults(func=cmd_gen)

    p = sub.add_parser("train", help="five-fold cross-validated training")
    _add_train_flags(p)
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="evaluate a checkpoint")
    p.add_argument("--data", required=True)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--split", choices=("test", "val", "train", "all"), default="test")
    p.add_argument("--fold", type=int, default=None, help="defaults to the checkpoint's fold")
    p.add_argument("--eval-draws", type=_positive_int, default=1)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("gradcheck", help="finite-difference gradient suite")
    p.add_argument("--points", type=_positive_int, default=20)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", default=None)
    p.set_defaults(func=cmd_gradcheck)

    p = sub.add_parser("sweep", help="grid over lambda and learning rate")
    _add_train_flags(p)
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--lambda-grid", type=_grid, default=None)
    p.add_argument("--lr-grid", type=_grid, default=None)
    p.set_defaults(func=cmd_sweep)

    p = sub.add_parser("report", help="aggregate fold reports of one or more runs")
    p.add_argument("runs", nargs="+", help="output directories of `train` or sweep cells")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_report)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(asctime)s %(name)s %(levelname)s %(message)s")
    try:
        return args.func(args)
    except CliError as exc:
        print(f"m2mil {args.command}: {exc}", file=sys.stderr)
        return exc.code
    except TrainingDivergedError as exc:
        print(f"m2mil {args.command}: training diverged: {exc}", file=sys.stderr)
        return EXIT_FAILURE


if __name__ == "__main__":
    sys.exit(main())
