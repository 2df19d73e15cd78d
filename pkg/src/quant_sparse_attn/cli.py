"""Command-line driver: allocate, buckets, run, bench, plan."""

from __future__ import annotations

import argparse
import csv
import dataclasses
import json
import logging
import sys
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from quant_sparse_attn.bucketing import ScalePair, build_grid, calibrate_center, per_axis_for_count, save_grid
from quant_sparse_attn.config import ExperimentConfig, load_config
from quant_sparse_attn.experiment import (
    bench_experiment,
    calibration_grid,
    pipeline_profile,
    plan_report,
    run_experiment,
)
from quant_sparse_attn.pipeline import load_profile, save_profile
from quant_sparse_attn.sparsity_alloc import allocate_ratios, load_importance, save_budget
from quant_sparse_attn.tensor_core import TensorFormatError, ValidationError

log = logging.getLogger("quant_sparse_attn")


def _apply_overrides(cfg: ExperimentConfig, args: argparse.Namespace) -> ExperimentConfig:
    changes = {}
    if args.seed is not None:
        changes["seed"] = args.seed
    if args.ratio is not None:
        changes["ratio"] = args.ratio
    if args.buckets is not None:
        per_axis_for_count(args.buckets)
        changes["buckets"] = args.buckets
    if args.step is not None:
        changes["step"] = args.step
    if args.selection is not None:
        changes["selection"] = args.selection
    if args.lane is not None:
        changes["lane"] = args.lane
    return dataclasses.replace(cfg, **changes) if changes else cfg


def cmd_allocate(cfg: ExperimentConfig, args) -> int:
    table = load_importance(args.importance)
    budget = allocate_ratios(table, cfg.ratio, cfg.clamp_threshold)
    path = args.out / "budget.json"
    args.out.mkdir(parents=True, exist_ok=True)
    save_budget(budget, path)
    print(f"{budget.num_heads} head ratios, mean {np.mean(budget.ratios):.4f} -> {path}")
    return 0


def cmd_buckets(cfg: ExperimentConfig, args) -> int:
    if args.center is not None:
        center = ScalePair(*args.center)
    elif args.scales is not None:
        doc = json.loads(Path(args.scales).read_text())
        center = calibrate_center(doc["q_scales"], doc["k_scales"])
    else:
        center = calibration_grid(cfg).center
    grid = build_grid(center, cfg.step, per_axis_for_count(cfg.buckets))
    path = args.out / "buckets.json"
    args.out.mkdir(parents=True, exist_ok=True)
    save_grid(grid, path)
    print(f"{len(grid)} buckets around ({center.lambda_q:.6g}, {center.lambda_k:.6g}), step {cfg.step} -> {path}")
    return 0


def _emit(report, out: Path) -> int:
    sys.stdout.write(report.to_table())
    for path in report.write(out):
        log.info("wrote %s", path)
    return 0


def cmd_run(cfg: ExperimentConfig, args) -> int:
    return _emit(run_experiment(cfg), args.out)


def cmd_bench(cfg: ExperimentConfig, args) -> int:
    return _emit(bench_experiment(cfg), args.out)


def cmd_plan(cfg: ExperimentConfig, args) -> int:
    if args.profile:
        profile, head_buckets = load_profile(args.profile)
        if head_buckets is None:
            head_buckets = list(range(profile.num_heads))
    else:
        rng = np.random.default_rng(cfg.seed)
        head_buckets = rng.integers(0, 3, size=cfg.num_q_heads).tolist()
        profile = pipeline_profile(cfg, [cfg.ratio] * cfg.num_q_heads)
    schedule, report = plan_report(profile, head_buckets, cfg.lane, cfg.digest(), cfg.seed)
    _emit(report, args.out)
    events = args.out / f"{report.stem}-events.csv"
    with events.open("w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=["processor", "kind", "id", "start", "finish"], lineterminator="\n")
        writer.writeheader()
        writer.writerows(schedule.to_rows())
    if not args.profile:
        save_profile(profile, args.out / f"{report.stem}-profile.json", head_buckets)
    return 0


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", type=Path, help="JSON experiment config")
    common.add_argument("--seed", type=int)
    common.add_argument("--ratio", type=float, help="global sparsity ratio r")
    common.add_argument("--buckets", type=int, help="bucket count (odd square)")
    common.add_argument("--step", type=float, help="bucket step size")
    common.add_argument("--selection", choices=["row", "head"])
    common.add_argument("--lane", choices=["three-clock", "single"])
    common.add_argument("--out", type=Path, default=Path("out"))
    common.add_argument("-v", "--verbose", action="store_true")

    parser = argparse.ArgumentParser(prog="quant-sparse-attn", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)
    p = sub.add_parser("allocate", parents=[common], help="per-head ratios from an importance table")
    p.add_argument("--importance", type=Path, required=True)
    p.set_defaults(func=cmd_allocate)
    p = sub.add_parser("buckets", parents=[common], help="build the scale-bucket grid")
    p.add_argument("--center", type=float, nargs=2, metavar=("LAMBDA_Q", "LAMBDA_K"))
    p.add_argument("--scales", type=Path, help="JSON with q_scales and k_scales lists")
    p.set_defaults(func=cmd_buckets)
    p = sub.add_parser("run", parents=[common], help="sparse attention vs float oracle")
    p.set_defaults(func=cmd_run)
    p = sub.add_parser("bench", parents=[common], help="compare against the baselines")
    p.set_defaults(func=cmd_bench)
    p = sub.add_parser("plan", parents=[common], help="pipeline planning only")
    p.add_argument("--profile", type=Path, help="cost profile JSON (optional head_buckets)")
    p.set_defaults(func=cmd_plan)
    return parser


def main(argv: Optional[Sequence[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    try:
        cfg = _apply_overrides(load_config(args.config), args)
        return args.func(cfg, args)
    except (ValidationError, TensorFormatError, FileNotFoundError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
