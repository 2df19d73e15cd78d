"""Modeled layer latency per baseline and stage shares of the pipelined schedule.

    python scripts/latency_breakdown.py --ratios 0.1 0.2 0.4
"""

import argparse
import csv
import dataclasses
from pathlib import Path

import numpy as np

from quant_sparse_attn.bucketing import select_bucket
from quant_sparse_attn.config import ExperimentConfig
from quant_sparse_attn.experiment import baseline_latencies, calibration_grid, make_inputs, pipeline_profile
from quant_sparse_attn.pipeline import PlanningLimitError, form_groups, plan_bruteforce, plan_greedy, simulate
from quant_sparse_attn.two_stage import observed_scales


def main():
    parser = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    parser.add_argument("--ratios", type=float, nargs="+", default=[0.1, 0.2, 0.4])
    parser.add_argument("--lane", choices=["three-clock", "single"], default="three-clock")
    parser.add_argument("--out", type=Path, default=Path("out/latency_breakdown.csv"))
    args = parser.parse_args()

    rows = []
    for ratio in args.ratios:
        cfg = dataclasses.replace(ExperimentConfig(), ratio=ratio, lane=args.lane)
        grid = calibration_grid(cfg)
        buckets = [select_bucket(grid, p) for p in observed_scales(make_inputs(cfg, cfg.seed))]
        ratios = [ratio] * cfg.num_q_heads
        lat = baseline_latencies(cfg, ratios, buckets)
        profile = pipeline_profile(cfg, ratios)
        groups = form_groups(buckets)
        sim = simulate(plan_greedy(groups, profile, cfg.lane), profile)
        row = {"ratio": ratio, "fused_groups": len(groups)}
        row.update({f"{name}_ms": l.makespan for name, l in lat.items()})
        row["sparse_estimation_share"] = lat["sparse"].estimation_fraction
        row.update({f"shadow_share_{k}": v for k, v in sim.breakdown.items()})
        try:
            row["optimal_ms"] = plan_bruteforce(groups, profile, cfg.lane).makespan
        except PlanningLimitError:
            # too many head orders to enumerate
            row["optimal_ms"] = ""
        rows.append(row)
        print(" ".join(f"{k}={v:.3f}" if isinstance(v, float) else f"{k}={v}" for k, v in row.items()))

    args.out.parent.mkdir(parents=True, exist_ok=True)
    with args.out.open("w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=list(rows[0]), lineterminator="\n")
        writer.writeheader()
        writer.writerows(rows)
    print(f"wrote {args.out}")
    print(f"mean shadow speedup over sparse: {np.mean([r['sparse_ms'] / r['shadow_ms'] for r in rows]):.2f}x")


if __name__ == "__main__":
    main()
