"""Recall and output error as the bucket grid gets coarser or finer.

    python scripts/bucket_sensitivity.py --seeds 4
"""

import argparse
import csv
import dataclasses
from pathlib import Path

import numpy as np

from quant_sparse_attn.attention import full_attention, output_error, recall
from quant_sparse_attn.config import ExperimentConfig
from quant_sparse_attn.experiment import calibration_grid, make_inputs
from quant_sparse_attn.two_stage import float_topk, two_stage_attention


def main():
    parser = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    parser.add_argument("--seeds", type=int, default=4)
    parser.add_argument("--counts", type=int, nargs="+", default=[1, 9, 25])
    parser.add_argument("--steps", type=float, nargs="+", default=[0.25, 0.5, 0.75])
    parser.add_argument("--spread", type=float, default=0.6, help="log-normal spread of per-head scales")
    parser.add_argument("--out", type=Path, default=Path("out/bucket_sensitivity.csv"))
    args = parser.parse_args()

    rows = []
    for count in args.counts:
        for step in args.steps:
            cfg = dataclasses.replace(ExperimentConfig(), buckets=count, step=step,
                                      head_scale_spread=args.spread)
            grid = calibration_grid(cfg)
            ratios = [cfg.ratio] * cfg.num_q_heads
            rec, err = [], []
            for seed in range(args.seeds):
                inputs = make_inputs(cfg, seed)
                result = two_stage_attention(inputs, ratios, grid)
                rec.append(recall(result.selection, float_topk(inputs, ratios)))
                err.append(output_error(result.output, full_attention(inputs)).relative_l2)
            rows.append({"buckets": count, "step": step, "recall": float(np.mean(rec)),
                         "relative_l2": float(np.mean(err))})
            print(f"buckets={count:3d} step={step:.2f} recall={rows[-1]['recall']:.4f} "
                  f"relative_l2={rows[-1]['relative_l2']:.4f}")

    args.out.parent.mkdir(parents=True, exist_ok=True)
    with args.out.open("w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=list(rows[0]), lineterminator="\n")
        writer.writeheader()
        writer.writerows(rows)
    print(f"wrote {args.out}")


if __name__ == "__main__":
    main()
