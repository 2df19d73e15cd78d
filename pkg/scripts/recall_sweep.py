"""Recall of int8 estimation against float top-k across sparsity ratios and activation types.

    python scripts/recall_sweep.py --seeds 8 --out out/recall_sweep.csv
"""

import argparse
import csv
import dataclasses
from pathlib import Path

import numpy as np

from quant_sparse_attn.attention import block_sparse_select, recall
from quant_sparse_attn.config import ExperimentConfig
from quant_sparse_attn.experiment import calibration_grid, make_inputs
from quant_sparse_attn.two_stage import float_topk, head_budgets, two_stage_attention


def main():
    parser = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    parser.add_argument("--seeds", type=int, default=8)
    parser.add_argument("--ratios", type=float, nargs="+", default=[0.05, 0.1, 0.2, 0.4])
    parser.add_argument("--out", type=Path, default=Path("out/recall_sweep.csv"))
    args = parser.parse_args()

    rows = []
    for activations in ("gaussian", "heavy_tailed"):
        for ratio in args.ratios:
            cfg = dataclasses.replace(ExperimentConfig(), activations=activations, ratio=ratio)
            grid = calibration_grid(cfg)
            ratios = [ratio] * cfg.num_q_heads
            token, block = [], []
            for seed in range(args.seeds):
                inputs = make_inputs(cfg, seed)
                truth = float_topk(inputs, ratios)
                token.append(recall(two_stage_attention(inputs, ratios, grid).selection, truth))
                sel = block_sparse_select(inputs.q, inputs.k, cfg.block_size, head_budgets(inputs, ratios),
                                          inputs.causal, inputs.q_offset)
                block.append(recall(sel, truth))
            rows.append({"activations": activations, "ratio": ratio, "token_recall": float(np.mean(token)),
                         "token_recall_min": float(np.min(token)), "block_recall": float(np.mean(block))})
            print(" ".join(f"{k}={v:.4f}" if isinstance(v, float) else f"{k}={v}" for k, v in rows[-1].items()))

    args.out.parent.mkdir(parents=True, exist_ok=True)
    with args.out.open("w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=list(rows[0]), lineterminator="\n")
        writer.writeheader()
        writer.writerows(rows)
    print(f"wrote {args.out}")


if __name__ == "__main__":
    main()
