"""Experiment drivers behind the CLI: run, bench, plan."""

from __future__ import annotations

import csv
import io
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np

from quant_sparse_attn.attention import (
    AttentionInputs,
    apply_rope,
    block_sparse_select,
    full_attention,
    output_error,
    recall,
    sparse_qkv,
)
from quant_sparse_attn.bucketing import BucketGrid, build_grid, calibrate_center, load_grid, per_axis_for_count
from quant_sparse_attn.config import ExperimentConfig
from quant_sparse_attn.pipeline import (
    CostProfile,
    FusedGroup,
    form_groups,
    npu_time_of,
    plan_greedy,
    plan_sequential,
    simulate,
)
from quant_sparse_attn.sparsity_alloc import HeadBudget, allocate_ratios, load_budget, load_importance
from quant_sparse_attn.two_stage import (
    float_topk,
    head_budgets,
    npu_full_attention,
    observed_scales,
    two_stage_attention,
)
from quant_sparse_attn.workload import synthetic_qkv

CALIBRATION_SEED_OFFSET = 1_000_003


@dataclass
class Report:
    command: str
    config_digest: str
    seed: int
    rows: list[dict] = field(default_factory=list)
    summary: list[dict] = field(default_factory=list)

    @property
    def stem(self) -> str:
        return f"{self.command}-{self.config_digest}"

    def to_csv(self) -> str:
        rows = [{"config": self.config_digest, "seed": self.seed, **r} for r in self.rows + self.summary]
        buf = io.StringIO()
        fields: list[str] = []
        for r in rows:
            fields += [k for k in r if k not in fields]
        writer = csv.DictWriter(buf, fieldnames=fields, lineterminator="\n")
        writer.writeheader()
        writer.writerows(rows)
        return buf.getvalue()

    def to_table(self) -> str:
        rows = self.summary or self.rows
        if not rows:
            return f"{self.command}: no rows\n"
        cols = list(rows[0])
        cells = [[_fmt(r.get(c)) for c in cols] for r in rows]
        widths = [max(len(c), *(len(row[i]) for row in cells)) for i, c in enumerate(cols)]
        lines = [f"# {self.command}  config={self.config_digest}  seed={self.seed}"]
        lines.append("  ".join(c.ljust(w) for c, w in zip(cols, widths)))
        lines.append("  ".join("-" * w for w in widths))
        lines += ["  ".join(v.ljust(w) for v, w in zip(row, widths)) for row in cells]
        return "\n".join(lines) + "\n"

    def write(self, out_dir: Path) -> list[Path]:
        out_dir.mkdir(parents=True, exist_ok=True)
        csv_path, txt_path = out_dir / f"{self.stem}.csv", out_dir / f"{self.stem}.txt"
        csv_path.write_text(self.to_csv())
        txt_path.write_text(self.to_table())
        return [csv_path, txt_path]


def _fmt(v) -> str:
    if isinstance(v, float):
        return f"{v:.6g}"
    return str(v)


def head_ratios(cfg: ExperimentConfig) -> HeadBudget:
    """Budget file, else allocation from an importance file, else uniform."""
    if cfg.budget:
        budget = load_budget(cfg.budget)
    elif cfg.importance:
        table = load_importance(cfg.importance)
        budget = allocate_ratios(table, cfg.ratio, cfg.clamp_threshold)
    else:
        return HeadBudget.uniform(cfg.num_q_heads, cfg.ratio, cfg.clamp_threshold)
    if budget.num_heads == cfg.num_q_heads:
        return budget
    if budget.num_heads == cfg.num_q_heads * cfg.num_layers:
        # a whole-model budget: the simulated layer is layer 0
        sl = slice(0, cfg.num_q_heads)
        return HeadBudget(budget.ratios[sl], budget.raw_ratios[sl], budget.global_ratio, budget.clamp_threshold)
    raise ValueError(f"budget covers {budget.num_heads} heads; config has {cfg.num_q_heads} per layer")


def make_inputs(cfg: ExperimentConfig, seed: int) -> AttentionInputs:
    rng = np.random.default_rng(seed)
    q, k, v = synthetic_qkv(rng, cfg.num_q_heads, cfg.num_kv_heads, cfg.q_len, cfg.k_len, cfg.head_dim,
                            cfg.activations, cfg.qk_std, cfg.head_scale_spread)
    q = apply_rope(q, cfg.q_offset, cfg.rope_theta)
    k = apply_rope(k, 0, cfg.rope_theta)
    return AttentionInputs(q, k, v, cfg.causal, cfg.q_offset)


def calibration_grid(cfg: ExperimentConfig, samples: int = 8) -> BucketGrid:
    """Grid centered on mean per-head scales over seeded calibration draws."""
    qs, ks = [], []
    for i in range(samples):
        for pair in observed_scales(make_inputs(cfg, cfg.seed + CALIBRATION_SEED_OFFSET + i)):
            qs.append(pair.lambda_q)
            ks.append(pair.lambda_k)
    return build_grid(calibrate_center(qs, ks), cfg.step, per_axis_for_count(cfg.buckets))


def resolve_grid(cfg: ExperimentConfig) -> BucketGrid:
    if cfg.bucket_file:
        return load_grid(cfg.bucket_file)
    return calibration_grid(cfg)


def pipeline_profile(cfg: ExperimentConfig, ratios) -> CostProfile:
    plat = cfg.platform
    return CostProfile.from_ratios(plat.npu_points, plat.topk_ms, plat.cpu_full_ms, ratios)


def run_experiment(cfg: ExperimentConfig) -> Report:
    budget = head_ratios(cfg)
    ratios = list(budget.ratios)
    grid = resolve_grid(cfg)
    profile = pipeline_profile(cfg, ratios)
    report = Report("run", cfg.digest(), cfg.seed)
    for trial in range(cfg.trials):
        seed = cfg.seed + trial
        inputs = make_inputs(cfg, seed)
        reference = full_attention(inputs)
        if cfg.sparse:
            result = two_stage_attention(inputs, ratios, grid, cfg.selection, cfg.bucket_metric)
            output, buckets = result.output, result.head_buckets
            rec = recall(result.selection, float_topk(inputs, ratios, cfg.selection))
        else:
            output, buckets, rec = full_attention(inputs), [0] * cfg.num_q_heads, 1.0
        err = output_error(output, reference)
        groups = form_groups(buckets)
        schedule = plan_greedy(groups, profile, cfg.lane)
        sim = simulate(schedule, profile)
        serial = plan_sequential(groups, profile).makespan
        report.rows.append({
            "trial": trial, "trial_seed": seed, "recall": rec,
            "max_abs": err.max_abs, "mean_abs": err.mean_abs, "relative_l2": err.relative_l2,
            "makespan_ms": sim.makespan, "serialized_ms": serial, "speedup": serial / sim.makespan,
            "fused_groups": len(groups), "bucket_hit_rate": grid.hit_rate,
        })
    keys = ["recall", "max_abs", "mean_abs", "relative_l2", "makespan_ms", "serialized_ms", "speedup"]
    summary = {"trial": "mean", "trial_seed": ""}
    summary.update({k: float(np.mean([r[k] for r in report.rows])) for k in keys})
    summary["fused_groups"] = float(np.mean([r["fused_groups"] for r in report.rows]))
    summary["bucket_hit_rate"] = grid.hit_rate
    report.summary.append(summary)
    return report


@dataclass(frozen=True)
class Latency:
    makespan: float
    estimation_fraction: float


def baseline_latencies(cfg: ExperimentConfig, ratios, head_buckets) -> dict[str, Latency]:
    """Cost-model latency of one attention layer per baseline.

    C/G variants run every stage serially on the general-purpose core.
    Block-sparse estimation costs the pooled Q.K product plus a pooling pass
    over q and k; its top-k ranks key blocks, not tokens. NPU-Full runs the
    Q.K and P.V graphs for all heads in one fused launch each.
    """
    plat = cfg.platform
    h = cfg.num_q_heads
    out: dict[str, Latency] = {"full": Latency(h * plat.cpu_full_ms, 0.0)}
    singles = [FusedGroup(i, (i,)) for i in range(h)]

    def serial(est_ms: float, topk_ms: float) -> Latency:
        prof = CostProfile.from_ratios(((1, est_ms),), topk_ms, plat.cpu_full_ms, ratios)
        sched = plan_sequential(singles, prof)
        return Latency(sched.makespan, simulate(sched, prof).breakdown["npu"])

    out["sparse"] = serial(plat.cpu_estimate_ms, plat.topk_ms)
    b = cfg.block_size
    nqb, nkb = math.ceil(cfg.q_len / b), math.ceil(cfg.k_len / b)
    pooled = (nqb * nkb + cfg.q_len + cfg.k_len) / (cfg.q_len * cfg.k_len)
    out["block_sparse"] = serial(plat.cpu_estimate_ms * pooled, plat.topk_ms * nkb / cfg.k_len)
    npu_prof = pipeline_profile(cfg, ratios)
    out["npu_full"] = Latency(plat.npu_full_factor * npu_time_of(npu_prof, h), 0.0)
    sched = plan_greedy(form_groups(head_buckets), npu_prof, cfg.lane)
    out["shadow"] = Latency(simulate(sched, npu_prof).makespan, simulate(sched, npu_prof).breakdown["npu"])
    return out


def bench_experiment(cfg: ExperimentConfig) -> Report:
    budget = head_ratios(cfg)
    ratios = list(budget.ratios)
    grid = resolve_grid(cfg)
    report = Report("bench", cfg.digest(), cfg.seed)
    per_baseline: dict[str, list[dict]] = {b: [] for b in cfg.baselines}
    for trial in range(cfg.trials):
        seed = cfg.seed + trial
        inputs = make_inputs(cfg, seed)
        reference = full_attention(inputs)
        truth = float_topk(inputs, ratios, cfg.selection)
        shadow = two_stage_attention(inputs, ratios, grid, cfg.selection, cfg.bucket_metric)
        latency = baseline_latencies(cfg, ratios, shadow.head_buckets)
        for name in cfg.baselines:
            rec: Optional[float] = None
            if name == "full":
                output = reference
            elif name == "sparse":
                output, rec = sparse_qkv(inputs, truth), 1.0
            elif name == "block_sparse":
                sel = block_sparse_select(inputs.q, inputs.k, cfg.block_size, head_budgets(inputs, ratios),
                                          inputs.causal, inputs.q_offset)
                output, rec = sparse_qkv(inputs, sel), recall(sel, truth)
            elif name == "npu_full":
                output = npu_full_attention(inputs, grid.center)
            else:
                output, rec = shadow.output, recall(shadow.selection, truth)
            err = output_error(output, reference)
            row = {
                "trial": trial, "baseline": name, "latency_ms": latency[name].makespan,
                "speedup_vs_full": latency["full"].makespan / latency[name].makespan,
                "estimation_fraction": latency[name].estimation_fraction,
                "recall": "" if rec is None else rec,
                "max_abs": err.max_abs, "mean_abs": err.mean_abs, "relative_l2": err.relative_l2,
            }
            report.rows.append(row)
            per_baseline[name].append(row)
    for name, rows in per_baseline.items():
        summary = {"trial": "mean", "baseline": name}
        for key in ("latency_ms", "speedup_vs_full", "estimation_fraction", "recall",
                    "max_abs", "mean_abs", "relative_l2"):
            vals = [r[key] for r in rows if r[key] != ""]
            summary[key] = float(np.mean(vals)) if vals else ""
        report.summary.append(summary)
    return report


def plan_report(profile: CostProfile, head_buckets, lane: str, digest: str, seed: int):
    """Greedy schedule, its simulation and the serialized baseline for a cost profile."""
    groups = form_groups(head_buckets)
    schedule = plan_greedy(groups, profile, lane)
    sim = simulate(schedule, profile)
    serial = plan_sequential(groups, profile).makespan
    report = Report("plan", digest, seed)
    summary = {"makespan_ms": sim.makespan, "serialized_ms": serial, "speedup": serial / sim.makespan,
               "fused_groups": len(groups)}
    summary.update({f"busy_{k}": v for k, v in sim.busy.items()})
    summary.update({f"bubble_{k}": v for k, v in sim.bubble.items()})
    summary.update({f"share_{k}": v for k, v in sim.breakdown.items()})
    report.summary.append(summary)
    return schedule, report
