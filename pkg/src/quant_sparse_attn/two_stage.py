"""End-to-end sparse attention: bucketed int8 estimation, top-k, float sparse attention."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from quant_sparse_attn.attention import (
    AttentionInputs,
    ScoreMatrix,
    SparseSelection,
    _expand_kv,
    estimate_scores,
    float_scores,
    kv_head_index,
    masked_softmax,
    row_budgets,
    sparse_qkv,
    topk_select,
)
from quant_sparse_attn.bucketing import BucketGrid, ScalePair, lookup_graph, select_bucket
from quant_sparse_attn.pipeline import form_groups
from quant_sparse_attn.tensor_core import QMAX, Tensor, dequantize, max_scale, quantize


@dataclass
class TwoStageResult:
    output: Tensor
    selection: SparseSelection
    estimated: ScoreMatrix
    head_buckets: list[int]
    observed: list[ScalePair]
    graph_ids: list[int]


def observed_scales(inputs: AttentionInputs) -> list[ScalePair]:
    """Max-based per-head (q, k) scales, k taken from the head's kv group."""
    pairs = []
    for h in range(inputs.num_q_heads):
        kv = kv_head_index(h, inputs.num_q_heads, inputs.num_kv_heads)
        pairs.append(ScalePair(max_scale(inputs.q.data[:, h]), max_scale(inputs.k.data[:, kv])))
    return pairs


def head_budgets(inputs: AttentionInputs, ratios: Sequence[float]) -> np.ndarray:
    return row_budgets(np.asarray(ratios, dtype=np.float64), inputs.q_len, inputs.k_len,
                       inputs.causal, inputs.q_offset)


def two_stage_attention(inputs: AttentionInputs, ratios: Sequence[float], grid: BucketGrid,
                     mode: str = "row", metric: str = "linear") -> TwoStageResult:
    """Sparse attention with the estimation pass quantized per head.

    Each head's observed (q, k) scales snap to a bucket; q and k are quantized
    with that bucket's constants, scored with integer arithmetic, ranked under
    the head's budget, and the survivors go through float attention.
    """
    hq = inputs.num_q_heads
    if len(ratios) != hq:
        raise ValueError(f"{len(ratios)} ratios for {hq} heads")
    observed = observed_scales(inputs)
    buckets = [select_bucket(grid, pair, metric) for pair in observed]
    scores = np.empty((inputs.q.dims[0], hq, inputs.q_len, inputs.k_len))
    for h, b in enumerate(buckets):
        kv = kv_head_index(h, hq, inputs.num_kv_heads)
        lam = grid.buckets[b]
        qq = quantize(Tensor(inputs.q.data[:, h:h + 1]), lam.lambda_q)
        kq = quantize(Tensor(inputs.k.data[:, kv:kv + 1]), lam.lambda_k)
        scores[:, h] = estimate_scores(qq, kq).values[:, 0]
    estimated = ScoreMatrix(scores)
    sel = topk_select(estimated, head_budgets(inputs, ratios), inputs.causal, inputs.q_offset, mode)
    shape = (inputs.q_len, inputs.k_len, inputs.head_dim)
    graph_ids = [lookup_graph(grid, g.bucket, (len(g.heads), *shape)) for g in form_groups(buckets)]
    return TwoStageResult(sparse_qkv(inputs, sel), sel, estimated, buckets, observed, graph_ids)


def float_topk(inputs: AttentionInputs, ratios: Sequence[float], mode: str = "row") -> SparseSelection:
    """Top-k on exact float scores: the ground truth for recall."""
    scores = ScoreMatrix(float_scores(inputs.q.data, inputs.k.data))
    return topk_select(scores, head_budgets(inputs, ratios), inputs.causal, inputs.q_offset, mode)


def npu_full_attention(inputs: AttentionInputs, scales: ScalePair) -> Tensor:
    """Whole attention under one static int8 graph.

    q and k use the fixed graph constants `scales`; softmax probabilities are
    quantized with the static scale 1/127, v with its own max-based scale.
    """
    hq = inputs.num_q_heads
    qq = quantize(inputs.q, scales.lambda_q)
    kq = quantize(inputs.k, scales.lambda_k)
    probs = masked_softmax(estimate_scores(qq, kq).values, inputs.visible())
    probs_q = np.clip(np.floor(probs * QMAX + 0.5), 0, QMAX) / QMAX
    v = _expand_kv(dequantize(quantize(inputs.v)).data.astype(np.float64), hq)
    return Tensor((probs_q @ v).astype(np.float32))
