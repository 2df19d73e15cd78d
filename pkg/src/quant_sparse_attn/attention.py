"""Reference and sparse attention over BHSD tensors.

The sparse path has two stages. A quantized Q.K pass ranks key positions
(`estimate_scores` + `topk_select`), then float attention runs only over the
retained positions (`sparse_qkv`). `block_sparse_select` is the coarse
mean-pooled baseline.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Optional, Union

import numpy as np

from quant_sparse_attn.tensor_core import QuantizedTensor, Tensor, ValidationError

BudgetLike = Union[int, np.ndarray]


def causal_mask(q_len: int, k_len: int, q_offset: int = 0) -> np.ndarray:
    """Boolean (q_len, k_len) array, True where key j is visible to query row i."""
    rows = np.arange(q_len)[:, None] + q_offset
    return np.arange(k_len)[None, :] <= rows


def visibility(q_len: int, k_len: int, causal: bool, q_offset: int = 0) -> np.ndarray:
    if causal:
        return causal_mask(q_len, k_len, q_offset)
    return np.ones((q_len, k_len), dtype=bool)


def kv_head_index(h: int, num_q_heads: int, num_kv_heads: int) -> int:
    return h * num_kv_heads // num_q_heads


def _expand_kv(x: np.ndarray, num_q_heads: int) -> np.ndarray:
    # contiguous grouping: q-head h reads kv-head floor(h * Hkv / Hq)
    hkv = x.shape[1]
    if hkv == num_q_heads:
        return x
    return np.repeat(x, num_q_heads // hkv, axis=1)


@dataclass(frozen=True)
class AttentionInputs:
    q: Tensor
    k: Tensor
    v: Tensor
    causal: bool = True
    q_offset: int = 0

    def __post_init__(self):
        for name in ("q", "k", "v"):
            t = getattr(self, name)
            if not isinstance(t, Tensor):
                object.__setattr__(self, name, Tensor(t))
            if len(getattr(self, name).dims) != 4:
                raise ValidationError(f"{name} must be 4-D (BHSD), got {getattr(self, name).dims}")
        q, k, v = self.q.dims, self.k.dims, self.v.dims
        if q[-1] != k[-1]:
            raise ValidationError(f"q head-dim {q[-1]} != k head-dim {k[-1]}")
        if k[:3] != v[:3]:
            raise ValidationError(f"k {k} and v {v} disagree on batch/heads/sequence")
        if q[0] != k[0]:
            raise ValidationError("q and k batch sizes differ")
        if k[1] > q[1] or q[1] % k[1]:
            raise ValidationError(f"{q[1]} q-heads not divisible into {k[1]} kv-heads")
        if self.q_offset < 0:
            raise ValidationError("q_offset must be nonnegative")

    @property
    def num_q_heads(self) -> int:
        return self.q.dims[1]

    @property
    def num_kv_heads(self) -> int:
        return self.k.dims[1]

    @property
    def head_dim(self) -> int:
        return self.q.dims[-1]

    @property
    def q_len(self) -> int:
        return self.q.dims[2]

    @property
    def k_len(self) -> int:
        return self.k.dims[2]

    def visible(self) -> np.ndarray:
        return visibility(self.q_len, self.k_len, self.causal, self.q_offset)


@dataclass(frozen=True)
class ScoreMatrix:
    """Raw pre-softmax scores, shape (B, Hq, Sq, Sk). No mask is baked in."""

    values: np.ndarray

    @property
    def shape(self) -> tuple[int, ...]:
        return self.values.shape


@dataclass(frozen=True)
class SparseSelection:
    """Retained key positions as a boolean (B, Hq, Sq, Sk) mask.

    A mask keeps indices sorted and unique by construction; `indices` gives
    the list view for one row.
    """

    mask: np.ndarray
    k_per_row: np.ndarray
    causal: bool = True
    q_offset: int = 0

    def __post_init__(self):
        if self.mask.ndim != 4:
            raise ValidationError("selection mask must be 4-D")
        vis = visibility(self.mask.shape[2], self.mask.shape[3], self.causal, self.q_offset)
        if np.any(self.mask & ~vis):
            raise ValidationError("selection contains masked key positions")

    @property
    def shape(self) -> tuple[int, ...]:
        return self.mask.shape

    def indices(self, b: int, h: int, row: int) -> list[int]:
        return np.flatnonzero(self.mask[b, h, row]).tolist()

    def counts(self) -> np.ndarray:
        return self.mask.sum(axis=-1)


def apply_rope(t: Tensor, position_offset: int = 0, theta_base: float = 10000.0) -> Tensor:
    """Rotate consecutive pairs (x[2i], x[2i+1]) by pos * theta_base**(-2i/d)."""
    x = t.data.astype(np.float64)
    d = x.shape[-1]
    if d % 2:
        raise ValidationError(f"rotary embedding needs an even head-dim, got {d}")
    pos = position_offset + np.arange(x.shape[-2], dtype=np.float64)
    inv_freq = theta_base ** (-np.arange(0, d, 2, dtype=np.float64) / d)
    angle = pos[:, None] * inv_freq[None, :]
    cos, sin = np.cos(angle), np.sin(angle)
    even, odd = x[..., 0::2], x[..., 1::2]
    out = np.empty_like(x)
    out[..., 0::2] = even * cos - odd * sin
    out[..., 1::2] = even * sin + odd * cos
    return Tensor(out.astype(np.float32))


def float_scores(q: np.ndarray, k: np.ndarray) -> np.ndarray:
    """q.k/sqrt(d) in float64 for (B,Hq,Sq,D) x (B,Hkv,Sk,D) arrays."""
    q = np.asarray(q, dtype=np.float64)
    k = _expand_kv(np.asarray(k, dtype=np.float64), q.shape[1])
    return np.einsum("bhqd,bhkd->bhqk", q, k) / math.sqrt(q.shape[-1])


def masked_softmax(scores: np.ndarray, support: np.ndarray) -> np.ndarray:
    """Softmax over positions where `support` is True; rows with empty support are zero."""
    s = np.where(support, scores, -np.inf)
    peak = np.max(s, axis=-1, keepdims=True)
    peak = np.where(np.isfinite(peak), peak, 0.0)
    e = np.where(support, np.exp(s - peak), 0.0)
    total = e.sum(axis=-1, keepdims=True)
    return np.divide(e, total, out=np.zeros_like(e), where=total > 0)


def full_attention(inputs: AttentionInputs) -> Tensor:
    scores = float_scores(inputs.q.data, inputs.k.data)
    probs = masked_softmax(scores, inputs.visible())
    v = _expand_kv(inputs.v.data.astype(np.float64), inputs.num_q_heads)
    return Tensor((probs @ v).astype(np.float32))


def estimate_scores(q: QuantizedTensor, k: QuantizedTensor, d_k: Optional[int] = None) -> ScoreMatrix:
    """Integer Q.K accumulated in int64, rescaled by scale_q*scale_k/sqrt(d_k).

    No softmax and no mask: the ranking stage skips masked positions itself.
    """
    if q.scale <= 0 or k.scale <= 0:
        raise ValidationError("quantization scales must be positive")
    if q.dims[-1] != k.dims[-1]:
        raise ValidationError(f"head-dims differ: {q.dims[-1]} vs {k.dims[-1]}")
    if len(q.dims) != 4 or len(k.dims) != 4:
        raise ValidationError("estimate_scores expects BHSD tensors")
    if q.dims[1] % k.dims[1]:
        raise ValidationError(f"{q.dims[1]} q-heads not divisible into {k.dims[1]} kv-heads")
    d_k = q.dims[-1] if d_k is None else d_k
    qi = q.data.astype(np.int64)
    ki = _expand_kv(k.data.astype(np.int64), q.dims[1])
    acc = np.einsum("bhqd,bhkd->bhqk", qi, ki)
    return ScoreMatrix(acc.astype(np.float64) * (q.scale * k.scale / math.sqrt(d_k)))


def row_budgets(ratio: Union[float, np.ndarray], q_len: int, k_len: int,
                causal: bool = True, q_offset: int = 0) -> np.ndarray:
    """Per-row k = ceil(ratio * visible), at least 1 where anything is visible.

    A scalar ratio gives shape (Sq,); a vector of per-head ratios gives (H, Sq).
    """
    visible = visibility(q_len, k_len, causal, q_offset).sum(axis=-1)
    ratio = np.asarray(ratio, dtype=np.float64)
    raw = ratio[..., None] * visible if ratio.ndim else ratio * visible
    # round first so 0.2 * 15 does not ceil to 4
    k = np.ceil(np.round(raw, 9)).astype(np.int64)
    return np.minimum(np.maximum(k, 1), visible)


def _select_by_rank(vals: np.ndarray, visible: np.ndarray, budget: np.ndarray) -> np.ndarray:
    ranked = np.where(visible, vals, -np.inf)
    order = np.argsort(-ranked, axis=-1, kind="stable")
    rank = np.empty_like(order)
    np.put_along_axis(rank, order, np.broadcast_to(np.arange(vals.shape[-1]), order.shape), axis=-1)
    return (rank < budget[..., None]) & visible


def topk_select(scores: ScoreMatrix, budget_per_row: BudgetLike, causal: bool = True,
                q_offset: int = 0, mode: str = "row") -> SparseSelection:
    """Keep the `budget` largest raw scores among visible positions of each row.

    Ranking raw scores is equivalent to ranking softmax outputs because softmax
    is strictly increasing. Ties go to the lower key index. `mode="head"`
    ranks every row of a head by one shared per-column aggregate (the sum of
    that column's visible scores) instead of the row's own scores.
    """
    values = scores.values
    b, h, sq, sk = values.shape
    budget = np.broadcast_to(np.asarray(budget_per_row, dtype=np.int64), (b, h, sq))
    if np.any(budget < 0):
        raise ValidationError("budget must be nonnegative")
    visible = visibility(sq, sk, causal, q_offset)
    if mode == "row":
        vals = values
    elif mode == "head":
        col_sum = np.where(visible, values, 0.0).sum(axis=2)
        vals = np.broadcast_to(col_sum[:, :, None, :], values.shape)
    else:
        raise ValidationError(f"unknown selection mode {mode!r}")
    mask = _select_by_rank(vals, np.broadcast_to(visible, values.shape), budget)
    k_eff = np.minimum(budget, visible.sum(axis=-1))
    return SparseSelection(mask, np.array(k_eff), causal, q_offset)


def sparse_qkv(inputs: AttentionInputs, sel: SparseSelection) -> Tensor:
    """Float attention restricted to the selected positions of each row.

    Scores are recomputed in float for the retained positions and softmax is
    normalized over the retained support only.
    """
    expected = (inputs.q.dims[0], inputs.num_q_heads, inputs.q_len, inputs.k_len)
    if sel.shape != expected:
        raise ValidationError(f"selection shape {sel.shape} does not match inputs {expected}")
    if np.any(sel.mask & ~inputs.visible()):
        raise ValidationError("selection contains positions masked for these inputs")
    if np.any(~sel.mask.any(axis=-1)):
        raise ValidationError("every query row needs at least one selected key")
    scores = float_scores(inputs.q.data, inputs.k.data)
    probs = masked_softmax(scores, sel.mask)
    v = _expand_kv(inputs.v.data.astype(np.float64), inputs.num_q_heads)
    return Tensor((probs @ v).astype(np.float32))


def _pool(x: np.ndarray, block: int) -> np.ndarray:
    """Mean over consecutive groups of `block` rows along axis 2; last group may be short."""
    n = x.shape[2]
    starts = np.arange(0, n, block)
    sums = np.add.reduceat(x, starts, axis=2)
    sizes = np.minimum(starts + block, n) - starts
    return sums / sizes[None, None, :, None]


def block_sparse_select(q: Tensor, k: Tensor, block: int, budget_per_row: BudgetLike,
                        causal: bool = True, q_offset: int = 0) -> SparseSelection:
    """Mean-pool q and k in blocks, rank key blocks per query block, cover the budget.

    For each row, key blocks with at least one visible token are taken in
    descending pooled-score order until the visible tokens they hold reach
    the row's budget; masked tokens are trimmed afterwards.
    """
    if block < 1:
        raise ValidationError("block must be >= 1")
    qd, kd = q.data.astype(np.float64), k.data.astype(np.float64)
    b, hq, sq, _ = qd.shape
    sk = kd.shape[2]
    pooled = float_scores(_pool(qd, block), _pool(kd, block))  # (B,Hq,QB,KB)
    budget = np.broadcast_to(np.asarray(budget_per_row, dtype=np.int64), (b, hq, sq))
    visible = visibility(sq, sk, causal, q_offset)
    nkb = pooled.shape[-1]
    kblock_of = np.arange(sk) // block
    # visible tokens per (row, key block)
    vis_per_block = np.zeros((sq, nkb), dtype=np.int64)
    np.add.at(vis_per_block.T, kblock_of, visible.T.astype(np.int64))
    mask = np.zeros((b, hq, sq, sk), dtype=bool)
    for bi in range(b):
        for h in range(hq):
            for i in range(sq):
                cand = vis_per_block[i] > 0
                row_scores = np.where(cand, pooled[bi, h, i // block], -np.inf)
                order = np.argsort(-row_scores, kind="stable")[: int(cand.sum())]
                covered = np.cumsum(vis_per_block[i, order])
                want = budget[bi, h, i]
                need = int(np.searchsorted(covered, want)) + 1 if want > 0 else 0
                chosen = np.zeros(nkb, dtype=bool)
                chosen[order[:need]] = True
                mask[bi, h, i] = chosen[kblock_of] & visible[i]
    k_eff = np.minimum(budget, visible.sum(axis=-1))
    return SparseSelection(mask, np.array(k_eff), causal, q_offset)


def recall(predicted: SparseSelection, truth: SparseSelection) -> float:
    """|pred & truth| / |truth| averaged over rows, then over (batch, head)."""
    if predicted.shape != truth.shape:
        raise ValidationError(f"selection shapes differ: {predicted.shape} vs {truth.shape}")
    hits = (predicted.mask & truth.mask).sum(axis=-1).astype(np.float64)
    size = truth.mask.sum(axis=-1)
    valid = size > 0
    per_row = np.divide(hits, size, out=np.zeros_like(hits), where=valid)
    n_rows = valid.sum(axis=-1)
    per_head = np.divide(per_row.sum(axis=-1), n_rows, out=np.zeros(n_rows.shape), where=n_rows > 0)
    heads = n_rows > 0
    if not heads.any():
        return 1.0
    return float(per_head[heads].mean())


@dataclass(frozen=True)
class ErrorMetrics:
    max_abs: float
    mean_abs: float
    relative_l2: float


def output_error(a: Tensor, b: Tensor) -> ErrorMetrics:
    """Error of `a` against reference `b`; relative_l2 is ||a-b|| / ||b||."""
    if a.dims != b.dims:
        raise ValidationError(f"dims differ: {a.dims} vs {b.dims}")
    x, y = a.data.astype(np.float64), b.data.astype(np.float64)
    diff = np.abs(x - y)
    denom = float(np.linalg.norm(y))
    num = float(np.linalg.norm(x - y))
    if denom == 0.0:
        rel = 0.0 if num == 0.0 else math.inf
    else:
        rel = num / denom
    return ErrorMetrics(float(diff.max()), float(diff.mean()), rel)
