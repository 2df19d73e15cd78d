"""Slow, independent reference implementations used only by the tests.

Written with plain Python loops and math so they share no code path with the
vectorized package functions they check.
"""

from __future__ import annotations

import itertools
import math


def naive_attention(q, k, v, causal=True, q_offset=0, support=None):
    """Triple-loop attention over nested lists / arrays shaped (B, H, S, D).

    `support(b, h, i)` optionally restricts each row to a set of key indices;
    other keys are dropped before the softmax.
    """
    B, HQ, SQ, D = len(q), len(q[0]), len(q[0][0]), len(q[0][0][0])
    HKV, SK = len(k[0]), len(k[0][0])
    group = HQ // HKV
    out = [[[[0.0] * D for _ in range(SQ)] for _ in range(HQ)] for _ in range(B)]
    for b in range(B):
        for h in range(HQ):
            kv = h // group
            for i in range(SQ):
                keys = [j for j in range(SK) if not causal or j <= q_offset + i]
                if support is not None:
                    allowed = set(support(b, h, i))
                    keys = [j for j in keys if j in allowed]
                scores = []
                for j in keys:
                    s = 0.0
                    for d in range(D):
                        s += float(q[b][h][i][d]) * float(k[b][kv][j][d])
                    scores.append(s / math.sqrt(D))
                m = max(scores)
                w = [math.exp(s - m) for s in scores]
                z = sum(w)
                for d in range(D):
                    out[b][h][i][d] = sum(w[t] * float(v[b][kv][j][d]) for t, j in enumerate(keys)) / z
    return out


def naive_topk(row, budget, visible):
    """Indices of the `budget` largest visible entries; ties to the lower index."""
    cand = [j for j in range(len(row)) if visible[j]]
    cand.sort(key=lambda j: (-row[j], j))
    return sorted(cand[:budget])


def naive_block_select(q_rows, k_rows, block, budget, i, causal=True, q_offset=0):
    """Pool-then-rank selection for query row i of one head (lists of vectors)."""
    d = len(q_rows[0])
    qb = i // block
    qmembers = q_rows[qb * block:(qb + 1) * block]
    qpool = [sum(r[t] for r in qmembers) / len(qmembers) for t in range(d)]
    sk = len(k_rows)
    blocks = []
    for start in range(0, sk, block):
        members = k_rows[start:start + block]
        kpool = [sum(r[t] for r in members) / len(members) for t in range(d)]
        score = sum(a * b for a, b in zip(qpool, kpool)) / math.sqrt(d)
        vis = [j for j in range(start, min(start + block, sk)) if not causal or j <= q_offset + i]
        if vis:
            blocks.append((score, start // block, vis))
    blocks.sort(key=lambda t: (-t[0], t[1]))
    chosen, covered = [], 0
    for _, _, vis in blocks:
        if covered >= budget:
            break
        chosen += vis
        covered += len(vis)
    return sorted(chosen)


def scan_bucket(buckets, lq, lk):
    best, best_d = -1, math.inf
    for idx, (bq, bk) in enumerate(buckets):
        dist = ((lq - bq) ** 2 + (lk - bk) ** 2) / 2
        if dist < best_d:
            best, best_d = idx, dist
    return best


def event_makespan(launch_costs, groups, order_groups, order_heads, topk, qkv):
    """Event-by-event replay of a three-clock pipeline, written from the dependency rules.

    launch_costs[g] is the accelerator time of group g; order_heads[g] is the
    head order inside group g.
    """
    npu_free = topk_free = qkv_free = 0.0
    finish_npu = {}
    for g in order_groups:
        finish_npu[g] = npu_free + launch_costs[g]
        npu_free = finish_npu[g]
    end = 0.0
    for g in order_groups:
        for h in order_heads[g]:
            t_start = max(topk_free, finish_npu[g])
            topk_free = t_start + topk[h]
            q_start = max(qkv_free, topk_free)
            qkv_free = q_start + qkv[h]
            end = max(end, qkv_free)
    return end


def exhaustive_makespan(launch_costs, groups, topk, qkv):
    """Minimum over every group order and every within-group order."""
    best = math.inf
    for og in itertools.permutations(range(len(groups))):
        for perms in itertools.product(*(itertools.permutations(g) for g in groups)):
            heads = {g: perms[g] for g in range(len(groups))}
            best = min(best, event_makespan(launch_costs, groups, og, heads, topk, qkv))
    return best
