"""Seeded synthetic Q/K/V activations."""

from __future__ import annotations

import numpy as np

from quant_sparse_attn.tensor_core import QMAX, Tensor


def synthetic_qkv(rng: np.random.Generator, num_q_heads: int, num_kv_heads: int, q_len: int,
                  k_len: int, head_dim: int, mode: str = "gaussian", std: float = 1.0,
                  head_scale_spread: float = 0.0) -> tuple[Tensor, Tensor, Tensor]:
    """Draw (q, k, v) in BHSD layout with batch 1.

    ``gaussian`` draws i.i.d. normals. ``heavy_tailed`` adds the outlier
    structure seen in real activations: a few head-dim channels with 8x
    magnitude, and a few keys that align with the mean query direction and so
    draw most of the attention. `head_scale_spread` multiplies each head by a
    log-normal factor so heads land in different scale buckets.
    """
    q = rng.normal(0.0, std, size=(1, num_q_heads, q_len, head_dim))
    k = rng.normal(0.0, std, size=(1, num_kv_heads, k_len, head_dim))
    v = rng.normal(0.0, 1.0, size=(1, num_kv_heads, k_len, head_dim))
    if mode == "heavy_tailed":
        n_out = max(1, head_dim // 16)
        channels = rng.choice(head_dim, size=n_out, replace=False)
        q[..., channels] *= 8.0
        k[..., channels] *= 8.0
        group = num_q_heads // num_kv_heads
        for kv in range(num_kv_heads):
            direction = q[0, kv * group:(kv + 1) * group].mean(axis=(0, 1))
            direction /= np.linalg.norm(direction) + 1e-12
            hitters = rng.choice(k_len, size=max(1, k_len // 32), replace=False)
            k[0, kv, hitters] += 3.0 * std * np.sqrt(head_dim) * direction
    elif mode != "gaussian":
        raise ValueError(f"unknown activation mode {mode!r}")
    if head_scale_spread > 0:
        q *= np.exp(rng.normal(0.0, head_scale_spread, size=(1, num_q_heads, 1, 1)))
        k *= np.exp(rng.normal(0.0, head_scale_spread, size=(1, num_kv_heads, 1, 1)))
    return Tensor(q), Tensor(k), Tensor(v)


def lattice_tensor(rng: np.random.Generator, shape: tuple[int, ...], scale: float = 2.0**-5) -> Tensor:
    """Values scale * n with integer n in [-127, 127] and the peak hitting +-127.

    With a power-of-two scale, quantizing with the max-based scale recovers
    every value exactly.
    """
    codes = rng.integers(-QMAX, QMAX + 1, size=shape)
    codes.flat[rng.integers(codes.size)] = QMAX
    return Tensor(codes * scale)
