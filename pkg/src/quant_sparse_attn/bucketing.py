"""Scale-factor buckets for static quantized Q.K graphs.

An offline pass picks a center (mean observed scale of Q and K) and builds
a per_axis x per_axis grid of scale pairs center * step**m. Online, each
head's observed pair snaps to the bucket with the smallest MSE, and the
graph for that bucket and input shape is fetched from a cache.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Hashable, Union

import numpy as np

from quant_sparse_attn.tensor_core import ValidationError

DEFAULT_STEP = 0.5
DEFAULT_PER_AXIS = 3


@dataclass(frozen=True)
class ScalePair:
    lambda_q: float
    lambda_k: float

    def __post_init__(self):
        if not (self.lambda_q > 0 and self.lambda_k > 0):
            raise ValidationError(f"scales must be positive, got ({self.lambda_q}, {self.lambda_k})")
        if not (math.isfinite(self.lambda_q) and math.isfinite(self.lambda_k)):
            raise ValidationError("scales must be finite")


def axis_exponents(per_axis: int) -> list[int]:
    """Exponents m for center * step**m, ordered so scales ascend (step < 1)."""
    half = (per_axis - 1) // 2
    return list(range(half, -half - 1, -1))


@dataclass
class BucketGrid:
    center: ScalePair
    step: float
    per_axis: int
    buckets: list[ScalePair]
    graph_cache: dict = field(default_factory=dict)
    hits: int = 0
    misses: int = 0

    def __len__(self) -> int:
        return len(self.buckets)

    def as_array(self) -> np.ndarray:
        return np.array([[b.lambda_q, b.lambda_k] for b in self.buckets])

    @property
    def hit_rate(self) -> float:
        total = self.hits + self.misses
        return self.hits / total if total else 0.0

    def to_dict(self) -> dict:
        return {
            "center": [self.center.lambda_q, self.center.lambda_k],
            "step": self.step,
            "per_axis": self.per_axis,
            "buckets": [[b.lambda_q, b.lambda_k] for b in self.buckets],
        }

    @classmethod
    def from_dict(cls, doc: dict) -> "BucketGrid":
        try:
            grid = build_grid(ScalePair(*map(float, doc["center"])), float(doc["step"]), int(doc["per_axis"]))
        except (KeyError, TypeError, ValueError) as exc:
            if isinstance(exc, ValidationError):
                raise
            raise ValidationError(f"malformed bucket grid: {exc}") from exc
        listed = doc.get("buckets")
        if listed is not None and not np.allclose(np.asarray(listed, dtype=float), grid.as_array(), rtol=1e-12):
            raise ValidationError("stored bucket list disagrees with center/step/per_axis")
        return grid


def build_grid(center: ScalePair, step: float = DEFAULT_STEP, per_axis: int = DEFAULT_PER_AXIS) -> BucketGrid:
    if not (0 < step < 1):
        raise ValidationError(f"step must lie in (0, 1), got {step}")
    if per_axis < 1 or per_axis % 2 == 0:
        raise ValidationError(f"per_axis must be an odd positive integer, got {per_axis}")
    exps = axis_exponents(per_axis)
    buckets = [
        ScalePair(center.lambda_q * step ** mq, center.lambda_k * step ** mk)
        for mq in exps
        for mk in exps
    ]
    return BucketGrid(center, step, per_axis, buckets)


def bucket_distances(grid: BucketGrid, observed: ScalePair, metric: str = "linear") -> np.ndarray:
    pts = grid.as_array()
    obs = np.array([observed.lambda_q, observed.lambda_k])
    if metric == "log":
        pts, obs = np.log(pts), np.log(obs)
    elif metric != "linear":
        raise ValidationError(f"unknown metric {metric!r}")
    return np.mean((pts - obs) ** 2, axis=1)


def select_bucket(grid: BucketGrid, observed: ScalePair, metric: str = "linear") -> int:
    """Index of the bucket with the smallest MSE to `observed`; ties go to the lower index."""
    if not grid.buckets:
        raise ValidationError("empty bucket grid")
    return int(np.argmin(bucket_distances(grid, observed, metric)))


def lookup_graph(grid: BucketGrid, bucket: int, shape_key: Hashable) -> int:
    """Return the cached graph id for (bucket, shape), registering a new one on a miss."""
    if not 0 <= bucket < len(grid.buckets):
        raise ValidationError(f"bucket {bucket} out of range for {len(grid.buckets)} buckets")
    key = (bucket, shape_key)
    graph = grid.graph_cache.get(key)
    if graph is None:
        graph = len(grid.graph_cache)
        grid.graph_cache[key] = graph
        grid.misses += 1
    else:
        grid.hits += 1
    return graph


def calibrate_center(q_scales, k_scales) -> ScalePair:
    """Mean of observed per-head scales."""
    return ScalePair(float(np.mean(q_scales)), float(np.mean(k_scales)))


def per_axis_for_count(n_buckets: int) -> int:
    root = math.isqrt(n_buckets)
    if root * root != n_buckets or root % 2 == 0:
        raise ValidationError(f"bucket count must be an odd square (1, 9, 25, ...), got {n_buckets}")
    return root


def save_grid(grid: BucketGrid, path: Union[str, Path]) -> None:
    Path(path).write_text(json.dumps(grid.to_dict(), indent=2) + "\n")


def load_grid(path: Union[str, Path]) -> BucketGrid:
    p = Path(path)
    if not p.exists():
        raise FileNotFoundError(f"bucket file {p} not found")
    return BucketGrid.from_dict(json.loads(p.read_text()))
