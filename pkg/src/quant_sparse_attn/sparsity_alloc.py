"""Head-specific sparsity ratios from loss-delta importance measurements.

Each head i in layer j = i // heads_per_layer gets

    ratio_i = r * N * clamp(headImp_i * layerImp_j) / sum(clamp(...))

where importance is the loss increase when the head (or layer) is zeroed on
a calibration set, and clamp caps the product at a threshold (1e-3 default).
"""

from __future__ import annotations

import json
import math
import warnings
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence, Union

import numpy as np

from quant_sparse_attn.tensor_core import ValidationError

DEFAULT_RATIO = 0.2
DEFAULT_CLAMP = 1e-3


@dataclass(frozen=True)
class ImportanceTable:
    baseline_loss: float
    head_losses: tuple[float, ...]
    layer_losses: tuple[float, ...]
    heads_per_layer: int

    def __post_init__(self):
        object.__setattr__(self, "head_losses", tuple(float(x) for x in self.head_losses))
        object.__setattr__(self, "layer_losses", tuple(float(x) for x in self.layer_losses))
        if self.heads_per_layer < 1:
            raise ValidationError("heads_per_layer must be positive")
        if len(self.head_losses) != len(self.layer_losses) * self.heads_per_layer:
            raise ValidationError(
                f"{len(self.head_losses)} head losses != {len(self.layer_losses)} layers "
                f"x {self.heads_per_layer} heads"
            )
        values = (self.baseline_loss, *self.head_losses, *self.layer_losses)
        if not all(math.isfinite(x) for x in values):
            raise ValidationError("importance table contains non-finite losses")

    @property
    def num_heads(self) -> int:
        return len(self.head_losses)

    @property
    def num_layers(self) -> int:
        return len(self.layer_losses)

    def to_dict(self) -> dict:
        return {
            "baseline_loss": self.baseline_loss,
            "head_losses": list(self.head_losses),
            "layer_losses": list(self.layer_losses),
            "heads_per_layer": self.heads_per_layer,
        }

    @classmethod
    def from_dict(cls, doc: dict) -> "ImportanceTable":
        expected = {"baseline_loss", "head_losses", "layer_losses", "heads_per_layer"}
        if not isinstance(doc, dict) or set(doc) != expected:
            got = sorted(doc) if isinstance(doc, dict) else type(doc).__name__
            raise ValidationError(f"importance table needs exactly {sorted(expected)}, got {got}")
        if not isinstance(doc["heads_per_layer"], int):
            raise ValidationError("heads_per_layer must be an integer")
        try:
            return cls(float(doc["baseline_loss"]), tuple(doc["head_losses"]),
                       tuple(doc["layer_losses"]), doc["heads_per_layer"])
        except (TypeError, ValueError) as exc:
            if isinstance(exc, ValidationError):
                raise
            raise ValidationError(f"malformed importance table: {exc}") from exc


@dataclass(frozen=True)
class HeadBudget:
    """Per-head ratios. `raw_ratios` are before capping at 1 and average to `global_ratio`."""

    ratios: tuple[float, ...]
    raw_ratios: tuple[float, ...]
    global_ratio: float
    clamp_threshold: float

    @property
    def num_heads(self) -> int:
        return len(self.ratios)

    def to_dict(self) -> dict:
        return {
            "global_ratio": self.global_ratio,
            "clamp_threshold": self.clamp_threshold,
            "ratios": list(self.ratios),
            "raw_ratios": list(self.raw_ratios),
        }

    @classmethod
    def from_dict(cls, doc: dict) -> "HeadBudget":
        try:
            ratios = tuple(float(x) for x in doc["ratios"])
            raw = tuple(float(x) for x in doc.get("raw_ratios", ratios))
            budget = cls(ratios, raw, float(doc["global_ratio"]), float(doc["clamp_threshold"]))
        except (KeyError, TypeError, ValueError) as exc:
            raise ValidationError(f"malformed budget document: {exc}") from exc
        if not all(0 < x <= 1 for x in ratios):
            raise ValidationError("every head ratio must lie in (0, 1]")
        return budget

    @classmethod
    def uniform(cls, num_heads: int, r: float = DEFAULT_RATIO,
                clamp_threshold: float = DEFAULT_CLAMP) -> "HeadBudget":
        _check_ratio(r)
        return cls((r,) * num_heads, (r,) * num_heads, r, clamp_threshold)


def _check_ratio(r: float) -> None:
    if not (0 < r <= 1):
        raise ValidationError(f"global ratio must lie in (0, 1], got {r}")


def head_importance(table: ImportanceTable) -> np.ndarray:
    """Loss increase per zeroed head, floored at 0."""
    return np.maximum(np.asarray(table.head_losses) - table.baseline_loss, 0.0)


def layer_importance(table: ImportanceTable) -> np.ndarray:
    return np.maximum(np.asarray(table.layer_losses) - table.baseline_loss, 0.0)


def importance_products(table: ImportanceTable) -> np.ndarray:
    layer_of_head = np.arange(table.num_heads) // table.heads_per_layer
    return head_importance(table) * layer_importance(table)[layer_of_head]


def ratios_from_products(products: Sequence[float], r: float = DEFAULT_RATIO,
                         clamp_threshold: float = DEFAULT_CLAMP) -> HeadBudget:
    _check_ratio(r)
    if not clamp_threshold > 0:
        raise ValidationError(f"clamp_threshold must be > 0, got {clamp_threshold}")
    v = np.minimum(np.asarray(products, dtype=np.float64), clamp_threshold)
    if np.any(v < 0) or not np.all(np.isfinite(v)):
        raise ValidationError("importance products must be finite and nonnegative")
    n = v.size
    total = v.sum()
    if total == 0:
        raw = np.full(n, r)
    else:
        raw = r * n * (v / total)
    capped = np.minimum(raw, 1.0)
    if np.any(raw > 1.0):
        warnings.warn(
            f"{int(np.sum(raw > 1.0))} head ratio(s) exceeded 1 and were capped; "
            "the excess is not redistributed",
            RuntimeWarning,
            stacklevel=2,
        )
    # a zero product would give a zero ratio; keep at least a sliver so every head retains a token
    capped = np.where(capped > 0, capped, np.finfo(np.float64).tiny)
    return HeadBudget(tuple(capped.tolist()), tuple(raw.tolist()), r, clamp_threshold)


def allocate_ratios(table: ImportanceTable, r: float = DEFAULT_RATIO,
                    clamp_threshold: float = DEFAULT_CLAMP) -> HeadBudget:
    return ratios_from_products(importance_products(table), r, clamp_threshold)


def synthetic_table(num_layers: int, heads_per_layer: int, seed: int = 0,
                    baseline_loss: float = 2.0) -> ImportanceTable:
    """Seeded table with log-uniform head and layer loss deltas, for tests and demos."""
    rng = np.random.default_rng(seed)
    head_delta = 10.0 ** rng.uniform(-3, -1, size=num_layers * heads_per_layer)
    layer_delta = 10.0 ** rng.uniform(-2, 0, size=num_layers)
    return ImportanceTable(
        baseline_loss,
        tuple((baseline_loss + head_delta).tolist()),
        tuple((baseline_loss + layer_delta).tolist()),
        heads_per_layer,
    )


def load_importance(path: Union[str, Path]) -> ImportanceTable:
    try:
        doc = json.loads(Path(path).read_text())
    except json.JSONDecodeError as exc:
        raise ValidationError(f"{path}: not valid JSON ({exc})") from exc
    return ImportanceTable.from_dict(doc)


def save_budget(budget: HeadBudget, path: Union[str, Path]) -> None:
    Path(path).write_text(json.dumps(budget.to_dict(), indent=2) + "\n")


def load_budget(path: Union[str, Path]) -> HeadBudget:
    return HeadBudget.from_dict(json.loads(Path(path).read_text()))
