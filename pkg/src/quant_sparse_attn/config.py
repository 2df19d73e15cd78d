"""Experiment configuration.

Configs are JSON documents carrying ``"version": 1``. Every key is optional
except the version; unknown keys are rejected. See README.md for the schema.
"""

from __future__ import annotations

import dataclasses
import hashlib
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Union

from quant_sparse_attn.bucketing import DEFAULT_STEP
from quant_sparse_attn.sparsity_alloc import DEFAULT_CLAMP, DEFAULT_RATIO
from quant_sparse_attn.tensor_core import ValidationError

CONFIG_VERSION = 1
BASELINES = ("full", "sparse", "block_sparse", "npu_full", "shadow")
ACTIVATIONS = ("gaussian", "heavy_tailed")

# (q heads, kv heads, head dim, layers) per model
MODEL_PRESETS = {
    "phonelm-0.5b": (16, 16, 64, 24),
    "phonelm-1.5b": (16, 16, 160, 19),
    "qwen2-0.5b": (14, 2, 64, 24),
    "qwen2-1.5b": (12, 2, 128, 28),
}


@dataclass(frozen=True)
class PlatformProfile:
    """Per-head stage costs (ms) for the latency model.

    Defaults: accelerator launches of 1/2/4 fused heads cost 2/3/4 ms; on the
    general-purpose core, dense float estimation costs half of full attention,
    so at ratio 0.2 estimation is 2/3 of the serialized sparse kernel.
    """

    npu_points: tuple[tuple[int, float], ...] = ((1, 2.0), (2, 3.0), (4, 4.0))
    cpu_estimate_ms: float = 3.0
    topk_ms: float = 0.3
    cpu_full_ms: float = 6.0
    npu_full_factor: float = 2.0

    def __post_init__(self):
        object.__setattr__(self, "npu_points", tuple((int(c), float(t)) for c, t in self.npu_points))
        for name in ("cpu_estimate_ms", "topk_ms", "cpu_full_ms", "npu_full_factor"):
            if not getattr(self, name) > 0:
                raise ValidationError(f"platform.{name} must be positive")


@dataclass(frozen=True)
class ExperimentConfig:
    model: str = "qwen2-0.5b"
    num_q_heads: int = 14
    num_kv_heads: int = 2
    head_dim: int = 64
    num_layers: int = 24
    ratio: float = DEFAULT_RATIO
    clamp_threshold: float = DEFAULT_CLAMP
    step: float = DEFAULT_STEP
    buckets: int = 9
    bucket_metric: str = "linear"
    seed: int = 0
    trials: int = 4
    q_len: int = 256
    k_len: int = 256
    causal: bool = True
    rope_theta: float = 10000.0
    activations: str = "gaussian"
    qk_std: float = 1.0
    head_scale_spread: float = 0.3
    selection: str = "row"
    lane: str = "three-clock"
    block_size: int = 64
    sparse: bool = True
    baselines: tuple[str, ...] = BASELINES
    importance: Optional[str] = None
    budget: Optional[str] = None
    bucket_file: Optional[str] = None
    platform: PlatformProfile = field(default_factory=PlatformProfile)

    def __post_init__(self):
        if self.num_q_heads < 1 or self.num_kv_heads < 1 or self.num_q_heads % self.num_kv_heads:
            raise ValidationError("num_q_heads must be a positive multiple of num_kv_heads")
        if self.head_dim < 2 or self.head_dim % 2:
            raise ValidationError("head_dim must be even")
        if not 0 < self.ratio <= 1:
            raise ValidationError("ratio must lie in (0, 1]")
        if not 0 < self.step < 1:
            raise ValidationError("step must lie in (0, 1)")
        if self.q_len < 1 or self.k_len < self.q_len:
            raise ValidationError("need 1 <= q_len <= k_len")
        if self.trials < 1 or self.block_size < 1:
            raise ValidationError("trials and block_size must be positive")
        if self.activations not in ACTIVATIONS:
            raise ValidationError(f"activations must be one of {ACTIVATIONS}")
        if self.selection not in ("row", "head"):
            raise ValidationError("selection must be 'row' or 'head'")
        if self.lane not in ("three-clock", "single"):
            raise ValidationError("lane must be 'three-clock' or 'single'")
        if self.bucket_metric not in ("linear", "log"):
            raise ValidationError("bucket_metric must be 'linear' or 'log'")
        bad = set(self.baselines) - set(BASELINES)
        if bad:
            raise ValidationError(f"unknown baselines {sorted(bad)}")
        object.__setattr__(self, "baselines", tuple(self.baselines))

    @property
    def q_offset(self) -> int:
        return self.k_len - self.q_len

    def to_dict(self) -> dict:
        doc = dataclasses.asdict(self)
        doc["baselines"] = list(self.baselines)
        doc["platform"]["npu_points"] = [list(p) for p in self.platform.npu_points]
        return {"version": CONFIG_VERSION, **doc}

    def digest(self) -> str:
        return hashlib.sha256(json.dumps(self.to_dict(), sort_keys=True).encode()).hexdigest()[:12]


def config_from_dict(doc: dict) -> ExperimentConfig:
    doc = dict(doc)
    version = doc.pop("version", None)
    if version != CONFIG_VERSION:
        raise ValidationError(f"config version must be {CONFIG_VERSION}, got {version!r}")
    known = {f.name for f in dataclasses.fields(ExperimentConfig)}
    unknown = set(doc) - known
    if unknown:
        raise ValidationError(f"unknown config keys: {sorted(unknown)}")
    preset = doc.get("model")
    if preset is not None:
        if preset not in MODEL_PRESETS:
            raise ValidationError(f"unknown model preset {preset!r}; choose from {sorted(MODEL_PRESETS)}")
        for key, value in zip(("num_q_heads", "num_kv_heads", "head_dim", "num_layers"), MODEL_PRESETS[preset]):
            doc.setdefault(key, value)
    if "platform" in doc:
        plat = doc["platform"]
        pknown = {f.name for f in dataclasses.fields(PlatformProfile)}
        if not isinstance(plat, dict) or set(plat) - pknown:
            raise ValidationError(f"platform accepts only {sorted(pknown)}")
        doc["platform"] = PlatformProfile(**plat)
    if "baselines" in doc:
        doc["baselines"] = tuple(doc["baselines"])
    try:
        return ExperimentConfig(**doc)
    except TypeError as exc:
        raise ValidationError(str(exc)) from exc


def load_config(path: Union[str, Path, None]) -> ExperimentConfig:
    if path is None:
        return ExperimentConfig()
    try:
        doc = json.loads(Path(path).read_text())
    except json.JSONDecodeError as exc:
        raise ValidationError(f"{path}: not valid JSON ({exc})") from exc
    return config_from_dict(doc)
