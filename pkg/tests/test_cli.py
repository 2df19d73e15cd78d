import csv
import dataclasses
import json

import numpy as np
import pytest
from oracles import naive_attention

from quant_sparse_attn.attention import full_attention
from quant_sparse_attn.cli import main
from quant_sparse_attn.config import ExperimentConfig, PlatformProfile, config_from_dict, load_config
from quant_sparse_attn.experiment import bench_experiment, make_inputs, run_experiment
from quant_sparse_attn.pipeline import load_profile
from quant_sparse_attn.sparsity_alloc import load_budget, synthetic_table
from quant_sparse_attn.tensor_core import ValidationError

SMALL = dict(version=1, num_q_heads=4, num_kv_heads=2, head_dim=16, q_len=32, k_len=48, trials=2)


def write_config(tmp_path, **over):
    path = tmp_path / "cfg.json"
    path.write_text(json.dumps({**SMALL, **over}))
    return path


def small(**over) -> ExperimentConfig:
    return config_from_dict({**SMALL, **over})


def read_summary(path):
    rows = list(csv.DictReader(path.open()))
    return [r for r in rows if r.get("trial", "mean") == "mean"]


# ---- config


def test_default_config_matches_preset():
    cfg = load_config(None)
    assert (cfg.num_q_heads, cfg.num_kv_heads, cfg.head_dim) == (14, 2, 64)
    assert cfg.ratio == 0.2 and cfg.buckets == 9 and cfg.step == 0.5


def test_config_rejects_unknown_and_version():
    with pytest.raises(ValidationError, match="unknown"):
        config_from_dict({"version": 1, "ratoi": 0.2})
    with pytest.raises(ValidationError, match="version"):
        config_from_dict({"ratio": 0.2})
    with pytest.raises(ValidationError):
        config_from_dict({"version": 1, "platform": {"gpu_ms": 1}})


def test_config_roundtrip_and_digest():
    cfg = small(platform={"cpu_estimate_ms": 2.5})
    again = config_from_dict(cfg.to_dict())
    assert again == cfg and again.digest() == cfg.digest()
    assert small(seed=1).digest() != cfg.digest()
    assert cfg.platform == PlatformProfile(cpu_estimate_ms=2.5)


def test_preset_fills_shape():
    cfg = config_from_dict({"version": 1, "model": "qwen2-1.5b"})
    assert (cfg.num_q_heads, cfg.num_kv_heads, cfg.head_dim, cfg.num_layers) == (12, 2, 128, 28)


# ---- run


def test_ratio_one_matches_dense():
    report = run_experiment(small(ratio=1.0))
    for row in report.rows:
        assert row["max_abs"] <= 1e-5
        assert row["recall"] == 1.0
        assert row["makespan_ms"] <= row["serialized_ms"]


def test_dense_path_equals_oracle():
    cfg = small(sparse=False, trials=1)
    inputs = make_inputs(cfg, cfg.seed)
    oracle = naive_attention(inputs.q.data, inputs.k.data, inputs.v.data, inputs.causal, inputs.q_offset)
    assert run_experiment(cfg).rows[0]["max_abs"] == 0.0
    np.testing.assert_allclose(full_attention(inputs).data, oracle, atol=1e-6)


def test_run_is_reproducible(tmp_path):
    cfg_path = write_config(tmp_path)
    out_a, out_b = tmp_path / "a", tmp_path / "b"
    assert main(["run", "--config", str(cfg_path), "--out", str(out_a)]) == 0
    assert main(["run", "--config", str(cfg_path), "--out", str(out_b)]) == 0
    files = sorted(p.name for p in out_a.iterdir())
    assert files and files == sorted(p.name for p in out_b.iterdir())
    for name in files:
        assert (out_a / name).read_bytes() == (out_b / name).read_bytes()
    assert len(read_summary(out_a / files[0])) == 1


def test_run_flag_overrides_digest(tmp_path, capsys):
    cfg_path = write_config(tmp_path)
    assert main(["run", "--config", str(cfg_path), "--ratio", "0.5", "--out", str(tmp_path)]) == 0
    assert f"config={small(ratio=0.5).digest()}" in capsys.readouterr().out


def test_missing_bucket_file(tmp_path, capsys):
    cfg_path = write_config(tmp_path, bucket_file=str(tmp_path / "nope.json"))
    assert main(["run", "--config", str(cfg_path), "--out", str(tmp_path)]) == 2
    assert "error:" in capsys.readouterr().err


def test_invalid_bucket_count(tmp_path):
    assert main(["run", "--config", str(write_config(tmp_path)), "--buckets", "4", "--out", str(tmp_path)]) == 2


# ---- allocate / buckets


def test_allocate_uniform(tmp_path):
    imp = tmp_path / "imp.json"
    imp.write_text(json.dumps({"baseline_loss": 1.0, "head_losses": [1.0001] * 4, "layer_losses": [2.0],
                               "heads_per_layer": 4}))
    assert main(["allocate", "--importance", str(imp), "--out", str(tmp_path)]) == 0
    budget = load_budget(tmp_path / "budget.json")
    np.testing.assert_allclose(budget.ratios, [0.2] * 4, rtol=1e-12)


def test_allocate_worked_example(tmp_path):
    imp = tmp_path / "imp.json"
    deltas = [1e-4, 2e-4, 5e-4, 2e-3]
    imp.write_text(json.dumps({"baseline_loss": 0.0, "head_losses": deltas, "layer_losses": [1.0],
                               "heads_per_layer": 4}))
    assert main(["allocate", "--importance", str(imp), "--ratio", "0.2", "--out", str(tmp_path)]) == 0
    ratios = load_budget(tmp_path / "budget.json").ratios
    np.testing.assert_allclose(ratios, [0.0444, 0.0889, 0.2222, 0.4444], atol=1e-3)


def test_budget_file_feeds_run(tmp_path):
    imp = tmp_path / "imp.json"
    imp.write_text(json.dumps(synthetic_table(3, 4, seed=2).to_dict()))
    assert main(["allocate", "--importance", str(imp), "--out", str(tmp_path)]) == 0
    cfg = small(num_layers=3, budget=str(tmp_path / "budget.json"), trials=1)
    row = run_experiment(cfg).rows[0]
    assert 0 <= row["recall"] <= 1


def test_buckets_center(tmp_path):
    assert main(["buckets", "--center", "0.1", "0.2", "--out", str(tmp_path)]) == 0
    doc = json.loads((tmp_path / "buckets.json").read_text())
    assert len(doc["buckets"]) == 9
    assert main(["buckets", "--center", "0.1", "0.2", "--buckets", "1", "--out", str(tmp_path)]) == 0
    doc = json.loads((tmp_path / "buckets.json").read_text())
    assert doc["buckets"] == [[0.1, 0.2]]


def test_buckets_file_feeds_run(tmp_path):
    cfg_path = write_config(tmp_path)
    assert main(["buckets", "--config", str(cfg_path), "--out", str(tmp_path)]) == 0
    cfg = small(bucket_file=str(tmp_path / "buckets.json"), trials=1)
    assert run_experiment(cfg).rows[0]["recall"] > 0.5


# ---- plan


def test_plan_writes_events_and_profile(tmp_path):
    assert main(["plan", "--out", str(tmp_path)]) == 0
    events = next(tmp_path.glob("plan-*-events.csv"))
    rows = list(csv.DictReader(events.open()))
    assert {r["kind"] for r in rows} == {"npu", "topk", "qkv"}
    profile_path = next(tmp_path.glob("plan-*-profile.json"))
    profile, buckets = load_profile(profile_path)
    assert profile.num_heads == 14 and len(buckets) == 14
    # replay from the saved profile gives the same makespan
    again = tmp_path / "again"
    assert main(["plan", "--profile", str(profile_path), "--out", str(again)]) == 0
    a = read_summary(next(tmp_path.glob("plan-*[!s].csv")))
    b = read_summary(next(again.glob("plan-*[!s].csv")))
    assert a[0]["makespan_ms"] == b[0]["makespan_ms"]
    assert float(a[0]["makespan_ms"]) <= float(a[0]["serialized_ms"])


def test_plan_single_lane_not_faster(tmp_path):
    main(["plan", "--out", str(tmp_path / "t")])
    main(["plan", "--lane", "single", "--out", str(tmp_path / "s")])
    three = read_summary(next((tmp_path / "t").glob("plan-*[!s].csv")))[0]
    single = read_summary(next((tmp_path / "s").glob("plan-*[!s].csv")))[0]
    assert float(three["makespan_ms"]) <= float(single["makespan_ms"])


# ---- bench


@pytest.fixture(scope="module")
def bench_rows():
    cfg = dataclasses.replace(ExperimentConfig(), activations="heavy_tailed", trials=2)
    return {r["baseline"]: r for r in bench_experiment(cfg).summary}


def test_bench_latency_ordering(bench_rows):
    shadow = bench_rows["shadow"]["latency_ms"]
    assert shadow < bench_rows["sparse"]["latency_ms"] < bench_rows["full"]["latency_ms"]
    assert bench_rows["sparse"]["estimation_fraction"] == pytest.approx(2 / 3)
    # estimation caps the gain of C/G sparse far below the 80 % compute cut
    cut = 1 - bench_rows["sparse"]["latency_ms"] / bench_rows["full"]["latency_ms"]
    assert cut < 0.4


def test_bench_accuracy_ordering(bench_rows):
    assert bench_rows["sparse"]["recall"] == 1.0
    assert bench_rows["block_sparse"]["recall"] < bench_rows["shadow"]["recall"]
    assert bench_rows["npu_full"]["relative_l2"] > bench_rows["shadow"]["relative_l2"]
    assert bench_rows["full"]["max_abs"] == 0.0
