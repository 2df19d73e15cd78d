import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from oracles import scan_bucket

from quant_sparse_attn.bucketing import (
    DEFAULT_PER_AXIS,
    DEFAULT_STEP,
    ScalePair,
    bucket_distances,
    build_grid,
    calibrate_center,
    load_grid,
    lookup_graph,
    per_axis_for_count,
    save_grid,
    select_bucket,
)
from quant_sparse_attn.tensor_core import Tensor, ValidationError, dequantize, max_scale, quantize

scales = st.floats(1e-4, 10.0, allow_nan=False)


def test_defaults_are_nine_buckets_at_half_step():
    assert DEFAULT_STEP == 0.5
    grid = build_grid(ScalePair(0.1, 0.2))
    assert len(grid) == 9 and DEFAULT_PER_AXIS == 3


def test_grid_example():
    grid = build_grid(ScalePair(0.1, 0.2), 0.5, 3)
    pts = grid.as_array()
    assert sorted(set(np.round(pts[:, 0], 12))) == [0.05, 0.1, 0.2]
    assert sorted(set(np.round(pts[:, 1], 12))) == [0.1, 0.2, 0.4]
    assert len(grid) == 9
    assert ScalePair(0.1, 0.2) in grid.buckets


def test_single_bucket_grid():
    grid = build_grid(ScalePair(0.3, 0.7), 0.5, 1)
    assert grid.buckets == [ScalePair(0.3, 0.7)]


@pytest.mark.parametrize("step, per_axis", [(0.0, 3), (1.0, 3), (1.5, 3), (0.5, 2), (0.5, 0)])
def test_grid_validation(step, per_axis):
    with pytest.raises(ValidationError):
        build_grid(ScalePair(1.0, 1.0), step, per_axis)


@pytest.mark.parametrize("per_axis", [1, 3, 5, 7])
def test_multipliers_closed_under_inversion(per_axis):
    grid = build_grid(ScalePair(1.0, 1.0), 0.5, per_axis)
    mult = sorted(set(np.round(grid.as_array()[:, 0], 12)))
    assert sorted(np.round([1 / m for m in mult], 12)) == mult
    assert len(grid) == per_axis**2


def test_select_exact_center():
    grid = build_grid(ScalePair(0.1, 0.2))
    for i, b in enumerate(grid.buckets):
        assert select_bucket(grid, b) == i


def test_select_example_by_exhaustive_scan():
    grid = build_grid(ScalePair(0.1, 0.2), 0.5, 3)
    d = bucket_distances(grid, ScalePair(0.09, 0.21))
    chosen = select_bucket(grid, ScalePair(0.09, 0.21))
    assert grid.buckets[chosen] == ScalePair(0.1, 0.2)
    assert d[chosen] == min(d)
    assert d[chosen] == pytest.approx(((0.01) ** 2 + (0.01) ** 2) / 2)


def test_select_tie_goes_to_lower_index():
    grid = build_grid(ScalePair(1.0, 1.0), 0.5, 3)
    # halfway between q-scales 0.5 and 1.0 on the center k row
    idx = select_bucket(grid, ScalePair(0.75, 1.0))
    assert idx == min(i for i, b in enumerate(grid.buckets) if b in (ScalePair(0.5, 1.0), ScalePair(1.0, 1.0)))


@settings(max_examples=300, deadline=None)
@given(scales, scales, scales, scales, st.sampled_from([1, 3, 5]), st.floats(0.05, 0.95))
def test_select_matches_scan(cq, ck, lq, lk, per_axis, step):
    grid = build_grid(ScalePair(cq, ck), step, per_axis)
    pts = [(b.lambda_q, b.lambda_k) for b in grid.buckets]
    assert select_bucket(grid, ScalePair(lq, lk)) == scan_bucket(pts, lq, lk)


def test_log_metric_alternative():
    grid = build_grid(ScalePair(1.0, 1.0), 0.5, 3)
    # 0.72 is nearer 0.5 linearly (0.22 < 0.28) but nearer 1.0 in log space (0.33 < 0.37)
    obs = ScalePair(0.72, 1.0)
    assert grid.buckets[select_bucket(grid, obs, "linear")] == ScalePair(0.5, 1.0)
    assert grid.buckets[select_bucket(grid, obs, "log")] == ScalePair(1.0, 1.0)
    with pytest.raises(ValidationError):
        select_bucket(grid, obs, "cubic")


def test_lookup_graph_caching():
    grid = build_grid(ScalePair(0.1, 0.2))
    g1 = lookup_graph(grid, 4, (2, 128, 64))
    g2 = lookup_graph(grid, 4, (2, 128, 64))
    assert g1 == g2 and grid.hits == 1 and grid.misses == 1
    assert lookup_graph(grid, 4, (4, 128, 64)) != g1
    with pytest.raises(ValidationError):
        lookup_graph(grid, 9, (1,))


def test_full_population_count():
    grid = build_grid(ScalePair(0.1, 0.2))
    ids = {lookup_graph(grid, b, s) for b in range(9) for s in ("a", "b")}
    assert len(ids) == 18 and len(grid.graph_cache) == 18


@settings(max_examples=100, deadline=None)
@given(st.integers(0, 2**32 - 1), st.floats(0.2, 5.0))
def test_bucket_quantization_error_bound(seed, spread):
    rng = np.random.default_rng(seed)
    t = Tensor(rng.normal(0, spread, size=256))
    observed = max_scale(t)
    grid = build_grid(ScalePair(observed * rng.uniform(0.3, 3), 1.0), 0.5, 3)
    chosen = grid.buckets[select_bucket(grid, ScalePair(observed, 1.0))].lambda_q
    q = quantize(t, chosen)
    err = np.abs(dequantize(q).data.astype(np.float64) - t.data)
    # rounding error plus whatever was clipped above 127 * chosen
    clip = np.maximum(np.abs(t.data.astype(np.float64)) - 127 * np.float32(chosen), 0)
    assert np.all(err <= np.float32(chosen) / 2 + clip + 1e-6 * np.abs(t.data) + 1e-12)
    if observed <= chosen:
        assert clip.max() <= 1e-6 * np.abs(t.data).max()


def test_file_roundtrip(tmp_path):
    grid = build_grid(ScalePair(0.03, 0.04), 0.5, 5)
    save_grid(grid, tmp_path / "g.json")
    back = load_grid(tmp_path / "g.json")
    assert back.buckets == grid.buckets and back.step == 0.5 and back.per_axis == 5
    with pytest.raises(FileNotFoundError):
        load_grid(tmp_path / "missing.json")


def test_calibration_center_and_count():
    assert calibrate_center([0.1, 0.3], [0.2, 0.2]) == ScalePair(0.2, 0.2)
    assert per_axis_for_count(9) == 3 and per_axis_for_count(1) == 1
    with pytest.raises(ValidationError):
        per_axis_for_count(4)
