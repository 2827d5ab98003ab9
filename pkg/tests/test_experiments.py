import csv
import hashlib
import json
import math
import re

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from conftest import make_feature_cohort
from msimil.colorlab import NormalizationStats
from msimil.dataset import SlideTileSource
from msimil.evaluation import ScoredCase, auc, pearson_r
from msimil.experiments import (
    attention_heatmap,
    hash_inputs,
    implied_area_mm2,
    minmax_normalize,
    nested_subsets,
    ols_log_fit,
    paired_correlation,
    simulate_bag_size,
    titrate,
    write_result,
)
from msimil.milcore import init_model
from msimil.slideio import MSI_H, MSS, SlideRecord
from msimil.synthetic import SyntheticCohortSpec, generate_synthetic_cohort
from msimil.trainer import CAP, EnsembleModel, FoldModel, TrainConfig, cross_validate, predict_cohort

FAST = dict(learning_rate=0.05, max_epochs=20, patience=5, batch_size=8, bag_size_infer=64,
            feature_dim=6, attention_dim=8, dtype="float64", n_folds=3)


# ---------------------------------------------------------------- arithmetic


def test_implied_area():
    # 256 px at 0.5 um/px is 128 um on a side
    assert implied_area_mm2(200) == pytest.approx(200 * 0.128**2, abs=1e-15)
    assert implied_area_mm2(1, 0.5, 10) == pytest.approx(0.256**2, abs=1e-15)
    assert implied_area_mm2(3, 0.25, 5) == pytest.approx(3 * 0.256**2, abs=1e-15)


def test_ols_recovers_log_linear_points():
    f = np.array([0.2, 0.4, 0.6, 0.8, 1.0])
    slope, intercept = ols_log_fit(f, 0.83 + 0.071 * np.log(f))
    assert abs(slope - 0.071) < 1e-10 and abs(intercept - 0.83) < 1e-10
    with pytest.raises(ValueError):
        ols_log_fit([0.5, 0.5], [0.1, 0.2])


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 2**32 - 1))
def test_ols_matches_polyfit(seed):
    rng = np.random.default_rng(seed)
    f = rng.uniform(0.05, 1.0, 6)
    v = rng.normal(size=6)
    slope, intercept = ols_log_fit(f, v)
    ref = np.polyfit(np.log(f), v, 1)
    assert slope == pytest.approx(ref[0], abs=1e-9) and intercept == pytest.approx(ref[1], abs=1e-9)


def test_minmax():
    assert minmax_normalize([2.0, 4.0, 3.0]).tolist() == [0.0, 1.0, 0.5]
    assert minmax_normalize([0.25, 0.25]).tolist() == [1.0, 1.0]
    assert minmax_normalize([0.7]).tolist() == [1.0]


# ---------------------------------------------------------------- titration subsets


def _records(n, n_pos, seed=0):
    rng = np.random.default_rng(seed)
    pos = set(rng.choice(n, n_pos, replace=False).tolist())
    return [SlideRecord(f"r{i:03d}", "", MSI_H if i in pos else MSS) for i in range(n)]


@settings(max_examples=60, deadline=None)
@given(st.integers(4, 120), st.floats(0.05, 0.95), st.integers(0, 1000))
def test_subsets_nested_and_stratified(n, prev, seed):
    n_pos = min(max(1, int(n * prev)), n - 1)
    recs = _records(n, n_pos, seed)
    fr = (0.2, 0.4, 0.6, 0.8, 1.0)
    subs = nested_subsets(recs, fr, seed)
    assert subs[1.0] == recs
    for a, b in zip(fr, fr[1:]):
        assert {r.slide_id for r in subs[a]} <= {r.slide_id for r in subs[b]}
    order = {r.slide_id: i for i, r in enumerate(recs)}
    for f, s in subs.items():
        assert abs(sum(r.label == MSI_H for r in s) - f * n_pos) <= 1
        idx = [order[r.slide_id] for r in s]
        assert idx == sorted(idx)


def test_subset_fraction_bounds():
    with pytest.raises(ValueError):
        nested_subsets(_records(10, 3), [0.0])
    with pytest.raises(ValueError):
        nested_subsets(_records(10, 3), [1.2])


def test_titrate_on_feature_cohort():
    records, source = make_feature_cohort(60, 18, shift=4.0, seed=2)
    res = titrate(records, (0.5, 1.0), TrainConfig(**FAST), seed=0, source=source)
    assert res.subset_sizes == {0.5: 30, 1.0: 60}
    assert res.subset_positives == {0.5: 9, 1.0: 18}
    assert all(a is not None and 0 <= a <= 1 for a in res.aucs.values())
    expected = ols_log_fit([0.5, 1.0], [res.aucs[0.5], res.aucs[1.0]])
    assert (res.slope, res.intercept) == pytest.approx(expected, abs=1e-12)
    assert res.aucs[1.0] > 0.8


def test_titrate_marks_untrainable_fraction():
    records, source = make_feature_cohort(30, 6, seed=1)
    # 10% keeps one positive, too few for three stratified folds with validation positives
    res = titrate(records, (0.1, 1.0), TrainConfig(**FAST), seed=0, source=source)
    assert res.aucs[0.1] is None and res.slope is None


# ---------------------------------------------------------------- bag size


@pytest.fixture(scope="module")
def feature_ensemble():
    records, source = make_feature_cohort(45, 15, k=20, shift=4.0, seed=5)
    cv = cross_validate(records, source, TrainConfig(**FAST))
    return cv.ensemble, records, source


def test_bag_size_cap_at_tile_count_is_seed_invariant(feature_ensemble):
    ens, records, source = feature_ensemble
    res = simulate_bag_size(ens, records, source, sizes=(20, 50), n_seeds=4, mode=CAP)
    for size in (20, 50):
        assert len(set(res.aucs[size])) == 1
    assert res.seeds == [0, 1, 2, 3]


def test_bag_size_matches_standard_evaluation(feature_ensemble):
    ens, records, source = feature_ensemble
    res = simulate_bag_size(ens, records, source, sizes=(3, 64), n_seeds=2, seed=7, mode=CAP)
    assert abs(res.aucs[64][0] - auc(predict_cohort(ens, records, source, seed=7))) < 1e-12


def test_bag_size_deterministic(feature_ensemble):
    ens, records, source = feature_ensemble
    a = simulate_bag_size(ens, records, source, sizes=(3, 6), n_seeds=3)
    b = simulate_bag_size(ens, records, source, sizes=(3, 6), n_seeds=3)
    assert a.aucs == b.aucs
    assert len(set(a.aucs[3])) > 1
    assert a.implied_area_mm2[6] == pytest.approx(implied_area_mm2(6))
    assert a.median(3) == float(np.median(a.aucs[3]))


# ---------------------------------------------------------------- paired sections


def test_paired_correlation_links_by_id():
    a = [ScoredCase(f"s{i}", v, "MSS") for i, v in enumerate([0.1, 0.4, 0.2, 0.9])]
    b = [ScoredCase(f"s{i}_ext", v, "MSS", paired_id=f"s{i}") for i, v in enumerate([0.2, 0.5, 0.1, 0.8])]
    r, pairs = paired_correlation(a, b[::-1])
    assert r == pytest.approx(pearson_r([0.1, 0.4, 0.2, 0.9], [0.2, 0.5, 0.1, 0.8]), abs=1e-15)
    assert ("s0", "s0_ext") in pairs and len(pairs) == 4
    with pytest.raises(ValueError):
        paired_correlation(a, b[:1])


# ---------------------------------------------------------------- heatmaps


@pytest.fixture(scope="module")
def tile_setup():
    spec = SyntheticCohortSpec(n_slides=2, slide_px=(768, 768), glass_rows=1, positive_prevalence=0.5, seed=1)
    c = generate_synthetic_cohort(spec)
    src = SlideTileSource(profiles={p.profile_id: p for p in spec.scanner_profiles}, images=c.images)
    cfg = TrainConfig(feature_dim=8, attention_dim=8, dtype="float64")
    members = [FoldModel(init_model(np.random.default_rng(i), 8, 8, dtype=np.float64), NormalizationStats(), cfg)
               for i in range(2)]
    return c, src, EnsembleModel(members, cfg)


def test_heatmap_outputs(tile_setup, tmp_path):
    c, src, ens = tile_setup
    rec = c.records[0]
    res = attention_heatmap(ens, rec, src, tmp_path, n_tiles=2)
    assert len(res.grid) == 6 and res.normalized.min() == 0.0 and res.normalized.max() == 1.0
    assert res.attention.sum() == pytest.approx(1.0)
    with open(tmp_path / f"{rec.slide_id}_attention.csv") as fh:
        rows = list(csv.reader(fh))
    assert rows[0] == ["slide_id", "grid_x", "grid_y", "attention"] and len(rows) == 7
    assert (tmp_path / f"{rec.slide_id}_heatmap.png").exists()
    for sub in ("high", "low"):
        names = sorted(p.name for p in (tmp_path / sub).iterdir())
        assert len(names) == 2
        assert all(re.fullmatch(rf"{rec.slide_id}_[12]_\d\.\d{{4}}\.png", n) for n in names)
    assert any(n.endswith("_1.0000.png") for n in (p.name for p in (tmp_path / "high").iterdir()))


def test_heatmap_uniform_attention(tile_setup):
    c, src, ens = tile_setup
    flat = []
    for m in ens.members:
        model = init_model(np.random.default_rng(9), 8, 8, dtype=np.float64)
        model.params["attn.w"][:] = 0.0
        flat.append(FoldModel(model, m.stats, m.config))
    res = attention_heatmap(EnsembleModel(flat, ens.config), c.records[0], src)
    assert np.allclose(res.attention, 1 / 6) and res.normalized.tolist() == [1.0] * 6


def test_heatmap_single_tile():
    spec = SyntheticCohortSpec(n_slides=2, slide_px=(512, 256), glass_rows=1, seed=2)
    c = generate_synthetic_cohort(spec)
    src = SlideTileSource(profiles={p.profile_id: p for p in spec.scanner_profiles}, images=c.images)
    cfg = TrainConfig(feature_dim=8, attention_dim=8, dtype="float64")
    ens = EnsembleModel([FoldModel(init_model(np.random.default_rng(0), 8, 8, dtype=np.float64),
                                   NormalizationStats(), cfg)], cfg)
    res = attention_heatmap(ens, c.records[0], src)
    assert res.grid == [(0, 0)] and res.normalized.tolist() == [1.0]


def test_heatmap_no_tiles_is_error():
    spec = SyntheticCohortSpec(n_slides=2, slide_px=(512, 256), glass_rows=1, seed=2)
    c = generate_synthetic_cohort(spec)
    c.images[c.records[0].slide_id][:] = 245
    src = SlideTileSource(profiles={p.profile_id: p for p in spec.scanner_profiles}, images=c.images)
    cfg = TrainConfig(feature_dim=8, attention_dim=8)
    ens = EnsembleModel([FoldModel(init_model(np.random.default_rng(0), 8, 8), NormalizationStats(), cfg)], cfg)
    with pytest.raises(ValueError, match="no tiles"):
        attention_heatmap(ens, c.records[0], src)


# ---------------------------------------------------------------- result files


def test_result_document(tmp_path):
    inp = tmp_path / "in.csv"
    inp.write_bytes(b"slide_id\nx\n")
    blob = hashlib.sha1(b"blob 11\0slide_id\nx\n").hexdigest()
    assert hash_inputs([inp]) == {str(inp): blob}
    out = tmp_path / "res.json"
    doc = write_result(out, "bagsize", {"aucs": {3: [0.5, float("nan")]}, "a": np.arange(2)},
                       config=TrainConfig(), seeds=[0, 1], inputs=hash_inputs([inp]))
    back = json.loads(out.read_text())
    assert back == doc
    assert back["schema_version"] == 1 and back["kind"] == "bagsize"
    assert back["result"] == {"aucs": {"3": [0.5, None]}, "a": [0, 1]}
    assert back["config"]["learning_rate"] == 1e-6 and back["seeds"] == [0, 1]
    assert back["inputs"][str(inp)] == blob
    assert not math.isnan(back["config"]["min_delta"])
