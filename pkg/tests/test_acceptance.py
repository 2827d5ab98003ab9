"""Acceptance suite: one test per criterion, each recording a PASS/FAIL line.

The end-to-end criteria share a trained ensemble built once per module.
Run with ``pytest tests/test_acceptance.py -v``; the summary lines are also
printed at the end of the session.
"""
import math
import subprocess
import sys
import time

import numpy as np
import pytest
from scipy.stats import norm

from msimil.colorlab import JitterParams
from msimil.dataset import SlideTileSource
from msimil.evaluation import (
    CaseTable,
    auc,
    bootstrap_ci,
    confusion_at,
    mann_whitney_u,
    pearson_r,
    roc_curve,
    select_threshold,
    trapezoid_area,
)
from msimil.experiments import attention_heatmap, paired_correlation, simulate_bag_size, titrate
from msimil.milcore import LossWeights, attention_pool, backward, forward, init_model, weighted_bce
from msimil.slideio import MSI_H, MSS, PROCEDURES, SlideRecord
from msimil.synthetic import EXTERNAL_SCANNER, SyntheticCohortSpec, generate_synthetic_cohort, synthesize_paired_sections
from msimil.trainer import (
    OVERSAMPLE,
    FeatureCache,
    TrainConfig,
    checkpoint_bytes,
    cross_validate,
    load_ensemble,
    predict_cohort,
    save_ensemble,
    stratified_folds,
    stratum_of,
    train_fold,
)

# learning rate raised from the 1e-6 default for the small from-scratch extractor
E2E_CONFIG = dict(learning_rate=1e-3, max_epochs=15)


def _source(*cohorts):
    profiles = {}
    images = {}
    for c in cohorts:
        profiles.update({p.profile_id: p for p in c.spec.scanner_profiles})
        profiles[c.spec.external_profile.profile_id] = c.spec.external_profile
        images.update(c.images)
    return SlideTileSource(profiles=profiles, images=images)


# ---------------------------------------------------------------- 1 gradients


def _central(model, bag, label, weights, seed, name, idx, step):
    p = model.params[name]
    old = p[idx]
    p[idx] = old + step
    lp = weighted_bce(forward(bag, model, True, np.random.default_rng(seed))[0], label, weights)
    p[idx] = old - step
    lm = weighted_bce(forward(bag, model, True, np.random.default_rng(seed))[0], label, weights)
    p[idx] = old
    return (lp - lm) / (2 * step)


def test_criterion_1_gradient_fidelity(criterion):
    start = time.perf_counter()
    worst, checked, kinks = 0.0, 0, 0
    for seed in range(10):
        rng = np.random.default_rng(seed)
        model = init_model(rng, feature_dim=8, attention_dim=16, dropout_rate=0.1, dtype=np.float64)
        bag = rng.normal(size=(5, 3, 24, 24))
        weights = LossWeights(float(rng.uniform(0.5, 4)), float(rng.uniform(0.5, 1.5)))
        label = seed % 2
        _, _, cache = forward(bag, model, True, np.random.default_rng(100 + seed))
        grads, _ = backward(cache, label, weights)
        for name, p in model.params.items():
            idxs = list(np.ndindex(p.shape))
            # every element for seed 0 and for the small tensors; a fixed
            # random subset of the large convolution kernels otherwise
            if seed > 0 and len(idxs) > 300:
                pick = rng.choice(len(idxs), 64, replace=False)
                idxs = [idxs[i] for i in pick]
            ana = np.array([grads[name][i] for i in idxs])
            num = np.empty(len(idxs))
            for j, i in enumerate(idxs):
                num[j] = _central(model, bag, label, weights, 100 + seed, name, i, 1e-5)
                fine = _central(model, bag, label, weights, 100 + seed, name, i, 1e-6)
                if abs(num[j] - fine) > 1e-6 + 1e-4 * abs(fine):
                    # the two steps disagree: a ReLU or max-pool switch lies
                    # within 1e-5 of the point, so the smaller step is used
                    kinks += 1
                    num[j] = fine
            denom = max(np.linalg.norm(ana), np.linalg.norm(num), 1e-12)
            err = float(np.linalg.norm(ana - num) / denom)
            worst = max(worst, err)
            checked += len(idxs)
    elapsed = time.perf_counter() - start
    criterion(1, "gradient fidelity", worst < 1e-4 and elapsed < 60,
              f"worst relative error {worst:.2e} over {checked} elements ({kinks} at kinks), {elapsed:.0f}s")


# ---------------------------------------------------------------- 2 attention


def test_criterion_2_attention_invariants(criterion):
    worst_sum, worst_perm = 0.0, 0.0
    for K in (1, 2, 50, 1600):
        for seed in range(3):
            rng = np.random.default_rng([K, seed])
            model = init_model(rng, feature_dim=8, attention_dim=16, dtype=np.float64)
            bag = rng.normal(size=(K, 3, 22, 22))
            s, a, _ = forward(bag, model, False)
            perm = rng.permutation(K)
            s_perm, a_perm, _ = forward(bag[perm], model, False)
            worst_sum = max(worst_sum, abs(a.sum() - 1.0))
            worst_perm = max(worst_perm, abs(s - s_perm))
            assert np.allclose(a_perm, a[perm], atol=1e-15)
        # the full-size pooling head on features
        H = rng.normal(size=(K, 32))
        head = init_model(rng, attention_dim=128, in_features=32, dtype=np.float64)
        z, a = attention_pool(H, head)
        z2, _ = attention_pool(H[rng.permutation(K)], head)
        worst_sum = max(worst_sum, abs(a.sum() - 1.0))
        worst_perm = max(worst_perm, float(np.abs(z - z2).max()))
    criterion(2, "attention invariants", worst_sum < 1e-9 and worst_perm < 1e-12,
              f"max |sum a - 1| {worst_sum:.1e}, max permutation change {worst_perm:.1e}")


# ---------------------------------------------------------------- 3 metric oracles


def _sweep(scores, y, target):
    n_pos, n_neg = y.sum(), (~y).sum()
    best = None
    for thr in sorted(set(scores.tolist()), reverse=True):
        pred = scores >= thr
        if (pred & y).sum() / n_pos >= target - 1e-12:
            spec = (~pred & ~y).sum() / n_neg
            if best is None or spec > best[1]:
                best = (thr, spec)
    return best


def test_criterion_3_metric_oracles(criterion):
    failures = []
    for i in range(200):
        rng = np.random.default_rng([3, i])
        n = int(rng.integers(2, 1001))
        levels = int(rng.integers(2, 60))
        s = rng.integers(0, levels, n) / (levels - 1)
        y = rng.random(n) < rng.uniform(0.1, 0.9)
        y[0], y[1] = True, False
        t = CaseTable(s, y)
        a = auc(t)
        pos, neg = s[y], s[~y]
        brute = ((pos[:, None] > neg[None, :]).sum() + 0.5 * (pos[:, None] == neg[None, :]).sum()) / (pos.size * neg.size)
        u, _ = mann_whitney_u(pos, neg)
        if a != brute:
            failures.append(f"auc fixture {i}")
        if abs(trapezoid_area(roc_curve(t)) - a) >= 1e-12:
            failures.append(f"roc fixture {i}")
        if u / (pos.size * neg.size) != a:
            failures.append(f"U fixture {i}")
    n_op = 0
    for i in range(200):
        rng = np.random.default_rng([33, i])
        n = int(rng.integers(2, 51))
        s = rng.integers(0, 15, n) / 14
        y = rng.random(n) < 0.5
        y[0], y[1] = True, False
        t = CaseTable(s, y)
        for target in (0.5, 0.7, 0.9, 0.95, 1.0):
            thr = select_threshold(t, target)
            o_thr, o_spec = _sweep(s, y, target)
            c = confusion_at(t, thr)
            n_op += 1
            if thr != o_thr or c["tn"] / (c["tn"] + c["fp"]) != o_spec:
                failures.append(f"operating point fixture {i} target {target}")
    criterion(3, "metric oracles", not failures,
              f"200 AUC fixtures, {n_op} operating points, {len(failures)} mismatches")


# ---------------------------------------------------------------- 4 bootstrap


def test_criterion_4_bootstrap(criterion):
    start = time.perf_counter()
    rng = np.random.default_rng(4)
    t = CaseTable(rng.random(80), rng.random(80) < 0.4)
    same = bootstrap_ci(auc, t, n=1000, seed=7) == bootstrap_ci(auc, t, n=1000, seed=7)
    d = 1.0
    truth = float(norm.cdf(d / math.sqrt(2)))
    covered = 0
    trials = 500
    for i in range(trials):
        r = np.random.default_rng([44, i])
        pos, neg = r.normal(d, 1, 40), r.normal(0, 1, 80)
        ci = bootstrap_ci(auc, CaseTable(np.concatenate([pos, neg]), [1] * 40 + [0] * 80), n=1000, seed=i)
        covered += ci.lower <= truth <= ci.upper
    rate = covered / trials
    elapsed = time.perf_counter() - start
    criterion(4, "bootstrap determinism and coverage", same and 0.90 <= rate <= 0.98 and elapsed < 300,
              f"coverage {rate:.3f} of {trials} (true AUC {truth:.4f}), bit-exact rerun {same}, {elapsed:.0f}s")


# ---------------------------------------------------------------- 11 folds


def test_criterion_11_stratified_folds(criterion):
    worst = 0
    for i in range(1000):
        rng = np.random.default_rng([11, i])
        n = int(rng.integers(5, 300))
        k = int(rng.integers(2, 8))
        profiles = ["identity", "scanner_b", "scanner_c"][: int(rng.integers(1, 4))]
        records = [
            SlideRecord(
                f"s{j}", "", MSI_H if rng.random() < rng.uniform(0.05, 0.5) else MSS,
                gleason_total=[None, 7, 8, 9, 10][int(rng.integers(5))],
                procedure=[None, *PROCEDURES][int(rng.integers(len(PROCEDURES) + 1))],
                scanner_profile=profiles[int(rng.integers(len(profiles)))],
            )
            for j in range(n)
        ]
        f = stratified_folds(records, k, seed=i)
        counts = {}
        for r in records:
            counts.setdefault(stratum_of(r, f.keys), np.zeros(k, int))[f.folds[r.slide_id]] += 1
        for c in counts.values():
            worst = max(worst, int(c.max() - c.min()))
    criterion(11, "stratified folds", worst <= 1, f"max per-fold spread within a stratum {worst} over 1000 manifests")


# ---------------------------------------------------------------- shared end-to-end run


@pytest.fixture(scope="module")
def e2e():
    start = time.perf_counter()
    dev = generate_synthetic_cohort(SyntheticCohortSpec(n_slides=200, positive_prevalence=0.2,
                                                        signal_tile_fraction=0.05, signal_strength=1.0, seed=11))
    test = generate_synthetic_cohort(SyntheticCohortSpec(n_slides=100, positive_prevalence=0.2,
                                                         signal_tile_fraction=0.05, signal_strength=1.0,
                                                         seed=12, id_prefix="T"))
    src = _source(dev, test)
    cv = cross_validate(dev.records, src, TrainConfig(**E2E_CONFIG))
    cache = FeatureCache()
    cases = predict_cohort(cv.ensemble, test.records, src, seed=0, cache=cache)
    return dict(dev=dev, test=test, source=src, cv=cv, cache=cache, cases=cases,
                seconds=time.perf_counter() - start)


@pytest.mark.slow
def test_criterion_5_end_to_end_recovery(e2e, criterion):
    a = auc(e2e["cases"])
    cv = e2e["cv"]
    criterion(5, "end-to-end MIL recovery", a >= 0.90,
              f"held-out ensemble AUC {a:.4f} on 100 slides, out-of-fold AUC {cv.oof_auc:.4f}, "
              f"best epochs {[m.best_epoch for m in cv.ensemble.members]}, {e2e['seconds'] / 60:.1f} min")


@pytest.mark.slow
def test_criterion_6_limit_of_detection(e2e, criterion):
    res = simulate_bag_size(e2e["cv"].ensemble, e2e["test"].records, e2e["source"], sizes=(3, 200, 400, 800),
                            n_seeds=10, mode=OVERSAMPLE, cache=e2e["cache"])
    m = {s: res.median(s) for s in (3, 200, 400, 800)}
    ok = m[200] - m[3] >= 0.05 and abs(m[800] - m[400]) <= 0.02
    criterion(6, "limit-of-detection shape", ok,
              "median AUC " + ", ".join(f"{s}: {v:.4f}" for s, v in m.items()))


@pytest.mark.slow
def test_criterion_9_heatmap_localization(e2e, criterion):
    hits, total = 0, 0
    for r in e2e["test"].records:
        planted = set(e2e["test"].signal_tiles[r.slide_id])
        if r.label != MSI_H or not planted:
            continue
        res = attention_heatmap(e2e["cv"].ensemble, r, e2e["source"], cache=e2e["cache"])
        on = [a for g, a in zip(res.grid, res.attention) if g in planted]
        off = [a for g, a in zip(res.grid, res.attention) if g not in planted]
        if not on or not off:
            continue
        total += 1
        hits += np.mean(on) > np.mean(off)
    frac = hits / total if total else 0.0
    criterion(9, "heatmap signal localization", total > 0 and frac >= 0.9,
              f"{hits} of {total} positive slides attend more to planted tiles ({frac:.2%})")


@pytest.mark.slow
def test_criterion_10_persistence(e2e, criterion, tmp_path):
    ens = e2e["cv"].ensemble
    test = e2e["test"]
    save_ensemble(tmp_path / "model", ens)
    loaded = load_ensemble(tmp_path / "model")
    before = [c.score for c in e2e["cases"]]
    after = [c.score for c in predict_cohort(loaded, test.records, e2e["source"], seed=0)]
    same_pred = before == after
    same_bytes = all(checkpoint_bytes(a) == checkpoint_bytes(b) for a, b in zip(ens.members, loaded.members))

    # two in-process trainings and one in a fresh interpreter
    recs = test.records[:12]
    cfg = TrainConfig(learning_rate=1e-3, max_epochs=2, bag_size_train=8, batch_size=4)
    runs = [checkpoint_bytes(train_fold(recs[:8], recs[8:], cfg, np.random.default_rng(3), e2e["source"])[0])
            for _ in range(2)]
    script = (
        "import sys, numpy as np\n"
        "from msimil.synthetic import SyntheticCohortSpec, generate_synthetic_cohort\n"
        "from msimil.dataset import SlideTileSource\n"
        "from msimil.trainer import TrainConfig, train_fold, checkpoint_bytes\n"
        "c = generate_synthetic_cohort(SyntheticCohortSpec(n_slides=100, positive_prevalence=0.2, seed=12, id_prefix='T'))\n"
        "p = {x.profile_id: x for x in c.spec.scanner_profiles}\n"
        "src = SlideTileSource(profiles=p, images=c.images)\n"
        "r = c.records[:12]\n"
        "cfg = TrainConfig(learning_rate=1e-3, max_epochs=2, bag_size_train=8, batch_size=4)\n"
        "sys.stdout.buffer.write(checkpoint_bytes(train_fold(r[:8], r[8:], cfg, np.random.default_rng(3), src)[0]))\n"
    )
    fresh = subprocess.run([sys.executable, "-c", script], capture_output=True, check=True).stdout
    reproducible = runs[0] == runs[1] == fresh
    criterion(10, "persistence", same_pred and same_bytes and reproducible,
              f"reload predictions identical {same_pred}, checkpoint bytes identical {same_bytes}, "
              f"retraining bit-identical across runs {reproducible}")


# ---------------------------------------------------------------- 7 paired sections


@pytest.mark.slow
def test_criterion_7_paired_sections(criterion):
    dev = generate_synthetic_cohort(SyntheticCohortSpec(n_slides=60, positive_prevalence=0.3, seed=21))
    held = generate_synthetic_cohort(SyntheticCohortSpec(n_slides=40, positive_prevalence=0.3, seed=22, id_prefix="P"))
    profiles = {p.profile_id: p for p in held.spec.scanner_profiles}
    ext = synthesize_paired_sections(held, profiles, EXTERNAL_SCANNER, jitter_noise=0.05, seed=0)
    src = _source(dev, held, ext)
    rows = []
    for seed in range(3):
        r = {}
        for scope in ("slide", "tile"):
            cfg = TrainConfig(**E2E_CONFIG, n_folds=3, seed=seed, jitter=JitterParams(scope=scope))
            ens = cross_validate(dev.records, src, cfg).ensemble
            a = predict_cohort(ens, held.records, src, seed=seed)
            b = predict_cohort(ens, ext.records, src, seed=seed)
            r[scope] = paired_correlation(a, b)[0]
        rows.append(r)
    slide = float(np.mean([r["slide"] for r in rows]))
    tile = float(np.mean([r["tile"] for r in rows]))
    criterion(7, "paired-section generalizability shape", slide >= tile,
              f"mean R slide-scope {slide:.4f} vs tile-scope {tile:.4f}; per seed "
              + ", ".join(f"{r['slide']:.3f}/{r['tile']:.3f}" for r in rows))


# ---------------------------------------------------------------- 8 titration


@pytest.mark.slow
def test_criterion_8_titration(criterion):
    dev = generate_synthetic_cohort(SyntheticCohortSpec(n_slides=100, positive_prevalence=0.3, seed=31))
    held = generate_synthetic_cohort(SyntheticCohortSpec(n_slides=60, positive_prevalence=0.3, seed=32, id_prefix="Q"))
    src = _source(dev, held)
    cfg = TrainConfig(**E2E_CONFIG, n_folds=3)
    res = titrate(dev.records, (0.2, 0.4, 0.6, 0.8, 1.0), cfg, seed=0, source=src, eval_records=held.records)
    a02, a10 = res.aucs[0.2], res.aucs[1.0]
    ok = a02 is not None and a10 is not None and a10 >= a02 and res.slope is not None and res.slope >= 0
    criterion(8, "titration shape", ok,
              "AUC " + ", ".join(f"{f}: {'n/a' if a is None else f'{a:.4f}'}" for f, a in res.aucs.items())
              + f"; slope {res.slope}")
