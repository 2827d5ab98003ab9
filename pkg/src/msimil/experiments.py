"""Study drivers: bag-size limit of detection, data titration, paired-section
agreement and attention heatmaps, plus self-describing result files."""
from __future__ import annotations

import csv
import io
import json
import math
from dataclasses import asdict, dataclass, field, is_dataclass, replace
from pathlib import Path
from typing import Sequence

import numpy as np

from . import __version__
from .dataset import BagSource
from .evaluation import ScoredCase, UndefinedMetricError, auc, pearson_r
from .ioutil import atomic_write_text, blob_hash
from .slideio import MSI_H, NATIVE_MAGNIFICATION, TILE_SIZE, UNKNOWN, SlideRecord, write_slide_png
from .trainer import (
    OVERSAMPLE,
    EnsembleModel,
    FeatureCache,
    TrainConfig,
    cross_validate,
    ensemble_scores,
    predict_cohort,
    slide_rng,
)

RESULT_SCHEMA_VERSION = 1
BAG_SIZES = (3, 6, 12, 25, 50, 100, 200, 400, 800)
TITRATION_FRACTIONS = (0.2, 0.4, 0.6, 0.8, 1.0)


# ---------------------------------------------------------------------------
# result files


def _plain(o):
    if is_dataclass(o) and not isinstance(o, type):
        return _plain(asdict(o))
    if isinstance(o, dict):
        return {str(k): _plain(v) for k, v in o.items()}
    if isinstance(o, (list, tuple)):
        return [_plain(v) for v in o]
    if isinstance(o, np.ndarray):
        return _plain(o.tolist())
    if isinstance(o, np.integer):
        return int(o)
    if isinstance(o, (np.floating, float)):
        v = float(o)
        return None if math.isnan(v) else v
    if isinstance(o, Path):
        return str(o)
    return o


def hash_inputs(paths) -> dict[str, str]:
    """git-style blob hash for each input file."""
    return {str(p): blob_hash(Path(p).read_bytes()) for p in paths}


def result_document(kind: str, payload, config=None, seeds=None, inputs: dict | None = None) -> dict:
    return {
        "schema_version": RESULT_SCHEMA_VERSION,
        "kind": kind,
        "artifact_version": __version__,
        "config": _plain(config),
        "seeds": _plain(seeds),
        "inputs": inputs or {},
        "result": _plain(payload),
    }


def write_result(path, kind: str, payload, config=None, seeds=None, inputs: dict | None = None) -> dict:
    doc = result_document(kind, payload, config, seeds, inputs)
    atomic_write_text(path, json.dumps(doc, indent=2, sort_keys=True))
    return doc


# ---------------------------------------------------------------------------
# bag size


def implied_area_mm2(bag_size: int, microns_per_pixel: float = 0.5, magnification: int = NATIVE_MAGNIFICATION) -> float:
    """Tissue area covered by ``bag_size`` tiles at ``magnification``."""
    mpp = microns_per_pixel * NATIVE_MAGNIFICATION / magnification
    return bag_size * (TILE_SIZE * mpp) ** 2 / 1e6


@dataclass
class BagSizeResult:
    aucs: dict[int, list[float]]
    implied_area_mm2: dict[int, float]
    seeds: list[int]
    mode: str = OVERSAMPLE

    def median(self, size: int) -> float:
        return float(np.median(self.aucs[size]))


def simulate_bag_size(
    ensemble: EnsembleModel,
    records: Sequence[SlideRecord],
    source: BagSource,
    sizes: Sequence[int] = BAG_SIZES,
    n_seeds: int = 10,
    seed: int = 0,
    mode: str = OVERSAMPLE,
    cache: FeatureCache | None = None,
) -> BagSizeResult:
    """Ensemble AUC when every slide is represented by ``size`` tiles,
    repeated for ``n_seeds`` sampling seeds ``seed .. seed + n_seeds - 1``."""
    records = [r for r in records if r.label != UNKNOWN]
    cache = cache or FeatureCache()
    seeds = [seed + j for j in range(n_seeds)]
    mpp = float(np.median([r.microns_per_pixel for r in records]))
    aucs = {}
    for size in sizes:
        row = []
        for s in seeds:
            cases = predict_cohort(ensemble, records, source, seed=s, cache=cache, bag_size=size, mode=mode)
            row.append(auc(cases))
        aucs[int(size)] = row
    areas = {int(s): implied_area_mm2(s, mpp, ensemble.config.magnification) for s in sizes}
    return BagSizeResult(aucs, areas, seeds, mode)


# ---------------------------------------------------------------------------
# titration


def nested_subsets(
    records: Sequence[SlideRecord], fractions: Sequence[float], seed: int = 0
) -> dict[float, list[SlideRecord]]:
    """Label-stratified subsets, each contained in every larger one.

    Each class is shuffled once; the subset at fraction f takes the first
    ``round(f * n_class)`` members of every class. Manifest order is kept.
    """
    for f in fractions:
        if not 0.0 < f <= 1.0:
            raise ValueError(f"fraction {f} outside (0, 1]")
    rng = np.random.default_rng(seed)
    rank: dict[str, int] = {}
    for label in sorted({r.label for r in records}):
        members = [r.slide_id for r in records if r.label == label]
        for pos, j in enumerate(rng.permutation(len(members))):
            rank[members[j]] = pos
    counts = {}
    for r in records:
        counts[r.label] = counts.get(r.label, 0) + 1
    out = {}
    for f in sorted(fractions):
        keep = {lab: int(round(f * n)) for lab, n in counts.items()}
        out[f] = [r for r in records if rank[r.slide_id] < keep[r.label]]
    return out


def ols_log_fit(fractions, values) -> tuple[float, float]:
    """Least-squares ``value = intercept + slope * ln(fraction)``."""
    x = np.log(np.asarray(fractions, dtype=np.float64))
    y = np.asarray(values, dtype=np.float64)
    xm, ym = x.mean(), y.mean()
    sxx = float(np.sum((x - xm) ** 2))
    if sxx == 0:
        raise ValueError("need at least two distinct fractions")
    slope = float(np.sum((x - xm) * (y - ym)) / sxx)
    return slope, float(ym - slope * xm)


@dataclass
class TitrationResult:
    aucs: dict[float, float | None]
    slope: float | None
    intercept: float | None
    subset_sizes: dict[float, int]
    subset_positives: dict[float, int]


def titrate(
    records: Sequence[SlideRecord],
    fractions: Sequence[float],
    config: TrainConfig,
    seed: int,
    source: BagSource,
    eval_records: Sequence[SlideRecord] | None = None,
) -> TitrationResult:
    """Cross-validated training on nested label-stratified subsets.

    With ``eval_records`` each subset's ensemble is scored on them;
    otherwise the subset's out-of-fold AUC is used.
    """
    records = [r for r in records if r.label != UNKNOWN]
    subsets = nested_subsets(records, fractions, seed)
    aucs: dict[float, float | None] = {}
    for f, subset in subsets.items():
        try:
            res = cross_validate(subset, source, replace(config, seed=seed))
            if eval_records is not None:
                aucs[f] = auc(predict_cohort(res.ensemble, eval_records, source, seed=seed))
            else:
                aucs[f] = res.oof_auc
        except (ValueError, UndefinedMetricError):
            aucs[f] = None
    ok = [(f, a) for f, a in aucs.items() if a is not None]
    slope = intercept = None
    if len({f for f, _ in ok}) >= 2:
        slope, intercept = ols_log_fit([f for f, _ in ok], [a for _, a in ok])
    return TitrationResult(
        aucs,
        slope,
        intercept,
        {f: len(s) for f, s in subsets.items()},
        {f: sum(r.label == MSI_H for r in s) for f, s in subsets.items()},
    )


# ---------------------------------------------------------------------------
# paired sections


def paired_correlation(cases_a: Sequence[ScoredCase], cases_b: Sequence[ScoredCase]) -> tuple[float, list[tuple[str, str]]]:
    """Pearson R between the two renderings of each slide; ``cases_b`` are
    linked to ``cases_a`` through ``paired_id``."""
    by_id = {c.slide_id: c for c in cases_a}
    pairs = []
    for c in cases_b:
        if c.paired_id in by_id:
            pairs.append((by_id[c.paired_id], c))
    if len(pairs) < 2:
        raise ValueError("fewer than two linked pairs")
    r = pearson_r([a.score for a, _ in pairs], [b.score for _, b in pairs])
    return r, [(a.slide_id, b.slide_id) for a, b in pairs]


# ---------------------------------------------------------------------------
# heatmaps


def minmax_normalize(values: np.ndarray) -> np.ndarray:
    """Scale to [0, 1]; a constant vector maps to all ones."""
    v = np.asarray(values, dtype=np.float64)
    lo, hi = v.min(), v.max()
    if hi == lo:
        return np.ones_like(v)
    return (v - lo) / (hi - lo)


def tile_attention(ensemble: EnsembleModel, record: SlideRecord, tiles: np.ndarray, seed: int = 0,
                   cache: FeatureCache | None = None) -> tuple[np.ndarray, np.ndarray]:
    """Mean member attention per distinct tile of the scored bag.

    Returns ``(tile_indices, attention)``; repeated draws of a tile pool
    their attention before averaging over members.
    """
    _, _, att, idx = ensemble_scores(ensemble, record, tiles, slide_rng(seed, record.slide_id), cache=cache)
    idx = np.atleast_2d(idx)
    if idx.shape[0] == 1:
        idx = np.repeat(idx, att.shape[0], axis=0)
    uniq = np.unique(idx)
    per_model = np.zeros((att.shape[0], uniq.size))
    for m in range(att.shape[0]):
        pos = np.searchsorted(uniq, idx[m])
        np.add.at(per_model[m], pos, att[m])
    return uniq, per_model.mean(axis=0)


@dataclass
class HeatmapResult:
    slide_id: str
    grid: list[tuple[int, int]]
    attention: np.ndarray
    normalized: np.ndarray
    files: list[Path] = field(default_factory=list)


def _overlay(image: np.ndarray, refs, normalized, scale: int, color=(220, 30, 30), max_alpha=0.6) -> np.ndarray:
    h, w = image.shape[0] // scale, image.shape[1] // scale
    thumb = image[: h * scale, : w * scale].reshape(h, scale, w, scale, 3).mean(axis=(1, 3))
    alpha = np.zeros((h, w))
    for ref, v in zip(refs, normalized):
        foot = TILE_SIZE * ref.factor
        y0, x0 = ref.grid_y * foot // scale, ref.grid_x * foot // scale
        alpha[y0 : y0 + foot // scale, x0 : x0 + foot // scale] = max_alpha * v
    out = thumb * (1 - alpha[..., None]) + np.asarray(color, dtype=float) * alpha[..., None]
    return np.clip(np.floor(out + 0.5), 0, 255).astype(np.uint8)


def attention_heatmap(
    ensemble: EnsembleModel,
    record: SlideRecord,
    source,
    out_dir=None,
    n_tiles: int = 4,
    seed: int = 0,
    thumbnail_scale: int = 16,
    cache: FeatureCache | None = None,
) -> HeatmapResult:
    """Per-tile attention for one slide, min-max scaled within the slide.

    With ``out_dir`` set, writes ``{slide_id}_heatmap.png``,
    ``{slide_id}_attention.csv`` and the ``n_tiles`` highest- and
    lowest-attention tiles under ``high/`` and ``low/``.
    """
    bag = source.bag(record)
    if len(bag.refs) == 0:
        raise ValueError(f"slide {record.slide_id} has no tiles")
    idx, att = tile_attention(ensemble, record, bag.pixels, seed, cache)
    norm = minmax_normalize(att)
    refs = [bag.refs[i] for i in idx]
    res = HeatmapResult(record.slide_id, [(r.grid_x, r.grid_y) for r in refs], att, norm)
    if out_dir is None:
        return res
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["slide_id", "grid_x", "grid_y", "attention"])
    for r, v in zip(refs, norm):
        w.writerow([record.slide_id, r.grid_x, r.grid_y, f"{v:.6f}"])
    p = out / f"{record.slide_id}_attention.csv"
    atomic_write_text(p, buf.getvalue())
    res.files.append(p)
    if bag.pixels.ndim == 4:
        image = source.image(record).pixels
        p = out / f"{record.slide_id}_heatmap.png"
        write_png(p, _overlay(image, refs, norm, thumbnail_scale))
        res.files.append(p)
        order = np.argsort(-norm, kind="stable")
        n = min(n_tiles, len(order))
        for sub, picks in (("high", order[:n]), ("low", order[::-1][:n])):
            for rank, j in enumerate(picks, start=1):
                p = out / sub / f"{record.slide_id}_{rank}_{norm[j]:.4f}.png"
                write_png(p, bag.pixels[idx[j]])
                res.files.append(p)
    return res


def write_png(path, pixels: np.ndarray) -> None:
    """PNG written under a temporary name and renamed into place."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_name(f".{path.name}.tmp")
    write_slide_png(tmp, pixels)
    tmp.replace(path)
