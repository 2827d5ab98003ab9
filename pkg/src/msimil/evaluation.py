"""Slide-level metrics, bootstrap intervals and subgroup analysis."""
from __future__ import annotations

import csv
import io
import json
import math
from dataclasses import asdict, dataclass, field
from typing import Callable, Iterable, Sequence

import numpy as np
from scipy.special import erfc
from scipy.stats import rankdata

POSITIVE = "MSI_H"
NEGATIVE = "MSS"


class UndefinedMetricError(ValueError):
    """A metric has no value on the given cases (e.g. a single class)."""


@dataclass
class ScoredCase:
    slide_id: str
    score: float
    label: str
    gleason_total: int | None = None
    procedure: str | None = None
    scanner_profile: str | None = None
    stain_site: str | None = None
    tissue_area_mm2: float | None = None
    tumor_purity: float | None = None
    paired_id: str | None = None
    # per-model attention over the scored bag and the tile indices in that bag
    attention: np.ndarray | None = field(default=None, repr=False, compare=False)
    bag_indices: np.ndarray | None = field(default=None, repr=False, compare=False)

    def __post_init__(self):
        s = float(self.score)
        if not (math.isfinite(s) and 0.0 <= s <= 1.0):
            raise ValueError(f"{self.slide_id}: score {self.score!r} outside [0, 1]")
        self.score = s
        if self.label not in (POSITIVE, NEGATIVE):
            raise ValueError(f"{self.slide_id}: label must be {POSITIVE} or {NEGATIVE}, got {self.label!r}")

    @property
    def y(self) -> int:
        return int(self.label == POSITIVE)


class CaseTable:
    """Column view of a list of cases; what the metric functions work on."""

    __slots__ = ("scores", "y", "ids")

    def __init__(self, scores, y, ids=None):
        self.scores = np.asarray(scores, dtype=np.float64)
        self.y = np.asarray(y).astype(bool)
        if self.scores.shape != self.y.shape or self.scores.ndim != 1:
            raise ValueError("scores and labels must be 1-D and of equal length")
        self.ids = ids

    def __len__(self):
        return self.scores.size

    def take(self, idx) -> "CaseTable":
        return CaseTable(self.scores[idx], self.y[idx])


def as_table(cases) -> CaseTable:
    if isinstance(cases, CaseTable):
        return cases
    cases = list(cases)
    return CaseTable(
        [c.score for c in cases],
        [c.y for c in cases],
        [c.slide_id for c in cases],
    )


def _two_class(t: CaseTable) -> tuple[int, int]:
    n_pos = int(t.y.sum())
    n_neg = len(t) - n_pos
    if n_pos == 0 or n_neg == 0:
        raise UndefinedMetricError("AUC is undefined without both classes")
    return n_pos, n_neg


def _u_statistic(pos: np.ndarray, neg: np.ndarray) -> tuple[float, np.ndarray]:
    ranks = rankdata(np.concatenate([pos, neg]))
    n1 = pos.size
    return float(ranks[:n1].sum() - n1 * (n1 + 1) / 2.0), ranks


def auc(cases) -> float:
    """Probability a random positive outscores a random negative, ties 1/2."""
    t = as_table(cases)
    n_pos, n_neg = _two_class(t)
    u, _ = _u_statistic(t.scores[t.y], t.scores[~t.y])
    return u / (n_pos * n_neg)


def roc_curve(cases) -> list[tuple[float, float, float]]:
    """(fpr, tpr, threshold) for every distinct score, from +inf down to -inf.

    A case counts as predicted positive when ``score >= threshold``.
    """
    t = as_table(cases)
    n_pos, n_neg = _two_class(t)
    order = np.argsort(-t.scores, kind="stable")
    s, y = t.scores[order], t.y[order]
    tps = np.cumsum(y)
    fps = np.cumsum(~y)
    # last index of each run of equal scores
    ends = np.r_[np.nonzero(np.diff(s))[0], s.size - 1]
    pts = [(0.0, 0.0, math.inf)]
    for i in ends:
        pts.append((fps[i] / n_neg, tps[i] / n_pos, float(s[i])))
    pts.append((1.0, 1.0, -math.inf))
    return pts


def trapezoid_area(points) -> float:
    fpr = np.array([p[0] for p in points])
    tpr = np.array([p[1] for p in points])
    return float(np.sum(np.diff(fpr) * (tpr[1:] + tpr[:-1]) / 2.0))


# ---------------------------------------------------------------------------
# bootstrap


@dataclass
class BootstrapCI:
    point: float
    lower: float
    upper: float
    n_resamples: int = 1000
    level: float = 0.95
    seed: int = 0
    n_skipped: int = 0

    def to_dict(self) -> dict:
        return asdict(self)


def resample_rng(seed: int, index: int) -> np.random.Generator:
    """Generator for one resample; depends only on (seed, index)."""
    return np.random.default_rng([int(seed), int(index)])


def _percentiles(values, level):
    alpha = (1.0 - level) / 2.0
    lo, hi = np.percentile(values, [100 * alpha, 100 * (1 - alpha)])
    return float(lo), float(hi)


def _too_many_skips(skipped, n):
    if skipped * 2 > n:
        raise UndefinedMetricError(
            f"metric undefined on {skipped} of {n} resamples; use a stratified bootstrap"
        )


def bootstrap_ci(
    metric: Callable,
    cases,
    n: int = 1000,
    level: float = 0.95,
    seed: int = 0,
) -> BootstrapCI:
    """Percentile interval of ``metric`` over ``n`` same-size resamples.

    Resamples where the metric is undefined are skipped and counted.
    """
    if n < 1 or not 0.0 < level < 1.0:
        raise ValueError("need n >= 1 and 0 < level < 1")
    t = as_table(cases)
    point = metric(t)
    size = len(t)
    values, skipped = [], 0
    for i in range(n):
        idx = resample_rng(seed, i).integers(0, size, size)
        try:
            values.append(metric(t.take(idx)))
        except UndefinedMetricError:
            skipped += 1
    _too_many_skips(skipped, n)
    lo, hi = _percentiles(values, level)
    return BootstrapCI(float(point), lo, hi, n, level, seed, skipped)


def _paired_tables(cases_a, cases_b):
    a = {c.slide_id: c for c in cases_a}
    b = {c.slide_id: c for c in cases_b}
    if set(a) != set(b):
        raise ValueError("paired bootstrap needs the same slide ids in both arms")
    ids = sorted(a)
    return as_table([a[i] for i in ids]), as_table([b[i] for i in ids])


def bootstrap_diff_ci(
    metric: Callable,
    cases_a,
    cases_b,
    n: int = 1000,
    level: float = 0.95,
    seed: int = 0,
) -> BootstrapCI:
    """Interval for ``metric(A) - metric(B)``; one index set per resample
    is applied to both arms (paired by slide id)."""
    ta, tb = _paired_tables(cases_a, cases_b)
    point = metric(ta) - metric(tb)
    size = len(ta)
    values, skipped = [], 0
    for i in range(n):
        idx = resample_rng(seed, i).integers(0, size, size)
        try:
            values.append(metric(ta.take(idx)) - metric(tb.take(idx)))
        except UndefinedMetricError:
            skipped += 1
    _too_many_skips(skipped, n)
    lo, hi = _percentiles(values, level)
    return BootstrapCI(float(point), lo, hi, n, level, seed, skipped)


# ---------------------------------------------------------------------------
# operating points


@dataclass
class OperatingPoint:
    target_sensitivity: float
    threshold: BootstrapCI
    sensitivity: BootstrapCI
    specificity: BootstrapCI
    ppv: BootstrapCI
    npv: BootstrapCI

    def to_dict(self) -> dict:
        d = {"target_sensitivity": self.target_sensitivity}
        for k in ("threshold", "sensitivity", "specificity", "ppv", "npv"):
            d[k] = getattr(self, k).to_dict()
        return d


def _ratio(a, b):
    return a / b if b else math.nan


def confusion_at(t: CaseTable, threshold: float) -> dict:
    pred = t.scores >= threshold
    tp = int(np.sum(pred & t.y))
    fp = int(np.sum(pred & ~t.y))
    fn = int(np.sum(~pred & t.y))
    tn = int(np.sum(~pred & ~t.y))
    return {"tp": tp, "fp": fp, "fn": fn, "tn": tn}


def select_threshold(t: CaseTable, target: float) -> float:
    """Highest-specificity empirical threshold reaching ``target`` sensitivity;
    among equals the higher threshold wins."""
    n_pos, n_neg = _two_class(t)
    order = np.argsort(-t.scores, kind="stable")
    s, y = t.scores[order], t.y[order]
    ends = np.r_[np.nonzero(np.diff(s))[0], s.size - 1]
    tps = np.cumsum(y)[ends]
    # sensitivity grows as the threshold drops; specificity only falls, so the
    # first threshold that reaches the target is the best one
    ok = np.nonzero(tps >= target * n_pos - 1e-12)[0]
    return float(s[ends[ok[0]]])


def _op_metrics(t: CaseTable, target: float) -> np.ndarray:
    thr = select_threshold(t, target)
    c = confusion_at(t, thr)
    return np.array(
        [
            thr,
            _ratio(c["tp"], c["tp"] + c["fn"]),
            _ratio(c["tn"], c["tn"] + c["fp"]),
            _ratio(c["tp"], c["tp"] + c["fp"]),
            _ratio(c["tn"], c["tn"] + c["fn"]),
        ]
    )


def operating_point(
    cases, target_sensitivity: float, n: int = 1000, level: float = 0.95, seed: int = 0
) -> OperatingPoint:
    """Sensitivity, specificity, PPV and NPV at the threshold chosen for
    ``target_sensitivity``. The threshold is re-chosen in every resample;
    NaN entries (e.g. NPV with no predicted negatives) are left out of
    that metric's interval."""
    if not 0.0 < target_sensitivity <= 1.0:
        raise ValueError(f"target sensitivity {target_sensitivity} is unreachable")
    t = as_table(cases)
    point = _op_metrics(t, target_sensitivity)
    size = len(t)
    rows, skipped = [], 0
    for i in range(n):
        idx = resample_rng(seed, i).integers(0, size, size)
        try:
            rows.append(_op_metrics(t.take(idx), target_sensitivity))
        except UndefinedMetricError:
            skipped += 1
    _too_many_skips(skipped, n)
    rows = np.array(rows)
    cis = []
    for j in range(5):
        col = rows[:, j]
        col = col[~np.isnan(col)]
        lo, hi = _percentiles(col, level) if col.size else (math.nan, math.nan)
        cis.append(BootstrapCI(float(point[j]), lo, hi, n, level, seed, skipped + int(rows.shape[0] - col.size)))
    return OperatingPoint(target_sensitivity, *cis)


# ---------------------------------------------------------------------------
# correlation and rank test


def pearson_r(x, y) -> float:
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if x.shape != y.shape or x.ndim != 1 or x.size < 2:
        raise ValueError("pearson_r needs two equal-length vectors of length >= 2")
    dx, dy = x - x.mean(), y - y.mean()
    sxx, syy = float(dx @ dx), float(dy @ dy)
    if sxx == 0.0 or syy == 0.0:
        raise UndefinedMetricError("correlation undefined for a constant vector")
    return float(np.clip((dx @ dy) / math.sqrt(sxx * syy), -1.0, 1.0))


def mann_whitney_u(scores_pos, scores_neg) -> tuple[float, float]:
    """U of the first group and its two-sided p value.

    Normal approximation with tie-corrected variance and a 0.5 continuity
    correction.
    """
    pos = np.asarray(scores_pos, dtype=np.float64).ravel()
    neg = np.asarray(scores_neg, dtype=np.float64).ravel()
    if pos.size == 0 or neg.size == 0:
        raise ValueError("both groups must be non-empty")
    u, ranks = _u_statistic(pos, neg)
    n1, n2 = pos.size, neg.size
    n = n1 + n2
    _, counts = np.unique(ranks, return_counts=True)
    tie_term = float(np.sum(counts**3 - counts)) / (n * (n - 1)) if n > 1 else 0.0
    var = n1 * n2 / 12.0 * ((n + 1) - tie_term)
    if var <= 0:
        return u, 1.0
    z = (abs(u - n1 * n2 / 2.0) - 0.5) / math.sqrt(var)
    return u, float(min(1.0, erfc(z / math.sqrt(2.0))))


# ---------------------------------------------------------------------------
# subgroups


def _quartile1(values) -> float:
    return float(np.percentile(np.asarray(values, dtype=np.float64), 25))


def standard_groupings(cases: Sequence[ScoredCase]) -> dict[str, Callable[[ScoredCase], bool]]:
    """Named case filters. Quartile cuts come from the cases themselves."""
    groups: dict[str, Callable[[ScoredCase], bool]] = {
        "ALL": lambda c: True,
        "GLEASON_7_8": lambda c: c.gleason_total in (7, 8),
        "GLEASON_9_10": lambda c: c.gleason_total in (9, 10),
        "BIOPSY": lambda c: c.procedure == "CORE_NEEDLE_BIOPSY",
        "RESECTION": lambda c: c.procedure == "RESECTION",
        "AMBIGUOUS_BIOPSY": lambda c: c.procedure == "AMBIGUOUS_BIOPSY",
    }
    areas = [c.tissue_area_mm2 for c in cases if c.tissue_area_mm2 is not None]
    if areas:
        q = _quartile1(areas)
        groups["AREA_Q1"] = lambda c, q=q: c.tissue_area_mm2 is not None and c.tissue_area_mm2 <= q
        groups["AREA_Q2_4"] = lambda c, q=q: c.tissue_area_mm2 is not None and c.tissue_area_mm2 > q
    purities = [c.tumor_purity for c in cases if c.tumor_purity is not None]
    if purities:
        q = _quartile1(purities)
        groups["PURITY_Q1"] = lambda c, q=q: c.tumor_purity is not None and c.tumor_purity <= q
        groups["PURITY_Q2_4"] = lambda c, q=q: c.tumor_purity is not None and c.tumor_purity > q
    for site in sorted({c.stain_site for c in cases if c.stain_site}):
        groups[f"STAIN_{site}"] = lambda c, s=site: c.stain_site == s
    for prof in sorted({c.scanner_profile for c in cases if c.scanner_profile}):
        groups[f"SCANNER_{prof}"] = lambda c, p=prof: c.scanner_profile == p
    return groups


def _summary(x: np.ndarray) -> dict:
    if x.size == 0:
        return {"n": 0}
    q1, med, q3 = np.percentile(x, [25, 50, 75])
    return {"n": int(x.size), "min": float(x.min()), "q1": float(q1), "median": float(med),
            "q3": float(q3), "max": float(x.max())}


def subgroup_eval(
    cases: Sequence[ScoredCase],
    groupings: Iterable[str] | dict | None = None,
    n: int = 1000,
    seed: int = 0,
) -> dict[str, dict]:
    """AUC with CI, Mann-Whitney p and score summaries per subgroup.

    ``groupings`` is a list of names from :func:`standard_groupings` or a
    mapping of name to predicate. Single-class groups get ``auc: None``.
    """
    cases = list(cases)
    available = standard_groupings(cases)
    if groupings is None:
        selected = available
    elif isinstance(groupings, dict):
        selected = groupings
    else:
        selected = {}
        for name in groupings:
            if name not in available:
                raise KeyError(f"unknown grouping {name!r}")
            selected[name] = available[name]
    out = {}
    for name, pred in selected.items():
        members = [c for c in cases if pred(c)]
        t = as_table(members) if members else CaseTable([], [])
        pos, neg = t.scores[t.y], t.scores[~t.y]
        row = {
            "n": len(members),
            "n_pos": int(pos.size),
            "n_neg": int(neg.size),
            "scores_pos": _summary(pos),
            "scores_neg": _summary(neg),
        }
        if pos.size and neg.size:
            row["auc"] = bootstrap_ci(auc, t, n=n, seed=seed).to_dict()
            row["mann_whitney_u"], row["mann_whitney_p"] = mann_whitney_u(pos, neg)
        else:
            row["auc"] = None
            row["note"] = "AUC undefined: single class"
        out[name] = row
    return out


# ---------------------------------------------------------------------------
# io

PREDICTION_COLUMNS = (
    "slide_id",
    "score",
    "label",
    "gleason_total",
    "procedure",
    "scanner_profile",
    "stain_site",
    "tissue_area_mm2",
    "tumor_purity",
    "paired_id",
)


def _opt(v, cast):
    if v is None or v.strip() in ("", "NA"):
        return None
    return cast(v)


def parse_predictions(text: str) -> list[ScoredCase]:
    reader = csv.DictReader(io.StringIO(text))
    for col in ("slide_id", "score", "label"):
        if col not in (reader.fieldnames or []):
            raise ValueError(f"predictions file is missing column {col!r}")
    cases = []
    for row in reader:
        if row["label"].strip() == "UNKNOWN":
            continue
        cases.append(
            ScoredCase(
                slide_id=row["slide_id"],
                score=float(row["score"]),
                label=row["label"].strip(),
                gleason_total=_opt(row.get("gleason_total"), lambda v: int(float(v))),
                procedure=_opt(row.get("procedure"), str),
                scanner_profile=_opt(row.get("scanner_profile"), str),
                stain_site=_opt(row.get("stain_site"), str),
                tissue_area_mm2=_opt(row.get("tissue_area_mm2"), float),
                tumor_purity=_opt(row.get("tumor_purity"), float),
                paired_id=_opt(row.get("paired_id"), str),
            )
        )
    return cases


def format_predictions(cases: Iterable[ScoredCase]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(PREDICTION_COLUMNS)
    for c in cases:
        row = []
        for col in PREDICTION_COLUMNS:
            v = getattr(c, col)
            row.append("NA" if v is None else (repr(v) if isinstance(v, float) else v))
        w.writerow(row)
    return buf.getvalue()


def evaluation_report(
    cases: Sequence[ScoredCase],
    target_sensitivities: Sequence[float] = (0.5, 0.7, 0.9, 0.95),
    n: int = 1000,
    seed: int = 0,
) -> dict:
    """Everything the ``evaluate`` command writes, as plain JSON types."""
    t = as_table(cases)
    report = {
        "n_cases": len(t),
        "n_pos": int(t.y.sum()),
        "auc": bootstrap_ci(auc, t, n=n, seed=seed).to_dict(),
        "roc": [
            {"fpr": p[0], "tpr": p[1], "threshold": _json_float(p[2])} for p in roc_curve(t)
        ],
        "operating_points": [operating_point(t, s, n=n, seed=seed).to_dict() for s in target_sensitivities],
        "seed": seed,
        "n_resamples": n,
    }
    return report


def _json_float(v: float):
    if math.isinf(v):
        return "inf" if v > 0 else "-inf"
    return v


def dumps(obj) -> str:
    """JSON with NaN written as null."""
    return json.dumps(_clean(obj), indent=2, sort_keys=True)


def _clean(o):
    if isinstance(o, dict):
        return {k: _clean(v) for k, v in o.items()}
    if isinstance(o, (list, tuple)):
        return [_clean(v) for v in o]
    if isinstance(o, (np.floating, float)):
        v = float(o)
        return None if math.isnan(v) else _json_float(v)
    if isinstance(o, np.integer):
        return int(o)
    if isinstance(o, np.ndarray):
        return _clean(o.tolist())
    return o
