"""Bag sampling, Adam, early stopping, cross-validation and fold ensembles."""
from __future__ import annotations

import hashlib
import itertools
import json
import logging
import math
import struct
import zlib
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path
from typing import Any, Iterable, Sequence

import numpy as np

from .colorlab import JitterParams, NormalizationStats, Preprocessor
from .dataset import BagSource
from .evaluation import CaseTable, ScoredCase, UndefinedMetricError, auc
from .ioutil import atomic_write_bytes
from .milcore import (
    LossWeights,
    MilModel,
    attention_pool,
    backward,
    classify,
    extract_features_chunked,
    forward,
    init_model,
    model_from_arrays,
    weighted_bce,
)
from .slideio import MSI_H, UNKNOWN, SlideRecord

log = logging.getLogger(__name__)

CAP = "cap"
OVERSAMPLE = "oversample"

ADAM_BETA1 = 0.9
ADAM_BETA2 = 0.999
ADAM_EPS = 1e-8


@dataclass
class TrainConfig:
    magnification: int = 20
    learning_rate: float = 1e-6
    weight_decay: float = 1e-4
    dropout_rate: float = 0.1
    patience: int = 10
    min_delta: float = 0.00025
    bag_size_train: int = 200
    bag_size_infer: int = 1600
    batch_size: int = 32
    max_epochs: int = 200
    jitter: JitterParams = field(default_factory=JitterParams)
    seed: int = 0
    n_folds: int = 5
    feature_dim: int = 32
    attention_dim: int = 128
    gated: bool = False
    decoupled_weight_decay: bool = False
    per_model_bags: bool = False
    working_pool: int = 4
    shuffle_labels: bool = False
    dtype: str = "float32"

    def __post_init__(self):
        if isinstance(self.jitter, dict):
            self.jitter = JitterParams(**self.jitter)
        if self.magnification not in (5, 10, 20):
            raise ValueError("magnification must be 5, 10 or 20")
        for name in ("learning_rate", "patience", "bag_size_train", "bag_size_infer",
                     "batch_size", "max_epochs", "feature_dim", "attention_dim", "working_pool"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be positive")
        if self.weight_decay < 0 or self.min_delta < 0:
            raise ValueError("weight_decay and min_delta must be >= 0")
        if not 0.0 <= self.dropout_rate < 1.0:
            raise ValueError("dropout_rate must lie in [0, 1)")
        if self.n_folds < 2:
            raise ValueError("n_folds must be >= 2")
        if self.dtype not in ("float32", "float64"):
            raise ValueError("dtype must be float32 or float64")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown config keys: {sorted(unknown)}")
        return cls(**d)


# ---------------------------------------------------------------------------
# folds


@dataclass
class FoldAssignment:
    folds: dict[str, int]
    keys: tuple[str, ...]
    k: int

    def members(self, fold: int) -> list[str]:
        return [sid for sid, f in self.folds.items() if f == fold]


DEFAULT_STRATA = ("label", "scanner_profile", "procedure", "gleason_total")


def stratum_of(record: SlideRecord, keys: Sequence[str]) -> tuple:
    return tuple(getattr(record, k) for k in keys)


def _stratum_sort_key(stratum: tuple) -> tuple:
    # absent values sort as their own, first, stratum value
    return tuple((v is not None, str(v)) for v in stratum)


def stratified_folds(
    records: Sequence[SlideRecord],
    k: int = 5,
    keys: Sequence[str] = DEFAULT_STRATA,
    seed: int = 0,
) -> FoldAssignment:
    """Shuffle each joint stratum and deal its members round-robin.

    The dealing position carries over from one stratum to the next so the
    overall fold sizes stay balanced as well.
    """
    if k < 2:
        raise ValueError("k must be >= 2")
    if not records:
        raise ValueError("no records to split")
    strata: dict[tuple, list[str]] = {}
    for r in records:
        strata.setdefault(stratum_of(r, keys), []).append(r.slide_id)
    rng = np.random.default_rng(seed)
    folds: dict[str, int] = {}
    pos = 0
    for key in sorted(strata, key=_stratum_sort_key):
        ids = strata[key]
        for j in rng.permutation(len(ids)):
            folds[ids[j]] = pos % k
            pos += 1
    return FoldAssignment({r.slide_id: folds[r.slide_id] for r in records}, tuple(keys), k)


# ---------------------------------------------------------------------------
# bag sampling


def sample_indices(n: int, size: int, mode: str, rng: np.random.Generator) -> np.ndarray:
    if n < 1:
        raise ValueError("cannot sample a bag from a slide without tiles")
    if size < 1:
        raise ValueError("bag size must be >= 1")
    if mode not in (CAP, OVERSAMPLE):
        raise ValueError(f"unknown sampling mode {mode!r}")
    if n >= size:
        return np.sort(rng.choice(n, size, replace=False))
    base = np.arange(n)
    if mode == CAP:
        return base
    return np.concatenate([base, np.sort(rng.integers(0, n, size - n))])


def sample_bag(tile_refs: Sequence, size: int, mode: str, rng: np.random.Generator) -> list:
    """Sample ``size`` tiles without replacement; a short slide gives all its
    tiles (CAP) or all its tiles topped up with random repeats (OVERSAMPLE)."""
    idx = sample_indices(len(tile_refs), size, mode, rng)
    return [tile_refs[i] for i in idx]


def slide_rng(seed: int, slide_id: str, stream: int = 0) -> np.random.Generator:
    """Per-slide generator that does not depend on cohort ordering."""
    return np.random.default_rng([int(seed), zlib.crc32(slide_id.encode("utf-8")), int(stream)])


# ---------------------------------------------------------------------------
# optimiser


@dataclass
class AdamState:
    m: dict[str, np.ndarray]
    v: dict[str, np.ndarray]
    t: int = 0
    beta1: float = ADAM_BETA1
    beta2: float = ADAM_BETA2
    eps: float = ADAM_EPS

    @classmethod
    def zeros_like(cls, params: dict[str, np.ndarray]) -> "AdamState":
        return cls({k: np.zeros_like(v) for k, v in params.items()},
                   {k: np.zeros_like(v) for k, v in params.items()})


def adam_step(
    params: dict[str, np.ndarray],
    grads: dict[str, np.ndarray],
    state: AdamState,
    lr: float,
    weight_decay: float = 0.0,
    decoupled: bool = False,
):
    """One in-place Adam update. L2 decay is added to the gradient unless
    ``decoupled`` is set, in which case it shrinks the weights directly."""
    for name, g in grads.items():
        if not np.all(np.isfinite(g)):
            raise FloatingPointError(f"non-finite gradient in {name}")
        if g.shape != params[name].shape:
            raise ValueError(f"gradient shape {g.shape} != parameter shape {params[name].shape} for {name}")
    state.t += 1
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1**state.t
    c2 = 1.0 - b2**state.t
    for name, p in params.items():
        g = grads[name]
        if weight_decay and not decoupled:
            g = g + weight_decay * p
        m = state.m[name]
        v = state.v[name]
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * g * g
        step = lr * (m / c1) / (np.sqrt(v / c2) + state.eps)
        if weight_decay and decoupled:
            p -= lr * weight_decay * p
        p -= step.astype(p.dtype, copy=False)
    return params, state


# ---------------------------------------------------------------------------
# training


@dataclass
class FoldModel:
    """A trained model plus what is needed to feed it."""

    model: MilModel
    stats: NormalizationStats
    config: TrainConfig
    best_epoch: int = 0
    val_loss: float = math.nan

    def preprocessor(self) -> Preprocessor:
        return Preprocessor(self.stats, self.config.jitter, self.config.working_pool, np.dtype(self.config.dtype).type)


def fit_stats(records: Iterable[SlideRecord], source: BagSource) -> NormalizationStats:
    """Per-channel mean and std of ``pixels / 255`` over every tile of ``records``."""
    total = np.zeros(3)
    sq = np.zeros(3)
    count = 0
    for r in records:
        t = np.asarray(source.tiles(r))
        if t.ndim != 4:
            return NormalizationStats()
        flat = t.reshape(-1, 3)
        total += flat.sum(axis=0, dtype=np.int64)
        sq += (flat.astype(np.int64) ** 2).sum(axis=0)
        count += flat.shape[0]
    if count == 0:
        raise ValueError("no tiles to fit normalisation stats")
    mean = total / count / 255.0
    var = sq / count / 255.0**2 - mean**2
    std = np.sqrt(np.maximum(var, 0.0))
    std = np.where(std > 0, std, 1.0)
    return NormalizationStats(tuple(mean), tuple(std))


def _labels(records: Sequence[SlideRecord]) -> np.ndarray:
    for r in records:
        if r.label == UNKNOWN:
            raise ValueError(f"slide {r.slide_id} has no label")
    return np.array([r.label == MSI_H for r in records])


def _check_two_class(y: np.ndarray, what: str) -> None:
    if y.size == 0 or y.all() or not y.any():
        raise ValueError(f"{what} split needs at least one MSI_H and one MSS slide")


@dataclass
class EpochRecord:
    epoch: int
    train_loss: float
    val_loss: float
    val_auc: float | None
    improved: bool


def _new_model(config: TrainConfig, first_bag: np.ndarray, rng) -> MilModel:
    dtype = np.dtype(config.dtype).type
    in_features = first_bag.shape[1] if first_bag.ndim == 2 else None
    return init_model(
        rng,
        feature_dim=config.feature_dim,
        attention_dim=config.attention_dim,
        dropout_rate=config.dropout_rate,
        gated=config.gated,
        in_features=in_features,
        dtype=dtype,
    )


def eval_features(tiles: np.ndarray, fold: FoldModel, chunk: int = 64) -> np.ndarray:
    """Eval-mode per-tile features (centre crop, no augmentation)."""
    pre = fold.preprocessor()
    out = []
    for i in range(0, len(tiles), chunk):
        out.append(extract_features_chunked(pre(tiles[i : i + chunk], training=False), fold.model, chunk))
    return np.concatenate(out, axis=0)


def score_features(H: np.ndarray, model: MilModel) -> tuple[float, np.ndarray]:
    z, a = attention_pool(H, model, training=False)
    return classify(z, model, training=False), a


def train_fold(
    train_records: Sequence[SlideRecord],
    val_records: Sequence[SlideRecord],
    config: TrainConfig,
    rng: np.random.Generator,
    source: BagSource,
    stats: NormalizationStats | None = None,
) -> tuple[FoldModel, list[EpochRecord]]:
    """Train one model with early stopping on validation loss.

    Returns the checkpoint of the epoch with the lowest validation loss and
    the per-epoch history.
    """
    y_train = _labels(train_records)
    y_val = _labels(val_records)
    _check_two_class(y_train, "training")
    _check_two_class(y_val, "validation")
    if config.shuffle_labels:
        y_train = rng.permutation(y_train)
    weights = LossWeights.balanced(y_train)
    if stats is None:
        stats = fit_stats(train_records, source)

    first = np.asarray(source.tiles(train_records[0]))
    model = _new_model(config, first, rng)
    fold = FoldModel(model, stats, config)
    pre = fold.preprocessor()
    state = AdamState.zeros_like(model.params)

    # validation bags are sampled once so epochs are compared on equal terms
    val_inputs = []
    for r in val_records:
        tiles = np.asarray(source.tiles(r))
        idx = sample_indices(len(tiles), config.bag_size_infer, CAP, rng)
        val_inputs.append(pre(tiles[idx], training=False))

    def validate():
        losses, scores = [], []
        for x, yv in zip(val_inputs, y_val):
            H = extract_features_chunked(x, model)
            s, _ = score_features(H, model)
            losses.append(weighted_bce(s, bool(yv), weights))
            scores.append(s)
        try:
            v_auc = auc(CaseTable(scores, y_val))
        except UndefinedMetricError:
            v_auc = None
        return float(np.mean(losses)), v_auc

    history: list[EpochRecord] = []
    best, best_epoch = None, 0
    best_loss = math.inf
    ref_loss = math.inf
    wait = 0
    n = len(train_records)
    for epoch in range(1, config.max_epochs + 1):
        order = rng.permutation(n)
        epoch_loss = 0.0
        for start in range(0, n, config.batch_size):
            batch = np.sort(order[start : start + config.batch_size])
            acc = None
            for i in batch:
                tiles = np.asarray(source.tiles(train_records[i]))
                idx = sample_indices(len(tiles), config.bag_size_train, CAP, rng)
                x = pre(tiles[idx], rng, training=True)
                _, _, cache = forward(x, model, training=True, rng=rng)
                grads, loss = backward(cache, bool(y_train[i]), weights)
                epoch_loss += loss
                if acc is None:
                    acc = grads
                else:
                    for k2, g in grads.items():
                        acc[k2] += g
            scale = 1.0 / len(batch)
            for g in acc.values():
                g *= scale
            adam_step(model.params, acc, state, config.learning_rate, config.weight_decay,
                      config.decoupled_weight_decay)
        val_loss, val_auc = validate()
        improved = val_loss < ref_loss - config.min_delta
        if val_loss < best_loss:
            best_loss = val_loss
            best = model.copy()
            best_epoch = epoch
        if improved:
            ref_loss = val_loss
            wait = 0
        else:
            wait += 1
        history.append(EpochRecord(epoch, epoch_loss / n, val_loss, val_auc, improved))
        log.info("epoch %d train %.4f val %.4f auc %s", epoch, epoch_loss / n, val_loss, val_auc)
        if wait >= config.patience:
            break
    return FoldModel(best, stats, config, best_epoch, best_loss), history


# ---------------------------------------------------------------------------
# ensembles


@dataclass
class EnsembleModel:
    members: list[FoldModel]
    config: TrainConfig

    def __post_init__(self):
        if not self.members:
            raise ValueError("an ensemble needs at least one checkpoint")


class FeatureCache:
    """Eval-mode per-tile features keyed by (member index, slide id)."""

    def __init__(self):
        self._store: dict[tuple[int, str], np.ndarray] = {}

    def get(self, i: int, slide_id: str, tiles: np.ndarray, fold: FoldModel) -> np.ndarray:
        key = (i, slide_id)
        hit = self._store.get(key)
        if hit is None:
            hit = eval_features(tiles, fold)
            self._store[key] = hit
        return hit


def _member_features(ensemble, i, record, tiles, idx, cache):
    if cache is not None:
        return cache.get(i, record.slide_id, tiles, ensemble.members[i])[idx]
    uniq, inv = np.unique(idx, return_inverse=True)
    return eval_features(tiles[uniq], ensemble.members[i])[inv]


def ensemble_scores(
    ensemble: EnsembleModel,
    record: SlideRecord,
    tiles: np.ndarray,
    rng: np.random.Generator,
    bag_size: int | None = None,
    mode: str = CAP,
    cache: FeatureCache | None = None,
) -> tuple[float, np.ndarray, np.ndarray, np.ndarray]:
    """Mean member probability on one shared bag.

    Returns ``(score, member_probs, attention, bag_indices)``; attention has
    one row per member. With ``config.per_model_bags`` each member draws its
    own bag and ``bag_indices`` has one row per member too.
    """
    tiles = np.asarray(tiles)
    size = bag_size or ensemble.config.bag_size_infer
    per_model = ensemble.config.per_model_bags
    idx = sample_indices(len(tiles), size, mode, rng)
    probs, atts, bags = [], [], []
    for i, fold in enumerate(ensemble.members):
        if per_model and i > 0:
            idx = sample_indices(len(tiles), size, mode, rng)
        H = _member_features(ensemble, i, record, tiles, idx, cache)
        s, a = score_features(H, fold.model)
        probs.append(s)
        atts.append(a)
        bags.append(idx)
    probs = np.array(probs)
    score = float(np.mean(probs))
    bag_idx = np.array(bags) if per_model else idx
    return score, probs, np.array(atts), bag_idx


def case_from_record(record: SlideRecord, score: float, area: float | None = None, **extra) -> ScoredCase:
    return ScoredCase(
        slide_id=record.slide_id,
        score=min(1.0, max(0.0, score)),
        label=record.label,
        gleason_total=record.gleason_total,
        procedure=record.procedure,
        scanner_profile=record.scanner_profile,
        stain_site=record.stain_site,
        tissue_area_mm2=area,
        tumor_purity=record.tumor_purity,
        paired_id=record.paired_id,
        **extra,
    )


def ensemble_predict(
    ensemble: EnsembleModel,
    record: SlideRecord,
    source: BagSource,
    rng: np.random.Generator,
    cache: FeatureCache | None = None,
    bag_size: int | None = None,
    mode: str = CAP,
) -> ScoredCase:
    tiles = np.asarray(source.tiles(record))
    score, _, att, idx = ensemble_scores(ensemble, record, tiles, rng, bag_size, mode, cache)
    area = source.bag(record).tissue_area_mm2 if hasattr(source, "bag") else None
    return case_from_record(record, score, area, attention=att, bag_indices=idx)


def predict_cohort(
    ensemble: EnsembleModel,
    records: Sequence[SlideRecord],
    source: BagSource,
    seed: int = 0,
    cache: FeatureCache | None = None,
    bag_size: int | None = None,
    mode: str = CAP,
) -> list[ScoredCase]:
    """Ensemble scores for labelled records; each slide gets its own
    generator derived from ``(seed, slide_id)``."""
    return [
        ensemble_predict(ensemble, r, source, slide_rng(seed, r.slide_id), cache, bag_size, mode)
        for r in records
        if r.label != UNKNOWN
    ]


@dataclass
class CVResult:
    ensemble: EnsembleModel
    folds: FoldAssignment
    oof_cases: list[ScoredCase]
    histories: list[list[EpochRecord]]
    oof_auc: float | None


def cross_validate(
    records: Sequence[SlideRecord],
    source: BagSource,
    config: TrainConfig,
    folds: FoldAssignment | None = None,
    stats: NormalizationStats | None = None,
) -> CVResult:
    """k-fold training; each held-out fold serves as that model's
    validation split and is scored by it (out-of-fold predictions)."""
    records = [r for r in records if r.label != UNKNOWN]
    if folds is None:
        folds = stratified_folds(records, config.n_folds, seed=config.seed)
    if stats is None:
        stats = fit_stats(records, source)
    members, histories, oof = [], [], []
    for k in range(folds.k):
        tr = [r for r in records if folds.folds[r.slide_id] != k]
        va = [r for r in records if folds.folds[r.slide_id] == k]
        fold, hist = train_fold(tr, va, config, np.random.default_rng([config.seed, k]), source, stats)
        members.append(fold)
        histories.append(hist)
        single = EnsembleModel([fold], config)
        oof.extend(predict_cohort(single, va, source, seed=config.seed))
    by_id = {c.slide_id: c for c in oof}
    oof = [by_id[r.slide_id] for r in records]
    try:
        oof_auc = auc(oof)
    except UndefinedMetricError:
        oof_auc = None
    return CVResult(EnsembleModel(members, config), folds, oof, histories, oof_auc)


# ---------------------------------------------------------------------------
# grid search

GRID_KEYS = {
    "magnification",
    "learning_rate",
    "weight_decay",
    "dropout_rate",
    "patience",
    "min_delta",
    "jitter_brightness",
    "jitter_contrast",
    "jitter_saturation",
    "jitter_hue",
    "jitter_scope",
    "shuffle_labels",
    "max_epochs",
}

# search ranges for the swept hyperparameters
DEFAULT_GRID = {
    "magnification": [5, 10, 20],
    "learning_rate": [1e-7, 1e-6, 1e-5, 1e-4],
    "weight_decay": [1e-5, 1e-4, 1e-3, 1e-2],
    "dropout_rate": [0.1, 0.3, 0.5],
    "patience": [5, 10, 20],
    "min_delta": [0.0, 0.00025, 0.001],
}


@dataclass
class GridSpec:
    values: dict[str, list]

    def __post_init__(self):
        if not self.values or any(len(v) == 0 for v in self.values.values()):
            raise ValueError("grid must have at least one value per key")
        bad = set(self.values) - GRID_KEYS
        if bad:
            raise ValueError(f"unknown grid keys: {sorted(bad)}")

    def points(self) -> list[dict[str, Any]]:
        keys = list(self.values)
        return [dict(zip(keys, combo)) for combo in itertools.product(*(self.values[k] for k in keys))]


def apply_point(base: TrainConfig, point: dict[str, Any]) -> TrainConfig:
    kw, jit = {}, {}
    for k, v in point.items():
        if k.startswith("jitter_"):
            jit[k[len("jitter_"):]] = v
        else:
            kw[k] = v
    cfg = replace(base, **kw)
    if jit:
        cfg = replace(cfg, jitter=replace(base.jitter, **jit))
    return cfg


def grid_search(
    grid: GridSpec,
    records: Sequence[SlideRecord],
    source_for,
    seed: int = 0,
    base: TrainConfig | None = None,
) -> tuple[TrainConfig, list[dict]]:
    """Cross-validate every grid point on one shared fold assignment and
    pick the highest pooled out-of-fold AUC (first wins on ties).

    ``source_for(config)`` returns the bag source to use for a config, so
    magnification can be part of the grid.
    """
    base = replace(base or TrainConfig(), seed=seed)
    records = [r for r in records if r.label != UNKNOWN]
    folds = stratified_folds(records, base.n_folds, seed=seed)
    table = []
    best_cfg, best_auc = None, -math.inf
    for point in grid.points():
        row: dict[str, Any] = {"params": point}
        try:
            cfg = apply_point(base, point)
            res = cross_validate(records, source_for(cfg), cfg, folds)
            row["auc"] = res.oof_auc
            row["status"] = "ok"
            if res.oof_auc is not None and res.oof_auc > best_auc:
                best_auc, best_cfg = res.oof_auc, cfg
        except Exception as exc:  # a failing point must not end the sweep
            log.warning("grid point %s failed: %s", point, exc)
            row["auc"] = None
            row["status"] = f"failed: {exc}"
        table.append(row)
    if best_cfg is None:
        raise RuntimeError("every grid point failed")
    return best_cfg, table


# ---------------------------------------------------------------------------
# checkpoints

CHECKPOINT_MAGIC = b"MILH"
CHECKPOINT_VERSION = 1


class CheckpointError(ValueError):
    pass


def checkpoint_bytes(fold: FoldModel) -> bytes:
    meta = {
        "train_config": fold.config.to_dict(),
        "architecture": fold.model.architecture(),
        "stats": {"mean": list(fold.stats.mean), "std": list(fold.stats.std)},
        "best_epoch": fold.best_epoch,
        "val_loss": None if math.isnan(fold.val_loss) else fold.val_loss,
    }
    blob = json.dumps(meta, sort_keys=True).encode("utf-8")
    parts = [CHECKPOINT_MAGIC, struct.pack("<I", CHECKPOINT_VERSION), struct.pack("<I", len(blob)), blob]
    params = fold.model.params
    parts.append(struct.pack("<I", len(params)))
    for name in sorted(params):
        arr = np.asarray(params[name])
        dt = arr.dtype.newbyteorder("<")
        name_b = name.encode("utf-8")
        dt_b = dt.str.encode("ascii")
        parts.append(struct.pack("<H", len(name_b)) + name_b)
        parts.append(struct.pack("<B", len(dt_b)) + dt_b)
        parts.append(struct.pack("<B", arr.ndim) + struct.pack(f"<{arr.ndim}I", *arr.shape))
        parts.append(np.ascontiguousarray(arr, dtype=dt).tobytes())
    body = b"".join(parts)
    return body + hashlib.sha256(body).digest()


def checkpoint_from_bytes(data: bytes) -> FoldModel:
    if len(data) < 44 or data[:4] != CHECKPOINT_MAGIC:
        raise CheckpointError("not a checkpoint file")
    body, digest = data[:-32], data[-32:]
    if hashlib.sha256(body).digest() != digest:
        raise CheckpointError("checkpoint checksum mismatch")
    (version,) = struct.unpack_from("<I", body, 4)
    if version != CHECKPOINT_VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version}")
    (n_meta,) = struct.unpack_from("<I", body, 8)
    off = 12
    meta = json.loads(body[off : off + n_meta].decode("utf-8"))
    off += n_meta
    (n_tensors,) = struct.unpack_from("<I", body, off)
    off += 4
    params = {}
    for _ in range(n_tensors):
        (ln,) = struct.unpack_from("<H", body, off)
        off += 2
        name = body[off : off + ln].decode("utf-8")
        off += ln
        (ld,) = struct.unpack_from("<B", body, off)
        off += 1
        dt = np.dtype(body[off : off + ld].decode("ascii"))
        off += ld
        (ndim,) = struct.unpack_from("<B", body, off)
        off += 1
        shape = struct.unpack_from(f"<{ndim}I", body, off)
        off += 4 * ndim
        nbytes = dt.itemsize * int(np.prod(shape, dtype=np.int64))
        arr = np.frombuffer(body, dtype=dt, count=nbytes // dt.itemsize, offset=off).reshape(shape)
        params[name] = arr.astype(dt.newbyteorder("="), copy=True)
        off += nbytes
    if off != len(body):
        raise CheckpointError("trailing bytes in checkpoint")
    model = model_from_arrays(params, meta["architecture"])
    stats = NormalizationStats(tuple(meta["stats"]["mean"]), tuple(meta["stats"]["std"]))
    val_loss = meta.get("val_loss")
    return FoldModel(
        model,
        stats,
        TrainConfig.from_dict(meta["train_config"]),
        meta.get("best_epoch", 0),
        math.nan if val_loss is None else val_loss,
    )


def save_checkpoint(path, fold: FoldModel) -> None:
    atomic_write_bytes(path, checkpoint_bytes(fold))


def load_checkpoint(path) -> FoldModel:
    return checkpoint_from_bytes(Path(path).read_bytes())


def save_ensemble(directory, ensemble: EnsembleModel) -> list[Path]:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    paths = []
    for i, fold in enumerate(ensemble.members):
        p = directory / f"fold{i}.milh"
        save_checkpoint(p, fold)
        paths.append(p)
    return paths


def load_ensemble(directory, n_members: int | None = None) -> EnsembleModel:
    """Load ``fold0.milh`` .. ``fold{k-1}.milh``; k defaults to the
    ``n_folds`` recorded in the first checkpoint."""
    directory = Path(directory)
    first = directory / "fold0.milh"
    if not first.exists():
        raise FileNotFoundError(f"missing checkpoint {first}")
    members = [load_checkpoint(first)]
    k = n_members or members[0].config.n_folds
    for i in range(1, k):
        p = directory / f"fold{i}.milh"
        if not p.exists():
            raise FileNotFoundError(f"missing checkpoint {p}")
        members.append(load_checkpoint(p))
    return EnsembleModel(members, members[0].config)
