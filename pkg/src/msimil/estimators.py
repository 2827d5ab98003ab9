"""scikit-learn style wrappers around the training and normalisation code."""
from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator, ClassifierMixin, TransformerMixin
from sklearn.utils.validation import check_is_fitted

from .colorlab import JitterParams, NormalizationStats, denormalize, normalize
from .dataset import InMemorySource
from .slideio import MSI_H, MSS, SlideRecord
from .trainer import TrainConfig, cross_validate, predict_cohort


def check_bags(X, allow_features: bool = True) -> list[np.ndarray]:
    """Validate a sequence of bags.

    Each bag is either ``K x 256 x 256 x 3`` uint8 tiles or, when
    ``allow_features``, a ``K x D`` float matrix; all bags must agree.
    """
    if isinstance(X, np.ndarray) and X.dtype != object:
        X = list(X)
    bags = [np.asarray(b) for b in X]
    if not bags:
        raise ValueError("expected at least one bag")
    first = bags[0]
    for i, b in enumerate(bags):
        if b.shape[0] < 1:
            raise ValueError(f"bag {i} is empty")
        if b.ndim == 4:
            if b.shape[1:] != (256, 256, 3) or b.dtype != np.uint8:
                raise ValueError(f"bag {i}: tiles must be uint8 K x 256 x 256 x 3, got {b.dtype} {b.shape}")
        elif b.ndim == 2 and allow_features:
            if not np.all(np.isfinite(b)):
                raise ValueError(f"bag {i} has non-finite features")
        else:
            raise ValueError(f"bag {i} has unsupported shape {b.shape}")
        if b.ndim != first.ndim or b.shape[1:] != first.shape[1:]:
            raise ValueError(f"bag {i} does not match the shape of bag 0")
    return bags


def check_binary_labels(y, n: int):
    y = np.asarray(y)
    if y.ndim != 1 or y.size != n:
        raise ValueError(f"expected {n} labels, got shape {y.shape}")
    classes = np.unique(y)
    if classes.size != 2:
        raise ValueError(f"need exactly two classes, got {classes.size}")
    return classes, y == classes[1]


def _records(n: int, y_pos=None) -> list[SlideRecord]:
    out = []
    for i in range(n):
        label = "UNKNOWN" if y_pos is None else (MSI_H if y_pos[i] else MSS)
        out.append(SlideRecord(slide_id=f"bag{i:06d}", image_path="", label=label))
    return out


class AttentionMILClassifier(ClassifierMixin, BaseEstimator):
    """Cross-validated attention-MIL ensemble.

    ``fit`` trains one model per fold (each early-stopped on its held-out
    fold); probabilities are the mean over fold models. ``classes_[1]`` is
    the positive class.
    """

    def __init__(
        self,
        learning_rate=1e-6,
        weight_decay=1e-4,
        dropout_rate=0.1,
        patience=10,
        min_delta=0.00025,
        bag_size_train=200,
        bag_size_infer=1600,
        batch_size=32,
        max_epochs=200,
        n_folds=5,
        jitter_brightness=0.25,
        jitter_contrast=0.5,
        jitter_saturation=0.25,
        jitter_hue=0.04,
        jitter_scope="slide",
        feature_dim=32,
        attention_dim=128,
        gated=False,
        random_state=0,
    ):
        self.learning_rate = learning_rate
        self.weight_decay = weight_decay
        self.dropout_rate = dropout_rate
        self.patience = patience
        self.min_delta = min_delta
        self.bag_size_train = bag_size_train
        self.bag_size_infer = bag_size_infer
        self.batch_size = batch_size
        self.max_epochs = max_epochs
        self.n_folds = n_folds
        self.jitter_brightness = jitter_brightness
        self.jitter_contrast = jitter_contrast
        self.jitter_saturation = jitter_saturation
        self.jitter_hue = jitter_hue
        self.jitter_scope = jitter_scope
        self.feature_dim = feature_dim
        self.attention_dim = attention_dim
        self.gated = gated
        self.random_state = random_state

    def _config(self) -> TrainConfig:
        return TrainConfig(
            learning_rate=self.learning_rate,
            weight_decay=self.weight_decay,
            dropout_rate=self.dropout_rate,
            patience=self.patience,
            min_delta=self.min_delta,
            bag_size_train=self.bag_size_train,
            bag_size_infer=self.bag_size_infer,
            batch_size=self.batch_size,
            max_epochs=self.max_epochs,
            n_folds=self.n_folds,
            jitter=JitterParams(self.jitter_brightness, self.jitter_contrast, self.jitter_saturation,
                                self.jitter_hue, self.jitter_scope),
            feature_dim=self.feature_dim,
            attention_dim=self.attention_dim,
            gated=self.gated,
            seed=int(self.random_state),
        )

    def fit(self, X, y):
        bags = check_bags(X)
        self.classes_, y_pos = check_binary_labels(y, len(bags))
        config = self._config()
        records = _records(len(bags), y_pos)
        source = InMemorySource({r.slide_id: b for r, b in zip(records, bags)})
        result = cross_validate(records, source, config)
        self.ensemble_ = result.ensemble
        self.folds_ = result.folds
        self.oof_scores_ = np.array([c.score for c in result.oof_cases])
        self.oof_auc_ = result.oof_auc
        self.history_ = result.histories
        self.n_features_in_ = bags[0].shape[1] if bags[0].ndim == 2 else None
        return self

    def decision_function(self, X) -> np.ndarray:
        check_is_fitted(self, "ensemble_")
        bags = check_bags(X)
        records = _records(len(bags), np.zeros(len(bags), dtype=bool))
        source = InMemorySource({r.slide_id: b for r, b in zip(records, bags)})
        cases = predict_cohort(self.ensemble_, records, source, seed=int(self.random_state))
        return np.array([c.score for c in cases])

    def predict_proba(self, X) -> np.ndarray:
        s = self.decision_function(X)
        return np.column_stack([1.0 - s, s])

    def predict(self, X) -> np.ndarray:
        s = self.decision_function(X)
        return self.classes_[(s >= 0.5).astype(int)]


class ReferenceNormalizer(TransformerMixin, BaseEstimator):
    """Per-channel standardisation learned from reference tiles.

    ``transform`` maps ``N x H x W x 3`` pixels to ``N x 3 x H x W``.
    """

    def __init__(self, mean=None, std=None):
        self.mean = mean
        self.std = std

    def fit(self, X, y=None):
        X = np.asarray(X)
        if X.ndim < 3 or X.shape[-1] != 3:
            raise ValueError("expected tiles with a trailing channel axis of 3")
        if self.mean is not None and self.std is not None:
            self.stats_ = NormalizationStats(tuple(self.mean), tuple(self.std))
        else:
            self.stats_ = NormalizationStats.from_tiles(X)
        return self

    def transform(self, X):
        check_is_fitted(self, "stats_")
        X = np.asarray(X)
        if X.shape[-1] != 3:
            raise ValueError("expected tiles with a trailing channel axis of 3")
        return normalize(X, self.stats_, dtype=np.float64)

    def inverse_transform(self, X):
        """Back to ``pixels / 255`` in channels-last layout."""
        check_is_fitted(self, "stats_")
        return denormalize(X, self.stats_)
