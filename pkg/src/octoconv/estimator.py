"""scikit-learn compatible wrapper around the G-CNN patch classifier."""

from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator, ClassifierMixin
from sklearn.model_selection import train_test_split
from sklearn.utils.multiclass import check_classification_targets
from sklearn.utils.validation import check_array, check_is_fitted, check_random_state

from . import tensor as T
from .data import AugmentPolicy, augment_volume
from .model import DESK_WIDTHS, ModelConfig, TrainConfig, build_model, train

__all__ = ["GCNNClassifier"]


def _as_volumes(X, expected_shape=None) -> np.ndarray:
    """Accept ``(n, D, H, W)`` or ``(n, 1, D, H, W)``; return float32 5-D."""
    X = check_array(X, allow_nd=True, dtype=np.float32, ensure_all_finite=True)
    if X.ndim == 4:
        X = X[:, None]
    if X.ndim != 5 or X.shape[1] != 1:
        raise ValueError(f"expected volumes shaped (n, D, H, W) or (n, 1, D, H, W), got {X.shape}")
    if expected_shape is not None and X.shape[2:] != tuple(expected_shape):
        raise ValueError(f"volumes have spatial shape {X.shape[2:]}, the model was fitted on {tuple(expected_shape)}")
    return np.ascontiguousarray(X)


class GCNNClassifier(ClassifierMixin, BaseEstimator):
    """Group-equivariant 3D CNN for single-channel volumetric patches.

    ``group`` is one of ``Z3`` (plain CNN), ``D4``, ``D4h``, ``O``, ``Oh``.
    Layer widths are divided by ``sqrt(|H|)`` so every group has roughly
    the same parameter count. When no validation set is passed to
    :meth:`fit`, ``validation_fraction`` of the training data is held out
    (stratified) for early stopping.
    """

    def __init__(self, group="D4", base_widths=DESK_WIDTHS, max_epochs=100, patience=10, batch_size=30,
                 learning_rate=1e-3, dropout=0.3, augment=True, validation_fraction=0.2, random_state=None):
        self.group = group
        self.base_widths = base_widths
        self.max_epochs = max_epochs
        self.patience = patience
        self.batch_size = batch_size
        self.learning_rate = learning_rate
        self.dropout = dropout
        self.augment = augment
        self.validation_fraction = validation_fraction
        self.random_state = random_state

    def fit(self, X, y, X_val=None, y_val=None):
        X = _as_volumes(X)
        y = np.asarray(y)
        if len(y) != len(X):
            raise ValueError(f"X has {len(X)} samples, y has {len(y)}")
        check_classification_targets(y)
        self.classes_ = np.unique(y)
        if len(self.classes_) < 2:
            raise ValueError("need samples of at least two classes")
        seed = int(check_random_state(self.random_state).randint(2**31 - 1))
        codes = np.searchsorted(self.classes_, y)
        if X_val is None:
            if not 0.0 < self.validation_fraction < 1.0:
                raise ValueError("validation_fraction must be in (0, 1) when no validation set is given")
            X, X_val, codes, codes_val = train_test_split(X, codes, test_size=self.validation_fraction,
                                                          stratify=codes, random_state=seed)
        else:
            X_val = _as_volumes(X_val, X.shape[2:])
            y_val = np.asarray(y_val)
            unknown = np.setdiff1d(y_val, self.classes_)
            if unknown.size:
                raise ValueError(f"validation labels {unknown.tolist()} do not occur in y")
            codes_val = np.searchsorted(self.classes_, y_val)
        config = ModelConfig(self.group, base_widths=tuple(self.base_widths), dropout_p=self.dropout,
                             input_shape=(1, *X.shape[2:]), n_classes=len(self.classes_))
        self.net_ = build_model(config, rng=seed)
        tc = TrainConfig(batch_size=self.batch_size, learning_rate=self.learning_rate, max_epochs=self.max_epochs,
                         patience=self.patience, seed=seed, augment=bool(self.augment))
        policy = AugmentPolicy()
        self.report_ = train(self.net_, X, codes, X_val, codes_val, tc,
                             augment_fn=lambda v, rng: augment_volume(v, rng, policy))
        self.n_features_in_ = int(np.prod(X.shape[1:]))
        self.input_shape_ = tuple(X.shape[2:])
        return self

    def predict_proba(self, X) -> np.ndarray:
        check_is_fitted(self, "net_")
        X = _as_volumes(X, self.input_shape_)
        return T.softmax(self.net_.predict_logits(X).astype(np.float64))

    def predict(self, X) -> np.ndarray:
        proba = self.predict_proba(X)
        return self.classes_[np.argmax(proba, axis=1)]

    def decision_function(self, X) -> np.ndarray:
        """Logit margin of the second class over the first (binary case)."""
        check_is_fitted(self, "net_")
        logits = self.net_.predict_logits(_as_volumes(X, self.input_shape_)).astype(np.float64)
        return logits[:, 1] - logits[:, 0] if logits.shape[1] == 2 else logits
