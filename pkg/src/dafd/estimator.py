"""scikit-learn style wrappers around the preprocessing and training code."""

from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator, ClassifierMixin, TransformerMixin
from sklearn.utils.validation import check_is_fitted

from . import dann, nn
from .signal import Segment, TARGET_RATE_HZ, WS_BACKWARD, WS_FORWARD, WindowConfig, preprocess

LABELS = ("ADL", "Fall")


def check_segments(X, name="X"):
    """Coerce to a finite ``(n, 66, 3)`` float array (samples x axes)."""
    X = np.asarray(X, dtype=np.float64)
    if X.ndim != 3 or X.shape[1:] != (nn.INPUT_LENGTH, nn.N_AXES):
        raise ValueError(f"{name} must have shape (n, {nn.INPUT_LENGTH}, {nn.N_AXES}), got {X.shape}")
    if len(X) == 0:
        raise ValueError(f"{name} is empty")
    if not np.all(np.isfinite(X)):
        raise ValueError(f"{name} contains non-finite values")
    return X


def check_labels(y, n, name="y"):
    """Map labels given as 0/1 or "ADL"/"Fall" to integers."""
    y = np.asarray(y)
    if y.ndim != 1 or len(y) != n:
        raise ValueError(f"{name} must be 1-D with {n} entries")
    if y.dtype.kind in ("U", "S", "O"):
        bad = set(y.tolist()) - set(LABELS)
        if bad:
            raise ValueError(f"{name} has unknown labels {sorted(bad)}")
        return (y == "Fall").astype(np.int64)
    if not set(np.unique(y).tolist()) <= {0, 1}:
        raise ValueError(f"{name} must contain only 0 (ADL) and 1 (Fall)")
    return y.astype(np.int64)


def _segments(X, y, groups, domain):
    groups = np.arange(len(X)) if groups is None else np.asarray(groups)
    if len(groups) != len(X):
        raise ValueError("groups must match X in length")
    out = []
    for i, v in enumerate(X):
        label = None if y is None else LABELS[int(y[i])]
        out.append(Segment(values=v, label=label, domain=domain, subject_id=str(groups[i])))
    return out


class DAFDClassifier(ClassifierMixin, BaseEstimator):
    """Adversarially adapted fall detector on preprocessed ``(n, 66, 3)`` windows.

    ``fit`` takes labeled source windows plus optional target windows.  Target
    labels are only used in ``TargetOnly`` mode; ``DAFD_adl`` needs them to
    select the target ADL windows.  ``groups`` carry subject ids for the
    subject-disjoint validation split.
    """

    def __init__(self, mode="DAFD", dropout=0.1, lr=0.001, lam=1.0, weight_decay=dann.WEIGHT_DECAY,
                 batch_per_domain=4, max_epochs=200, patience=10, val_fraction=0.2, random_state=0):
        self.mode = mode
        self.dropout = dropout
        self.lr = lr
        self.lam = lam
        self.weight_decay = weight_decay
        self.batch_per_domain = batch_per_domain
        self.max_epochs = max_epochs
        self.patience = patience
        self.val_fraction = val_fraction
        self.random_state = random_state

    def fit(self, X, y, X_target=None, y_target=None, groups=None, groups_target=None):
        mode = dann.canonical_mode(self.mode)
        X = check_segments(X)
        y = check_labels(y, len(X))
        if mode == "SourceOnly":
            tgt = []
        else:
            if X_target is None:
                raise ValueError(f"mode {mode} needs X_target")
            X_target = check_segments(X_target, "X_target")
            yt = None
            if mode in ("TargetOnly", "DAFD_adl"):
                if y_target is None:
                    raise ValueError(f"mode {mode} needs y_target")
                yt = check_labels(y_target, len(X_target), "y_target")
            tgt = _segments(X_target, yt, groups_target, "target")
        src = _segments(X, y, groups, "source")
        hp = dann.Hyperparams(self.dropout, self.lr, self.lam, self.weight_decay)
        cfg = dann.TrainConfig(mode, self.batch_per_domain, self.max_epochs, self.patience,
                               self.random_state, self.val_fraction)
        res = dann.fit(dann.SegmentPool(src, "source"), dann.SegmentPool(tgt, "target"), hp, cfg)
        self.model_ = res.model
        self.history_ = res.history
        self.classes_ = np.array([0, 1])
        self.n_features_out_ = nn.FEATURE_DIM
        return self

    def predict_proba(self, X):
        check_is_fitted(self, "model_")
        return dann.predict_proba(self.model_, check_segments(X).transpose(0, 2, 1))

    def predict(self, X):
        check_is_fitted(self, "model_")
        return self.classes_[np.argmax(self.predict_proba(X), axis=1)]

    def transform(self, X):
        """Eval-mode extractor features, ``(n, 40)``."""
        check_is_fitted(self, "model_")
        return nn.extract(self.model_, check_segments(X).transpose(0, 2, 1), "eval")[0]


class ImpactWindowTransformer(TransformerMixin, BaseEstimator):
    """TrialRecords -> resampled, impact-centred, min-max scaled ``(n, 66, 3)`` windows."""

    def __init__(self, target_rate=TARGET_RATE_HZ, ws_b=WS_BACKWARD, ws_f=WS_FORWARD):
        self.target_rate = target_rate
        self.ws_b = ws_b
        self.ws_f = ws_f

    def fit(self, X, y=None):
        return self

    def transform(self, X):
        cfg = WindowConfig(self.ws_b, self.ws_f, self.target_rate)
        if len(X) == 0:
            return np.zeros((0, cfg.length, nn.N_AXES))
        return np.stack([preprocess(tr, self.target_rate, cfg).values for tr in X])
