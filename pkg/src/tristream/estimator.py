"""Scikit-learn style estimator wrapping the triple-stream classifier.

Lets the staged training pipeline compose with the wider ecosystem
(`get_params`/`set_params`, `fit`/`predict`/`predict_proba`) for in-memory
tile arrays of shape (n_samples, 3, height, width) scaled to [0, 1].
"""

from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator, ClassifierMixin
from sklearn.exceptions import NotFittedError

from . import tensor as T
from .datasets import ArrayDataset
from .model import build_tristream
from .stream import MIN_INPUT_SIZE, StreamConfig
from .tensor import Tensor
from .training import TrainConfig, run_policy


def _check_tiles(X) -> np.ndarray:
    X = np.asarray(X, dtype=np.float64)
    if X.ndim != 4 or X.shape[1] != 3:
        raise ValueError("X must have shape (n_samples, 3, height, width)")
    if X.shape[2] < MIN_INPUT_SIZE or X.shape[3] < MIN_INPUT_SIZE:
        raise ValueError(f"tiles must be at least {MIN_INPUT_SIZE}x{MIN_INPUT_SIZE}")
    if not np.all(np.isfinite(X)):
        raise ValueError("X contains non-finite values")
    return X


class TriStreamClassifier(ClassifierMixin, BaseEstimator):
    """Tile classifier trained with the three-stage targeted policy."""

    def __init__(self, stage_depths=(3, 4, 6, 3), base_width=64, scale=1.0,
                 base_lr=1e-4, batch_size=32, epochs_stage1=5, epochs_stage2=5,
                 epochs_stage3=5, brightness=0.1, random_state=0):
        self.stage_depths = stage_depths
        self.base_width = base_width
        self.scale = scale
        self.base_lr = base_lr
        self.batch_size = batch_size
        self.epochs_stage1 = epochs_stage1
        self.epochs_stage2 = epochs_stage2
        self.epochs_stage3 = epochs_stage3
        self.brightness = brightness
        self.random_state = random_state

    def fit(self, X, y):
        X = _check_tiles(X)
        y = np.asarray(y)
        self.classes_, y_idx = np.unique(y, return_inverse=True)
        if len(self.classes_) != 2:
            raise ValueError("exactly two classes are supported")

        config = StreamConfig(stage_depths=tuple(self.stage_depths),
                              base_width=self.base_width, scale=self.scale)
        seed = int(self.random_state)
        self.model_ = build_tristream(config, num_classes=2,
                                      seeds=(seed, seed + 1, seed + 2),
                                      head_seed=seed + 3)
        cfg = TrainConfig(base_lr=self.base_lr, batch_size=self.batch_size,
                          epochs_stage1=self.epochs_stage1,
                          epochs_stage2=self.epochs_stage2,
                          epochs_stage3=self.epochs_stage3,
                          brightness=self.brightness, seed=seed)
        self.reports_ = run_policy(self.model_, ArrayDataset(X, y_idx), cfg)
        return self

    def _check_fitted(self):
        if not hasattr(self, "model_"):
            raise NotFittedError("call fit before predict")

    def decision_logits(self, X) -> np.ndarray:
        self._check_fitted()
        X = _check_tiles(X)
        out = []
        for start in range(0, len(X), self.batch_size):
            batch = Tensor(X[start:start + self.batch_size].astype(self.model_.dtype))
            out.append(self.model_.forward(batch, mode="eval").data)
        return np.concatenate(out, axis=0)

    def predict_proba(self, X) -> np.ndarray:
        return T.softmax(self.decision_logits(X))

    def predict(self, X) -> np.ndarray:
        self._check_fitted()
        return self.classes_[self.predict_proba(X).argmax(axis=1)]
