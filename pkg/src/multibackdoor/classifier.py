"""Scikit-learn style wrapper around the TinyConv kernel for centralized training."""

from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator, ClassifierMixin
from sklearn.exceptions import NotFittedError

from . import numkernel as nk
from .validation import check_images, check_labels


class TinyConvClassifier(ClassifierMixin, BaseEstimator):
    """TinyConv trained with momentum SGD on 0..255 C x H x W images.

    ``warm_start`` continues from ``params_`` on the next ``fit``; a fresh
    momentum buffer is used either way.
    """

    def __init__(self, epochs=5, learning_rate=0.01, momentum=0.9, weight_decay=5e-4, batch_size=64,
                 n_classes=None, warm_start=False, random_state=0):
        self.epochs = epochs
        self.learning_rate = learning_rate
        self.momentum = momentum
        self.weight_decay = weight_decay
        self.batch_size = batch_size
        self.n_classes = n_classes
        self.warm_start = warm_start
        self.random_state = random_state

    def fit(self, X, y):
        X = check_images(X)
        y = check_labels(y, self.n_classes)
        if len(y) != len(X):
            raise ValueError(f"{len(X)} images but {len(y)} labels")
        k = self.n_classes or int(y.max()) + 1
        rng = np.random.default_rng(self.random_state)
        if not (self.warm_start and hasattr(self, "params_")):
            self.arch_ = nk.tiny_conv(k, X.shape[1:])
            self.params_ = nk.init_params(self.arch_, rng)
        cfg = nk.SgdConfig(self.learning_rate, self.momentum, self.weight_decay)
        self.params_, self.loss_curve_ = nk.train_sgd(self.arch_, self.params_, X, y, cfg, self.epochs,
                                                      self.batch_size, rng)
        self.classes_ = np.arange(self.arch_.n_classes)
        return self

    def _check(self, X):
        if not hasattr(self, "params_"):
            raise NotFittedError("TinyConvClassifier is not fitted yet")
        return check_images(X, shape=self.arch_.input_shape, pixel_range=False)

    def decision_function(self, X):
        X = self._check(X)
        return np.concatenate([nk.forward(self.arch_, self.params_, X[i:i + 512]) for i in range(0, len(X), 512)])

    def predict_proba(self, X):
        z = self.decision_function(X)
        z = z - z.max(axis=1, keepdims=True)
        e = np.exp(z)
        return e / e.sum(axis=1, keepdims=True)

    def predict(self, X):
        return nk.predict(self.arch_, self.params_, self._check(X))
