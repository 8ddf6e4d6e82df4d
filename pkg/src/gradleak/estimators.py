"""scikit-learn style wrappers around the functional core.

``SmallNetClassifier`` trains the smooth MLP, ``VulnerabilityProxy`` maps
images to the six per-sample proxies, and ``GradientInversionAttack``
reconstructs images from their shared weight gradients.  All three accept
``X`` as an ``(n_samples, height * width)`` array with pixels in [0, 1].
"""

from __future__ import annotations

import math

import numpy as np
from sklearn.base import BaseEstimator, ClassifierMixin, TransformerMixin, clone
from sklearn.exceptions import NotFittedError
from sklearn.utils.validation import check_array, check_is_fitted, check_X_y

from .attack import AttackConfig, run_attack
from .gradmatch import GradLossKind, GradTarget, ImageShape
from .lavp import PROXY_NAMES, ProxyParams, compute_proxies
from .smallnet import NetSpec, Sample, forward, train_sgd
from .tensorcore import SeededRng

__all__ = ["SmallNetClassifier", "VulnerabilityProxy", "GradientInversionAttack"]


def _check_pixels(X):
    if X.size and (X.min() < 0.0 or X.max() > 1.0):
        raise ValueError("pixel values must lie in [0, 1]")
    return X


def _softmax(z):
    z = z - z.max(axis=1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=1, keepdims=True)


class SmallNetClassifier(ClassifierMixin, BaseEstimator):
    """Smooth-activation MLP trained with seeded minibatch SGD.

    Parameters
    ----------
    hidden_layer_sizes : tuple of int
    activation : {"tanh", "softplus"}
    epochs, lr, batch_size : SGD schedule
    random_state : int
        Master seed; initialization and shuffling use independent child streams.
    """

    def __init__(self, hidden_layer_sizes=(32,), activation="tanh", epochs=5, lr=0.05,
                 batch_size=1, random_state=0):
        self.hidden_layer_sizes = hidden_layer_sizes
        self.activation = activation
        self.epochs = epochs
        self.lr = lr
        self.batch_size = batch_size
        self.random_state = random_state

    def fit(self, X, y):
        X, y = check_X_y(X, y, dtype=np.float64)
        _check_pixels(X)
        self.classes_, codes = np.unique(y, return_inverse=True)
        if self.classes_.size < 2:
            raise ValueError("need at least 2 classes")
        spec = NetSpec((X.shape[1], *self.hidden_layer_sizes, self.classes_.size), self.activation)
        data = [Sample(x, int(c)) for x, c in zip(X, codes)]
        self.weights_ = train_sgd(spec, data, self.epochs, self.lr,
                                  SeededRng(self.random_state), self.batch_size)
        self.n_features_in_ = X.shape[1]
        return self

    def encode(self, y):
        """Class labels to the network's output indices."""
        check_is_fitted(self, "weights_")
        y = np.asarray(y)
        idx = np.searchsorted(self.classes_, y)
        bad = (idx >= self.classes_.size) | (self.classes_[np.minimum(idx, self.classes_.size - 1)] != y)
        if np.any(bad):
            raise ValueError(f"unknown labels: {np.unique(y[bad]).tolist()}")
        return idx

    def decision_function(self, X):
        check_is_fitted(self, "weights_")
        X = check_array(X, dtype=np.float64)
        return forward(self.weights_, X)

    def predict_proba(self, X):
        return _softmax(self.decision_function(X))

    def predict(self, X):
        scores = self.decision_function(X)
        return self.classes_[np.argmax(scores, axis=1)]


class _ModelBacked(TransformerMixin, BaseEstimator):
    """Shared plumbing: fit a clone of ``estimator`` unless it is already fitted."""

    def _fit_model(self, X, y):
        est = self.estimator if self.estimator is not None else SmallNetClassifier()
        try:
            check_is_fitted(est, "weights_")
            self.model_ = est
        except NotFittedError:
            if y is None:
                raise ValueError("y is required when the estimator is not fitted") from None
            self.model_ = clone(est).fit(X, y)
        self.n_features_in_ = self.model_.n_features_in_
        return self

    def _labels(self, X, y):
        if y is None:
            return np.argmax(self.model_.decision_function(X), axis=1)
        y = np.asarray(y)
        if y.shape[0] != X.shape[0]:
            raise ValueError(f"{X.shape[0]} samples but {y.shape[0]} labels")
        return self.model_.encode(y)

    def _validated(self, X):
        check_is_fitted(self, "model_")
        X = _check_pixels(check_array(X, dtype=np.float64))
        if X.shape[1] != self.n_features_in_:
            raise ValueError(f"expected {self.n_features_in_} features, got {X.shape[1]}")
        return X

    def fit_transform(self, X, y=None, **fit_params):
        return self.fit(X, y, **fit_params).transform(X, y)


class VulnerabilityProxy(_ModelBacked):
    """Per-sample curvature proxies of the shared gradient.

    ``transform(X, y)`` returns one column per name in ``proxies``; when
    ``y`` is omitted the model's own predictions stand in for the labels.
    """

    def __init__(self, estimator=None, proxies=PROXY_NAMES, max_iters=500, tol=1e-9,
                 fd_step=1e-4, random_state=0):
        self.estimator = estimator
        self.proxies = proxies
        self.max_iters = max_iters
        self.tol = tol
        self.fd_step = fd_step
        self.random_state = random_state

    def fit(self, X, y=None):
        X = check_array(X, dtype=np.float64)
        unknown = set(self.proxies) - set(PROXY_NAMES)
        if unknown:
            raise ValueError(f"unknown proxies: {sorted(unknown)}")
        return self._fit_model(X, y)

    def transform(self, X, y=None):
        X = self._validated(X)
        labels = self._labels(X, y)
        params = ProxyParams(max_iters=self.max_iters, tol=self.tol, fd_step=self.fd_step,
                             fd_step_outer=self.fd_step, seed=self.random_state)
        root = SeededRng(self.random_state)
        out = np.empty((X.shape[0], len(self.proxies)))
        for i, (x, c) in enumerate(zip(X, labels)):
            rec = compute_proxies(self.model_.weights_, Sample(x, int(c)), i, params,
                                  rng=root.child(i))
            out[i] = [getattr(rec, p) for p in self.proxies]
        return out

    def get_feature_names_out(self, input_features=None):
        return np.asarray(self.proxies, dtype=object)


class GradientInversionAttack(_ModelBacked):
    """Reconstruct each row of ``X`` from the gradient it induces.

    ``transform`` returns the reconstructions; ``final_gm_loss_`` holds the
    matching loss reached for each row of the last call.
    """

    def __init__(self, estimator=None, kind="l2", steps=500, lr=0.05, alpha_tv=1e-2,
                 restarts=3, init_mode="uniform", perturb=0.1, image_shape=None,
                 random_state=0):
        self.estimator = estimator
        self.kind = kind
        self.steps = steps
        self.lr = lr
        self.alpha_tv = alpha_tv
        self.restarts = restarts
        self.init_mode = init_mode
        self.perturb = perturb
        self.image_shape = image_shape
        self.random_state = random_state

    def fit(self, X, y=None):
        X = check_array(X, dtype=np.float64)
        self.config_ = AttackConfig(kind=GradLossKind.parse(self.kind), steps=self.steps,
                                    lr=self.lr, alpha_tv=self.alpha_tv, restarts=self.restarts,
                                    init_mode=self.init_mode, perturb=self.perturb,
                                    seed=self.random_state)
        return self._fit_model(X, y)

    def _shape(self):
        if self.image_shape is not None:
            return ImageShape(*self.image_shape)
        side = math.isqrt(self.n_features_in_)
        if side * side != self.n_features_in_:
            raise ValueError("image_shape is required for non-square inputs")
        return ImageShape(side, side)

    def transform(self, X, y=None):
        X = self._validated(X)
        labels = self._labels(X, y)
        shape = self._shape()
        w = self.model_.weights_
        root = SeededRng(self.random_state)
        out = np.empty_like(X)
        finals = np.empty(X.shape[0])
        for i, (x, c) in enumerate(zip(X, labels)):
            s = Sample(x, int(c))
            res = run_attack(self.config_, w, GradTarget.from_sample(w, s), s, shape,
                             rng=root.child(i))
            out[i] = res.x_rec
            finals[i] = res.final_gm_loss
        self.final_gm_loss_ = finals
        return out
