"""Scikit-learn style wrappers around the functional training API.

TokenMixerClassifier trains the small vision transformer (any mixer kind)
with plain supervised learning; SparsityGuidedDistiller takes a fitted
teacher and produces a student whose chosen layers use a sequential mixer,
trained with the staged distillation objectives. Both follow the estimator
protocol: constructor stores hyperparameters verbatim, fit() builds state
in trailing-underscore attributes, get_params/set_params come from
BaseEstimator.
"""

from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator, ClassifierMixin
from sklearn.utils.validation import check_array, check_is_fitted, check_X_y

from . import autodiff as ad
from .data import Dataset
from .errors import ContractError
from .model import Model, ModelConfig, forward, init_model, replace_layers
from .training import DistillConfig, train_classifier, train_distill


def _as_images(x, image_size, channels):
    x = np.asarray(x, dtype=np.float64)
    if x.ndim == 2 and x.shape[1] == image_size * image_size * channels:
        x = x.reshape(-1, image_size, image_size, channels)
    if x.ndim == 3:
        x = x[..., None]
    if x.shape[1:] != (image_size, image_size, channels):
        raise ContractError(f"cannot interpret input of shape {x.shape} as "
                            f"{image_size}x{image_size}x{channels} images")
    return x


def _split(x, y, val_fraction, seed):
    n = x.shape[0]
    n_val = max(1, int(round(val_fraction * n)))
    order = np.random.default_rng(np.random.SeedSequence([seed, 5])).permutation(n)
    val, train = order[:n_val], order[n_val:]
    if train.size == 0:
        train = val
    return Dataset(x[train], y[train], x[val], y[val])


def _softmax(z):
    z = z - z.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


class TokenMixerClassifier(BaseEstimator, ClassifierMixin):
    """Small ViT classifier with a configurable token mixer in every layer."""

    def __init__(self, depth=4, dim=32, n_heads=4, image_size=28, patch_size=7,
                 channels=1, mixer="attention", state_size=0, epochs=20,
                 lr=5e-4, lr_min=0.0, batch_size=64, weight_decay=0.0,
                 use_halting=False, lambda_avit=0.1, val_fraction=0.1,
                 random_state=0):
        self.depth = depth
        self.dim = dim
        self.n_heads = n_heads
        self.image_size = image_size
        self.patch_size = patch_size
        self.channels = channels
        self.mixer = mixer
        self.state_size = state_size
        self.epochs = epochs
        self.lr = lr
        self.lr_min = lr_min
        self.batch_size = batch_size
        self.weight_decay = weight_decay
        self.use_halting = use_halting
        self.lambda_avit = lambda_avit
        self.val_fraction = val_fraction
        self.random_state = random_state

    def _eval_mode(self):
        return "threshold" if self.use_halting else "off"

    def fit(self, X, y):
        X, y = check_X_y(X, y, allow_nd=True)
        images = _as_images(X, self.image_size, self.channels)
        self.classes_ = np.unique(y)
        codes = np.searchsorted(self.classes_, y)
        cfg = ModelConfig(depth=self.depth, dim=self.dim, n_heads=self.n_heads,
                          image_size=self.image_size, patch_size=self.patch_size,
                          n_classes=len(self.classes_), channels=self.channels,
                          mixer_kinds=(self.mixer,) * self.depth,
                          state_size=self.state_size)
        self.model_ = init_model(cfg, seed=self.random_state)
        data = _split(images, codes, self.val_fraction, self.random_state)
        self.metrics_ = train_classifier(
            self.model_, data, epochs=self.epochs, lr_max=self.lr,
            lr_min=self.lr_min, batch_size=self.batch_size,
            weight_decay=self.weight_decay, use_halting=self.use_halting,
            lambda_avit=self.lambda_avit, seed=self.random_state)
        return self

    def decision_function(self, X):
        check_is_fitted(self, "model_")
        X = check_array(X, allow_nd=True)
        images = _as_images(X, self.image_size, self.channels)
        return forward(self.model_, images, halting=self._eval_mode()).logits.data

    def predict_proba(self, X):
        return _softmax(self.decision_function(X))

    def predict(self, X):
        scores = self.decision_function(X)
        return self.classes_[np.argmax(scores, axis=-1)]

    def transform(self, X):
        """Final class-token embedding per sample, shape (n, dim)."""
        check_is_fitted(self, "model_")
        X = check_array(X, allow_nd=True)
        images = _as_images(X, self.image_size, self.channels)
        trace = forward(self.model_, images, halting=self._eval_mode())
        final = ad.layer_norm(trace.tokens, self.model_.ln_f_scale,
                              self.model_.ln_f_shift)
        return final.data[:, 0]


class SparsityGuidedDistiller(BaseEstimator, ClassifierMixin):
    """Distills a fitted teacher into a student with sequential mixers at the
    chosen layers, using dense, teacher-mask, or self-mask objectives."""

    def __init__(self, teacher=None, replaced=(3,), substitute="ssm",
                 stage="stage1", epochs=30, lr=5e-4, lr_min=0.0, batch_size=64,
                 lambda_cls=1.0, lambda_sim=0.75, lambda_mask=0.1,
                 lambda_avit=0.1, lambda_halt=0.01,
                 trainable_policy="replaced_only", val_fraction=0.1,
                 random_state=0):
        self.teacher = teacher
        self.replaced = replaced
        self.substitute = substitute
        self.stage = stage
        self.epochs = epochs
        self.lr = lr
        self.lr_min = lr_min
        self.batch_size = batch_size
        self.lambda_cls = lambda_cls
        self.lambda_sim = lambda_sim
        self.lambda_mask = lambda_mask
        self.lambda_avit = lambda_avit
        self.lambda_halt = lambda_halt
        self.trainable_policy = trainable_policy
        self.val_fraction = val_fraction
        self.random_state = random_state

    def _teacher_model(self):
        if isinstance(self.teacher, Model):
            return self.teacher, None
        if isinstance(self.teacher, TokenMixerClassifier):
            check_is_fitted(self.teacher, "model_")
            return self.teacher.model_, self.teacher.classes_
        raise ContractError("teacher must be a fitted TokenMixerClassifier "
                            "or a Model")

    def fit(self, X, y):
        teacher, classes = self._teacher_model()
        X, y = check_X_y(X, y, allow_nd=True)
        cfg = teacher.config
        images = _as_images(X, cfg.image_size, cfg.channels)
        self.classes_ = np.unique(y) if classes is None else classes
        codes = np.searchsorted(self.classes_, y)
        self.student_ = replace_layers(teacher, self.replaced, self.substitute,
                                       seed=self.random_state)
        dcfg = DistillConfig(
            stage=self.stage, replaced=tuple(self.replaced),
            lambda_cls=self.lambda_cls, lambda_sim=self.lambda_sim,
            lambda_mask=self.lambda_mask, lambda_avit=self.lambda_avit,
            lambda_halt=self.lambda_halt, epochs=self.epochs, lr_max=self.lr,
            lr_min=self.lr_min, batch_size=self.batch_size,
            trainable_policy=self.trainable_policy, seed=self.random_state)
        data = _split(images, codes, self.val_fraction, self.random_state)
        self.metrics_ = train_distill(self.student_, teacher, data, dcfg)
        return self

    def _eval_mode(self):
        return "threshold" if self.stage == "stage2" else "off"

    def decision_function(self, X):
        check_is_fitted(self, "student_")
        X = check_array(X, allow_nd=True)
        cfg = self.student_.config
        images = _as_images(X, cfg.image_size, cfg.channels)
        return forward(self.student_, images, halting=self._eval_mode()).logits.data

    def predict_proba(self, X):
        return _softmax(self.decision_function(X))

    def predict(self, X):
        scores = self.decision_function(X)
        return self.classes_[np.argmax(scores, axis=-1)]
