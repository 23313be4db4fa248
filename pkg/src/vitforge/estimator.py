"""Scikit-learn style front end.

``VitClassifier`` wraps the tensor engine, model, and training loop behind
the standard ``fit`` / ``predict`` / ``predict_proba`` estimator API so the
classifier composes with sklearn tooling (``clone``, ``get_params``,
pipelines, cross-validation). Images are dense ``(n, H, W, C)`` float
arrays with values in [0, 1].
"""

from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator, ClassifierMixin
from sklearn.utils.validation import check_is_fitted

from . import data as D
from . import model as M
from . import train as TR
from .tensor import Tensor

__all__ = ["VitClassifier", "check_images", "check_labels"]


def check_images(X, image_size=None) -> np.ndarray:
    """Validate an (n, H, W, C) image batch: 4-d, finite, values in [0, 1]."""
    X = np.asarray(X, dtype=np.float32)
    if X.ndim != 4:
        raise ValueError(f"X must be (n_samples, H, W, C), got shape {X.shape}")
    if X.shape[0] == 0:
        raise ValueError("X is empty")
    if not np.all(np.isfinite(X)):
        raise ValueError("X contains non-finite values")
    if X.min() < 0.0 or X.max() > 1.0:
        raise ValueError("pixel values must lie in [0, 1]; rescale before fitting")
    if image_size is not None and tuple(X.shape[1:]) != tuple(image_size):
        raise ValueError(
            f"images shaped {X.shape[1:]} do not match expected {tuple(image_size)}"
        )
    return X


def check_labels(y, n_samples: int) -> np.ndarray:
    y = np.asarray(y)
    if y.ndim != 1 or y.shape[0] != n_samples:
        raise ValueError(
            f"y must be a vector of {n_samples} labels, got shape {y.shape}"
        )
    return y


class VitClassifier(BaseEstimator, ClassifierMixin):
    """Vision Transformer image classifier with a sklearn estimator surface.

    Parameters mirror the architecture and optimizer knobs; ``fit`` holds
    out a stratified ``validation_fraction`` for early stopping and keeps
    the best-epoch weights. All randomness derives from ``random_state``.
    """

    def __init__(self, image_size=(72, 72, 3), patch_size=6, projection_dim=64,
                 num_layers=8, num_heads=4, encoder_mlp_dims=(128, 64),
                 head_dims=(2042, 1048), dropout_rate=0.1, head_dropout_rate=0.5,
                 activation="gelu", learning_rate=1e-4, weight_decay=1e-4,
                 batch_size=256, max_epochs=100, early_stop_patience=10,
                 validation_fraction=0.1, augment=False, random_state=0,
                 verbose=False):
        self.image_size = image_size
        self.patch_size = patch_size
        self.projection_dim = projection_dim
        self.num_layers = num_layers
        self.num_heads = num_heads
        self.encoder_mlp_dims = encoder_mlp_dims
        self.head_dims = head_dims
        self.dropout_rate = dropout_rate
        self.head_dropout_rate = head_dropout_rate
        self.activation = activation
        self.learning_rate = learning_rate
        self.weight_decay = weight_decay
        self.batch_size = batch_size
        self.max_epochs = max_epochs
        self.early_stop_patience = early_stop_patience
        self.validation_fraction = validation_fraction
        self.augment = augment
        self.random_state = random_state
        self.verbose = verbose

    # -- internals --------------------------------------------------------

    def _configs(self, n_classes: int):
        vit = M.ViTConfig(
            image_size=tuple(self.image_size),
            patch_size=self.patch_size,
            projection_dim=self.projection_dim,
            num_layers=self.num_layers,
            num_heads=self.num_heads,
            encoder_mlp_dims=tuple(self.encoder_mlp_dims),
            head_dims=tuple(self.head_dims),
            num_classes=n_classes,
            dropout_rate=self.dropout_rate,
            head_dropout_rate=self.head_dropout_rate,
            activation=self.activation,
        )
        train_cfg = TR.TrainConfig(
            learning_rate=self.learning_rate,
            weight_decay=self.weight_decay,
            batch_size=self.batch_size,
            max_epochs=self.max_epochs,
            early_stop_patience=self.early_stop_patience,
            seed=self.random_state,
        )
        return vit, train_cfg

    def _holdout_split(self, dataset: D.Dataset, rng: np.random.Generator):
        """Stratified (train, validation) partition by validation_fraction."""
        if not 0.0 < self.validation_fraction < 1.0:
            raise ValueError("validation_fraction must be in (0, 1)")
        by_class: dict[int, list[int]] = {}
        for i, img in enumerate(dataset):
            by_class.setdefault(img.label, []).append(i)
        train_idx, val_idx = [], []
        for label in sorted(by_class):
            ids = np.array(by_class[label])
            rng.shuffle(ids)
            n_val = max(1, int(round(self.validation_fraction * len(ids))))
            if n_val >= len(ids):
                raise ValueError(
                    f"class {label} has only {len(ids)} samples; cannot hold "
                    f"out a validation fraction of {self.validation_fraction}"
                )
            val_idx.extend(ids[:n_val])
            train_idx.extend(ids[n_val:])
        return dataset.subset(sorted(train_idx)), dataset.subset(sorted(val_idx))

    # -- estimator API ------------------------------------------------------

    def fit(self, X, y):
        X = check_images(X, self.image_size)
        y = check_labels(y, X.shape[0])
        self.classes_, y_idx = np.unique(y, return_inverse=True)
        if len(self.classes_) < 2:
            raise ValueError("fit needs at least two classes")

        class_map = D.ClassMap([str(c) for c in self.classes_])
        images = [
            D.LabeledImage(np.ascontiguousarray(X[i]), int(y_idx[i]))
            for i in range(X.shape[0])
        ]
        dataset = D.Dataset(images, class_map)
        rng = np.random.default_rng(self.random_state)
        train_ds, val_ds = self._holdout_split(dataset, rng)

        vit_cfg, train_cfg = self._configs(len(self.classes_))
        params = M.init_params(vit_cfg, np.random.default_rng(self.random_state))
        augment_spec = D.AugmentSpec(seed=self.random_state + 1) if self.augment else None
        callback = None
        if self.verbose:
            def callback(record):
                print(
                    f"[VitClassifier] epoch {record.epoch} "
                    f"val_loss {record.val_loss:.4f} val_acc {record.val_acc:.4f}"
                )

        best, records, stop_reason = TR.train(
            params, vit_cfg, train_cfg, train_ds, val_ds,
            augment_spec=augment_spec, callback=callback,
        )
        self.params_ = best
        self.config_ = vit_cfg
        self.history_ = records
        self.stop_reason_ = stop_reason
        self.n_features_in_ = int(np.prod(X.shape[1:]))
        return self

    def predict_proba(self, X):
        check_is_fitted(self, "params_")
        X = check_images(X, self.image_size)
        chunks = []
        for start in range(0, X.shape[0], max(1, self.batch_size)):
            logits = M.forward(
                Tensor(X[start:start + self.batch_size]),
                self.params_, self.config_, training=False,
            ).data
            z = logits - logits.max(axis=1, keepdims=True)
            e = np.exp(z)
            chunks.append(e / e.sum(axis=1, keepdims=True))
        return np.concatenate(chunks, axis=0)

    def predict(self, X):
        probs = self.predict_proba(X)
        return self.classes_[probs.argmax(axis=1)]
