"""scikit-learn style wrapper around model construction and training."""

from __future__ import annotations

from typing import Optional

import numpy as np
from sklearn.base import BaseEstimator, ClassifierMixin
from sklearn.utils.validation import check_array, check_is_fitted

from .data import DEFAULT_CLASSES, Dataset, split
from .metrics import report_from_scores
from .model import ModelConfig, build_model
from .trainer import TrainConfig, train


def check_images(X, image_size: Optional[int] = None) -> np.ndarray:
    """Validate a stack of square grayscale images; returns (N, H, W) float64.

    Accepts (N, H, W), (N, 1, H, W) or flattened (N, H*W) input.
    """
    X = check_array(X, allow_nd=True, dtype=np.float64, ensure_all_finite=True)
    if X.ndim == 4:
        if X.shape[1] != 1:
            raise ValueError(f"expected one channel, got {X.shape[1]}")
        X = X[:, 0]
    elif X.ndim == 2:
        side = int(round(np.sqrt(X.shape[1])))
        if side * side != X.shape[1]:
            raise ValueError(f"cannot reshape {X.shape[1]} features into a square image")
        X = X.reshape(len(X), side, side)
    if X.ndim != 3 or X.shape[1] != X.shape[2]:
        raise ValueError(f"expected square images, got shape {X.shape}")
    if image_size is not None and X.shape[1] != image_size:
        raise ValueError(f"expected {image_size}x{image_size} images, got {X.shape[1]}x{X.shape[2]}")
    return X


def check_multilabel(y, n_samples: int) -> np.ndarray:
    """Validate an (N, C) 0/1 indicator matrix."""
    y = check_array(y, dtype=None, ensure_2d=True)
    if y.shape[0] != n_samples:
        raise ValueError(f"y has {y.shape[0]} rows for {n_samples} images")
    if y.shape[1] < 2:
        raise ValueError("need at least two label columns")
    if not np.all((y == 0) | (y == 1)):
        raise ValueError("labels must be 0 or 1")
    return y.astype(np.int8)


def check_masks(masks, labels: np.ndarray, image_size: int) -> np.ndarray:
    """Validate (N, C, H, W) pixel masks; returns a bool array."""
    masks = np.asarray(masks)
    expected = labels.shape + (image_size, image_size)
    if masks.shape != expected:
        raise ValueError(f"masks must have shape {expected}, got {masks.shape}")
    return masks > 0


class HEGLClassifier(ClassifierMixin, BaseEstimator):
    """Multi-label image classifier trained with the composite objective.

    ``fit`` holds out ``val_fraction`` of the data for early stopping.
    ``transform`` returns the per-class attention maps (N, C, G, G).
    ``score`` is the macro ROC AUC, the selection metric used in training.
    """

    def __init__(self, patch_size=4, embed_dim=64, encoder_layers=2, decoder_layers=1, heads=4,
                 mlp_ratio=4.0, attention_layer="last", alpha=1.0, beta=1.0, w_fp=1.0,
                 lr=1e-3, epochs_max=100, patience=20, warmup_epochs=5, batch_size=32,
                 weight_decay=1e-2, val_fraction=0.2, threshold=0.5, random_state=0):
        self.patch_size = patch_size
        self.embed_dim = embed_dim
        self.encoder_layers = encoder_layers
        self.decoder_layers = decoder_layers
        self.heads = heads
        self.mlp_ratio = mlp_ratio
        self.attention_layer = attention_layer
        self.alpha = alpha
        self.beta = beta
        self.w_fp = w_fp
        self.lr = lr
        self.epochs_max = epochs_max
        self.patience = patience
        self.warmup_epochs = warmup_epochs
        self.batch_size = batch_size
        self.weight_decay = weight_decay
        self.val_fraction = val_fraction
        self.threshold = threshold
        self.random_state = random_state

    def _configs(self, image_size: int, num_classes: int):
        seed = int(self.random_state)
        model_cfg = ModelConfig(image_size=image_size, patch_size=self.patch_size,
                                embed_dim=self.embed_dim, encoder_layers=self.encoder_layers,
                                decoder_layers=self.decoder_layers, heads=self.heads,
                                num_classes=num_classes, mlp_ratio=self.mlp_ratio,
                                attention_layer=self.attention_layer, seed=seed)
        train_cfg = TrainConfig(lr=self.lr, epochs_max=self.epochs_max, patience=self.patience,
                                warmup_epochs=self.warmup_epochs, batch_size=self.batch_size,
                                alpha=self.alpha, beta=self.beta, w_fp=self.w_fp,
                                weight_decay=self.weight_decay, val_fraction=self.val_fraction,
                                threshold=self.threshold, seeds=[seed])
        return model_cfg.validate(), train_cfg.validate()

    def fit(self, X, y, masks=None, mask_valid=None):
        """Train on images ``X`` and indicator labels ``y``.

        ``masks`` (N, C, H, W) are required when ``alpha > 0``;
        ``mask_valid`` (N, C) marks which masks exist (default: non-empty ones).
        """
        X = check_images(X)
        y = check_multilabel(y, len(X))
        n, c = y.shape
        size = X.shape[1]
        if masks is None:
            if self.alpha > 0:
                raise ValueError("alpha > 0 requires masks")
            masks = np.zeros((n, c, size, size), dtype=bool)
            valid = np.zeros((n, c), dtype=bool)
        else:
            masks = check_masks(masks, y, size)
            valid = masks.any(axis=(-2, -1)) if mask_valid is None else np.asarray(mask_valid, bool)
        model_cfg, train_cfg = self._configs(size, c)
        names = tuple(DEFAULT_CLASSES[:c]) if c <= len(DEFAULT_CLASSES) else tuple(
            f"class{k}" for k in range(c))
        data = Dataset(X, y, masks, valid, [str(i) for i in range(n)], names)
        train_set, val_set = split(data, self.val_fraction, int(self.random_state))
        self.model_ = build_model(model_cfg)
        self.record_ = train(self.model_, train_set, val_set, train_cfg, int(self.random_state))
        self.classes_ = np.arange(c)
        self.n_features_in_ = size * size
        self.image_size_ = size
        return self

    def decision_function(self, X) -> np.ndarray:
        """Per-class logits (N, C)."""
        check_is_fitted(self, "model_")
        logits, _ = self.model_.predict_logits(check_images(X, self.image_size_))
        return logits

    def predict_proba(self, X) -> np.ndarray:
        """Independent per-class probabilities (N, C); rows need not sum to 1."""
        check_is_fitted(self, "model_")
        return self.model_.predict_proba(check_images(X, self.image_size_))

    def predict(self, X) -> np.ndarray:
        return (self.predict_proba(X) >= self.threshold).astype(np.int8)

    def transform(self, X) -> np.ndarray:
        """Attention maps (N, C, G, G); each map sums to 1."""
        check_is_fitted(self, "model_")
        _, attention = self.model_.predict_logits(check_images(X, self.image_size_))
        return attention

    def score(self, X, y, sample_weight=None) -> float:
        if sample_weight is not None:
            raise ValueError("sample weights are not supported")
        y = check_multilabel(y, len(X))
        return report_from_scores(self.predict_proba(X), y, self.threshold).auc

    def __sklearn_tags__(self):
        tags = super().__sklearn_tags__()
        tags.target_tags.multi_output = True
        tags.classifier_tags.multi_label = True
        return tags
