"""scikit-learn style estimators wrapping the backbone and the CAM engine.

``AttentionResNetClassifier`` is a standard fit/predict classifier (so it
composes with sklearn model selection and pipelines); ``CamExplainer``
is a transformer mapping image batches to heatmap batches for a fitted
classifier.  Both follow the get_params/set_params contract, so
``sklearn.base.clone`` works on them.
"""

from __future__ import annotations

from typing import Optional

import numpy as np
from sklearn.base import BaseEstimator, ClassifierMixin, TransformerMixin
from sklearn.exceptions import NotFittedError

from . import cam as camlib
from .blocks import BackboneConfig
from .checkpoint import load_model, save_model
from .data import AugmentSpec
from .exceptions import InputError
from .tensor import Tensor
from .training import TrainConfig, predict_scores, train_on_arrays
from .validation import check_image_batch, check_label_vector, check_single_image

__all__ = ["AttentionResNetClassifier", "CamExplainer"]


class AttentionResNetClassifier(BaseEstimator, ClassifierMixin):
    """Residual image classifier with a channel-attention gate.

    Parameters mirror the backbone and trainer configs; ``fit`` expects
    X shaped [N,3,S,S] with values in [-1, 1] and integer labels 0..K-1.
    When no validation data is passed, ``validation_fraction`` of the
    training samples (stratified, seeded) tracks the best checkpoint.
    """

    def __init__(
        self,
        input_side: int = 32,
        stem_kernel: int = 3,
        stem_stride: int = 1,
        stem_pool: bool = False,
        stage_widths: tuple = (8, 16, 32, 64),
        stage_blocks: tuple = (1, 1, 1, 1),
        stage_strides: tuple = (1, 2, 2, 2),
        attention_stages: tuple = (4,),
        reduction_ratio: int = 16,
        leaky_slope: float = 0.01,
        dropout_rate: float = 0.25,
        learning_rate: float = 1e-4,
        batch_size: int = 32,
        epochs: int = 50,
        seed: int = 0,
        rotation_degrees: float = 0.0,
        flip_probability: float = 0.0,
        validation_fraction: float = 0.1,
    ):
        self.input_side = input_side
        self.stem_kernel = stem_kernel
        self.stem_stride = stem_stride
        self.stem_pool = stem_pool
        self.stage_widths = stage_widths
        self.stage_blocks = stage_blocks
        self.stage_strides = stage_strides
        self.attention_stages = attention_stages
        self.reduction_ratio = reduction_ratio
        self.leaky_slope = leaky_slope
        self.dropout_rate = dropout_rate
        self.learning_rate = learning_rate
        self.batch_size = batch_size
        self.epochs = epochs
        self.seed = seed
        self.rotation_degrees = rotation_degrees
        self.flip_probability = flip_probability
        self.validation_fraction = validation_fraction

    def _backbone_config(self, num_classes: int) -> BackboneConfig:
        return BackboneConfig(
            num_classes=num_classes,
            input_side=self.input_side,
            stem_kernel=self.stem_kernel,
            stem_stride=self.stem_stride,
            stem_pool=self.stem_pool,
            stage_widths=tuple(self.stage_widths),
            stage_blocks=tuple(self.stage_blocks),
            stage_strides=tuple(self.stage_strides),
            attention_stages=tuple(self.attention_stages),
            reduction_ratio=self.reduction_ratio,
            leaky_slope=self.leaky_slope,
            dropout_rate=self.dropout_rate,
        ).validate()

    def _holdout_split(self, X, y):
        rng = np.random.default_rng([self.seed, 3])
        val_idx: list[int] = []
        for cls in np.unique(y):
            members = np.flatnonzero(y == cls)
            members = members[rng.permutation(len(members))]
            take = int(round(len(members) * self.validation_fraction))
            val_idx.extend(members[:take].tolist())
        val_mask = np.zeros(len(y), dtype=bool)
        val_mask[val_idx] = True
        if not val_mask.any() or val_mask.all():
            return X, y, X, y  # degenerate fraction: validate on train
        return X[~val_mask], y[~val_mask], X[val_mask], y[val_mask]

    def fit(self, X, y, X_val=None, y_val=None):
        X = check_image_batch(X, side=self.input_side)
        y = check_label_vector(y, len(X))
        classes = np.unique(y)
        if len(classes) < 2:
            raise InputError("need at least two classes to fit")
        num_classes = int(classes.max()) + 1

        if X_val is not None and y_val is not None:
            X_val = check_image_batch(X_val, side=self.input_side)
            y_val = check_label_vector(y_val, len(X_val), num_classes)
            x_tr, y_tr = X, y
        else:
            x_tr, y_tr, X_val, y_val = self._holdout_split(X, y)

        augment = None
        if self.rotation_degrees > 0 or self.flip_probability > 0:
            augment = AugmentSpec(
                rotation_degrees=self.rotation_degrees,
                flip_probability=self.flip_probability,
                seed=self.seed,
            )
        config = TrainConfig(
            backbone=self._backbone_config(num_classes),
            learning_rate=self.learning_rate,
            batch_size=self.batch_size,
            epochs=self.epochs,
            seed=self.seed,
            augment=augment,
        )
        self.model_, self.report_ = train_on_arrays(config, x_tr, y_tr, X_val, y_val)
        self.classes_ = np.arange(num_classes)
        return self

    def _require_fitted(self):
        if not hasattr(self, "model_"):
            raise NotFittedError("call fit before predicting")

    def predict_proba(self, X) -> np.ndarray:
        self._require_fitted()
        X = check_image_batch(X, side=None)
        return predict_scores(self.model_, X, batch_size=self.batch_size)

    def predict(self, X) -> np.ndarray:
        return self.predict_proba(X).argmax(axis=1)

    def save(self, path) -> None:
        self._require_fitted()
        save_model(path, self.model_)

    def load_weights(self, path) -> "AttentionResNetClassifier":
        """Adopt a checkpointed model (architecture taken from the file)."""
        self.model_ = load_model(path)
        self.classes_ = np.arange(self.model_.config.num_classes)
        return self


class CamExplainer(BaseEstimator, TransformerMixin):
    """Transformer from image batches to class-evidence heatmaps.

    ``method`` selects the plain gradient-weighted map ('gradcam') or the
    dynamic-threshold pipeline ('dt').  Heatmaps come back upsampled to
    the input resolution unless ``upsample`` is disabled, in which case
    they stay at feature-map resolution.
    """

    def __init__(
        self,
        model=None,
        method: str = "dt",
        target_layer=None,
        target_class: Optional[int] = None,
        ensemble_size: int = 10,
        sigma: float = 0.1,
        w_start: float = 1.0,
        w_end: float = 0.5,
        otsu: bool = True,
        morphology: bool = True,
        morph_kernel: int = 3,
        seed: int = 0,
        upsample: bool = True,
    ):
        self.model = model
        self.method = method
        self.target_layer = target_layer
        self.target_class = target_class
        self.ensemble_size = ensemble_size
        self.sigma = sigma
        self.w_start = w_start
        self.w_end = w_end
        self.otsu = otsu
        self.morphology = morphology
        self.morph_kernel = morph_kernel
        self.seed = seed
        self.upsample = upsample

    def _config(self) -> camlib.DtGradCamConfig:
        return camlib.DtGradCamConfig(
            ensemble_size=self.ensemble_size,
            sigma=self.sigma,
            w_start=self.w_start,
            w_end=self.w_end,
            otsu_enabled=self.otsu,
            morphology_enabled=self.morphology,
            morph_kernel=self.morph_kernel,
            seed=self.seed,
        ).validate()

    def _backbone(self):
        model = self.model
        if isinstance(model, AttentionResNetClassifier):
            model._require_fitted()
            model = model.model_
        if model is None:
            raise NotFittedError("CamExplainer needs a model (constructor or fit)")
        return model

    def fit(self, X=None, y=None, model=None):
        if model is not None:
            self.model = model
        if self.method not in ("gradcam", "dt"):
            raise InputError(f"unknown method {self.method!r}")
        self._backbone()
        self._config()
        return self

    def explain(self, x, target_class: Optional[int] = None) -> camlib.CamMap:
        """Heatmap for one image; class defaults to the model's argmax."""
        model = self._backbone()
        image = check_single_image(x)
        if target_class is None:
            target_class = self.target_class
        if target_class is None:
            scores = predict_scores(model, image[None])
            target_class = int(scores.argmax(axis=1)[0])
        side = image.shape[-1]
        up = (side, side) if self.upsample else None
        if self.method == "gradcam":
            heat = camlib.gradcam(model, Tensor(image), target_class, self.target_layer)
            if up is not None:
                heat = camlib.upsample_bilinear(heat, up[0], up[1])
            return heat
        return camlib.dt_gradcam(
            model,
            Tensor(image),
            target_class,
            self.target_layer,
            config=self._config(),
            upsample_to=up,
        )

    def transform(self, X) -> np.ndarray:
        """Stack of heatmaps aligned with the batch."""
        X = check_image_batch(X)
        return np.stack([self.explain(x).values for x in X])
