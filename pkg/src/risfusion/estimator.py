"""scikit-learn style wrapper around training, fusion and segmentation.

``X`` is a :class:`~risfusion.data.Dataset`, a list of samples or a path to a
manifest. Targets travel inside the samples, so ``y`` is accepted and ignored.
"""
from __future__ import annotations

from dataclasses import fields
from pathlib import Path

import numpy as np
from sklearn.base import BaseEstimator, TransformerMixin
from sklearn.utils.validation import check_is_fitted

from .autodiff import no_grad
from .data import Dataset, Sample, read_manifest
from .errors import ValidationError
from .train import TrainConfig, evaluate, predict_masks, prepare, train


def check_dataset(X) -> Dataset:
    """Coerce ``X`` to a non-empty Dataset."""
    if isinstance(X, (str, Path)):
        return read_manifest(X)
    if isinstance(X, Sample):
        X = [X]
    if not isinstance(X, Dataset):
        try:
            items = list(X)
        except TypeError as exc:
            raise ValidationError(f"expected a Dataset, samples or a manifest path, got {type(X).__name__}") from exc
        bad = [type(s).__name__ for s in items if not isinstance(s, Sample)]
        if bad:
            raise ValidationError(f"expected Sample items, got {bad[0]}")
        X = Dataset(items)
    X.check_nonempty()
    return X


class RISFusion(TransformerMixin, BaseEstimator):
    """Jointly trained fusion and referring-segmentation model.

    ``transform`` returns fused RGB images (N, 3, H, W); ``predict`` returns
    boolean masks (N, H, W); ``score`` is the test mIoU.
    """

    def __init__(self, seed=0, lr_seg=5e-5, lr_fuse=1e-4, weight_decay=1e-2, lambda_fuse=1.0,
                 lambda_film=0.1, epsilon_dice=1.0, steps=500, batch=4, size=64, detach_fusion=False,
                 use_text=True, dual_class_dice=False, fusion_channels=(16, 32, 64, 128),
                 seg_channels=(16, 32, 64), text_dim=32, dtype="float32", threshold=0.5):
        self.seed = seed
        self.lr_seg = lr_seg
        self.lr_fuse = lr_fuse
        self.weight_decay = weight_decay
        self.lambda_fuse = lambda_fuse
        self.lambda_film = lambda_film
        self.epsilon_dice = epsilon_dice
        self.steps = steps
        self.batch = batch
        self.size = size
        self.detach_fusion = detach_fusion
        self.use_text = use_text
        self.dual_class_dice = dual_class_dice
        self.fusion_channels = fusion_channels
        self.seg_channels = seg_channels
        self.text_dim = text_dim
        self.dtype = dtype
        self.threshold = threshold

    def train_config(self) -> TrainConfig:
        params = self.get_params()
        return TrainConfig(**{f.name: params[f.name] for f in fields(TrainConfig)})

    def fit(self, X, y=None, log_path=None):
        if not 0.0 < self.threshold < 1.0:
            raise ValidationError(f"threshold must lie in (0, 1), got {self.threshold}")
        data = check_dataset(X)
        result = train(self.train_config(), data, log_path=log_path)
        self.model_ = result.model
        self.log_ = result.log
        self.n_samples_fit_ = len(data)
        return self

    def _prepared(self, X) -> Dataset:
        check_is_fitted(self, "model_")
        return prepare(check_dataset(X), self.size)

    def transform(self, X, y=None) -> np.ndarray:
        data = self._prepared(X)
        out = []
        with no_grad():
            for lo in range(0, len(data), 8):
                vis, ir, _, embs = data.batch(range(lo, min(lo + 8, len(data))))
                out.append(self.model_(vis, ir, embs).fused.rgb.data)
        return np.concatenate(out).astype(np.float64)

    def predict(self, X) -> np.ndarray:
        data = self._prepared(X)
        return np.stack(predict_masks(self.model_, data, self.threshold))

    def score(self, X, y=None) -> float:
        data = self._prepared(X)
        return evaluate(self.model_, data, self.threshold).mIoU
