"""scikit-learn style wrappers around source training and two-stage adaptation.

Images are numpy batches shaped (N, C, H, W) or (N, C, D, H, W) with values
in [0, 1]; masks are (N, H, W) / (N, D, H, W) integer arrays.

    >>> seg = SourceSegmenter(base_width=8, epochs=20).fit(X_src, y_src)
    >>> ada = TTSFUDAAdapter(source=seg).fit(X_tgt)    # no target labels
    >>> ada.score(X_tgt_eval, y_tgt_eval)
"""

from __future__ import annotations

from typing import Optional

import numpy as np
from sklearn.base import BaseEstimator
from sklearn.utils.validation import check_is_fitted

from .config import DEFAULT_DELTA, AdaptConfig
from .data import SegDataset, SegSample, UnlabeledView
from .metrics import evaluate, hard_predictions, predict_probs
from .models import ArchSpec, UNet, build_model, clone_model
from .pipeline import adapt, canonical_mode, train_source
from .training import seed_everything
from .validation import check_images, check_masks


def _dataset(X, y, name):
    return SegDataset([SegSample(x, m, f"{name}-{i}") for i, (x, m) in enumerate(zip(X, y))], name)


class _SegmenterMixin:
    """Prediction and scoring shared by the fitted estimators."""

    def _roi(self):
        roi = getattr(self, "roi", None)
        return tuple(roi) if roi is not None else None

    def predict_proba(self, X) -> np.ndarray:
        """Per-pixel probabilities, shape (N, classes, *spatial)."""
        check_is_fitted(self, "model_")
        X = check_images(X, self.model_.arch.dims, self.model_.arch.in_channels)
        return predict_probs(self.model_, X, self.batch_size, self._roi(), self.device)

    def predict(self, X) -> np.ndarray:
        """Hard masks: threshold 0.5 for one class, argmax otherwise."""
        return hard_predictions(self.predict_proba(X))

    def score(self, X, y) -> float:
        """Mean per-image Dice (mean over regions for multi-class networks)."""
        check_is_fitted(self, "model_")
        X = check_images(X, self.model_.arch.dims, self.model_.arch.in_channels)
        y = check_masks(y, X, self.model_.arch.out_classes)
        report = evaluate(self.model_, _dataset(X, y, "score"), self.batch_size, self._roi(), device=self.device)
        return float(np.mean([report.mean(k) for k in report.aggregate]))


class SourceSegmenter(_SegmenterMixin, BaseEstimator):
    """UNet trained with the supervised segmentation loss on labeled source images."""

    def __init__(
        self,
        dims: int = 2,
        levels: int = 5,
        base_width: int = 64,
        out_classes: int = 1,
        epochs: int = 20,
        lr: float = 1e-3,
        min_lr: float = 1e-4,
        batch_size: int = 8,
        roi=None,
        seed: int = 0,
        device: str = "cpu",
    ):
        self.dims = dims
        self.levels = levels
        self.base_width = base_width
        self.out_classes = out_classes
        self.epochs = epochs
        self.lr = lr
        self.min_lr = min_lr
        self.batch_size = batch_size
        self.roi = roi
        self.seed = seed
        self.device = device

    def _config(self, in_channels) -> AdaptConfig:
        arch = ArchSpec(dims=self.dims, levels=self.levels, in_channels=in_channels, out_classes=self.out_classes, base_width=self.base_width)
        return AdaptConfig(arch=arch.to_dict(), batch_size=self.batch_size, seed=self.seed, device=self.device).replace(
            **{"source.epochs": self.epochs, "source.optimizer.lr": self.lr, "source.optimizer.min_lr": self.min_lr, "source.val_fraction": 0.0}
        )

    def fit(self, X, y):
        X = check_images(X, self.dims)
        y = check_masks(y, X, self.out_classes)
        cfg = self._config(X.shape[1])
        seed_everything(self.seed)
        history = []
        self.model_ = train_source(build_model(cfg.arch_spec, self.seed), _dataset(X, y, "source"), cfg, history)
        self.history_ = history
        self.n_channels_in_ = X.shape[1]
        return self


class TTSFUDAAdapter(_SegmenterMixin, BaseEstimator):
    """Source-free adaptation of a trained segmenter to unlabeled target images.

    ``mode`` picks the stages: ``stage1`` (entropy minimization with
    selective-voting pseudo-labels), ``stage2`` (EMA teacher-student
    self-training), ``stage1->stage2`` (the full method) or the
    ``stage2->stage1`` ablation.  ``fit`` takes images only.
    """

    def __init__(
        self,
        source=None,
        mode: str = "stage1->stage2",
        alpha: float = 0.75,
        delta: float = DEFAULT_DELTA,
        lambda1: float = 0.3,
        lambda2: float = 0.5,
        enhance: bool = True,
        stage1_epochs: int = 1,
        stage2_epochs: int = 10,
        ema_rate: float = 0.99,
        consistency_weight: float = 1.0,
        swap_aug_routing: bool = False,
        lr: float = 1e-4,
        batch_size: int = 8,
        roi=None,
        seed: int = 0,
        device: str = "cpu",
    ):
        self.source = source
        self.mode = mode
        self.alpha = alpha
        self.delta = delta
        self.lambda1 = lambda1
        self.lambda2 = lambda2
        self.enhance = enhance
        self.stage1_epochs = stage1_epochs
        self.stage2_epochs = stage2_epochs
        self.ema_rate = ema_rate
        self.consistency_weight = consistency_weight
        self.swap_aug_routing = swap_aug_routing
        self.lr = lr
        self.batch_size = batch_size
        self.roi = roi
        self.seed = seed
        self.device = device

    def _source_model(self) -> UNet:
        if isinstance(self.source, UNet):
            return self.source
        if isinstance(self.source, SourceSegmenter):
            check_is_fitted(self.source, "model_")
            return self.source.model_
        raise TypeError(f"source must be a fitted SourceSegmenter or a UNet, got {type(self.source).__name__}")

    def make_config(self, arch: ArchSpec) -> AdaptConfig:
        overrides = {
            "stage1.alpha": self.alpha,
            "stage1.delta": self.delta,
            "stage1.lambda1": self.lambda1,
            "stage1.lambda2": self.lambda2,
            "stage1.enhance": self.enhance,
            "stage1.epochs": self.stage1_epochs,
            "stage2.epochs": self.stage2_epochs,
            "stage2.ema_rate": self.ema_rate,
            "stage2.consistency_weight": self.consistency_weight,
            "stage2.swap_aug_routing": self.swap_aug_routing,
            "optimizer.lr": self.lr,
        }
        cfg = AdaptConfig(arch=arch.to_dict(), batch_size=self.batch_size, seed=self.seed, device=self.device)
        if self.roi is not None:
            overrides["data.roi_size"] = list(self.roi)
        return cfg.replace(**overrides)

    def fit(self, X, y=None):
        if y is not None:
            raise TypeError("adaptation is label-free: call fit(X) without target labels")
        source = self._source_model()
        X = check_images(X, source.arch.dims, source.arch.in_channels)
        cfg = self.make_config(source.arch)
        history = []
        self.stages_ = adapt(clone_model(source), UnlabeledView.from_array(X, "target"), cfg, canonical_mode(self.mode), history)
        self.model_ = list(self.stages_.values())[-1]
        self.history_ = history
        self.config_ = cfg
        return self
