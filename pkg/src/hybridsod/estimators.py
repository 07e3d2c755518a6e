"""scikit-learn style facade over the pipeline.

Images are ``N x H x W x 3`` arrays (float in [0, 1] or uint8) and label
maps ``N x H x W``. The estimators wrap the functional API; anything beyond
fit/predict (resume, run directories, event logs) lives in the CLI.
"""

from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator, TransformerMixin
from sklearn.utils.validation import check_is_fitted

from .config import SCHEDULED_MODES, RunConfig
from .data import LabelKind, Sample, generate_coarse_label, partition, resize_map
from .exceptions import ShapeError
from .orchestrator import Pipeline


def check_images(X, name: str = "X") -> np.ndarray:
    """Validate a batch of RGB images and return it as float64 in [0, 1]."""
    X = np.asarray(X)
    if X.ndim != 4 or X.shape[-1] != 3:
        raise ShapeError(f"{name}: expected N x H x W x 3 images, got shape {X.shape}")
    if X.dtype == np.uint8:
        return X.astype(np.float64) / 255.0
    X = X.astype(np.float64)
    if not np.all(np.isfinite(X)) or X.min() < 0 or X.max() > 1:
        raise ValueError(f"{name}: float images must be finite and within [0, 1]")
    return X


def check_maps(y, images: np.ndarray | None = None, name: str = "y") -> np.ndarray:
    """Validate a batch of label maps, optionally against the image batch."""
    y = np.asarray(y)
    if y.dtype == np.uint8:
        y = y.astype(np.float64) / 255.0
    y = y.astype(np.float64)
    if y.ndim != 3:
        raise ShapeError(f"{name}: expected N x H x W maps, got shape {y.shape}")
    if images is not None and y.shape != images.shape[:3]:
        raise ShapeError(f"{name}: shape {y.shape} does not match images {images.shape[:3]}")
    if not np.all(np.isfinite(y)) or y.min() < 0 or y.max() > 1:
        raise ValueError(f"{name}: maps must be finite and within [0, 1]")
    return y


class CoarseLabeler(TransformerMixin, BaseEstimator):
    """Unsupervised coarse saliency via the minimum-barrier distance transform."""

    def __init__(self, passes: int = 3):
        self.passes = passes

    def fit(self, X, y=None):
        X = check_images(X)
        self.image_shape_ = X.shape[1:3]
        return self

    def transform(self, X):
        check_is_fitted(self)
        X = check_images(X)
        if X.shape[1:3] != self.image_shape_:
            raise ShapeError(f"fitted on {self.image_shape_} images, got {X.shape[1:3]}")
        return np.stack([generate_coarse_label(im, self.passes) for im in X])


class HybridLabelSOD(BaseEstimator):
    """Trains the refinement/saliency pair on a few real and many coarse labels.

    ``fit(X, y, real_mask=...)`` treats ``y[i]`` as a real label where
    ``real_mask`` is True and as a coarse label elsewhere. Without ``coarse``
    the real samples get MBD coarse maps as R-Net input. Without a validation
    set the gate scores against the real samples themselves.
    """

    def __init__(self, num_groups: int = 10, mode: str = "full", seed: int = 0,
                 rnet_size: int = 288, snet_size: int = 320,
                 rnet_channels=(16, 32, 64, 128, 128), snet_channels=(16, 32, 64, 128, 128),
                 epochs: int = 30, lr: float = 1e-4, batch_size: int = 8,
                 warmup_steps: int = 500, lr_decay_every: int = 10, augment: bool = True):
        self.num_groups = num_groups
        self.mode = mode
        self.seed = seed
        self.rnet_size = rnet_size
        self.snet_size = snet_size
        self.rnet_channels = rnet_channels
        self.snet_channels = snet_channels
        self.epochs = epochs
        self.lr = lr
        self.batch_size = batch_size
        self.warmup_steps = warmup_steps
        self.lr_decay_every = lr_decay_every
        self.augment = augment

    def _config(self) -> RunConfig:
        p = self.get_params()
        optimizer = {k: p.pop(k) for k in ("epochs", "lr", "batch_size", "warmup_steps",
                                           "lr_decay_every")}
        return RunConfig.from_dict({**p, "optimizer": optimizer, "num_real": 1})

    def fit(self, X, y, real_mask=None, coarse=None, X_val=None, y_val=None):
        X = check_images(X)
        y = check_maps(y, X)
        mask = np.ones(len(X), bool) if real_mask is None else np.asarray(real_mask, bool)
        if mask.shape != (len(X),):
            raise ShapeError(f"real_mask: expected shape ({len(X)},), got {mask.shape}")
        if coarse is not None:
            coarse = check_maps(coarse, X, "coarse")
        samples = []
        for i in range(len(X)):
            c = coarse[i] if coarse is not None else None
            if mask[i]:
                c = c if c is not None else generate_coarse_label(X[i])
                samples.append(Sample(f"{i:06d}", X[i], y[i], LabelKind.REAL, coarse=c))
            else:
                samples.append(Sample(f"{i:06d}", X[i], y[i], LabelKind.COARSE, coarse=c))
        if X_val is not None:
            X_val = check_images(X_val, "X_val")
            y_val = check_maps(y_val, X_val, "y_val")
            val = [Sample(f"v{i:06d}", a, b, LabelKind.REAL) for i, (a, b) in
                   enumerate(zip(X_val, y_val))]
        else:
            val = [s for s in samples if s.label_kind is LabelKind.REAL]

        config = self._config().replace(num_real=int(mask.sum()))
        parts = partition(samples, self.num_groups, int(mask.sum()), config.seed)
        pipeline = Pipeline(config, samples, parts, val)
        self.result_ = pipeline.run()
        self.snet_ = pipeline.snet
        self.rnet_ = pipeline.rnet
        self.schedule_ = pipeline.schedule() if config.mode in SCHEDULED_MODES else None
        return self

    def predict(self, X):
        """Saliency maps at the input resolution, values in [0, 1]."""
        check_is_fitted(self, "snet_")
        X = check_images(X)
        size = (self.snet_size, self.snet_size)
        maps = self.snet_.predict(np.stack([resize_map(im, size) for im in X]), self.batch_size)
        return np.stack([np.clip(resize_map(m, X.shape[1:3]), 0, 1) for m in maps])

    def score(self, X, y):
        """1 - MAE, so that higher is better."""
        y = check_maps(y, check_images(X))
        return 1.0 - float(np.mean(np.abs(self.predict(X) - y)))
