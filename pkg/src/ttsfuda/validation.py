"""Input checks shared by the estimators and the dataset loaders."""

from __future__ import annotations

from typing import Optional

import numpy as np

from .exceptions import ShapeError


def check_images(X, dims: int = 2, channels: Optional[int] = None, name: str = "X") -> np.ndarray:
    """Return ``X`` as a float32 batch of shape (N, C, *spatial) with values in [0, 1].

    A batch without a channel axis, e.g. (N, H, W) for ``dims=2``, gets a
    singleton channel.  Non-finite values and values outside [0, 1] are
    rejected rather than clipped.
    """
    X = np.asarray(X)
    if X.dtype == object or not np.issubdtype(X.dtype, np.number):
        raise ValueError(f"{name} must be numeric, got dtype {X.dtype}")
    if X.ndim == dims + 1:
        X = X[:, None]
    if X.ndim != dims + 2:
        raise ShapeError(f"{name} must have shape (N, C, {'D, ' if dims == 3 else ''}H, W), got {X.shape}")
    if X.shape[0] == 0:
        raise ValueError(f"{name} is empty")
    if channels is not None and X.shape[1] != channels:
        raise ShapeError(f"{name} has {X.shape[1]} channels, expected {channels}")
    X = X.astype(np.float32, copy=False)
    if not np.isfinite(X).all():
        raise ValueError(f"{name} contains NaN or infinite values")
    lo, hi = float(X.min()), float(X.max())
    if lo < 0.0 or hi > 1.0:
        raise ValueError(f"{name} values must lie in [0, 1], found [{lo:.4g}, {hi:.4g}]")
    return X


def check_masks(y, X: np.ndarray, n_classes: int = 1, name: str = "y") -> np.ndarray:
    """Return ``y`` as a uint8 label batch matching the spatial shape of ``X``.

    Binary tasks (``n_classes=1``) take {0, 1}; multi-class tasks take
    indices in ``range(n_classes)``.  A singleton channel axis is dropped.
    """
    y = np.asarray(y)
    if y.ndim == X.ndim and y.shape[1] == 1:
        y = y[:, 0]
    if y.shape != (X.shape[0],) + X.shape[2:]:
        raise ShapeError(f"{name} shape {y.shape} does not match images {X.shape}")
    allowed = 2 if n_classes == 1 else n_classes
    if np.issubdtype(y.dtype, np.floating) and not np.array_equal(y, np.round(y)):
        raise ValueError(f"{name} must hold integer labels")
    values = np.unique(y)
    bad = values[(values < 0) | (values >= allowed)]
    if bad.size:
        raise ValueError(f"{name} has labels {bad.tolist()} outside 0..{allowed - 1}")
    return y.astype(np.uint8)
