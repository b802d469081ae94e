"""Input checks shared by the estimators and data containers."""

from __future__ import annotations

import numpy as np


def check_images(X, *, ndim: int = 4, shape: tuple | None = None, pixel_range: bool = True) -> np.ndarray:
    """Return ``X`` as a float64 array of C x H x W images.

    With ``pixel_range`` the values must lie in [0, 255]; unclipped
    triggered images are allowed to leave that range by passing False.
    """
    X = np.asarray(X, dtype=np.float64)
    if X.ndim != ndim:
        raise ValueError(f"expected a {ndim}-d image array, got shape {X.shape}")
    if shape is not None and X.shape[-3:] != tuple(shape):
        raise ValueError(f"image shape {X.shape[-3:]} does not match expected {tuple(shape)}")
    if not np.isfinite(X).all():
        raise ValueError("images contain non-finite values")
    if pixel_range and X.size and (X.min() < 0 or X.max() > 255):
        raise ValueError("pixel values must lie in [0, 255]")
    return X


def check_labels(y, n_classes: int | None = None) -> np.ndarray:
    y = np.asarray(y)
    if y.ndim != 1:
        raise ValueError(f"labels must be 1-d, got shape {y.shape}")
    if y.size and not np.issubdtype(y.dtype, np.integer):
        if not np.all(np.equal(np.mod(y, 1), 0)):
            raise ValueError("labels must be integer class ids")
    y = y.astype(np.int64)
    if y.size and y.min() < 0:
        raise ValueError("labels must be non-negative")
    if n_classes is not None and y.size and y.max() >= n_classes:
        raise ValueError(f"label {y.max()} out of range for {n_classes} classes")
    return y


def check_image_pair(a, b) -> tuple[np.ndarray, np.ndarray]:
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch: {a.shape} vs {b.shape}")
    return a, b
