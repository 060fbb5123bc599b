"""Input validation helpers for image batches and label pairs."""

from __future__ import annotations

import numpy as np
from sklearn.utils.validation import check_array

from .exceptions import ShapeError

# float32 rounding of values computed in [0, 1]
RANGE_SLACK = 1e-6


def check_images(X, image_size=None, channels=3, dtype=np.float32, check_range=True):
    """Validate an NCHW image batch and return it as a C-contiguous ``dtype`` array.

    A single CHW image is promoted to a batch of one.
    """
    X = check_array(X, dtype=dtype, allow_nd=True, ensure_2d=False, ensure_min_samples=0,
                    ensure_all_finite=True, order="C")
    if X.ndim == 3:
        X = X[None]
    if X.ndim != 4:
        raise ShapeError(f"expected NCHW images, got array of shape {X.shape}")
    if X.shape[1] != channels:
        raise ShapeError(f"expected {channels} channels, got shape {X.shape}")
    if image_size is not None and X.shape[2:] != (image_size, image_size):
        raise ShapeError(f"expected {image_size}x{image_size} images, got shape {X.shape}")
    if check_range and X.size and (X.min() < -RANGE_SLACK or X.max() > 1 + RANGE_SLACK):
        raise ValueError(f"pixel values must lie in [0, 1], got [{X.min()}, {X.max()}]")
    return X


def check_label_pairs(Y, n_samples, n_hidden, n_public):
    """Validate an (N, 2) integer array of ``(hidden, public)`` labels."""
    Y = np.asarray(Y)
    if Y.shape != (n_samples, 2):
        raise ShapeError(f"expected labels of shape ({n_samples}, 2), got {Y.shape}")
    if Y.size and not np.all(Y == np.round(Y)):
        raise ValueError("labels must be integers")
    Y = Y.astype(np.int64)
    for col, k, name in ((0, n_hidden, "hidden"), (1, n_public, "public")):
        bad = np.flatnonzero((Y[:, col] < 0) | (Y[:, col] >= k))
        if bad.size:
            raise ValueError(f"{name} label {Y[bad[0], col]} at sample {bad[0]} outside [0, {k})")
    return Y
