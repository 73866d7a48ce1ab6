"""Input validation helpers for the estimator-facing API."""

from __future__ import annotations

import numpy as np

from .exceptions import InputError

__all__ = ["check_image_batch", "check_label_vector", "check_single_image"]


def check_image_batch(X, side: int | None = None) -> np.ndarray:
    """Validate and coerce to a float32 [N,3,S,S] batch."""
    X = np.asarray(X)
    if X.ndim != 4 or X.shape[1] != 3:
        raise InputError(f"expected images shaped [N,3,S,S], got {X.shape}")
    if X.shape[2] != X.shape[3]:
        raise InputError(f"images must be square, got {X.shape[2]}x{X.shape[3]}")
    if side is not None and X.shape[2] != side:
        raise InputError(f"expected side {side}, got {X.shape[2]}")
    if not np.all(np.isfinite(X)):
        raise InputError("images contain non-finite values")
    return X.astype(np.float32, copy=False)


def check_single_image(x, side: int | None = None) -> np.ndarray:
    """Validate one [3,S,S] image (or a batch of exactly one)."""
    x = np.asarray(x)
    if x.ndim == 4 and x.shape[0] == 1:
        x = x[0]
    if x.ndim != 3 or x.shape[0] != 3:
        raise InputError(f"expected one image shaped [3,S,S], got {x.shape}")
    batch = check_image_batch(x[None], side=side)
    return batch[0]


def check_label_vector(y, n_samples: int, num_classes: int | None = None) -> np.ndarray:
    """Validate an integer label vector aligned with the batch."""
    y = np.asarray(y)
    if y.ndim != 1 or y.shape[0] != n_samples:
        raise InputError(f"labels must be a length-{n_samples} vector, got {y.shape}")
    if not np.issubdtype(y.dtype, np.integer):
        rounded = np.rint(np.asarray(y, dtype=np.float64))
        if not np.array_equal(rounded, y):
            raise InputError("labels must be integers")
        y = rounded
    y = y.astype(np.int64)
    if y.size and y.min() < 0:
        raise InputError("labels must be non-negative")
    if num_classes is not None and y.size and y.max() >= num_classes:
        raise InputError(f"label {y.max()} outside [0, {num_classes})")
    return y
