"""Input checks shared by the estimator wrappers."""

from __future__ import annotations

import numpy as np

from .tensor import DimensionError


def check_images(X, image_size: int | None = None) -> np.ndarray:
    """Return ``X`` as a float64 ``[n, H, W]`` stack in [0, 1].

    A single 2-d image is promoted to a batch of one.
    """
    X = np.asarray(X)
    if X.ndim == 2:
        X = X[None]
    if X.ndim != 3:
        raise DimensionError(f"expected images shaped [n, H, W], got {X.shape}")
    if X.shape[0] == 0:
        raise ValueError("got an empty image batch")
    if X.dtype == np.uint8:
        X = X.astype(np.float64) / 255.0
    else:
        X = X.astype(np.float64)
    if not np.all(np.isfinite(X)):
        raise ValueError("images contain NaN or Inf")
    if X.min() < 0.0 or X.max() > 1.0:
        raise ValueError("image values must lie in [0, 1] (or be uint8)")
    if image_size is not None and X.shape[1:] != (image_size, image_size):
        raise DimensionError(f"expected {image_size}x{image_size} images, got {X.shape[1:]}")
    return X


def check_masks(y, n: int | None = None, shape: tuple | None = None) -> np.ndarray:
    """Return binary masks as float64 ``[n, H, W]`` (0/1)."""
    y = np.asarray(y)
    if y.ndim == 2:
        y = y[None]
    if y.ndim != 3:
        raise DimensionError(f"expected masks shaped [n, H, W], got {y.shape}")
    if y.dtype == np.uint8 and y.max(initial=0) > 1:
        y = y >= 128
    y = y.astype(np.float64)
    if not np.all((y == 0) | (y == 1)):
        raise ValueError("masks must be binary")
    if n is not None and len(y) != n:
        raise ValueError(f"got {len(y)} masks for {n} images")
    if shape is not None and y.shape[1:] != shape:
        raise DimensionError(f"mask shape {y.shape[1:]} != image shape {shape}")
    return y


def check_task_labels(task, n: int) -> np.ndarray:
    """Broadcast a single task id, or validate one id per sample."""
    if isinstance(task, str):
        return np.array([task] * n, dtype=object)
    task = np.asarray(task, dtype=object)
    if task.shape != (n,):
        raise ValueError(f"expected {n} task labels, got shape {task.shape}")
    return task
