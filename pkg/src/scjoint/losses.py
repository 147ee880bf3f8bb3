"""Pixel position aware loss: boundary-weighted BCE plus weighted IoU."""

from __future__ import annotations

import numpy as np

from . import tensor as T
from .tensor import DimensionError, Tensor

__all__ = ["weight_map", "weighted_bce", "weighted_iou", "ppa_loss", "WINDOW", "PROB_CLAMP"]

WINDOW = 15
PROB_CLAMP = 1e-7


def _box_mean(y: np.ndarray, k: int) -> np.ndarray:
    """Stride-1 ``k x k`` mean over the in-bounds part of each window."""
    r = k // 2
    h, w = y.shape[-2:]
    pad = [(0, 0)] * (y.ndim - 2) + [(1, 0), (1, 0)]
    cs = np.pad(y.cumsum(-2).cumsum(-1), pad)
    i0 = np.clip(np.arange(h) - r, 0, h)
    i1 = np.clip(np.arange(h) + r + 1, 0, h)
    j0 = np.clip(np.arange(w) - r, 0, w)
    j1 = np.clip(np.arange(w) + r + 1, 0, w)
    s = (
        cs[..., i1[:, None], j1[None, :]]
        - cs[..., i0[:, None], j1[None, :]]
        - cs[..., i1[:, None], j0[None, :]]
        + cs[..., i0[:, None], j0[None, :]]
    )
    count = (i1 - i0)[:, None] * (j1 - j0)[None, :]
    return s / count


def weight_map(y) -> np.ndarray:
    """``1 + 5 |avgpool15(y) - y|``; values in [1, 6], equal to 1 on flat regions."""
    y = np.asarray(y, dtype=np.float64)
    return 1.0 + 5.0 * np.abs(_box_mean(y, WINDOW) - y)


def _check(p: Tensor, y: np.ndarray, w: np.ndarray | None = None) -> None:
    if p.shape != y.shape:
        raise DimensionError(f"prediction shape {p.shape} != mask shape {y.shape}")
    if w is not None and w.shape != y.shape:
        raise DimensionError(f"weight shape {w.shape} != mask shape {y.shape}")


def weighted_bce(p, y, w) -> Tensor:
    """Per-image ``sum(w * bce) / sum(w)``, averaged over a leading batch axis."""
    p = T.as_tensor(p)
    y = np.asarray(y, dtype=np.float64)
    w = np.asarray(w, dtype=np.float64)
    _check(p, y, w)
    pc = T.clamp(p, PROB_CLAMP, 1.0 - PROB_CLAMP)
    nll = -(y * T.log(pc) + (1.0 - y) * T.log(1.0 - pc))
    axes = (-2, -1)
    per_image = (w * nll).sum(axes) / w.sum(axis=axes)
    return per_image.mean()


def weighted_iou(p, y, w) -> Tensor:
    """``1 - (sum(w p y) + 1) / (sum(w (p + y - p y)) + 1)`` per image, then batch mean."""
    p = T.as_tensor(p)
    y = np.asarray(y, dtype=np.float64)
    w = np.asarray(w, dtype=np.float64)
    _check(p, y, w)
    axes = (-2, -1)
    py = p * y
    inter = (w * py).sum(axes)
    union = (w * (p + y - py)).sum(axes)
    return (1.0 - (inter + 1.0) / (union + 1.0)).mean()


def ppa_loss(p, y) -> Tensor:
    """Weighted BCE + weighted IoU with weights built from ``y``.

    ``p`` and ``y`` are ``[H, W]`` or ``[B, H, W]``; a batch yields the mean of
    the per-image losses.
    """
    y = np.asarray(y, dtype=np.float64)
    w = weight_map(y)
    return weighted_bce(p, y, w) + weighted_iou(p, y, w)
