"""Binary segmentation metrics and the composite quality score.

All functions take a grayscale prediction in [0, 1] and a binary mask of the
same shape.  Threshold sweeps use the 256 levels ``t = j / 255`` and binarize
with ``pred > t``, so for an 8-bit prediction every threshold is meaningful
and ``t = 1`` yields an empty map.

The composite score is ``S_alpha + E_phi + F_beta + (1 - MAE)``.  For the
salient task kind F_beta is the max F-measure; for the camouflaged kind it is
the weighted F-measure.
"""

from __future__ import annotations

import json
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field

import numpy as np

from .tensor import DimensionError

__all__ = [
    "TASK_KINDS",
    "THRESHOLDS",
    "MaskPair",
    "MetricReport",
    "mae",
    "f_measure_at",
    "f_measure_max",
    "f_measure_weighted",
    "s_measure",
    "e_measure_curve",
    "e_measure_mean",
    "composite_score",
    "pair_metrics",
    "evaluate",
    "is_degenerate",
]

TASK_KINDS = ("salient", "camouflaged")
THRESHOLDS = np.arange(256) / 255.0
BETA2 = 0.3
_EPS = 1e-12
_SSIM_C1 = 0.01**2
_SSIM_C2 = 0.03**2


def _gaussian_taps(size: int = 7, sigma: float = 5.0) -> np.ndarray:
    """Taps ``g[0..r]`` of a normalized 1-d Gaussian; the 2-d kernel is ``outer(g, g)``."""
    r = size // 2
    ax = np.arange(-r, r + 1, dtype=np.float64)
    g = np.exp(-(ax**2) / (2 * sigma**2))
    return (g / g.sum())[r:]


_TAPS = _gaussian_taps()


@dataclass
class MaskPair:
    pred: np.ndarray
    gt: np.ndarray
    id: str = ""

    def __post_init__(self):
        self.pred, self.gt = _validate(self.pred, self.gt)

    @classmethod
    def from_uint8(cls, pred: np.ndarray, gt: np.ndarray, id: str = "") -> "MaskPair":
        """Map ``v / 255`` for the prediction; threshold the mask at 0.5."""
        pred = np.asarray(pred, dtype=np.float64) / 255.0
        gt = (np.asarray(gt, dtype=np.float64) / 255.0) >= 0.5
        return cls(pred, gt, id)


def _validate(pred, gt) -> tuple[np.ndarray, np.ndarray]:
    pred = np.asarray(pred, dtype=np.float64)
    gt = np.asarray(gt)
    if pred.shape != gt.shape:
        raise DimensionError(f"prediction shape {pred.shape} != mask shape {gt.shape}")
    if pred.ndim != 2:
        raise DimensionError(f"expected 2-d maps, got shape {pred.shape}")
    if gt.dtype != bool:
        vals = np.unique(gt)
        if not np.all(np.isin(vals, (0, 1))):
            raise ValueError("ground-truth mask must be binary {0, 1}")
        gt = gt.astype(bool)
    if pred.size and (pred.min() < 0.0 or pred.max() > 1.0):
        raise ValueError("prediction values must lie in [0, 1]")
    return pred, gt


def is_degenerate(gt) -> bool:
    """True when the mask has no foreground (F-measures are undefined)."""
    return not np.asarray(gt).any()


# ------------------------------------------------------------------ metrics


def mae(pred, gt) -> float:
    pred, gt = _validate(pred, gt)
    # fsum is exactly rounded, so the value does not depend on pixel order
    return math.fsum(np.abs(pred - gt).ravel()) / gt.size


def _sweep_counts(pred: np.ndarray, gt: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Per-threshold predicted-positive and true-positive counts for ``pred > t``."""
    flat = np.sort(pred.ravel())
    fg = np.sort(pred[gt])
    pp = flat.size - np.searchsorted(flat, THRESHOLDS, side="right")
    tp = fg.size - np.searchsorted(fg, THRESHOLDS, side="right")
    return pp, tp


def _f_from_counts(pp, tp, npos, beta2):
    pp = np.asarray(pp, dtype=np.float64)
    tp = np.asarray(tp, dtype=np.float64)
    with np.errstate(divide="ignore", invalid="ignore"):
        prec = tp / pp
        rec = tp / npos
        f = (1 + beta2) * prec * rec / (beta2 * prec + rec)
    return np.where(np.isfinite(f), f, 0.0)


def f_measure_at(pred, gt, threshold: float, beta2: float = BETA2) -> float:
    """F-measure of ``pred > threshold``; 0 where precision or F is 0/0."""
    pred, gt = _validate(pred, gt)
    b = pred > threshold
    npos = int(gt.sum())
    if npos == 0:
        return 0.0
    return float(_f_from_counts(b.sum(), (b & gt).sum(), npos, beta2))


def f_measure_max(pred, gt, beta2: float = BETA2) -> float:
    """Maximum F-measure over the 256-level threshold sweep (0 for an empty mask)."""
    pred, gt = _validate(pred, gt)
    npos = int(gt.sum())
    if npos == 0:
        return 0.0
    pp, tp = _sweep_counts(pred, gt)
    return float(_f_from_counts(pp, tp, npos, beta2).max())


def _nearest_foreground(gt: np.ndarray, err: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Distance to the nearest foreground pixel, and the error found there.

    Exact brute force.  When several foreground pixels are equally near, the
    largest of their errors is used, which keeps the result independent of
    pixel order (and hence of mirroring).
    """
    h, w = gt.shape
    fg_idx = np.flatnonzero(gt)
    fr, fc = np.divmod(fg_idx, w)
    fg_err = err.ravel()[fg_idx]
    dist = np.zeros(h * w)
    copied = err.ravel().copy()
    bg_idx = np.flatnonzero(~gt)
    chunk = max(1, 4_000_000 // max(1, fg_idx.size))
    for s in range(0, bg_idx.size, chunk):
        idx = bg_idx[s : s + chunk]
        r, c = np.divmod(idx, w)
        d2 = (r[:, None] - fr[None, :]) ** 2 + (c[:, None] - fc[None, :]) ** 2
        best = d2.min(axis=1)
        tied = d2 == best[:, None]
        copied[idx] = np.where(tied, fg_err[None, :], -np.inf).max(axis=1)
        dist[idx] = np.sqrt(best)
    return dist.reshape(h, w), copied.reshape(h, w)


def _smooth(x: np.ndarray) -> np.ndarray:
    """7x7 Gaussian (sigma 5) with replicate padding, applied separably.

    Mirrored taps are added before weighting, so flipping the input flips the
    output bit for bit.
    """
    r = _TAPS.size - 1
    for axis in (0, 1):
        n = x.shape[axis]
        pad = [(0, 0), (0, 0)]
        pad[axis] = (r, r)
        xp = np.pad(x, pad, mode="edge")
        take = lambda off: np.take(xp, np.arange(r + off, r + off + n), axis=axis)
        out = _TAPS[0] * x
        for j in range(1, r + 1):
            out = out + _TAPS[j] * (take(j) + take(-j))
        x = out
    return x


def f_measure_weighted(pred, gt, beta2: float = BETA2) -> float:
    """Weighted F-measure with dependency-adjusted, distance-weighted errors."""
    pred, gt = _validate(pred, gt)
    if not gt.any():
        return 0.0
    err = np.abs(pred - gt)
    dist, et = _nearest_foreground(gt, err)
    bg = ~gt
    ea = _smooth(et)
    adj = err.copy()
    use = gt & (ea < err)
    adj[use] = ea[use]
    importance = np.ones_like(err)
    importance[bg] = 2.0 - np.exp(math.log(0.5) / 5.0 * dist[bg])
    ew = adj * importance
    tp = math.fsum(1.0 - ew[gt])
    fp = math.fsum(ew[bg])
    fn = math.fsum(ew[gt])
    if tp + fp == 0 or tp + fn == 0:
        return 0.0
    p = tp / (tp + fp)
    r = tp / (tp + fn)
    denom = beta2 * p + r
    return 0.0 if denom == 0 else (1 + beta2) * p * r / denom


def _object_score(x: np.ndarray) -> float:
    if x.size == 0:
        return 0.0
    m = x.mean()
    return 2.0 * m / (m * m + 1.0 + 2.0 * x.std() + _EPS)


def _ssim(x: np.ndarray, y: np.ndarray) -> float:
    n = x.size
    mx, my = x.mean(), y.mean()
    dof = max(n - 1, 1)
    vx = ((x - mx) ** 2).sum() / dof
    vy = ((y - my) ** 2).sum() / dof
    cov = ((x - mx) * (y - my)).sum() / dof
    num = (2 * mx * my + _SSIM_C1) * (2 * cov + _SSIM_C2)
    den = (mx * mx + my * my + _SSIM_C1) * (vx + vy + _SSIM_C2)
    return num / den


def _split_candidates(gt: np.ndarray, axis: int) -> tuple[int, ...]:
    """Split position(s) along ``axis`` at the mask centroid.

    Pixel ``i`` spans ``[i, i + 1)``, so the centroid of pixel centres is
    ``q + 0.5`` with ``q`` the mean index.  The split is the grid line nearest
    to it: ``ceil(q)``.  When ``q`` is an integer the centroid sits exactly
    half way between lines ``q`` and ``q + 1``, and both are returned so the
    caller can average them; this keeps the measure mirror-symmetric.
    """
    idx = np.nonzero(gt)[axis]
    total, n = int(idx.sum()), idx.size
    q, rem = divmod(total, n)
    return (q, q + 1) if rem == 0 else (q + 1,)


def _region_score(pred: np.ndarray, g: np.ndarray, y: int, x: int) -> float:
    total = g.size
    score = 0.0
    for rs, cs in (
        (slice(0, y), slice(0, x)),
        (slice(0, y), slice(x, None)),
        (slice(y, None), slice(0, x)),
        (slice(y, None), slice(x, None)),
    ):
        pb, gb = pred[rs, cs], g[rs, cs]
        if pb.size:
            score += pb.size / total * _ssim(pb, gb)
    return score


def s_measure(pred, gt, alpha: float = 0.5) -> float:
    """Structure measure: object-aware plus region-aware similarity."""
    pred, gt = _validate(pred, gt)
    mu = gt.mean()
    if mu == 0:
        return float(1.0 - pred.mean())
    if mu == 1:
        return float(pred.mean())
    s_obj = mu * _object_score(pred[gt]) + (1 - mu) * _object_score(1.0 - pred[~gt])
    g = gt.astype(np.float64)
    splits = [(y, x) for y in _split_candidates(gt, 0) for x in _split_candidates(gt, 1)]
    s_reg = math.fsum(_region_score(pred, g, y, x) for y, x in splits) / len(splits)
    score = alpha * s_obj + (1 - alpha) * s_reg
    return float(min(1.0, max(0.0, score)))


def e_measure_curve(pred, gt) -> np.ndarray:
    """Enhanced-alignment measure at each of the 256 thresholds."""
    pred, gt = _validate(pred, gt)
    n = gt.size
    pp, tp = _sweep_counts(pred, gt)
    mb = pp / n
    npos = int(gt.sum())
    if npos == 0:
        return 1.0 - mb
    if npos == n:
        return mb
    mg = npos / n
    # the enhanced alignment depends only on (gt, b) per pixel, so count the four cases
    total = np.zeros_like(mb)
    for gval, bval, count in (
        (1.0, 1.0, tp),
        (1.0, 0.0, npos - tp),
        (0.0, 1.0, pp - tp),
        (0.0, 0.0, n - npos - pp + tp),
    ):
        fg_ = gval - mg
        fb_ = bval - mb
        xi = 2 * fg_ * fb_ / (fg_ * fg_ + fb_ * fb_ + _EPS)
        total += count * (xi + 1) ** 2 / 4
    return total / n


def e_measure_mean(pred, gt) -> float:
    """Enhanced-alignment measure averaged over the threshold sweep."""
    return float(np.mean(e_measure_curve(pred, gt)))


def composite_score(pred, gt, task_kind: str = "salient") -> float:
    """``S_alpha + E_phi + F_beta + (1 - MAE)``, in [0, 4]."""
    return pair_metrics(pred, gt, task_kind)["composite"]


def pair_metrics(pred, gt, task_kind: str = "salient") -> dict:
    if task_kind not in TASK_KINDS:
        raise ValueError(f"task_kind must be one of {TASK_KINDS}, got {task_kind!r}")
    pred, gt = _validate(pred, gt)
    row = {
        "s_alpha": s_measure(pred, gt),
        "e_phi": e_measure_mean(pred, gt),
        "f_beta_max": f_measure_max(pred, gt),
        "f_beta_weighted": f_measure_weighted(pred, gt),
        "mae": mae(pred, gt),
    }
    f = row["f_beta_max"] if task_kind == "salient" else row["f_beta_weighted"]
    row["composite"] = row["s_alpha"] + row["e_phi"] + f + (1.0 - row["mae"])
    row["degenerate"] = is_degenerate(gt)
    return row


# ------------------------------------------------------------------ reports

_FIELDS = ("s_alpha", "e_phi", "f_beta_max", "f_beta_weighted", "mae", "composite")


@dataclass
class MetricReport:
    task_kind: str
    s_alpha: float
    e_phi: float
    f_beta_max: float
    f_beta_weighted: float
    mae: float
    composite: float
    pairs: list = field(default_factory=list)

    SCHEMA_VERSION = 1

    def aggregate(self) -> dict:
        return {k: getattr(self, k) for k in _FIELDS}

    def to_dict(self) -> dict:
        return {
            "version": self.SCHEMA_VERSION,
            "task_kind": self.task_kind,
            "count": len(self.pairs),
            "aggregate": self.aggregate(),
            "pairs": self.pairs,
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)

    def to_text(self) -> str:
        cols = ("id",) + _FIELDS
        rows = [[str(r["id"])] + [f"{r[k]:.4f}" for k in _FIELDS] for r in self.pairs]
        rows.append(["MEAN"] + [f"{getattr(self, k):.4f}" for k in _FIELDS])
        widths = [max(len(c), *(len(r[i]) for r in rows)) for i, c in enumerate(cols)]
        fmt = lambda cells: "  ".join(
            c.ljust(w) if i == 0 else c.rjust(w) for i, (c, w) in enumerate(zip(cells, widths))
        )
        lines = [fmt(cols), fmt(["-" * w for w in widths])]
        lines += [fmt(r) for r in rows]
        return "\n".join(lines) + "\n"


def evaluate(pairs, task_kind: str = "salient", workers: int = 1) -> MetricReport:
    """Score every pair and aggregate; totals are summed in ascending id order."""
    pairs = sorted(pairs, key=lambda p: p.id)
    if not pairs:
        raise ValueError("evaluate needs at least one pair")
    ids = [p.id for p in pairs]
    if len(set(ids)) != len(ids):
        raise ValueError("pair ids must be unique")

    def one(p: MaskPair) -> dict:
        row = pair_metrics(p.pred, p.gt, task_kind)
        row["id"] = p.id
        return row

    if workers > 1:
        with ThreadPoolExecutor(workers) as ex:
            rows = list(ex.map(one, pairs))
    else:
        rows = [one(p) for p in pairs]
    n = len(rows)
    agg = {k: math.fsum(r[k] for r in rows) / n for k in _FIELDS}
    return MetricReport(task_kind=task_kind, pairs=rows, **agg)
