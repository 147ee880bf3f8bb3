"""Saliency-based sampling: rank image/mask pairs by how well a predictor
trained on the same task reproduces their masks, then keep a Top-K subset.

A predictor is any callable taking a :class:`~scjoint.data.SamplePair` and
returning a prediction map in [0, 1] of the mask's shape.  Three are
provided: a trained model, a directory of precomputed 8-bit maps, and the
ground-truth oracle (for tests and fixtures).
"""

from __future__ import annotations

import json
import logging
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Iterable

import numpy as np

from . import data as datamod
from .metrics import composite_score
from .tensor import ContractError

__all__ = [
    "VARIANTS",
    "ScoredPair",
    "ScoringResult",
    "SamplingPlan",
    "OraclePredictor",
    "DirectoryPredictor",
    "ModelPredictor",
    "score_dataset",
    "sample",
    "write_subset_manifest",
    "write_scores",
]

log = logging.getLogger(__name__)

VARIANTS = ("top_k", "bottom_k", "random_k")


@dataclass(frozen=True)
class ScoredPair:
    pair_id: str
    score: float


@dataclass
class ScoringResult:
    scored: list
    errors: dict = field(default_factory=dict)

    @property
    def failed(self) -> int:
        return len(self.errors)

    def __iter__(self):
        return iter(self.scored)

    def __len__(self) -> int:
        return len(self.scored)


@dataclass(frozen=True)
class SamplingPlan:
    variant: str
    k: int
    seed: int | None = None

    def __post_init__(self):
        if self.variant not in VARIANTS:
            raise ContractError(f"variant must be one of {VARIANTS}, got {self.variant!r}")
        if self.variant == "random_k" and self.seed is None:
            raise ContractError("random_k sampling needs a seed")


class OraclePredictor:
    """Returns the ground truth itself."""

    def __call__(self, pair) -> np.ndarray:
        return pair.mask.astype(np.float64)


class DirectoryPredictor:
    """Looks up ``<dir>/<id>.png`` (or ``.pgm``) and maps it to ``v / 255``."""

    def __init__(self, directory):
        self.directory = Path(directory)

    def path_for(self, pair_id: str) -> Path | None:
        for ext in (".png", ".pgm"):
            p = self.directory / f"{pair_id}{ext}"
            if p.exists():
                return p
        return None

    def __call__(self, pair) -> np.ndarray:
        path = self.path_for(pair.id)
        if path is None:
            raise FileNotFoundError(f"no prediction for {pair.id!r} in {self.directory}")
        return datamod.read_gray(path).astype(np.float64) / 255.0


class ModelPredictor:
    def __init__(self, model, task: str):
        self.model = model
        self.task = task

    def __call__(self, pair) -> np.ndarray:
        return self.model.predict(pair.image, self.task)


def score_dataset(
    dataset: Iterable,
    predictor: Callable,
    task_kind: str = "salient",
    workers: int = 1,
) -> ScoringResult:
    """Composite score for every pair; failing pairs are excluded and recorded.

    The result is sorted by ``(score desc, id asc)`` so it does not depend on
    input order.
    """
    pairs = list(dataset)

    def one(pair):
        try:
            pred = np.asarray(predictor(pair), dtype=np.float64)
        except (OSError, ValueError) as exc:
            return pair.id, None, str(exc)
        if pred.shape != pair.mask.shape:
            return pair.id, None, f"prediction shape {pred.shape} != mask shape {pair.mask.shape}"
        return pair.id, composite_score(pred, pair.mask, task_kind), None

    if workers > 1:
        with ThreadPoolExecutor(workers) as ex:
            rows = list(ex.map(one, pairs))
    else:
        rows = [one(p) for p in pairs]
    scored = [ScoredPair(pid, s) for pid, s, err in rows if err is None]
    errors = {pid: err for pid, _, err in rows if err is not None}
    if errors:
        log.warning("%d pair(s) could not be scored", len(errors))
    scored.sort(key=lambda s: (-s.score, s.pair_id))
    return ScoringResult(scored, errors)


def sample(scored, plan: SamplingPlan) -> list[str]:
    """Pick ``plan.k`` ids.

    All variants share one ranking, ``(score desc, id asc)``.  ``top_k`` is its
    head in that order, ``bottom_k`` its tail read from the end (lowest score
    first), and ``random_k`` is sorted by id.  Reading both ends of a single
    ranking keeps Top-K and Bottom-K disjoint whenever ``2k <= n``, ties
    included.
    """
    scored = list(scored)
    n = len(scored)
    if not 1 <= plan.k <= n:
        raise ContractError(f"k={plan.k} must lie in [1, {n}]")
    ranked = sorted(scored, key=lambda s: (-s.score, s.pair_id))
    if plan.variant == "top_k":
        return [s.pair_id for s in ranked[: plan.k]]
    if plan.variant == "bottom_k":
        return [s.pair_id for s in ranked[::-1][: plan.k]]
    by_id = sorted(s.pair_id for s in scored)
    rng = np.random.default_rng(plan.seed)
    pick = rng.choice(n, size=plan.k, replace=False)
    return sorted(by_id[i] for i in pick)


def write_subset_manifest(ids, source_manifest, out_path) -> dict:
    """Write a manifest holding only ``ids``; paths are rebased onto ``out_path``'s directory."""
    ids = list(ids)
    if not ids:
        raise ContractError("refusing to write an empty subset")
    source_manifest = Path(source_manifest)
    doc = datamod.read_manifest(source_manifest)
    by_id = {e["id"]: e for e in doc["entries"]}
    unknown = sorted(set(ids) - set(by_id))
    if unknown:
        raise datamod.DatasetError(f"ids not in {source_manifest}: {unknown}", unknown)
    out_path = Path(out_path)
    src_dir = source_manifest.parent.resolve()
    dst_dir = out_path.parent.resolve()
    entries = []
    for pid in sorted(set(ids)):
        e = dict(by_id[pid])
        for key in ("image_path", "mask_path", "extra_mask_path"):
            if key in e:
                e[key] = os.path.relpath(src_dir / e[key], dst_dir)
        entries.append(e)
    return datamod.write_manifest(out_path, doc.get("task_kind", "salient"), entries)


def write_scores(path, result: ScoringResult) -> None:
    doc = {
        "scored": [{"id": s.pair_id, "score": s.score} for s in result.scored],
        "errors": result.errors,
    }
    datamod.atomic_write_bytes(path, (json.dumps(doc, indent=2, sort_keys=True) + "\n").encode())
