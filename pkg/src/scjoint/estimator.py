"""scikit-learn style wrappers.

``JointSegmenter`` trains the joint model on in-memory arrays and predicts
per task mode.  ``SaliencySampler`` ranks pairs and subsamples them through
``fit_resample``, the row-resampling idiom used by imbalanced-learn.
"""

from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator
from sklearn.utils.validation import check_is_fitted

from . import checkpoint as ckpt
from . import sbss
from ._validation import check_images, check_masks, check_task_labels
from .data import SamplePair
from .metrics import composite_score
from .trainer import TrainConfig, fit_arrays

__all__ = ["JointSegmenter", "SaliencySampler"]


class JointSegmenter(BaseEstimator):
    """Shared ViT segmenter with one DLM set per task.

    ``fit(X, y, task=labels)`` takes one task label per sample (or a single
    label for all samples).  ``predict*(X, task=...)`` runs the given mode.
    """

    def __init__(
        self,
        tasks=None,
        task_kinds=None,
        mode="scjoint",
        image_size=64,
        patch_size=8,
        embed_dim=128,
        encoder_depth=4,
        decoder_depth=4,
        heads=4,
        mlp_ratio=4.0,
        dlm_placement="decoder_all",
        dlm_last_k=1,
        norm_mode="dlm",
        batch_size=8,
        max_steps=1000,
        lr0=1e-4,
        poly_power=0.9,
        flip=True,
        threshold=0.5,
        random_state=0,
    ):
        self.tasks = tasks
        self.task_kinds = task_kinds
        self.mode = mode
        self.image_size = image_size
        self.patch_size = patch_size
        self.embed_dim = embed_dim
        self.encoder_depth = encoder_depth
        self.decoder_depth = decoder_depth
        self.heads = heads
        self.mlp_ratio = mlp_ratio
        self.dlm_placement = dlm_placement
        self.dlm_last_k = dlm_last_k
        self.norm_mode = norm_mode
        self.batch_size = batch_size
        self.max_steps = max_steps
        self.lr0 = lr0
        self.poly_power = poly_power
        self.flip = flip
        self.threshold = threshold
        self.random_state = random_state

    def _model_params(self) -> dict:
        return {
            "image_size": self.image_size,
            "patch_size": self.patch_size,
            "embed_dim": self.embed_dim,
            "encoder_depth": self.encoder_depth,
            "decoder_depth": self.decoder_depth,
            "heads": self.heads,
            "mlp_ratio": self.mlp_ratio,
            "dlm_placement": self.dlm_placement,
            "dlm_last_k": self.dlm_last_k,
            "norm_mode": self.norm_mode,
        }

    def fit(self, X, y, task="salient"):
        if self.random_state is None:
            raise ValueError("random_state is required; training is always seeded")
        X = check_images(X, self.image_size)
        y = check_masks(y, len(X), X.shape[1:])
        labels = check_task_labels(task, len(X))
        tasks = list(self.tasks) if self.tasks is not None else sorted(set(labels))
        unknown = sorted(set(labels) - set(tasks))
        if unknown:
            raise ValueError(f"labels {unknown} are not in tasks={tasks}")
        kinds = dict(self.task_kinds or {})
        cfg = TrainConfig(
            tasks=[{"id": t, "manifest": "<in-memory>", "kind": kinds.get(t, "salient")} for t in tasks],
            seed=int(self.random_state),
            mode=self.mode,
            model=self._model_params(),
            batch_size=self.batch_size,
            steps=self.max_steps,
            lr0=self.lr0,
            poly_power=self.poly_power,
            flip=self.flip,
        )
        arrays = {}
        for t in tasks:
            sel = labels == t
            if not sel.any():
                raise ValueError(f"no samples for task {t!r}")
            arrays[t] = (X[sel], y[sel])
        res = fit_arrays(cfg, arrays)
        self.model_ = res.model
        self.tasks_ = tasks
        self.log_ = res.log
        self.n_steps_ = res.steps
        self.mode_of_ = {t: ("joint" if self.mode == "naive_joint" else t) for t in tasks}
        return self

    def predict_proba(self, X, task="salient") -> np.ndarray:
        check_is_fitted(self, "model_")
        X = check_images(X, self.image_size)
        mode = self.mode_of_.get(task, task)
        return np.concatenate([self.model_.predict(X[i : i + 16], mode) for i in range(0, len(X), 16)])

    def predict(self, X, task="salient") -> np.ndarray:
        return self.predict_proba(X, task) > self.threshold

    def score(self, X, y, task="salient") -> float:
        """Mean composite score (in [0, 4]) of the ``task`` mode on ``(X, y)``."""
        pred = self.predict_proba(X, task)
        y = check_masks(y, len(pred), pred.shape[1:])
        kind = dict(self.task_kinds or {}).get(task, "salient")
        return float(np.mean([composite_score(p, g.astype(bool), kind) for p, g in zip(pred, y)]))

    def save(self, path) -> None:
        check_is_fitted(self, "model_")
        ckpt.save(path, self.model_, {"estimator_params": self.get_params()})


class SaliencySampler(BaseEstimator):
    """Rank pairs by composite score of ``predictor`` and keep ``k`` of them.

    ``predictor`` is ``"oracle"``, a fitted :class:`JointSegmenter` (run in
    ``task`` mode) or any callable ``image -> map``.  ``k`` may be an int or a
    fraction in (0, 1].
    """

    def __init__(self, predictor="oracle", k=0.5, variant="top_k", task="salient", task_kind="salient", random_state=None):
        self.predictor = predictor
        self.k = k
        self.variant = variant
        self.task = task
        self.task_kind = task_kind
        self.random_state = random_state

    def _predict_fn(self):
        p = self.predictor
        if isinstance(p, str):
            if p != "oracle":
                raise ValueError(f"unknown predictor {p!r}")
            return sbss.OraclePredictor()
        if isinstance(p, JointSegmenter):
            return lambda pair: p.predict_proba(pair.image, self.task)[0]
        return lambda pair: p(pair.image)

    def _k(self, n: int) -> int:
        k = self.k
        if isinstance(k, float) and 0 < k <= 1:
            k = int(round(k * n))
        return int(k)

    def fit(self, X, y):
        X = check_images(X)
        y = check_masks(y, len(X), X.shape[1:])
        pairs = [SamplePair(f"{i:08d}", X[i], y[i].astype(bool)) for i in range(len(X))]
        result = sbss.score_dataset(pairs, self._predict_fn(), self.task_kind)
        if result.errors:
            raise ValueError(f"predictor failed on {result.failed} pair(s): {result.errors}")
        scores = np.empty(len(X))
        for s in result.scored:
            scores[int(s.pair_id)] = s.score
        plan = sbss.SamplingPlan(self.variant, self._k(len(X)), self.random_state)
        picked = sbss.sample(result.scored, plan)
        self.scores_ = scores
        self.support_ = np.array([int(i) for i in picked], dtype=np.int64)
        return self

    def get_support(self, indices: bool = True):
        check_is_fitted(self, "support_")
        if indices:
            return self.support_.copy()
        mask = np.zeros(len(self.scores_), dtype=bool)
        mask[self.support_] = True
        return mask

    def fit_resample(self, X, y):
        self.fit(X, y)
        X = np.asarray(X)
        y = np.asarray(y)
        if X.ndim == 2:
            X, y = X[None], y[None]
        return X[self.support_], y[self.support_]
