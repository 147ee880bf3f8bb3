"""Joint training with task-routed DLMs, plus the naive/independent baselines.

One optimizer step sees one mini-batch per task.  Each batch is forwarded in
its own task's mode, the per-task losses are summed, and the sum is
backpropagated once, so shared parameters get gradient from every task while
each task's DLM parameters only see their own task's loss.
"""

from __future__ import annotations

import json
import logging
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable

import numpy as np

from . import checkpoint as ckpt
from . import data as datamod
from . import metrics as M
from . import tensor as T
from .losses import ppa_loss
from .model import JointModel, ModelConfig, RegistryError, parameter_partition
from .optim import Adam, poly_lr

__all__ = [
    "MODES",
    "JOINT_TASK",
    "ConfigError",
    "TrainingDivergedError",
    "TaskSpec",
    "TrainConfig",
    "StepResult",
    "TrainResult",
    "TaskLoader",
    "scjoint_step",
    "train",
    "fit_arrays",
    "infer",
    "imbalance_sweep",
]

log = logging.getLogger(__name__)

MODES = ("scjoint", "naive_joint", "independent")
JOINT_TASK = "joint"
CHECKPOINT_NAME = "checkpoint.jnt"
LOG_NAME = "train_log.jsonl"


class ConfigError(ValueError):
    pass


class TrainingDivergedError(RuntimeError):
    def __init__(self, step: int, lr: float, losses: dict, grad_norms: dict):
        self.step, self.lr, self.losses, self.grad_norms = step, lr, losses, grad_norms
        super().__init__(
            f"non-finite loss or gradient at step {step} (lr={lr:.3g}): "
            f"losses={losses} grad_norms={grad_norms}"
        )


@dataclass
class TaskSpec:
    id: str
    manifest: str
    kind: str = "salient"
    val_manifest: str | None = None
    weight: float = 1.0
    limit: int | None = None

    def __post_init__(self):
        if self.kind not in M.TASK_KINDS:
            raise ConfigError(f"task {self.id!r}: kind must be one of {M.TASK_KINDS}")


@dataclass
class TrainConfig:
    tasks: list
    seed: int
    mode: str = "scjoint"
    model: dict = field(default_factory=dict)
    batch_size: int = 8
    steps: int | None = None
    epochs: int | None = None
    lr0: float = 1e-4
    poly_power: float = 0.9
    adam_betas: tuple = (0.9, 0.999)
    adam_eps: float = 1e-8
    flip: bool = True
    eval_every: int | None = None
    audit_routing: bool = False
    out_dir: str | None = None

    def __post_init__(self):
        self.tasks = [t if isinstance(t, TaskSpec) else _task_from_dict(t) for t in self.tasks]
        self.adam_betas = tuple(self.adam_betas)
        if self.mode == "naive":
            self.mode = "naive_joint"
        self.validate()

    def validate(self) -> None:
        if self.seed is None:
            raise ConfigError("a seed is required")
        if self.mode not in MODES:
            raise ConfigError(f"mode must be one of {MODES}, got {self.mode!r}")
        ids = [t.id for t in self.tasks]
        if not ids or len(set(ids)) != len(ids):
            raise ConfigError(f"task ids must be non-empty and unique: {ids}")
        if self.mode in ("scjoint", "naive_joint") and len(ids) < 2:
            raise ConfigError(f"mode {self.mode} needs at least two tasks, got {ids}")
        if self.mode == "independent" and len(ids) != 1:
            raise ConfigError(f"mode independent trains exactly one task, got {ids}")
        if self.mode == "naive_joint" and JOINT_TASK in ids:
            raise ConfigError(f"task id {JOINT_TASK!r} is reserved in naive_joint mode")
        if (self.steps is None) == (self.epochs is None):
            raise ConfigError("set exactly one of steps / epochs")
        if (self.steps or self.epochs) < 1 or self.batch_size < 1:
            raise ConfigError("steps/epochs and batch_size must be positive")
        if "tasks" in self.model:
            raise ConfigError("model.tasks is derived from the task list; do not set it")
        try:
            ModelConfig.from_dict({**self.model, "tasks": self.model_tasks()})
        except (TypeError, ValueError) as exc:
            raise ConfigError(f"invalid model config: {exc}") from exc

    def model_tasks(self) -> list[str]:
        if self.mode == "naive_joint":
            return [JOINT_TASK]
        return [t.id for t in self.tasks]

    def model_config(self) -> ModelConfig:
        return ModelConfig.from_dict({**self.model, "tasks": self.model_tasks()})

    def to_dict(self) -> dict:
        d = asdict(self)
        d["adam_betas"] = list(self.adam_betas)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        extra = set(d) - set(cls.__dataclass_fields__)
        if extra:
            raise ConfigError(f"unknown train config keys: {sorted(extra)}")
        try:
            return cls(**d)
        except TypeError as exc:
            raise ConfigError(str(exc)) from exc


def _task_from_dict(d: dict) -> TaskSpec:
    extra = set(d) - set(TaskSpec.__dataclass_fields__)
    if extra:
        raise ConfigError(f"unknown task keys: {sorted(extra)}")
    try:
        return TaskSpec(**d)
    except TypeError as exc:
        raise ConfigError(str(exc)) from exc


# ------------------------------------------------------------------ loading


class TaskLoader:
    """Endless fixed-size batches; reshuffles from the job PRNG each cycle."""

    def __init__(self, images: np.ndarray, masks: np.ndarray, batch_size: int, rng: np.random.Generator, flip: bool = True):
        self.images, self.masks = images, masks
        self.batch_size = batch_size
        self.rng = rng
        self.flip = flip
        self._perm = np.empty(0, dtype=np.int64)
        self._pos = 0

    def __len__(self) -> int:
        return len(self.images)

    def _take(self, n: int) -> np.ndarray:
        out = []
        while n:
            if self._pos == len(self._perm):
                self._perm = self.rng.permutation(len(self.images))
                self._pos = 0
            k = min(n, len(self._perm) - self._pos)
            out.append(self._perm[self._pos : self._pos + k])
            self._pos += k
            n -= k
        return np.concatenate(out)

    def next(self) -> tuple[np.ndarray, np.ndarray]:
        idx = self._take(self.batch_size)
        x = self.images[idx].copy()
        y = self.masks[idx].copy()
        if self.flip:
            # one draw per sample flips image and mask together
            f = self.rng.random(len(idx)) < 0.5
            x[f] = x[f, :, ::-1]
            y[f] = y[f, :, ::-1]
        return x, y


def _load_task_data(spec: TaskSpec, path_key: str = "manifest") -> datamod.Dataset:
    path = getattr(spec, path_key)
    ds = datamod.load(path, spec.kind)
    if path_key == "manifest" and spec.limit is not None:
        if spec.limit < 1 or spec.limit > len(ds):
            raise ConfigError(f"task {spec.id!r}: limit {spec.limit} outside [1, {len(ds)}]")
        ds = ds.subset(ds.ids[: spec.limit])
    return ds


# --------------------------------------------------------------------- step


@dataclass
class StepResult:
    losses: dict
    routing: dict | None = None


def _dlm_param_sets(model: JointModel) -> dict[str, list]:
    return parameter_partition(model)[1]


def scjoint_step(
    model: JointModel,
    batches: dict,
    opt: Adam,
    lr: float | None = None,
    weights: dict | None = None,
    audit: bool = False,
    step: int = 0,
) -> StepResult:
    """Forward each task's batch in its own mode, backprop the summed loss once, update.

    ``batches`` maps task id -> ``(images, masks)``; tasks absent from it
    contribute nothing.  With ``audit=True`` the result also carries
    ``routing[(loss_task, param_task)]``: the largest absolute gradient that
    ``loss_task``'s loss alone puts on ``param_task``'s DLM parameters.
    """
    if not batches:
        raise ValueError("scjoint_step needs at least one task batch")
    weights = weights or {}
    opt.zero_grad()
    task_losses = {}
    for task in batches:
        if task not in model.dlm_registry:
            raise RegistryError(f"unknown task id {task!r}; registered tasks: {model.tasks}")
    for task, (x, y) in batches.items():
        p = model.forward(x, task)
        loss = ppa_loss(p, y)
        w = weights.get(task, 1.0)
        task_losses[task] = loss if w == 1.0 else loss * w
    total = None
    for loss in task_losses.values():
        total = loss if total is None else total + loss

    routing = None
    if audit:
        dlm = _dlm_param_sets(model)
        flat = [(owner, p) for owner, ps in dlm.items() for p in ps]
        routing = {}
        for task, loss in task_losses.items():
            grads = T.grad(loss, [p for _, p in flat], retain_graph=True)
            for (owner, _), g in zip(flat, grads):
                key = (task, owner)
                routing[key] = max(routing.get(key, 0.0), float(np.max(np.abs(g))) if g.size else 0.0)

    T.backward(total)
    values = {t: float(l.data) for t, l in task_losses.items()}
    params = model.parameters()
    bad_grad = any(p.grad is not None and not np.all(np.isfinite(p.grad)) for p in params)
    if bad_grad or not all(math.isfinite(v) for v in values.values()):
        theta, per_task = parameter_partition(model)
        norms = {"theta": T.parameters_norm(theta)}
        norms.update({t: T.parameters_norm(ps) for t, ps in per_task.items()})
        raise TrainingDivergedError(step, opt.lr if lr is None else lr, values, norms)
    opt.step(lr)
    return StepResult(values, routing)


# -------------------------------------------------------------------- train


@dataclass
class TrainResult:
    model: JointModel
    log: list
    checkpoint_path: Path | None
    steps: int
    routing: list = field(default_factory=list)


def _evaluate(model: JointModel, ds: datamod.Dataset, mode_task: str, kind: str, batch: int = 16) -> dict:
    preds = [model.predict(ds.images()[i : i + batch], mode_task) for i in range(0, len(ds), batch)]
    pred = np.concatenate(preds)
    pairs = [M.MaskPair(pred[i], p.mask, p.id) for i, p in enumerate(ds.pairs)]
    return M.evaluate(pairs, kind).aggregate()


def _seeds(seed: int) -> tuple[int, np.random.Generator]:
    ss = np.random.SeedSequence(seed)
    model_ss, job_ss = ss.spawn(2)
    return int(model_ss.generate_state(1)[0]), np.random.default_rng(job_ss)


def train(config: TrainConfig, on_record: Callable[[dict], None] | None = None) -> TrainResult:
    """Run one training job from manifests; returns the final model and the evaluation log.

    With ``out_dir`` set, the checkpoint is rewritten atomically at the end of
    every epoch and each evaluation record is appended to ``train_log.jsonl``.
    """
    config.validate()
    train_sets = {t.id: _load_task_data(t) for t in config.tasks}
    val_sets = {t.id: _load_task_data(t, "val_manifest") for t in config.tasks if t.val_manifest}
    arrays = {tid: (ds.images(), ds.masks().astype(np.float64)) for tid, ds in train_sets.items()}
    return fit_arrays(config, arrays, val_sets, on_record)


def fit_arrays(
    config: TrainConfig,
    arrays: dict,
    val_sets: dict | None = None,
    on_record: Callable[[dict], None] | None = None,
) -> TrainResult:
    """Training loop over in-memory ``{task_id: (images, masks)}`` arrays."""
    mcfg = config.model_config()
    val_sets = val_sets or {}
    expect = (mcfg.image_size, mcfg.image_size)
    for tid, (imgs, _) in arrays.items():
        if len(imgs) == 0 or imgs.shape[1:3] != expect:
            raise ConfigError(f"task {tid!r}: images have shape {imgs.shape[1:]}, model expects {expect}")
    for tid, ds in val_sets.items():
        if ds.pairs[0].image.shape != expect:
            raise ConfigError(f"task {tid!r}: validation images do not match image_size {mcfg.image_size}")

    model_seed, rng = _seeds(config.seed)
    model = JointModel(mcfg, seed=model_seed)
    opt = Adam(model.parameters(), lr=config.lr0, betas=config.adam_betas, eps=config.adam_eps)
    bs = config.batch_size
    kinds = {t.id: t.kind for t in config.tasks}
    weights = {t.id: t.weight for t in config.tasks}

    if config.mode == "naive_joint":
        imgs = np.concatenate([arrays[t.id][0] for t in config.tasks])
        msks = np.concatenate([arrays[t.id][1] for t in config.tasks])
        loaders = {JOINT_TASK: TaskLoader(imgs, msks, bs * len(config.tasks), rng, config.flip)}
        weights = {}
        mode_of = {t.id: JOINT_TASK for t in config.tasks}
    else:
        loaders = {t.id: TaskLoader(*arrays[t.id], bs, rng, config.flip) for t in config.tasks}
        mode_of = {t.id: t.id for t in config.tasks}
    steps_per_epoch = max(math.ceil(len(ld) / ld.batch_size) for ld in loaders.values())
    max_iter = config.steps if config.steps is not None else config.epochs * steps_per_epoch

    out_dir = Path(config.out_dir) if config.out_dir else None
    ckpt_path = out_dir / CHECKPOINT_NAME if out_dir else None
    log_path = out_dir / LOG_NAME if out_dir else None
    if out_dir:
        out_dir.mkdir(parents=True, exist_ok=True)
        if log_path.exists():
            log_path.unlink()

    records, routing_log = [], []
    window: dict[str, list] = {}
    for it in range(max_iter):
        lr = poly_lr(config.lr0, it, max_iter, config.poly_power)
        batches = {t: ld.next() for t, ld in loaders.items()}
        res = scjoint_step(model, batches, opt, lr, weights, audit=config.audit_routing, step=it)
        if res.routing is not None:
            routing_log.append(res.routing)
        for t, v in res.losses.items():
            window.setdefault(t, []).append(v)
        done = it + 1
        epoch_end = done % steps_per_epoch == 0 or done == max_iter
        if epoch_end or (config.eval_every and done % config.eval_every == 0):
            rec = {
                "step": done,
                "epoch": math.ceil(done / steps_per_epoch),
                "lr": lr,
                "loss": {t: float(np.mean(v)) for t, v in window.items()},
                "metrics": {
                    tid: _evaluate(model, ds, mode_of[tid], kinds[tid]) for tid, ds in val_sets.items()
                },
            }
            window = {}
            records.append(rec)
            if log_path:
                with open(log_path, "a") as fh:
                    fh.write(json.dumps(rec, sort_keys=True) + "\n")
            if on_record:
                on_record(rec)
        if epoch_end and ckpt_path:
            _save(ckpt_path, model, config, done, rng)
    return TrainResult(model, records, ckpt_path, max_iter, routing_log)


def _save(path: Path, model: JointModel, config: TrainConfig, step: int, rng: np.random.Generator) -> None:
    meta = {
        "step": step,
        "seed": config.seed,
        "mode": config.mode,
        "task_kinds": {t.id: t.kind for t in config.tasks},
        "rng_state": rng.bit_generator.state,
    }
    ckpt.save(path, model, meta)


# -------------------------------------------------------------------- infer


def infer(model_or_path, image, task: str) -> np.ndarray:
    """Deterministic prediction map in (0, 1) for one image in ``task``'s mode."""
    model = model_or_path
    if not isinstance(model, JointModel):
        model, _ = ckpt.load_model(model_or_path)
    if task not in model.dlm_registry:
        raise RegistryError(f"unknown task id {task!r}; registered tasks: {model.tasks}")
    return model.predict(np.asarray(image, dtype=np.float64), task)


# ---------------------------------------------------------- imbalance sweep


def imbalance_sweep(
    config: TrainConfig,
    salient_task: str,
    camouflaged_task: str,
    ratios=(1.0, 2.0, 2.5),
    seeds=(0, 1, 2),
    base_count: int | None = None,
) -> list[dict]:
    """Re-run naive joint training with ``salient:camouflaged`` pair ratios.

    The camouflaged task keeps ``base_count`` pairs (default: its limit or its
    full size); the salient task is cut to ``ratio * base_count``.  Total steps
    stay as configured.  Returns one row per (ratio, seed) with the per-task
    validation metrics of the final evaluation.
    """
    specs = {t.id: t for t in config.tasks}
    cod = specs[camouflaged_task]
    if base_count is None:
        base_count = cod.limit or len(datamod.load(cod.manifest, cod.kind))
    rows = []
    for ratio in ratios:
        for seed in seeds:
            tasks = []
            for t in config.tasks:
                d = asdict(t)
                if t.id == salient_task:
                    d["limit"] = int(round(ratio * base_count))
                elif t.id == camouflaged_task:
                    d["limit"] = base_count
                tasks.append(d)
            cfg = TrainConfig.from_dict({**config.to_dict(), "tasks": tasks, "seed": seed, "mode": "naive_joint", "out_dir": None})
            res = train(cfg)
            rows.append({"ratio": ratio, "seed": seed, "metrics": res.log[-1]["metrics"] if res.log else {}})
            log.info("imbalance ratio=%s seed=%s -> %s", ratio, seed, rows[-1]["metrics"])
    return rows
