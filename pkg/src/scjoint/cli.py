"""Command line entry point: ``scjoint <command> ...``.

Commands: gen-data, train, sbss, eval, infer.  Every command takes its
settings from a JSON config file and/or flags (flags win); the resolved
settings are written next to the outputs so a run can be repeated exactly.

Exit codes: 0 success, 2 configuration error, 3 I/O or data error,
4 training diverged (non-finite loss).
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import numpy as np

from . import checkpoint as ckpt
from . import data as datamod
from . import metrics as M
from . import sbss
from .model import RegistryError
from .tensor import ContractError
from .trainer import JOINT_TASK, ConfigError, TrainConfig, TrainingDivergedError, infer, train

EXIT_OK, EXIT_CONFIG, EXIT_IO, EXIT_DIVERGED = 0, 2, 3, 4

log = logging.getLogger("scjoint")


class CliError(Exception):
    def __init__(self, message: str, code: int = EXIT_CONFIG):
        super().__init__(message)
        self.code = code


def _read_json(path) -> dict:
    try:
        doc = json.loads(Path(path).read_text())
    except OSError as exc:
        raise CliError(f"cannot read {path}: {exc}", EXIT_IO) from exc
    except json.JSONDecodeError as exc:
        raise CliError(f"{path}: invalid JSON: {exc}") from exc
    if not isinstance(doc, dict):
        raise CliError(f"{path}: expected a JSON object")
    return doc


def _echo(path, resolved: dict) -> None:
    datamod.atomic_write_bytes(path, (json.dumps(resolved, indent=2, sort_keys=True) + "\n").encode())


def _merge(base: dict, overrides: dict, allowed) -> dict:
    unknown = sorted(set(base) - set(allowed))
    if unknown:
        raise CliError(f"unknown config keys: {unknown}")
    out = dict(base)
    out.update({k: v for k, v in overrides.items() if v is not None})
    return out


# ------------------------------------------------------------------ gen-data


def cmd_gen_data(args) -> int:
    raw = _read_json(args.spec) if args.spec else {}
    fields = set(datamod.GenSpec.__dataclass_fields__)
    cfg = _merge(
        raw,
        {
            "seed": args.seed,
            "kind": args.kind,
            "count": args.count,
            "image_size": args.image_size,
            "contrast": args.contrast,
            "format": args.format,
            "distractor_rate": args.distractor_rate,
        },
        fields,
    )
    if cfg.get("seed") is None:
        raise CliError("a seed is required (spec key 'seed' or --seed)")
    out = Path(args.out)
    if (out / "manifest.json").exists() and not args.force:
        raise CliError(f"{out}/manifest.json exists; pass --force to overwrite")
    try:
        spec = datamod.GenSpec.from_dict(cfg)
    except (TypeError, ValueError) as exc:
        raise CliError(f"invalid gen spec: {exc}") from exc
    doc = datamod.generate(spec, out)
    _echo(out / "resolved_config.json", spec.to_dict())
    print(f"wrote {len(doc['entries'])} {spec.kind} pairs to {out}")
    return EXIT_OK


# --------------------------------------------------------------------- train


def _resolve_paths(cfg: dict, base: Path) -> dict:
    tasks = []
    for t in cfg.get("tasks", []):
        t = dict(t)
        for key in ("manifest", "val_manifest"):
            if t.get(key):
                p = Path(t[key])
                t[key] = str(p if p.is_absolute() else (base / p).resolve())
        tasks.append(t)
    return {**cfg, "tasks": tasks}


def _print_record(rec: dict) -> None:
    losses = "  ".join(f"{t}={v:.4f}" for t, v in rec["loss"].items())
    mets = "  ".join(
        f"{t}: S={m['s_alpha']:.3f} E={m['e_phi']:.3f} M={m['mae']:.4f}" for t, m in rec["metrics"].items()
    )
    print(f"step {rec['step']:>6}  epoch {rec['epoch']:>4}  lr {rec['lr']:.2e}  loss {losses}  {mets}", flush=True)


def cmd_train(args) -> int:
    raw = _read_json(args.config)
    base = Path(args.config).resolve().parent
    overrides = {
        "mode": args.mode,
        "seed": args.seed,
        "steps": args.steps,
        "epochs": args.epochs,
        "lr0": args.lr0,
        "batch_size": args.batch_size,
        "out_dir": args.out,
    }
    cfg = _merge(raw, overrides, TrainConfig.__dataclass_fields__)
    if args.steps is not None:
        cfg["epochs"] = None
    elif args.epochs is not None:
        cfg["steps"] = None
    if cfg.get("seed") is None:
        raise CliError("a seed is required (config key 'seed' or --seed)")
    if not cfg.get("out_dir"):
        raise CliError("an output directory is required (config key 'out_dir' or --out)")
    # paths in the config file are relative to it; a flag is relative to the cwd
    out = Path(cfg["out_dir"])
    cfg["out_dir"] = str(out.resolve() if args.out or out.is_absolute() else (base / out).resolve())
    cfg = _resolve_paths(cfg, base)
    try:
        config = TrainConfig.from_dict(cfg)
    except (ConfigError, ValueError) as exc:
        raise CliError(str(exc)) from exc
    Path(config.out_dir).mkdir(parents=True, exist_ok=True)
    _echo(Path(config.out_dir) / "resolved_config.json", config.to_dict())
    try:
        res = train(config, on_record=_print_record)
    except TrainingDivergedError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_DIVERGED
    print(f"checkpoint: {res.checkpoint_path}")
    return EXIT_OK


def _mode_for(model, task: str | None) -> str:
    """Task id -> DLM set; naive-joint checkpoints route every task to the shared set."""
    if task is None:
        return model.tasks[0]
    if task not in model.dlm_registry and model.tasks == [JOINT_TASK]:
        return JOINT_TASK
    if task not in model.dlm_registry:
        raise CliError(f"unknown task id {task!r}; registered tasks: {model.tasks}")
    return task


# ---------------------------------------------------------------------- sbss

_VARIANT_ALIASES = {"top": "top_k", "bottom": "bottom_k", "random": "random_k"}


def _predictor(spec: str, task: str | None):
    if spec == "oracle":
        return sbss.OraclePredictor()
    path = Path(spec)
    if path.is_dir():
        return sbss.DirectoryPredictor(path)
    if not path.exists():
        raise CliError(f"predictor {spec!r} is neither 'oracle', a directory nor a checkpoint", EXIT_IO)
    model, _ = ckpt.load_model(path)
    return sbss.ModelPredictor(model, _mode_for(model, task))


def cmd_sbss(args) -> int:
    raw = _read_json(args.config) if args.config else {}
    keys = ("dataset", "predictor", "k", "variant", "seed", "out", "task", "scores")
    cfg = _merge(
        raw,
        {k: getattr(args, k) for k in keys},
        keys,
    )
    for key in ("dataset", "predictor", "k", "variant", "out"):
        if cfg.get(key) is None:
            raise CliError(f"missing required setting {key!r}")
    variant = _VARIANT_ALIASES.get(cfg["variant"], cfg["variant"])
    try:
        plan = sbss.SamplingPlan(variant, int(cfg["k"]), cfg.get("seed"))
    except ContractError as exc:
        raise CliError(str(exc)) from exc
    dataset = Path(cfg["dataset"])
    if dataset.is_dir():
        dataset = dataset / "manifest.json"
    ds = datamod.load_manifest(dataset)
    result = sbss.score_dataset(ds, _predictor(cfg["predictor"], cfg.get("task")), "salient")
    out = Path(cfg["out"])
    scores_path = Path(cfg["scores"]) if cfg.get("scores") else out.with_suffix(".scores.json")
    sbss.write_scores(scores_path, result)
    if result.failed:
        print(f"warning: {result.failed} pair(s) could not be scored: {sorted(result.errors)}", file=sys.stderr)
    try:
        ids = sbss.sample(result.scored, plan)
    except ContractError as exc:
        raise CliError(str(exc)) from exc
    sbss.write_subset_manifest(ids, dataset, out)
    _echo(out.with_suffix(".resolved.json"), {**cfg, "variant": variant})
    mean = float(np.mean([s.score for s in result.scored])) if result.scored else float("nan")
    print(f"scored {len(result)} pairs (mean {mean:.4f}, {result.failed} failed); kept {len(ids)} -> {out}")
    return EXIT_OK


# ---------------------------------------------------------------------- eval


def cmd_eval(args) -> int:
    raw = _read_json(args.config) if args.config else {}
    keys = ("pred", "gt", "task_kind", "task", "out")
    cfg = _merge(raw, {k: getattr(args, k) for k in keys}, keys)
    for key in ("pred", "gt", "task_kind"):
        if cfg.get(key) is None:
            raise CliError(f"missing required setting {key!r}")
    if cfg["task_kind"] not in M.TASK_KINDS:
        raise CliError(f"task kind must be one of {M.TASK_KINDS}")
    ds = datamod.load(cfg["gt"])
    pred_path = Path(cfg["pred"])
    pairs, missing = [], []
    if pred_path.is_dir():
        finder = sbss.DirectoryPredictor(pred_path)
        for p in ds:
            if finder.path_for(p.id) is None:
                missing.append(p.id)
                continue
            pred = finder(p)
            if pred.shape != p.mask.shape:
                raise CliError(f"{p.id}: prediction shape {pred.shape} != mask {p.mask.shape}", EXIT_IO)
            pairs.append(M.MaskPair(pred, p.mask, p.id))
    elif pred_path.is_file():
        model, _ = ckpt.load_model(pred_path)
        task = _mode_for(model, cfg.get("task"))
        for p in ds:
            pairs.append(M.MaskPair(model.predict(p.image, task), p.mask, p.id))
    else:
        raise CliError(f"prediction source {pred_path} does not exist", EXIT_IO)
    if missing:
        print(f"error: no prediction for {len(missing)} id(s): {missing}", file=sys.stderr)
        return EXIT_IO
    report = M.evaluate(pairs, cfg["task_kind"])
    if cfg.get("out"):
        out = Path(cfg["out"])
        datamod.atomic_write_bytes(out, (report.to_json() + "\n").encode())
        datamod.atomic_write_bytes(out.with_suffix(".txt"), report.to_text().encode())
        _echo(out.with_suffix(".resolved.json"), cfg)
    print(report.to_text(), end="")
    return EXIT_OK


# --------------------------------------------------------------------- infer


def cmd_infer(args) -> int:
    model, _ = ckpt.load_model(args.ckpt)
    task = _mode_for(model, args.task)
    img = datamod.read_gray(args.image).astype(np.float64) / 255.0
    pred = infer(model, img, task)
    datamod.write_gray(args.out, datamod.to_uint8(pred))
    print(f"wrote {args.out} ({pred.shape[1]}x{pred.shape[0]}, task {args.task})")
    return EXIT_OK


# ---------------------------------------------------------------------- main


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="scjoint", description=__doc__.split("\n\n")[0])
    ap.add_argument("-v", "--verbose", action="store_true", help="debug logging")
    sub = ap.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen-data", help="generate a synthetic dataset")
    g.add_argument("--spec", help="JSON generation spec (kind, count, seed, ...)")
    g.add_argument("--out", required=True, help="output directory")
    g.add_argument("--seed", type=int, help="PRNG seed (mandatory here or in --spec)")
    g.add_argument("--kind", choices=datamod.GEN_KINDS)
    g.add_argument("--count", type=int)
    g.add_argument("--image-size", type=int, dest="image_size")
    g.add_argument("--contrast", type=float)
    g.add_argument("--format", choices=("png", "pgm"))
    g.add_argument(
        "--distractor-rate", type=float, dest="distractor_rate",
        help="probability of an unlabeled object of the other kind (salient/camouflaged only)",
    )
    g.add_argument("--force", action="store_true", help="overwrite an existing dataset")
    g.set_defaults(func=cmd_gen_data)

    t = sub.add_parser("train", help="train a model")
    t.add_argument("--config", required=True, help="JSON training config")
    t.add_argument("--mode", choices=("scjoint", "naive", "naive_joint", "independent"))
    t.add_argument("--seed", type=int)
    t.add_argument("--steps", type=int, help="total optimizer steps (overrides epochs)")
    t.add_argument("--epochs", type=int, help="epochs (overrides steps)")
    t.add_argument("--lr0", type=float, help="initial learning rate")
    t.add_argument("--batch-size", type=int, dest="batch_size", help="per-task batch size")
    t.add_argument("--out", help="output directory")
    t.set_defaults(func=cmd_train)

    s = sub.add_parser("sbss", help="rank a dataset and write a sampled subset manifest")
    s.add_argument("--config", help="JSON file with any of the flags below")
    s.add_argument("--dataset", help="source manifest (or a directory holding manifest.json)")
    s.add_argument("--predictor", help="checkpoint file, directory of prediction maps, or 'oracle'")
    s.add_argument("--k", type=int, help="number of pairs to keep")
    s.add_argument("--variant", choices=("top", "bottom", "random", "top_k", "bottom_k", "random_k"))
    s.add_argument("--seed", type=int, help="seed for --variant random")
    s.add_argument("--task", help="task mode to run when the predictor is a checkpoint")
    s.add_argument("--scores", help="where to dump the scored list (default: <out>.scores.json)")
    s.add_argument("--out", help="output manifest path")
    s.set_defaults(func=cmd_sbss)

    e = sub.add_parser("eval", help="evaluate predictions against a ground-truth manifest")
    e.add_argument("--config", help="JSON file with any of the flags below")
    e.add_argument("--pred", help="directory of <id>.png/.pgm maps, or a checkpoint")
    e.add_argument("--gt", help="ground-truth manifest (also the images for a checkpoint)")
    e.add_argument("--task-kind", dest="task_kind", choices=M.TASK_KINDS)
    e.add_argument("--task", help="task mode when --pred is a checkpoint")
    e.add_argument("--out", help="write the JSON report here (plus a .txt table)")
    e.set_defaults(func=cmd_eval)

    i = sub.add_parser("infer", help="predict one image in one task mode")
    i.add_argument("--ckpt", required=True)
    i.add_argument("--image", required=True)
    i.add_argument("--task", required=True)
    i.add_argument("--out", required=True, help="output 8-bit map (.png or .pgm)")
    i.set_defaults(func=cmd_infer)
    return ap


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except CliError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exc.code
    except (ConfigError, RegistryError, ContractError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (datamod.DatasetError, ckpt.CheckpointError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_IO
    except ValueError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
