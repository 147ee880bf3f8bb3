import hashlib
import json
import subprocess
import sys
import time

import numpy as np
import pytest

from scjoint import cli
from scjoint import data as D
from scjoint import trainer as TR

TINY = dict(image_size=16, patch_size=4, embed_dim=16, encoder_depth=1, decoder_depth=1, heads=2)


def run(*argv):
    return cli.main([str(a) for a in argv])


def sha(path):
    return hashlib.sha256(path.read_bytes()).hexdigest()


@pytest.fixture(scope="module")
def datasets(tmp_path_factory):
    root = tmp_path_factory.mktemp("data")
    for kind, seed, n in (("salient", 1, 12), ("camouflaged", 2, 12), ("dual", 3, 4)):
        assert run("gen-data", "--out", root / kind, "--kind", kind, "--count", n, "--seed", seed, "--image-size", 16) == 0
    return root


def write_train_config(path, datasets, **kw):
    cfg = dict(
        tasks=[
            dict(id="salient", manifest=str(datasets / "salient"), kind="salient"),
            dict(id="camouflaged", manifest=str(datasets / "camouflaged"), kind="camouflaged"),
        ],
        seed=0,
        model=TINY,
        batch_size=4,
        steps=8,
        lr0=1e-3,
    )
    cfg.update(kw)
    path.write_text(json.dumps(cfg))
    return path


@pytest.fixture(scope="module")
def trained(tmp_path_factory, datasets):
    root = tmp_path_factory.mktemp("train")
    cfg = write_train_config(root / "cfg.json", datasets, steps=30)
    assert run("train", "--config", cfg, "--out", root / "run") == 0
    return root / "run" / TR.CHECKPOINT_NAME


# ------------------------------------------------------------------ gen-data


def test_gen_data_from_spec_file(tmp_path, capsys):
    spec = tmp_path / "spec.json"
    spec.write_text(json.dumps({"kind": "camouflaged", "count": 3, "seed": 4, "image_size": 16, "format": "pgm"}))
    assert run("gen-data", "--spec", spec, "--out", tmp_path / "d") == 0
    doc = json.loads((tmp_path / "d" / "manifest.json").read_text())
    assert len(doc["entries"]) == 3 and doc["entries"][0]["image_path"].endswith(".pgm")
    resolved = json.loads((tmp_path / "d" / "resolved_config.json").read_text())
    assert resolved["seed"] == 4 and resolved["kind"] == "camouflaged"
    assert "wrote 3 camouflaged pairs" in capsys.readouterr().out


def test_gen_data_refuses_overwrite_without_force(tmp_path):
    args = ("gen-data", "--out", tmp_path, "--kind", "salient", "--count", 1, "--seed", 0, "--image-size", 16)
    assert run(*args) == 0
    assert run(*args) == 2
    assert run(*args, "--force") == 0


def test_gen_data_needs_a_seed(tmp_path, capsys):
    assert run("gen-data", "--out", tmp_path, "--kind", "salient", "--count", 1) == 2
    assert "seed" in capsys.readouterr().err


def test_gen_data_config_errors(tmp_path):
    spec = tmp_path / "spec.json"
    spec.write_text(json.dumps({"kind": "salient", "count": 1, "seed": 0, "colour": 1}))
    assert run("gen-data", "--spec", spec, "--out", tmp_path / "a") == 2
    assert run("gen-data", "--out", tmp_path / "b", "--kind", "salient", "--count", 0, "--seed", 0) == 2
    assert run("gen-data", "--spec", tmp_path / "missing.json", "--out", tmp_path / "c") == 3
    (tmp_path / "bad.json").write_text("{")
    assert run("gen-data", "--spec", tmp_path / "bad.json", "--out", tmp_path / "c") == 2


def test_gen_data_is_reproducible_from_resolved_config(tmp_path):
    assert run("gen-data", "--out", tmp_path / "a", "--kind", "dual", "--count", 3, "--seed", 5, "--image-size", 16) == 0
    assert run("gen-data", "--spec", tmp_path / "a" / "resolved_config.json", "--out", tmp_path / "b") == 0
    for p in sorted((tmp_path / "a").rglob("*.png")):
        assert p.read_bytes() == (tmp_path / "b" / p.relative_to(tmp_path / "a")).read_bytes()


# --------------------------------------------------------------------- train


def test_train_prints_records_and_echoes_config(tmp_path, datasets, capsys):
    cfg = write_train_config(tmp_path / "cfg.json", datasets, epochs=1, steps=None)
    assert run("train", "--config", cfg, "--out", tmp_path / "run") == 0
    out = capsys.readouterr().out
    assert "epoch    1" in out and "checkpoint:" in out
    resolved = json.loads((tmp_path / "run" / "resolved_config.json").read_text())
    assert resolved["epochs"] == 1 and resolved["out_dir"] == str((tmp_path / "run").resolve())
    # the echoed config reproduces the run bit-exactly
    again = tmp_path / "again.json"
    again.write_text(json.dumps({**resolved, "out_dir": str(tmp_path / "run2")}))
    assert run("train", "--config", again) == 0
    assert sha(tmp_path / "run" / TR.CHECKPOINT_NAME) == sha(tmp_path / "run2" / TR.CHECKPOINT_NAME)


def test_train_rerun_gives_identical_checkpoint_hash(tmp_path, datasets):
    cfg = write_train_config(tmp_path / "cfg.json", datasets)
    for name in ("a", "b"):
        assert run("train", "--config", cfg, "--out", tmp_path / name) == 0
    assert sha(tmp_path / "a" / TR.CHECKPOINT_NAME) == sha(tmp_path / "b" / TR.CHECKPOINT_NAME)


def test_train_config_errors(tmp_path, datasets):
    cfg = write_train_config(tmp_path / "cfg.json", datasets)
    assert run("train", "--config", cfg, "--out", tmp_path / "x", "--mode", "independent") == 2
    no_seed = write_train_config(tmp_path / "ns.json", datasets, seed=None)
    assert run("train", "--config", no_seed, "--out", tmp_path / "x") == 2
    extra = write_train_config(tmp_path / "ex.json", datasets, dropout=0.1)
    assert run("train", "--config", extra, "--out", tmp_path / "x") == 2
    assert run("train", "--config", cfg) == 2  # no output directory


def test_train_relative_paths_resolve_against_config(tmp_path, datasets):
    (tmp_path / "cfgdir").mkdir()
    cfg = write_train_config(tmp_path / "cfgdir" / "cfg.json", datasets, out_dir="runs/a", steps=2)
    doc = json.loads(cfg.read_text())
    doc["tasks"][0]["manifest"] = "../missing"
    cfg.write_text(json.dumps(doc))
    assert run("train", "--config", cfg) == 3
    doc["tasks"][0]["manifest"] = str(datasets / "salient")
    cfg.write_text(json.dumps(doc))
    assert run("train", "--config", cfg) == 0
    assert (tmp_path / "cfgdir" / "runs" / "a" / TR.CHECKPOINT_NAME).exists()


def test_train_naive_mode(tmp_path, datasets):
    cfg = write_train_config(tmp_path / "cfg.json", datasets, steps=2)
    assert run("train", "--config", cfg, "--out", tmp_path / "n", "--mode", "naive") == 0
    resolved = json.loads((tmp_path / "n" / "resolved_config.json").read_text())
    assert resolved["mode"] == "naive_joint"


def test_train_divergence_exit_code(tmp_path, datasets, monkeypatch):
    def boom(config, on_record=None):
        raise TR.TrainingDivergedError(3, 1e-3, {"salient": float("nan")}, {"theta": float("inf")})

    monkeypatch.setattr(cli, "train", boom)
    cfg = write_train_config(tmp_path / "cfg.json", datasets)
    assert run("train", "--config", cfg, "--out", tmp_path / "x") == 4


def test_train_step_budget(tmp_path, datasets):
    # reduced-step timing of the toy default model, extrapolated to 3000 steps
    D.generate(D.GenSpec("salient", 8, seed=7), tmp_path / "s64")
    D.generate(D.GenSpec("camouflaged", 8, seed=8), tmp_path / "c64")
    cfg = tmp_path / "cfg.json"
    cfg.write_text(
        json.dumps(
            dict(
                tasks=[
                    dict(id="salient", manifest=str(tmp_path / "s64"), kind="salient"),
                    dict(id="camouflaged", manifest=str(tmp_path / "c64"), kind="camouflaged"),
                ],
                seed=0,
                model=dict(embed_dim=64, encoder_depth=2, decoder_depth=2, heads=4),
                steps=15,
            )
        )
    )
    t0 = time.perf_counter()
    assert run("train", "--config", cfg, "--out", tmp_path / "run") == 0
    assert (time.perf_counter() - t0) / 15 * 3000 < 30 * 60


# ---------------------------------------------------------------------- sbss


def corrupt_fixture(root, n=10, frac=0.3):
    D.generate(D.GenSpec("salient", n, seed=0, image_size=16), root)
    rng = np.random.default_rng(1)
    bad = sorted(rng.choice(n, size=int(frac * n), replace=False).tolist())
    clean = root.parent / (root.name + "_clean")
    clean.mkdir()
    for i in range(n):
        eid = f"salient_{i:05d}"
        mask = root / "masks" / f"{eid}.png"
        (clean / f"{eid}.png").write_bytes(mask.read_bytes())
        if i in bad:
            D.write_gray(mask, (rng.random((16, 16)) < 0.3).astype(np.uint8) * 255)
    return clean, {f"salient_{i:05d}" for i in bad}


def test_sbss_oracle_on_clean_data(tmp_path, datasets, capsys):
    out = tmp_path / "sub.json"
    assert run("sbss", "--dataset", datasets / "salient", "--predictor", "oracle", "--k", 5, "--variant", "top", "--out", out) == 0
    scores = json.loads((tmp_path / "sub.scores.json").read_text())["scored"]
    assert len(scores) == 12 and all(abs(s["score"] - 4.0) < 0.003 for s in scores)
    assert len(D.load(out)) == 5
    resolved = json.loads((tmp_path / "sub.resolved.json").read_text())
    assert resolved["variant"] == "top_k" and resolved["k"] == 5
    assert "kept 5" in capsys.readouterr().out


def test_sbss_top_and_bottom_disjoint_on_corrupted_fixture(tmp_path):
    clean, bad = corrupt_fixture(tmp_path / "fx")
    ids = {}
    for variant in ("top", "bottom"):
        out = tmp_path / f"{variant}.json"
        assert run("sbss", "--dataset", tmp_path / "fx", "--predictor", clean, "--k", 5, "--variant", variant, "--out", out) == 0
        ids[variant] = set(D.load(out).ids)
    assert not ids["top"] & ids["bottom"]
    assert not ids["top"] & bad and bad <= ids["bottom"]


def test_sbss_with_checkpoint_predictor_and_config_file(tmp_path, datasets, trained):
    conf = tmp_path / "sbss.json"
    conf.write_text(json.dumps({"dataset": str(datasets / "salient"), "predictor": str(trained), "k": 3, "variant": "random", "seed": 2, "task": "salient"}))
    assert run("sbss", "--config", conf, "--out", tmp_path / "r.json") == 0
    assert run("sbss", "--config", conf, "--out", tmp_path / "r2.json") == 0
    assert (tmp_path / "r.json").read_text() == (tmp_path / "r2.json").read_text()


def test_sbss_errors(tmp_path, datasets, trained):
    base = ("sbss", "--dataset", datasets / "salient", "--predictor", "oracle", "--out", tmp_path / "o.json")
    assert run(*base, "--k", 99, "--variant", "top") == 2
    assert run(*base, "--k", 2, "--variant", "random") == 2  # no seed
    assert run(*base, "--variant", "top") == 2  # no k
    assert run("sbss", "--dataset", datasets / "salient", "--predictor", tmp_path / "nope", "--k", 1, "--variant", "top", "--out", tmp_path / "o.json") == 3
    assert run("sbss", "--dataset", datasets / "salient", "--predictor", trained, "--task", "shadow", "--k", 1, "--variant", "top", "--out", tmp_path / "o.json") == 2


def test_sbss_full_scale_k(tmp_path):
    # one shared 8x8 pair referenced by 10553 entries keeps the fixture small
    D.write_gray(tmp_path / "img.pgm", np.full((8, 8), 90, np.uint8))
    m = np.zeros((8, 8), np.uint8)
    m[2:5, 3:6] = 255
    D.write_gray(tmp_path / "mask.pgm", m)
    entries = [{"id": f"s{i:05d}", "image_path": "img.pgm", "mask_path": "mask.pgm"} for i in range(10553)]
    D.write_manifest(tmp_path / "big.json", "salient", entries)
    out = tmp_path / "sub" / "manifest.json"
    assert run("sbss", "--dataset", tmp_path / "big.json", "--predictor", "oracle", "--k", 4040, "--variant", "top", "--out", out) == 0
    doc = json.loads(out.read_text())
    assert len(doc["entries"]) == 4040
    # equal scores: the tie-break keeps the 4040 smallest ids
    assert [e["id"] for e in doc["entries"]] == [f"s{i:05d}" for i in range(4040)]
    assert doc["entries"][0]["image_path"] == "../img.pgm"


# ---------------------------------------------------------------------- eval


def test_eval_perfect_predictions(tmp_path, datasets, capsys):
    ds = D.load(datasets / "salient")
    for p in ds:
        D.write_gray(tmp_path / "pred" / f"{p.id}.png", p.mask.astype(np.uint8) * 255)
    out = tmp_path / "rep.json"
    assert run("eval", "--pred", tmp_path / "pred", "--gt", datasets / "salient", "--task-kind", "salient", "--out", out) == 0
    rep = json.loads(out.read_text())
    agg = rep["aggregate"]
    assert agg["mae"] == 0.0 and agg["s_alpha"] > 0.999 and agg["f_beta_max"] > 0.999 and agg["e_phi"] > 0.99
    for k, v in agg.items():
        assert v == pytest.approx(np.mean([r[k] for r in rep["pairs"]]), abs=1e-12)
    assert (tmp_path / "rep.txt").read_text().splitlines()[-1].startswith("MEAN")
    assert "MEAN" in capsys.readouterr().out


def test_eval_missing_prediction(tmp_path, datasets, capsys):
    ds = D.load(datasets / "salient")
    for p in ds.pairs[1:]:
        D.write_gray(tmp_path / f"{p.id}.png", p.mask.astype(np.uint8) * 255)
    assert run("eval", "--pred", tmp_path, "--gt", datasets / "salient", "--task-kind", "salient") == 3
    assert ds.ids[0] in capsys.readouterr().err


def test_eval_checkpoint_and_errors(tmp_path, datasets, trained):
    out = tmp_path / "r.json"
    assert run("eval", "--pred", trained, "--gt", datasets / "camouflaged", "--task-kind", "camouflaged", "--task", "camouflaged", "--out", out) == 0
    assert json.loads(out.read_text())["task_kind"] == "camouflaged"
    assert run("eval", "--pred", tmp_path / "none", "--gt", datasets / "salient", "--task-kind", "salient") == 3
    assert run("eval", "--pred", trained, "--gt", datasets / "salient") == 2


# --------------------------------------------------------------------- infer


def test_infer_modes_differ_and_keep_size(tmp_path, datasets, trained):
    img = datasets / "dual" / "images" / "dual_00000.png"
    outs = {}
    for task in ("salient", "camouflaged"):
        outs[task] = tmp_path / f"{task}.png"
        assert run("infer", "--ckpt", trained, "--image", img, "--task", task, "--out", outs[task]) == 0
        assert D.read_gray(outs[task]).shape == D.read_gray(img).shape
    assert outs["salient"].read_bytes() != outs["camouflaged"].read_bytes()


def test_infer_unknown_task_lists_registered(tmp_path, datasets, trained, capsys):
    img = datasets / "dual" / "images" / "dual_00000.png"
    assert run("infer", "--ckpt", trained, "--image", img, "--task", "shadow", "--out", tmp_path / "o.png") == 2
    err = capsys.readouterr().err
    assert "salient" in err and "camouflaged" in err
    assert run("infer", "--ckpt", tmp_path / "none.jnt", "--image", img, "--task", "salient", "--out", tmp_path / "o.png") == 3


def test_help_lists_every_command():
    res = subprocess.run([sys.executable, "-m", "scjoint", "--help"], capture_output=True, text=True)
    assert res.returncode == 0
    for cmd in ("gen-data", "train", "sbss", "eval", "infer"):
        assert cmd in res.stdout
    res = subprocess.run([sys.executable, "-m", "scjoint", "gen-data", "--help"], capture_output=True, text=True)
    assert "--distractor-rate" in res.stdout and "--force" in res.stdout
