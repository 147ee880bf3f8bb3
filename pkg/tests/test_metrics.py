import json
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

import oracles as O
from scjoint import metrics as M
from scjoint.tensor import DimensionError

METRICS = {
    "mae": (M.mae, O.mae),
    "f_measure_max": (M.f_measure_max, O.f_max),
    "f_measure_weighted": (M.f_measure_weighted, O.f_weighted),
    "s_measure": (M.s_measure, O.s_measure),
    "e_measure_mean": (M.e_measure_mean, O.e_mean),
}


def random_pairs(n=100, size=8, seed=0):
    """Seeded pairs covering continuous, 8-bit quantized and degenerate cases."""
    rng = np.random.default_rng(seed)
    out = []
    for i in range(n):
        pred = rng.random((size, size))
        if i % 3 == 0:
            pred = np.round(pred * 255) / 255
        gt = rng.random((size, size)) < rng.uniform(0.05, 0.7)
        if i == 7:
            gt[:] = False
        if i == 8:
            gt[:] = True
        out.append((pred, gt))
    return out


PAIRS = random_pairs()


@pytest.mark.parametrize("name", sorted(METRICS))
def test_matches_transcription_oracle(name):
    fast, slow = METRICS[name]
    for pred, gt in PAIRS:
        assert abs(fast(pred, gt) - slow(pred.tolist(), gt.astype(int).tolist())) <= 1e-9


def test_composite_matches_oracle():
    for pred, gt in PAIRS[:20]:
        for kind in M.TASK_KINDS:
            want = O.composite(pred.tolist(), gt.astype(int).tolist(), kind)
            assert M.composite_score(pred, gt, kind) == pytest.approx(want, abs=1e-9)


# --------------------------------------------------------------- examples


def _mixed(seed=1, size=16):
    gt = np.random.default_rng(seed).random((size, size)) < 0.3
    gt[0, 0], gt[-1, -1] = True, False
    return gt


def test_mae_examples():
    gt = _mixed()
    assert M.mae(gt.astype(float), gt) == 0.0
    assert M.mae(1.0 - gt, gt) == 1.0
    assert M.mae(np.array([[1.0, 0], [0, 0]]), np.array([[1, 1], [0, 0]])) == 0.25


def test_f_max_examples():
    gt = _mixed()
    assert M.f_measure_max(gt.astype(float), gt) == pytest.approx(1.0, abs=1e-15)
    assert M.f_measure_max(np.zeros(gt.shape), gt) == 0.0
    pred = np.array([[0.9, 0.4], [0.0, 0.0]])
    g2 = np.array([[1, 1], [0, 0]])
    assert M.f_measure_max(pred, g2) == 1.0
    # at a threshold above 0.4 only one of two foreground pixels survives
    assert M.f_measure_at(pred, g2, 0.5) == pytest.approx(1.3 * 0.5 / (0.3 + 0.5), abs=1e-15)


def test_weighted_f_examples():
    gt = _mixed()
    assert M.f_measure_weighted(gt.astype(float), gt) == 1.0
    assert M.f_measure_weighted(np.zeros(gt.shape), gt) == 0.0
    g = np.zeros((4, 4), dtype=bool)
    g[1, 2] = True
    pred = np.random.default_rng(4).random((4, 4))
    want = O.f_weighted(pred.tolist(), g.astype(int).tolist())
    assert abs(M.f_measure_weighted(pred, g) - want) <= 1e-9


def test_s_measure_examples():
    gt = _mixed()
    assert M.s_measure(gt.astype(float), gt) == pytest.approx(1.0, abs=1e-6)
    assert M.s_measure(np.full((5, 5), 0.2), np.zeros((5, 5), bool)) == pytest.approx(0.8, abs=1e-15)
    assert M.s_measure(np.full((5, 5), 0.3), np.ones((5, 5), bool)) == pytest.approx(0.3, abs=1e-15)


def test_e_measure_examples():
    gt = _mixed()
    assert M.e_measure_mean(gt.astype(float), gt) >= 0.99
    assert M.e_measure_mean(np.zeros((6, 6)), np.zeros((6, 6), bool)) == 1.0


def test_degenerate_flags():
    empty = np.zeros((4, 4), bool)
    row = M.pair_metrics(np.full((4, 4), 0.3), empty)
    assert row["degenerate"] and row["f_beta_max"] == 0 and row["f_beta_weighted"] == 0
    assert not M.pair_metrics(np.zeros((4, 4)), _mixed(size=4))["degenerate"]


def test_perfect_pair_loses_only_the_top_threshold():
    # at t = 1 nothing survives ``pred > t``, so that one threshold scores 0.25
    gt = _mixed()
    perfect = gt.astype(float)
    assert M.e_measure_mean(perfect, gt) == pytest.approx((255 + 0.25) / 256, abs=1e-10)
    for kind in M.TASK_KINDS:
        assert M.composite_score(perfect, gt, kind) == pytest.approx(4.0 - 0.75 / 256, abs=1e-10)


def _ssim_zero_pred(gb):
    # SSIM block term when the prediction block is identically zero
    n = gb.size
    my = gb.mean()
    vy = ((gb - my) ** 2).sum() / max(n - 1, 1)
    return (1e-4 * 9e-4) / ((my * my + 1e-4) * (vy + 9e-4))


@pytest.mark.parametrize("seed", range(5))
def test_composite_of_zero_prediction_closed_form(seed):
    gt = _mixed(seed)
    h, w = gt.shape
    mu = gt.mean()
    # S_object: only the background term survives, D(ones) = 2 / 2
    s_obj = (1 - mu) * 1.0
    regs = []
    for y in M._split_candidates(gt, 0):
        for x in M._split_candidates(gt, 1):
            g = gt.astype(float)
            reg = 0.0
            for blk in (g[:y, :x], g[:y, x:], g[y:, :x], g[y:, x:]):
                if blk.size:
                    reg += blk.size / g.size * _ssim_zero_pred(blk)
            regs.append(reg)
    s = 0.5 * s_obj + 0.5 * np.mean(regs)
    e = 0.25  # empty binarization at every threshold: alignment 0
    want = s + e + 0.0 + (1 - mu)
    got = M.composite_score(np.zeros((h, w)), gt)
    assert got == pytest.approx(want, abs=1e-12)
    assert got <= 2.0


def test_composite_strictly_drops_with_corruption():
    rng = np.random.default_rng(11)
    gt = np.zeros((32, 32), bool)
    gt[8:20, 10:24] = True
    perfect = gt.astype(float)
    prev = M.composite_score(perfect, gt)
    order = rng.permutation(gt.size)
    for k in (1, 4, 16):
        pred = perfect.copy().ravel()
        pred[order[:k]] = 1.0 - pred[order[:k]]
        score = M.composite_score(pred.reshape(gt.shape), gt)
        assert score < prev
        prev = score


# ---------------------------------------------------------------- errors


def test_shape_mismatch_is_dimension_error():
    with pytest.raises(DimensionError):
        M.mae(np.zeros((3, 3)), np.zeros((3, 4), bool))


def test_non_binary_mask_rejected():
    with pytest.raises(ValueError):
        M.s_measure(np.zeros((2, 2)), np.array([[0, 0.5], [1, 0]]))


def test_from_uint8_maps_and_thresholds():
    pair = M.MaskPair.from_uint8(np.array([[0, 255], [51, 128]], np.uint8), np.array([[0, 255], [127, 128]], np.uint8))
    np.testing.assert_array_equal(pair.pred, [[0, 1], [0.2, 128 / 255]])
    np.testing.assert_array_equal(pair.gt, [[False, True], [False, True]])


# ------------------------------------------------------------ properties

maps = st.integers(2, 10).flatmap(
    lambda n: st.tuples(
        arrays(np.float64, (n, n), elements=st.floats(0, 1)),
        arrays(np.bool_, (n, n)),
    )
)


@settings(max_examples=60, deadline=None)
@given(maps)
def test_ranges(pair):
    pred, gt = pair
    row = M.pair_metrics(pred, gt, "camouflaged")
    for k in ("s_alpha", "e_phi", "f_beta_max", "f_beta_weighted", "mae"):
        assert 0.0 <= row[k] <= 1.0
    assert 0.0 <= row["composite"] <= 4.0


@settings(max_examples=60, deadline=None)
@given(maps)
def test_flip_equivariance(pair):
    pred, gt = pair
    fp, fg = pred[:, ::-1], gt[:, ::-1]
    for f in (M.mae, M.f_measure_max, M.f_measure_weighted, M.e_measure_mean):
        assert f(pred, gt) == f(fp, fg)
    assert abs(M.s_measure(pred, gt) - M.s_measure(fp, fg)) <= 1e-6


@settings(max_examples=60, deadline=None)
@given(maps, st.integers(0, 255))
def test_max_f_dominates_every_threshold(pair, j):
    pred, gt = pair
    assert M.f_measure_max(pred, gt) >= M.f_measure_at(pred, gt, j / 255)


# ---------------------------------------------------------------- report


def test_report_aggregates_equal_mean_of_rows():
    pairs = [M.MaskPair(p, g, f"p{i:03d}") for i, (p, g) in enumerate(PAIRS[:30])]
    rep = M.evaluate(list(reversed(pairs)), "salient")
    assert [r["id"] for r in rep.pairs] == sorted(p.id for p in pairs)
    for k, v in rep.aggregate().items():
        assert v == pytest.approx(sum(r[k] for r in rep.pairs) / len(rep.pairs), abs=1e-12)
    doc = json.loads(rep.to_json())
    assert doc["version"] == 1 and doc["count"] == 30 and doc["task_kind"] == "salient"
    lines = rep.to_text().splitlines()
    assert lines[0].split()[0] == "id" and lines[-1].startswith("MEAN")


def test_evaluate_threads_match_serial():
    pairs = [M.MaskPair(p, g, f"p{i:03d}") for i, (p, g) in enumerate(PAIRS[:20])]
    a = M.evaluate(pairs, "camouflaged")
    b = M.evaluate(pairs, "camouflaged", workers=4)
    assert a.to_json() == b.to_json()


def test_evaluate_rejects_duplicates_and_bad_kind():
    p = M.MaskPair(np.zeros((2, 2)), np.eye(2, dtype=bool), "a")
    with pytest.raises(ValueError):
        M.evaluate([p, p])
    with pytest.raises(ValueError):
        M.pair_metrics(p.pred, p.gt, "shadow")
    assert math.isclose(M.evaluate([p]).mae, 0.5)
