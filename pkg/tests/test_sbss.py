import json
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

import oracles as O
from scjoint import data as D
from scjoint import sbss as S
from scjoint.data import SamplePair
from scjoint.tensor import ContractError

PERFECT = 4.0 - 0.75 / 256


def _pairs(n=12, size=16, seed=0):
    rng = np.random.default_rng(seed)
    out = []
    for i in range(n):
        mask = rng.random((size, size)) < rng.uniform(0.1, 0.5)
        mask[0, 0], mask[-1, -1] = True, False
        out.append(SamplePair(f"p{i:03d}", rng.random((size, size)), mask))
    return out


def _scored(d):
    return [S.ScoredPair(k, v) for k, v in d.items()]


def _mean_score(scored, ids):
    # correctly rounded, so the order-statistic comparisons can be exact
    by_id = {s.pair_id: s.score for s in scored}
    return math.fsum(by_id[i] for i in ids) / len(ids)


def test_oracle_predictor_scores_perfect():
    res = S.score_dataset(_pairs(), S.OraclePredictor())
    assert len(res) == 12 and res.failed == 0
    for s in res:
        assert s.score == pytest.approx(PERFECT, abs=1e-10)


def test_zero_predictor_matches_oracle_composite():
    pairs = _pairs(6, size=8)
    res = S.score_dataset(pairs, lambda p: np.zeros(p.mask.shape))
    by_id = {s.pair_id: s.score for s in res}
    for p in pairs:
        want = O.composite(np.zeros((8, 8)).tolist(), p.mask.astype(int).tolist(), "salient")
        assert by_id[p.id] == pytest.approx(want, abs=1e-9)
        assert 0.0 <= by_id[p.id] <= 4.0


def test_scoring_is_permutation_invariant():
    pairs = _pairs()
    pred = lambda p: np.clip(p.mask + 0.3 * p.image - 0.1, 0, 1)
    a = S.score_dataset(pairs, pred)
    b = S.score_dataset(list(reversed(pairs)), pred, workers=3)
    assert a.scored == b.scored


def test_shape_mismatch_is_recorded_and_excluded():
    pairs = _pairs(4)

    def pred(p):
        return np.zeros((3, 3)) if p.id == "p002" else p.mask.astype(float)

    res = S.score_dataset(pairs, pred)
    assert res.failed == 1 and "p002" in res.errors
    assert [s.pair_id for s in res] == ["p000", "p001", "p003"]


def test_sample_examples():
    sc = _scored({"c": 1.0, "a": 3.0, "b": 2.0})
    assert S.sample(sc, S.SamplingPlan("top_k", 2)) == ["a", "b"]
    assert S.sample(sc, S.SamplingPlan("bottom_k", 1)) == ["c"]
    for plan in (S.SamplingPlan("top_k", 3), S.SamplingPlan("bottom_k", 3), S.SamplingPlan("random_k", 3, seed=1)):
        assert sorted(S.sample(sc, plan)) == ["a", "b", "c"]


def test_ties_break_by_ascending_id():
    sc = _scored({"d": 2.0, "b": 2.0, "a": 1.0, "c": 2.0})
    assert S.sample(sc, S.SamplingPlan("top_k", 2)) == ["b", "c"]
    assert S.sample(sc, S.SamplingPlan("bottom_k", 2)) == ["a", "d"]


@pytest.mark.parametrize("k", [0, 4])
def test_k_out_of_range(k):
    with pytest.raises(ContractError):
        S.sample(_scored({"a": 1.0, "b": 2.0, "c": 3.0}), S.SamplingPlan("top_k", k))


def test_plan_validation():
    with pytest.raises(ContractError):
        S.SamplingPlan("middle_k", 1)
    with pytest.raises(ContractError):
        S.SamplingPlan("random_k", 1)


def test_random_k_is_seeded_and_order_free():
    sc = _scored({f"x{i}": float(i % 5) for i in range(40)})
    plan = S.SamplingPlan("random_k", 10, seed=7)
    a = S.sample(sc, plan)
    assert a == S.sample(list(reversed(sc)), plan) == sorted(a)
    assert S.sample(sc, S.SamplingPlan("random_k", 10, seed=8)) != a


score_maps = st.dictionaries(
    st.text("abcdefgh", min_size=1, max_size=4),
    st.floats(0, 4, allow_nan=False),
    min_size=1,
    max_size=30,
)


@settings(max_examples=80, deadline=None)
@given(score_maps, st.data())
def test_order_statistic_properties(d, data):
    sc = _scored(d)
    n = len(sc)
    k = data.draw(st.integers(1, n))
    top = S.sample(sc, S.SamplingPlan("top_k", k))
    bottom = S.sample(sc, S.SamplingPlan("bottom_k", k))
    rand = S.sample(sc, S.SamplingPlan("random_k", k, seed=data.draw(st.integers(0, 2**32))))
    assert len(top) == len(bottom) == len(rand) == k
    assert _mean_score(sc, top) >= _mean_score(sc, rand) >= _mean_score(sc, bottom)
    if 2 * k <= n:
        assert not set(top) & set(bottom)
    scores = [dict(d)[i] for i in top]
    assert scores == sorted(scores, reverse=True)


def _corrupted_fixture(n=40, seed=0):
    pairs = _pairs(n, size=24, seed=seed)
    rng = np.random.default_rng(seed + 100)
    bad = set(rng.choice(n, size=int(0.3 * n), replace=False).tolist())
    clean = {p.id: p.mask for p in pairs}
    noisy = []
    for i, p in enumerate(pairs):
        m = rng.random(p.mask.shape) < 0.3 if i in bad else p.mask
        noisy.append(SamplePair(p.id, p.image, m))
    return noisy, clean, {pairs[i].id for i in bad}


def test_corrupted_masks_score_below_clean():
    noisy, clean, bad = _corrupted_fixture()
    res = S.score_dataset(noisy, lambda p: clean[p.id].astype(float))
    scores = {s.pair_id: s.score for s in res}
    assert max(scores[i] for i in bad) < min(v for k, v in scores.items() if k not in bad)
    top = S.sample(res, S.SamplingPlan("top_k", 28))
    assert not set(top) & bad


def _write_fixture(tmp_path, n):
    D.generate(D.GenSpec("salient", n, seed=0, image_size=16), tmp_path / "src")
    return tmp_path / "src" / "manifest.json"


def test_subset_manifest_is_idempotent_and_rebased(tmp_path):
    src = _write_fixture(tmp_path, 5)
    out = tmp_path / "sub" / "manifest.json"
    ids = ["salient_00003", "salient_00001"]
    S.write_subset_manifest(ids, src, out)
    first = out.read_bytes()
    S.write_subset_manifest(ids, src, out)
    assert out.read_bytes() == first
    ds = D.load(out)
    assert ds.ids == sorted(ids)
    orig = D.load(src)
    assert ds.pairs[0].image.tobytes() == orig.subset(["salient_00001"]).pairs[0].image.tobytes()


def test_subset_of_all_equals_source(tmp_path):
    src = _write_fixture(tmp_path, 4)
    out = tmp_path / "manifest_all.json"
    doc = D.read_manifest(src)
    got = S.write_subset_manifest([e["id"] for e in doc["entries"]], src, tmp_path / "src" / "all.json")
    assert got["entries"] == doc["entries"]
    assert not out.exists()


def test_subset_manifest_errors(tmp_path):
    src = _write_fixture(tmp_path, 3)
    out = tmp_path / "sub.json"
    with pytest.raises(D.DatasetError) as exc:
        S.write_subset_manifest(["salient_00000", "nope", "zzz"], src, out)
    assert exc.value.offenders == ["nope", "zzz"]
    assert not out.exists()
    with pytest.raises(ContractError):
        S.write_subset_manifest([], src, out)


def test_full_scale_subset_count(tmp_path):
    # 10553 salient training pairs reduced to the 4040 that match the camouflaged set size
    entries = [{"id": f"s{i:05d}", "image_path": f"i/{i}.png", "mask_path": f"m/{i}.png"} for i in range(10553)]
    src = tmp_path / "big.json"
    D.write_manifest(src, "salient", entries)
    rng = np.random.default_rng(0)
    sc = [S.ScoredPair(e["id"], float(s)) for e, s in zip(entries, rng.uniform(0, 4, len(entries)))]
    ids = S.sample(sc, S.SamplingPlan("top_k", 4040))
    doc = S.write_subset_manifest(ids, src, tmp_path / "sub.json")
    assert len(doc["entries"]) == 4040


def test_directory_predictor_and_score_dump(tmp_path):
    pairs = _pairs(3)
    for p in pairs[:2]:
        D.write_gray(tmp_path / f"{p.id}.png", D.to_uint8(p.mask.astype(float)))
    res = S.score_dataset(pairs, S.DirectoryPredictor(tmp_path))
    assert res.failed == 1 and "p002" in res.errors
    assert all(s.score == pytest.approx(PERFECT, abs=1e-10) for s in res)
    S.write_scores(tmp_path / "scores.json", res)
    doc = json.loads((tmp_path / "scores.json").read_text())
    assert [r["id"] for r in doc["scored"]] == ["p000", "p001"] and list(doc["errors"]) == ["p002"]
