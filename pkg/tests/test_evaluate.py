import json
import warnings

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from nirvis.embedder import Checkpoint, build_backbone
from nirvis.evaluate import (
    MetricError,
    ScoreSet,
    VerificationReport,
    aggregate_folds,
    build_scoreset,
    cross_dataset_matrix,
    evaluate_checkpoint,
    pairwise_cosine,
    protocol_sets,
    rank_n,
    roc_points,
    tar_at_far,
)

from .conftest import TINY_BACKBONE
from .oracles import rank_n_bruteforce, tar_at_far_bruteforce


def test_pairwise_cosine_oracle(rng):
    g = rng.standard_normal((10, 4))
    p = rng.standard_normal((7, 4))
    g /= np.linalg.norm(g, axis=1, keepdims=True)
    p /= np.linalg.norm(p, axis=1, keepdims=True)
    ref = np.array([[sum(a * b for a, b in zip(gi, pj)) for pj in p] for gi in g])
    np.testing.assert_allclose(pairwise_cosine(g, p), ref, atol=1e-12)
    np.testing.assert_allclose(pairwise_cosine(g, p, block=3), pairwise_cosine(g, p), rtol=0, atol=1e-15)
    assert pairwise_cosine(g[:1], g[:1])[0, 0] == pytest.approx(1.0)
    assert pairwise_cosine([[1.0, 0]], [[0, 1.0]])[0, 0] == 0.0
    np.testing.assert_array_equal(pairwise_cosine(g, g), pairwise_cosine(g, g).T)
    with pytest.raises(MetricError):
        pairwise_cosine(g, rng.standard_normal((3, 5)))


def test_scoreset_counts():
    s = build_scoreset(np.eye(2), ["A", "B"], ["A", "B"])
    assert s.genuine.size == 2 and s.impostor.size == 2
    with pytest.raises(MetricError, match="no genuine"):
        build_scoreset(np.eye(2), ["A", "B"], ["C", "D"])


def test_scoreset_counts_on_synth_protocol(tiny_data):
    _, tgt = tiny_data
    gal, prb = protocol_sets(tgt)
    gids = [r.identity for r in gal.records]
    pids = [r.identity for r in prb.records]
    s = build_scoreset(np.zeros((len(gids), len(pids))), gids, pids)
    expected = sum(gids.count(c) * pids.count(c) for c in set(gids))
    assert s.genuine.size == expected
    assert s.impostor.size == len(gids) * len(pids) - expected


def test_tar_worked_example():
    # threshold 0.3 admits exactly one of four impostors (0.5), i.e. FAR = 0.25
    gen, imp = [0.9, 0.8, 0.4], [0.5, 0.3, 0.2, 0.1]
    assert tar_at_far_bruteforce(gen, imp, 0.25) == (0.3, 1.0)
    assert tar_at_far(ScoreSet(np.array(gen), np.array(imp)), 0.25) == 1.0
    with pytest.warns(UserWarning):
        assert tar_at_far(ScoreSet(np.array(gen), np.array(imp)), 0.2) == pytest.approx(2 / 3)


def test_tar_perfect_and_indistinguishable(rng):
    perfect = ScoreSet(np.ones(5), np.zeros(50))
    for far in (1e-4, 0.1, 0.9):
        with warnings.catch_warnings():
            warnings.simplefilter("ignore")
            assert tar_at_far(perfect, far) == 1.0
    x = rng.random(2000)
    for far in (0.01, 0.1, 0.5):
        assert abs(tar_at_far(ScoreSet(x, x.copy()), far) - far) <= 1 / 2000


def test_tar_errors_and_warning():
    with pytest.raises(MetricError):
        tar_at_far(ScoreSet(np.array([]), np.array([0.1])), 0.1)
    with pytest.raises(MetricError):
        tar_at_far(ScoreSet(np.array([0.1]), np.array([0.1])), 1.0)
    with pytest.warns(UserWarning, match="cannot resolve"):
        tar_at_far(ScoreSet(np.array([0.5]), np.array([0.1, 0.2])), 1e-3)


score_lists = st.lists(st.sampled_from([0.0, 0.1, 0.25, 0.5, 0.7, 1.0]) | st.floats(-1, 1), min_size=1, max_size=40)


@settings(max_examples=150, deadline=None)
@given(score_lists, score_lists, st.floats(1e-3, 0.999))
def test_tar_matches_bruteforce_with_ties(gen, imp, far):
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        assert tar_at_far(ScoreSet(np.array(gen), np.array(imp)), far) == tar_at_far_bruteforce(gen, imp, far)[1]


@settings(max_examples=50, deadline=None)
@given(score_lists, score_lists, st.floats(1e-3, 0.5), st.floats(1e-3, 0.5))
def test_tar_monotone_in_far(gen, imp, f1, f2):
    s = ScoreSet(np.array(gen), np.array(imp))
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        lo, hi = sorted((f1, f2))
        assert tar_at_far(s, lo) <= tar_at_far(s, hi)
        assert 0 <= tar_at_far(s, lo) <= 1


def test_roc_points_consistent(rng):
    s = ScoreSet(rng.random(30), rng.random(60))
    far, tar, thr = roc_points(s)
    assert np.all(np.diff(far) <= 0) and np.all(np.diff(tar) <= 0)
    assert far[-1] == 0 and tar[-1] == 0 and np.isinf(thr[-1])


def test_rank_trivial_cases():
    g = np.eye(3)
    assert rank_n(g, ["a", "b", "c"], ["a", "b", "c"], 1) == 1.0
    assert rank_n(np.zeros((3, 3)), ["a", "b", "c"], ["a", "b", "c"], 1) == 0.0  # ties never count as hits
    assert rank_n(np.zeros((3, 3)), ["a", "b", "c"], ["a", "b", "c"], 3) == 1.0
    with pytest.raises(MetricError):
        rank_n(g, ["a", "b", "c"], ["z", "b", "c"], 1)


def test_rank_matches_sort_oracle(rng):
    for _ in range(10):
        s = np.round(rng.random((20, 50)), 2)
        gids = list(rng.integers(0, 8, 20))
        pids = list(rng.choice(sorted(set(gids)), 50))
        for n in (1, 2, 5):
            assert rank_n(s, gids, pids, n) == rank_n_bruteforce(s, gids, pids, n)
        ranks = [rank_n(s, gids, pids, n) for n in range(1, 9)]
        assert ranks == sorted(ranks)


def test_aggregate_folds():
    mk = lambda v: VerificationReport({0.01: v}, {1: v}, {})  # noqa: E731
    assert aggregate_folds([mk(0.7)])["tar@0.01"] == (0.7, 0.0)
    m, s = aggregate_folds([mk(0.9), mk(1.0)])["tar@0.01"]
    assert m == pytest.approx(0.95) and s == pytest.approx(0.05)
    vals = np.random.default_rng(2).random(10)
    m, s = aggregate_folds([mk(v) for v in vals])["rank1"]
    mean = sum(vals) / 10
    assert m == pytest.approx(mean, abs=1e-12)
    assert s == pytest.approx((sum((v - mean) ** 2 for v in vals) / 10) ** 0.5, abs=1e-12)
    with pytest.raises(MetricError):
        aggregate_folds([mk(0.5), VerificationReport({0.1: 0.5}, {}, {})])


def test_evaluate_checkpoint_pure_and_identical_sets(tiny_data, tmp_path):
    _, tgt = tiny_data
    ck = Checkpoint.from_model(build_backbone(TINY_BACKBONE, 0))
    gal, prb = protocol_sets(tgt)
    a = evaluate_checkpoint(ck, gal, prb, ranks=(1, 2))
    b = evaluate_checkpoint(ck, gal, prb, ranks=(1, 2))
    assert a.to_dict() == b.to_dict()
    assert all(0 <= v <= 1 for v in a.metrics().values())
    same = evaluate_checkpoint(ck, gal, gal, ranks=(1,))
    assert same.rank_n[1] == 1.0
    path = a.write(tmp_path / "r.json", config_hash="abc")
    assert json.loads(path.read_text())["config_hash"] == "abc"


def test_cross_matrix_shape_and_purity(tiny_data):
    _, tgt = tiny_data
    gal, prb = protocol_sets(tgt)
    c1 = Checkpoint.from_model(build_backbone(TINY_BACKBONE, 0))
    c2 = Checkpoint.from_model(build_backbone(TINY_BACKBONE, 1))
    single = cross_dataset_matrix({"X": c1}, {"X": (gal, prb)}, far=0.1)
    assert single.values.shape == (1, 1)
    assert single.cell("X", "X") == evaluate_checkpoint(c1, gal, prb, fars=(0.1,)).tar_at[0.1]
    ab = cross_dataset_matrix({"X": c1, "Y": c2}, {"P": (gal, prb), "Q": (prb, gal)}, far=0.1, baseline=c2)
    ba = cross_dataset_matrix({"Y": c2, "X": c1}, {"Q": (prb, gal), "P": (gal, prb)}, far=0.1)
    assert ab.rows == ["X", "Y", "no fine-tune"]
    for r in ("X", "Y"):
        for c in ("P", "Q"):
            assert ab.cell(r, c) == ba.cell(r, c)
    np.testing.assert_array_equal(ab.values[2], ab.values[1])


def _lambda0_cell(reproduced, train, evaluate):
    return np.median([r[f"{train}/mean-l0"][evaluate] for r in reproduced[1]["per_seed"]])


def test_cross_matrix_diagonal_on_dataset_a(reproduced):
    assert _lambda0_cell(reproduced, "A", "A") >= _lambda0_cell(reproduced, "B", "A")


@pytest.mark.xfail(strict=True, reason="oracle run: on dataset B the A-trained lambda=0 model "
                                       "scores higher than the B-trained one (0.237 vs 0.193)")
def test_cross_matrix_diagonal_on_dataset_b(reproduced):
    assert _lambda0_cell(reproduced, "B", "B") >= _lambda0_cell(reproduced, "A", "B")
