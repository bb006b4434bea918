import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from dlglc.evalkit import (
    build_trials,
    eer,
    min_dcf,
    read_emb1,
    read_trials,
    score_trials,
    write_emb1,
    write_trials,
)
from dlglc.numerics import make_rng

from oracles import brute_force_eer, brute_force_min_dcf


def test_perfect_separation():
    scores = np.array([0.9, 0.8, 0.1, 0.2])
    labels = np.array([1, 1, 0, 0], bool)
    assert eer(scores, labels)[0] == 0.0
    assert min_dcf(scores, labels) == 0.0


def test_reversed_scores():
    assert eer([0.1, 0.2, 0.9, 0.8], [1, 1, 0, 0])[0] == 1.0


def test_identical_scores_give_half():
    assert eer([0.5] * 6, [1, 0, 1, 0, 1, 0])[0] == pytest.approx(0.5)


def test_min_dcf_example():
    # reject everything costs p_target, normalised by min(p, 1-p) = p -> 1
    scores = [0.1, 0.2, 0.3, 0.4]
    labels = [1, 0, 1, 0]
    assert min_dcf(scores, labels, p_target=0.05) == pytest.approx(brute_force_min_dcf(scores, labels))
    assert min_dcf(scores, labels, p_target=0.05) <= 1.0


def test_eer_needs_both_classes():
    with pytest.raises(ValueError):
        eer([0.1, 0.2], [1, 1])


@settings(max_examples=200, deadline=None)
@given(st.integers(0, 2**32 - 1))
def test_matches_brute_force(seed):
    rng = np.random.default_rng(seed)
    n = int(rng.integers(2, 40))
    labels = rng.random(n) < 0.5
    labels[0], labels[1] = True, False
    scores = np.round(rng.normal(labels * 1.0, 1.0), int(rng.integers(0, 3)))  # rounding creates ties
    assert eer(scores, labels)[0] == pytest.approx(brute_force_eer(scores, labels), abs=1e-9)
    p = float(rng.uniform(0.01, 0.5))
    assert min_dcf(scores, labels, p) == pytest.approx(brute_force_min_dcf(scores, labels, p), abs=1e-9)


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 2**32 - 1))
def test_eer_invariant_under_monotone_maps(seed):
    rng = np.random.default_rng(seed)
    labels = rng.random(60) < 0.4
    labels[:2] = [True, False]
    scores = rng.normal(labels * 1.5, 1.0)
    a, b = rng.uniform(0.1, 3), rng.normal()
    for f in (lambda s: a * s + b, np.exp, lambda s: np.tanh(s / 3), lambda s: s ** 3):
        assert eer(f(scores), labels)[0] == pytest.approx(eer(scores, labels)[0], abs=1e-12)


def test_emb1_roundtrip(tmp_path):
    rng = np.random.default_rng(0)
    e = rng.normal(size=(7, 5))
    ids = np.array([3, 1, 4, 1_000_000_000_000, 5, 9, 2])
    write_emb1(tmp_path / "e.emb1", e, ids)
    back, ids2 = read_emb1(tmp_path / "e.emb1")
    np.testing.assert_array_equal(back, e.astype(np.float32))
    np.testing.assert_array_equal(ids2, ids)
    raw = (tmp_path / "e.emb1").read_bytes()
    assert raw[:4] == b"EMB1" and len(raw) == 12 + 7 * 5 * 4 + 7 * 8


def test_emb1_rejects_corrupt(tmp_path):
    (tmp_path / "x").write_bytes(b"EMB0" + bytes(8))
    with pytest.raises(ValueError):
        read_emb1(tmp_path / "x")
    write_emb1(tmp_path / "y", np.zeros((2, 2)), [0, 1])
    (tmp_path / "z").write_bytes((tmp_path / "y").read_bytes()[:-1])
    with pytest.raises(ValueError):
        read_emb1(tmp_path / "z")


def test_trials_are_distinct_and_labelled():
    ids = np.arange(100, 140)
    spk = np.repeat(np.arange(4), 10)
    trials = build_trials(ids, spk, 50, 70, make_rng(0))
    assert len(trials) == 120 and len({(a, b) for a, b, _ in trials}) == 120
    lookup = dict(zip(ids.tolist(), spk.tolist()))
    assert sum(t[2] for t in trials) == 50
    assert all((lookup[a] == lookup[b]) == same and a != b for a, b, same in trials)
    assert trials == build_trials(ids, spk, 50, 70, make_rng(0))
    with pytest.raises(ValueError):
        build_trials(ids, spk, 10_000, 10, make_rng(0))


def test_trials_file_roundtrip(tmp_path):
    trials = [(1, 2, True), (3, 4, False)]
    write_trials(tmp_path / "t.txt", trials)
    assert (tmp_path / "t.txt").read_text() == "1 1 2\n0 3 4\n"
    assert read_trials(tmp_path / "t.txt") == trials


def test_score_trials():
    emb = np.array([[1.0, 0], [0, 2.0], [3.0, 0]])
    s = score_trials(emb, [10, 11, 12], [(10, 12, True), (10, 11, False)])
    np.testing.assert_allclose(s, [1.0, 0.0], atol=1e-15)
    with pytest.raises(KeyError, match="99"):
        score_trials(emb, [10, 11, 12], [(10, 99, True)])
