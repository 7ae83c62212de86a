import itertools

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from hgc import metrics as M


def test_perfect_and_relabeled_hypothesis():
    ref = [(0, 5, "A"), (5, 5, "B")]
    assert M.der(ref, ref)["der"] == 0.0
    assert M.der(ref, [(0, 5, "x"), (5, 5, "y")])["der"] == 0.0


def test_confusion_hand_value():
    ref = [(0, 5, "A"), (5, 5, "B")]
    hyp = [(0, 7, "x"), (7, 3, "y")]
    d = M.der(ref, hyp)
    assert d["confusion"] == pytest.approx(20.0)
    assert d["fa"] == d["miss"] == 0.0


def test_miss_and_false_alarm():
    ref = [(0, 10, "A")]
    assert M.der(ref, [(0, 5, "x")])["miss"] == pytest.approx(50.0)
    d = M.der(ref, [(0, 10, "x"), (10, 5, "x")])
    assert d["fa"] == pytest.approx(50.0) and d["der"] == pytest.approx(50.0)


def test_overlap_counts_twice():
    ref = [(0, 10, "A"), (5, 5, "B")]
    hyp = [(0, 10, "x")]
    d = M.der_components(ref, hyp)
    assert d.scored == pytest.approx(15.0)
    assert d.miss == pytest.approx(5.0)
    skip = M.der_components(ref, hyp, score_overlap=False)
    assert skip.scored == pytest.approx(5.0) and skip.der == 0.0


def test_collar_excludes_boundary_neighborhood():
    ref = [(0, 5, "A"), (5, 5, "B")]
    hyp = [(0, 5.2, "x"), (5.2, 4.8, "y")]
    assert M.der(ref, hyp)["confusion"] > 0
    res = M.der_components(ref, hyp, collar=0.25)
    assert res.der == 0.0
    # collars around 0, 5 and 10 remove 0.25 + 0.5 + 0.25 seconds
    assert res.scored == pytest.approx(9.0)


def test_empty_reference_and_bad_turns_raise():
    with pytest.raises(ValueError):
        M.der([], [(0, 1, "x")])
    with pytest.raises(ValueError):
        M.der([(0, 0, "A")], [(0, 1, "x")])
    with pytest.raises(ValueError):
        M.der([(0, 1, "A")], [(0, 1, "x")], collar=-1)


def test_empty_hypothesis_is_all_miss():
    assert M.der([(0, 4, "A")], [])["miss"] == pytest.approx(100.0)


def brute_force_der(ref, hyp, score_overlap=True):
    ref, hyp = M.TimedAnnotation(ref), M.TimedAnnotation(hyp)
    pieces = M._scored_intervals(ref, hyp, 0.0, score_overlap)
    scored = sum(d * len(r) for d, r, _ in pieces)
    rs, hs = ref.speakers, hyp.speakers
    best = np.inf
    slots = rs + [None] * len(hs)
    for perm in itertools.permutations(slots, len(hs)):
        mp = dict(zip(hs, perm))
        err = 0.0
        for d, r, h in pieces:
            correct = len(set(r) & {mp[b] for b in h})
            err += d * (max(len(r), len(h)) - correct)
        best = min(best, err)
    return 100.0 * best / scored


turns = st.lists(st.tuples(st.integers(0, 20), st.integers(1, 6), st.sampled_from("ABCD")), min_size=1, max_size=7)


@settings(max_examples=60, deadline=None)
@given(turns, turns, st.booleans())
def test_hungarian_matches_brute_force(ref, hyp, skip):
    ref = [(float(a), float(b), s) for a, b, s in ref]
    hyp = [(float(a) + 0.5, float(b), s.lower()) for a, b, s in hyp]
    try:
        got = M.der(ref, hyp, score_overlap=not skip)["der"]
    except ValueError:
        return
    assert got == pytest.approx(brute_force_der(ref, hyp, not skip), abs=1e-9)


def test_optimal_mapping_example():
    ov = np.array([[1.0, 5.0], [4.0, 0.0], [0.0, 0.0]])
    assert M.optimal_mapping(ov) == {0: 1, 1: 0}
    assert M.optimal_mapping(np.zeros((0, 0))) == {}


def test_purity_coverage_cases():
    ref = [(0, 5, "A"), (5, 5, "B")]
    assert M.purity_coverage(ref, ref) == {"purity": 100.0, "coverage": 100.0}
    one = M.purity_coverage(ref, [(0, 10, "x")])
    assert one["purity"] == pytest.approx(50.0) and one["coverage"] == pytest.approx(100.0)
    split = M.purity_coverage(ref, [(0, 2, "x"), (2, 3, "y"), (5, 5, "z")])
    assert split["purity"] == pytest.approx(100.0) and split["coverage"] == pytest.approx(80.0)


@settings(max_examples=40, deadline=None)
@given(turns)
def test_full_purity_and_coverage_iff_same_partition(ref):
    ref = [(float(a), float(b), s) for a, b, s in ref]
    relabeled = [(a, b, {"A": "q", "B": "r", "C": "s", "D": "t"}[s]) for a, b, s in ref]
    pc = M.purity_coverage(ref, relabeled)
    assert pc["purity"] == pytest.approx(100.0) and pc["coverage"] == pytest.approx(100.0)


def test_aggregate_is_time_weighted():
    a = M.der_components([(0, 10, "A")], [(0, 5, "x")])
    b = M.der_components([(0, 30, "A")], [(0, 30, "x")])
    assert M.aggregate_der([a, b]).der == pytest.approx(12.5)
    with pytest.raises(ValueError):
        M.aggregate_der([])


def test_speaker_count_mae():
    assert M.speaker_count_mae([(3, 3), (4, 6), (5, 4)]) == 1.0
    with pytest.raises(ValueError):
        M.speaker_count_mae([])
