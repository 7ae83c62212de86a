import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from hgc import dataio
from hgc.dataio import (DiarizationHypothesis, FormatError, OverlapRegion, SyntheticSpec,
                        generate_synthetic)


def write(path, text):
    path.write_text(text)
    return path


def test_read_three_rows(tmp_path):
    p = write(tmp_path / "a.emb", "#recording_id=r dim=4\n"
              "0.0\t1.5\tA\t1 2 3 4\n0.75\t1.5\t-\t0 0 0 1\n1.5\t1.5\tB\t1e-3 2 3 4\n")
    seq = dataio.read_embeddings(p)
    assert (len(seq), seq.dim) == (3, 4)
    assert seq.labels == ["A", None, "B"]
    assert seq.embeddings[2, 0] == 1e-3


def test_dimension_mismatch_names_row(tmp_path):
    p = write(tmp_path / "a.emb", "#recording_id=r dim=4\n0\t1\tA\t1 2 3 4\n1\t1\tA\t1 2 3 4 5\n")
    with pytest.raises(FormatError, match=":3: dimension mismatch"):
        dataio.read_embeddings(p)


def test_empty_body_and_bad_header(tmp_path):
    with pytest.raises(FormatError, match="no segments"):
        dataio.read_embeddings(write(tmp_path / "a.emb", "#recording_id=r dim=4\n"))
    with pytest.raises(FormatError, match=":1:"):
        dataio.read_embeddings(write(tmp_path / "b.emb", "0\t1\tA\t1\n"))
    with pytest.raises(FormatError, match="onsets"):
        dataio.read_embeddings(write(tmp_path / "c.emb", "#recording_id=r dim=1\n1\t1\tA\t1\n0\t1\tA\t1\n"))


@settings(max_examples=25, deadline=None)
@given(st.integers(1, 4), st.integers(1, 30), st.integers(0, 10_000))
def test_embedding_round_trip(tmp_path_factory, spk, n, seed):
    seq, _ = generate_synthetic(SyntheticSpec(spk, 3, n, 0.1, 1.0, seed=seed))
    p = tmp_path_factory.mktemp("rt") / "x.emb"
    dataio.write_embeddings(seq, p)
    assert dataio.read_embeddings(p) == seq


def _hyp(onsets, durs, labels, secondary=None):
    return DiarizationHypothesis("rec", np.array(onsets, float), np.array(durs, float), labels, secondary or {})


def test_rttm_merge_rule(tmp_path):
    p = tmp_path / "h.rttm"
    dataio.write_rttm(_hyp([0.0, 0.75], [1.5, 1.5], ["spkA", "spkA"]), p)
    assert p.read_text() == "SPEAKER rec 1 0.000 2.250 <NA> <NA> spkA <NA> <NA>\n"


def test_rttm_secondary_emits_second_line(tmp_path):
    p = tmp_path / "h.rttm"
    dataio.write_rttm(_hyp([0.0], [1.5], ["spkA"], {0: "spkB"}), p)
    lines = p.read_text().splitlines()
    assert lines == ["SPEAKER rec 1 0.000 1.500 <NA> <NA> spkA <NA> <NA>",
                     "SPEAKER rec 1 0.000 1.500 <NA> <NA> spkB <NA> <NA>"]
    assert dataio.read_rttm(p) == {"rec": [(0.0, 1.5, "spkA"), (0.0, 1.5, "spkB")]}


def test_rttm_empty_hypothesis(tmp_path):
    p = tmp_path / "h.rttm"
    dataio.write_rttm(_hyp([], [], []), p)
    assert p.read_text() == ""


def test_effective_spans_split_at_midpoint():
    spans = dataio.effective_spans([0.0, 0.75, 1.5], [1.5, 1.5, 1.5])
    assert spans == [(0.0, 1.125), (1.125, 1.875), (1.875, 3.0)]


@settings(max_examples=40, deadline=None)
@given(st.lists(st.tuples(st.floats(0.05, 2.0), st.sampled_from("ABC")), min_size=1, max_size=25))
def test_turn_durations_sum_to_labeled_time(items):
    onsets, t = [], 0.0
    for gap, _ in items:
        onsets.append(t)
        t += gap
    durs = [1.5] * len(items)
    hyp = _hyp(onsets, durs, [lab for _, lab in items])
    spans = dataio.effective_spans(hyp.onsets, hyp.durations)
    covered = sum(b - a for a, b in dataio.merge_intervals(spans))
    assert sum(d for _, d, _ in hyp.turns()) == pytest.approx(covered, abs=1e-6)


def test_overlap_region_file_normalizes(tmp_path):
    p = write(tmp_path / "o.ovl", "r\t0.0\t1.0\nr\t1.0\t0.5\nr\t3.0\t1.0\n")
    regions = dataio.read_overlap_regions(p)
    assert regions == [OverlapRegion("r", 0.0, 1.5), OverlapRegion("r", 3.0, 1.0)]
    q = tmp_path / "o2.ovl"
    dataio.write_overlap_regions(regions, q)
    assert dataio.read_overlap_regions(q) == regions
    with pytest.raises(FormatError, match=":1:"):
        dataio.read_overlap_regions(write(tmp_path / "bad.ovl", "r 0 1\n"))


def test_synthetic_single_speaker():
    seq, regions = generate_synthetic(SyntheticSpec(1, 4, 50, 0.05, 1.0, overlap_fraction=0.0))
    assert set(seq.labels) == {"S00"} and regions == []


def test_synthetic_deterministic():
    spec = SyntheticSpec(3, 5, 120, 0.05, 1.0, overlap_fraction=0.1, seed=7)
    a, ra = generate_synthetic(spec)
    b, rb = generate_synthetic(spec)
    assert a == b and ra == rb
    assert np.array_equal(a.embeddings, b.embeddings)


def test_synthetic_nearest_centroid_recovery():
    seq, _ = generate_synthetic(SyntheticSpec(3, 8, 200, 0.05, 1.0, seed=3))
    x, lab = seq.embeddings, np.array(seq.labels)
    names = sorted(set(lab))
    cents = np.stack([x[lab == n].mean(axis=0) for n in names])
    pred = np.array(names)[np.argmin(((x[:, None] - cents[None]) ** 2).sum(-1), axis=1)]
    assert np.mean(pred == lab) >= 0.99


@pytest.mark.parametrize("f", [0.05, 0.1, 0.15, 0.3])
def test_synthetic_overlap_fraction(f):
    seq, regions = generate_synthetic(SyntheticSpec(4, 4, 600, 0.05, 1.0, overlap_fraction=f, seed=11))
    overlapped = sum(lab is not None for lab in seq.secondary_labels)
    assert abs(overlapped / len(seq) - f) <= 0.02
    assert len(dataio.segments_in_regions(seq, regions=regions)) == overlapped
    for s in seq.segments:
        assert s.secondary_label != s.speaker_label


def test_synthetic_first_turns_cover_all_speakers():
    for seed in range(10):
        seq, _ = generate_synthetic(SyntheticSpec(5, 2, 300, 0.05, 1.0, seed=seed))
        assert len(set(seq.labels)) == 5


def test_attach_secondary_from_reference():
    seq, _ = generate_synthetic(SyntheticSpec(3, 4, 200, 0.05, 1.0, overlap_fraction=0.15, seed=5))
    turns = dataio.reference_hypothesis(seq).turns()
    bare = dataio.EmbeddingSequence(seq.recording_id, [
        dataio.SegmentRecord(s.recording_id, s.onset, s.duration, s.embedding, s.speaker_label)
        for s in seq.segments], seq.dim)
    assert dataio.attach_secondary_labels(bare, turns).secondary_labels == seq.secondary_labels


def test_spec_validation():
    with pytest.raises(ValueError):
        SyntheticSpec(0, 4, 10, 0.1, 1.0)
    with pytest.raises(ValueError):
        SyntheticSpec(2, 4, 10, 0.1, 1.0, overlap_fraction=1.0)
