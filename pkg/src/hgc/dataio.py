"""Embedding, RTTM and overlap-region file I/O plus a synthetic conversation generator."""

from __future__ import annotations

import math
from collections import defaultdict
from dataclasses import dataclass, field
from functools import cached_property
from pathlib import Path
from typing import Optional

import numpy as np

SEGMENT_DURATION = 1.5
SEGMENT_SHIFT = 0.75
MERGE_GAP = 1e-6


class FormatError(ValueError):
    """Malformed input file; the message names the offending line."""


@dataclass(frozen=True)
class SegmentRecord:
    recording_id: str
    onset: float
    duration: float
    embedding: np.ndarray
    speaker_label: Optional[str] = None
    # ground-truth second speaker of an overlapped segment (synthetic data only)
    secondary_label: Optional[str] = None

    @property
    def offset(self) -> float:
        return self.onset + self.duration

    @property
    def midpoint(self) -> float:
        return self.onset + 0.5 * self.duration


@dataclass
class EmbeddingSequence:
    recording_id: str
    segments: list[SegmentRecord]
    dim: int

    def __post_init__(self):
        if not self.segments:
            raise FormatError("no segments")
        if self.dim < 1:
            raise ValueError("dim must be positive")
        last = -math.inf
        for i, seg in enumerate(self.segments):
            if seg.recording_id != self.recording_id:
                raise ValueError(f"segment {i} belongs to {seg.recording_id!r}, expected {self.recording_id!r}")
            if seg.embedding.shape != (self.dim,):
                raise ValueError(f"segment {i} has dimension {seg.embedding.shape}, expected {self.dim}")
            if not seg.duration > 0:
                raise ValueError(f"segment {i} has non-positive duration {seg.duration}")
            if seg.onset < 0 or seg.onset < last:
                raise ValueError(f"segment {i} onset {seg.onset} breaks ordering")
            last = seg.onset

    def __len__(self):
        return len(self.segments)

    @cached_property
    def embeddings(self) -> np.ndarray:
        return np.stack([s.embedding for s in self.segments]).astype(np.float64)

    @property
    def onsets(self) -> np.ndarray:
        return np.array([s.onset for s in self.segments])

    @property
    def durations(self) -> np.ndarray:
        return np.array([s.duration for s in self.segments])

    @property
    def labels(self) -> list[Optional[str]]:
        return [s.speaker_label for s in self.segments]

    @property
    def secondary_labels(self) -> list[Optional[str]]:
        return [s.secondary_label for s in self.segments]

    @property
    def is_labeled(self) -> bool:
        return all(lab is not None for lab in self.labels)

    def with_embeddings(self, matrix: np.ndarray) -> "EmbeddingSequence":
        """Copy with the embedding matrix replaced (timing and labels kept)."""
        matrix = np.asarray(matrix, dtype=np.float64)
        segs = [SegmentRecord(s.recording_id, s.onset, s.duration, matrix[i].copy(),
                              s.speaker_label, s.secondary_label)
                for i, s in enumerate(self.segments)]
        return EmbeddingSequence(self.recording_id, segs, matrix.shape[1])

    def __eq__(self, other):
        if not isinstance(other, EmbeddingSequence):
            return NotImplemented
        return (self.recording_id == other.recording_id and self.dim == other.dim
                and len(self) == len(other)
                and all(a.onset == b.onset and a.duration == b.duration
                        and a.speaker_label == b.speaker_label
                        and np.array_equal(a.embedding, b.embedding)
                        for a, b in zip(self.segments, other.segments)))


@dataclass(frozen=True)
class OverlapRegion:
    recording_id: str
    onset: float
    duration: float

    @property
    def offset(self) -> float:
        return self.onset + self.duration

    def contains(self, t: float) -> bool:
        return self.onset <= t <= self.offset


@dataclass
class DiarizationHypothesis:
    """Per-segment speaker labels; ``secondary`` maps segment index to a second speaker."""

    recording_id: str
    onsets: np.ndarray
    durations: np.ndarray
    labels: list[str]
    secondary: dict[int, str] = field(default_factory=dict)

    @property
    def num_speakers(self) -> int:
        return len(set(self.labels))

    def turns(self) -> list[tuple[float, float, str]]:
        return hypothesis_turns(self)


@dataclass(frozen=True)
class SyntheticSpec:
    num_speakers: int
    dim: int
    segments_per_recording: int
    within_class_std: float
    between_class_std: float
    overlap_fraction: float = 0.0
    turn_length_mean: float = 8.0
    seed: int = 0
    recording_id: Optional[str] = None
    segment_duration: float = SEGMENT_DURATION
    segment_shift: float = SEGMENT_SHIFT

    def __post_init__(self):
        if self.num_speakers < 1:
            raise ValueError("num_speakers must be >= 1")
        if self.dim < 1 or self.segments_per_recording < 1:
            raise ValueError("dim and segments_per_recording must be >= 1")
        if not (self.within_class_std > 0 and self.between_class_std > 0):
            raise ValueError("class standard deviations must be positive")
        if not 0 <= self.overlap_fraction < 1:
            raise ValueError("overlap_fraction must lie in [0, 1)")
        if not self.turn_length_mean > 0:
            raise ValueError("turn_length_mean must be positive")


# ---------------------------------------------------------------------------
# embedding files
# ---------------------------------------------------------------------------

def _parse_header(line: str, path) -> tuple[str, int]:
    if not line.startswith("#"):
        raise FormatError(f"{path}:1: missing '#recording_id=<id> dim=<D>' header")
    fields = {}
    for tok in line[1:].split():
        key, sep, val = tok.partition("=")
        if not sep:
            raise FormatError(f"{path}:1: malformed header token {tok!r}")
        fields[key] = val
    try:
        rec, dim = fields["recording_id"], int(fields["dim"])
    except (KeyError, ValueError) as exc:
        raise FormatError(f"{path}:1: malformed header ({exc})") from None
    if dim < 1:
        raise FormatError(f"{path}:1: dim must be positive")
    return rec, dim


def read_embeddings(path) -> EmbeddingSequence:
    lines = Path(path).read_text().splitlines()
    if not lines:
        raise FormatError(f"{path}:1: empty file, no segments")
    rec, dim = _parse_header(lines[0], path)
    segs = []
    for lineno, line in enumerate(lines[1:], start=2):
        if not line.strip():
            continue
        parts = line.split("\t")
        if len(parts) != 4:
            raise FormatError(f"{path}:{lineno}: expected 4 tab-separated fields, got {len(parts)}")
        try:
            onset, duration = float(parts[0]), float(parts[1])
            vec = np.array([float(v) for v in parts[3].split()], dtype=np.float64)
        except ValueError as exc:
            raise FormatError(f"{path}:{lineno}: {exc}") from None
        if vec.shape[0] != dim:
            raise FormatError(f"{path}:{lineno}: dimension mismatch, row has {vec.shape[0]} values, header says {dim}")
        if not duration > 0:
            raise FormatError(f"{path}:{lineno}: duration must be positive")
        if segs and onset < segs[-1].onset:
            raise FormatError(f"{path}:{lineno}: onsets must be non-decreasing")
        label = parts[2].strip()
        segs.append(SegmentRecord(rec, onset, duration, vec, None if label == "-" else label))
    if not segs:
        raise FormatError(f"{path}:2: no segments")
    return EmbeddingSequence(rec, segs, dim)


def write_embeddings(seq: EmbeddingSequence, path) -> None:
    out = [f"#recording_id={seq.recording_id} dim={seq.dim}"]
    for s in seq.segments:
        vec = " ".join(repr(float(v)) for v in s.embedding)
        out.append(f"{float(s.onset)!r}\t{float(s.duration)!r}\t{s.speaker_label or '-'}\t{vec}")
    Path(path).write_text("\n".join(out) + "\n")


# ---------------------------------------------------------------------------
# RTTM
# ---------------------------------------------------------------------------

def effective_spans(onsets, durations) -> list[tuple[float, float]]:
    """Segment spans with overlaps between consecutive segments split at their midpoint."""
    onsets = np.asarray(onsets, dtype=np.float64)
    ends = onsets + np.asarray(durations, dtype=np.float64)
    n = len(onsets)
    spans = []
    for i in range(n):
        start, stop = onsets[i], ends[i]
        if i > 0 and onsets[i] < ends[i - 1]:
            start = max(start, 0.5 * (onsets[i] + ends[i - 1]))
        if i + 1 < n and onsets[i + 1] < ends[i]:
            stop = min(stop, 0.5 * (onsets[i + 1] + ends[i]))
        spans.append((float(start), float(max(start, stop))))
    return spans


def merge_intervals(intervals, gap: float = MERGE_GAP) -> list[tuple[float, float]]:
    merged = []
    for start, stop in sorted(intervals):
        if stop <= start:
            continue
        if merged and start <= merged[-1][1] + gap:
            merged[-1] = (merged[-1][0], max(merged[-1][1], stop))
        else:
            merged.append((start, stop))
    return merged


def hypothesis_turns(hyp: DiarizationHypothesis) -> list[tuple[float, float, str]]:
    """Speaker turns ``(onset, duration, speaker)``; one speaker's touching spans are merged."""
    spans = effective_spans(hyp.onsets, hyp.durations)
    per_speaker = defaultdict(list)
    for i, (span, lab) in enumerate(zip(spans, hyp.labels)):
        per_speaker[lab].append(span)
        if i in hyp.secondary:
            per_speaker[hyp.secondary[i]].append(span)
    turns = []
    for spk, ivs in per_speaker.items():
        turns.extend((a, b - a, spk) for a, b in merge_intervals(ivs))
    turns.sort(key=lambda t: (t[0], t[2]))
    return turns


def format_rttm(recording_id: str, turns) -> str:
    return "".join(f"SPEAKER {recording_id} 1 {on:.3f} {dur:.3f} <NA> <NA> {spk} <NA> <NA>\n"
                   for on, dur, spk in turns)


def write_rttm(hyp: DiarizationHypothesis, path) -> None:
    Path(path).write_text(format_rttm(hyp.recording_id, hypothesis_turns(hyp)))


def read_rttm(path) -> dict[str, list[tuple[float, float, str]]]:
    turns = defaultdict(list)
    for lineno, line in enumerate(Path(path).read_text().splitlines(), start=1):
        if not line.strip() or line.startswith("#"):
            continue
        parts = line.split()
        if len(parts) < 8 or parts[0] != "SPEAKER":
            raise FormatError(f"{path}:{lineno}: not an RTTM SPEAKER line")
        try:
            onset, dur = float(parts[3]), float(parts[4])
        except ValueError as exc:
            raise FormatError(f"{path}:{lineno}: {exc}") from None
        if dur > 0:
            turns[parts[1]].append((onset, dur, parts[7]))
    return dict(turns)


# ---------------------------------------------------------------------------
# overlap regions
# ---------------------------------------------------------------------------

def normalize_regions(regions: list[OverlapRegion]) -> list[OverlapRegion]:
    by_rec = defaultdict(list)
    for r in regions:
        by_rec[r.recording_id].append((r.onset, r.offset))
    out = []
    for rec in sorted(by_rec):
        out.extend(OverlapRegion(rec, a, b - a) for a, b in merge_intervals(by_rec[rec]))
    return out


def read_overlap_regions(path) -> list[OverlapRegion]:
    regions = []
    for lineno, line in enumerate(Path(path).read_text().splitlines(), start=1):
        if not line.strip():
            continue
        parts = line.split("\t")
        if len(parts) != 3:
            raise FormatError(f"{path}:{lineno}: expected <rec><TAB><onset><TAB><duration>")
        try:
            onset, dur = float(parts[1]), float(parts[2])
        except ValueError as exc:
            raise FormatError(f"{path}:{lineno}: {exc}") from None
        if not dur > 0:
            raise FormatError(f"{path}:{lineno}: duration must be positive")
        regions.append(OverlapRegion(parts[0], onset, dur))
    return normalize_regions(regions)


def write_overlap_regions(regions, path) -> None:
    Path(path).write_text("".join(f"{r.recording_id}\t{r.onset:.6f}\t{r.duration:.6f}\n"
                                  for r in normalize_regions(list(regions))))


# ---------------------------------------------------------------------------
# synthetic data
# ---------------------------------------------------------------------------

def _turn_sequence(rng, n: int, n_spk: int, mean_len: float) -> np.ndarray:
    # geometric run lengths; the first n_spk turns visit every speaker once
    labels = np.empty(n, dtype=np.int64)
    order = list(rng.permutation(n_spk))
    p = min(1.0, 1.0 / mean_len)
    pos, cur = 0, None
    while pos < n:
        if order:
            cur = int(order.pop(0))
        elif n_spk > 1:
            others = [s for s in range(n_spk) if s != cur]
            cur = int(others[rng.integers(len(others))])
        else:
            cur = 0
        run = int(rng.geometric(p))
        labels[pos:pos + run] = cur
        pos += run
    return labels


def speaker_name(index: int) -> str:
    return f"S{index:02d}"


def generate_synthetic(spec: SyntheticSpec) -> tuple[EmbeddingSequence, list[OverlapRegion]]:
    """Labeled conversation of Gaussian speaker clusters with optional two-speaker overlaps."""
    rng = np.random.default_rng(spec.seed)
    rec = spec.recording_id or f"synth{spec.seed}"
    n, k = spec.segments_per_recording, spec.num_speakers
    centroids = rng.normal(0.0, spec.between_class_std, size=(k, spec.dim))
    spk = _turn_sequence(rng, n, k, spec.turn_length_mean)
    noise = rng.normal(0.0, spec.within_class_std, size=(n, spec.dim))
    emb = centroids[spk] + noise

    second = np.full(n, -1, dtype=np.int64)
    n_ovl = int(round(spec.overlap_fraction * n)) if k > 1 else 0
    if n_ovl:
        chosen = np.sort(rng.choice(n, size=n_ovl, replace=False))
        extra = rng.normal(0.0, spec.within_class_std, size=(n_ovl, spec.dim))
        for row, i in enumerate(chosen):
            others = [s for s in range(k) if s != spk[i]]
            b = others[rng.integers(len(others))]
            second[i] = b
            emb[i] = 0.5 * (emb[i] + centroids[b] + extra[row])

    onsets = np.arange(n) * spec.segment_shift
    segs = [SegmentRecord(rec, float(onsets[i]), float(spec.segment_duration), emb[i],
                          speaker_name(spk[i]),
                          speaker_name(second[i]) if second[i] >= 0 else None)
            for i in range(n)]
    seq = EmbeddingSequence(rec, segs, spec.dim)
    spans = effective_spans(onsets, np.full(n, spec.segment_duration))
    regions = normalize_regions([OverlapRegion(rec, spans[i][0], spans[i][1] - spans[i][0])
                                 for i in np.flatnonzero(second >= 0)])
    return seq, regions


def reference_hypothesis(seq: EmbeddingSequence) -> DiarizationHypothesis:
    """Ground-truth labels of a labeled sequence, including second speakers when known."""
    if not seq.is_labeled:
        raise ValueError(f"recording {seq.recording_id} has unlabeled segments")
    secondary = {i: s.secondary_label for i, s in enumerate(seq.segments) if s.secondary_label}
    return DiarizationHypothesis(seq.recording_id, seq.onsets, seq.durations,
                                 list(seq.labels), secondary)


def segments_in_regions(seq_or_onsets, durations=None, regions=()) -> np.ndarray:
    """Indices of segments whose midpoint falls inside any region."""
    if isinstance(seq_or_onsets, EmbeddingSequence):
        mids = seq_or_onsets.onsets + 0.5 * seq_or_onsets.durations
        regions = [r for r in regions if r.recording_id == seq_or_onsets.recording_id]
    else:
        mids = np.asarray(seq_or_onsets) + 0.5 * np.asarray(durations)
    hit = np.zeros(len(mids), dtype=bool)
    for r in regions:
        hit |= (mids >= r.onset) & (mids <= r.offset)
    return np.flatnonzero(hit)


def attach_secondary_labels(seq: EmbeddingSequence, turns) -> EmbeddingSequence:
    """Copy of ``seq`` whose segments carry the second reference speaker active at the
    midpoint of their effective span (the lowest name when several are active)."""
    spans = effective_spans(seq.onsets, seq.durations)
    segs = []
    for seg, (a, b) in zip(seq.segments, spans):
        mid = 0.5 * (a + b)
        active = sorted({spk for on, dur, spk in turns if on <= mid < on + dur} - {seg.speaker_label})
        segs.append(SegmentRecord(seg.recording_id, seg.onset, seg.duration, seg.embedding,
                                  seg.speaker_label, active[0] if active else None))
    return EmbeddingSequence(seq.recording_id, segs, seq.dim)
