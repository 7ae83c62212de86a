"""Diarization error rate, cluster purity/coverage and speaker-count error."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Iterable, Sequence

import numpy as np
from scipy.optimize import linear_sum_assignment

SNAP = 1e-9

Turn = tuple  # (onset, duration, speaker)


@dataclass(frozen=True)
class TimedAnnotation:
    turns: tuple

    def __init__(self, turns: Iterable[Turn]):
        clean = []
        for onset, dur, spk in turns:
            if not dur > 0:
                raise ValueError(f"turn of speaker {spk!r} at {onset} has non-positive duration {dur}")
            clean.append((float(onset), float(dur), str(spk)))
        object.__setattr__(self, "turns", tuple(clean))

    @property
    def speakers(self) -> list[str]:
        return sorted({t[2] for t in self.turns})

    def boundaries(self) -> set:
        out = set()
        for onset, dur, _ in self.turns:
            out.add(_snap(onset))
            out.add(_snap(onset + dur))
        return out

    def speakers_at(self, t: float) -> frozenset:
        return frozenset(s for onset, dur, s in self.turns if onset <= t < onset + dur)


def _snap(t: float) -> float:
    return round(t / SNAP) * SNAP


def _as_annotation(x) -> TimedAnnotation:
    return x if isinstance(x, TimedAnnotation) else TimedAnnotation(x)


def elementary_intervals(ref: TimedAnnotation, hyp: TimedAnnotation, extra=()) -> list:
    """``(start, end, ref speakers, hyp speakers)`` for every piece between consecutive boundaries."""
    cuts = sorted(ref.boundaries() | hyp.boundaries() | {_snap(t) for t in extra})
    out = []
    for a, b in zip(cuts[:-1], cuts[1:]):
        if b - a <= SNAP / 2:
            continue
        mid = 0.5 * (a + b)
        out.append((a, b, ref.speakers_at(mid), hyp.speakers_at(mid)))
    return out


def optimal_mapping(overlap: np.ndarray) -> dict[int, int]:
    """One-to-one hyp -> ref assignment maximizing total overlap (rows = ref, cols = hyp)."""
    overlap = np.asarray(overlap, dtype=np.float64)
    if overlap.size == 0:
        return {}
    rows, cols = linear_sum_assignment(overlap, maximize=True)
    return {int(c): int(r) for r, c in zip(rows, cols)}


@dataclass(frozen=True)
class DerResult:
    scored: float       # reference speech seconds (with overlap multiplicity)
    fa: float
    miss: float
    confusion: float

    def _pct(self, x):
        return 100.0 * x / self.scored

    @property
    def fa_pct(self):
        return self._pct(self.fa)

    @property
    def miss_pct(self):
        return self._pct(self.miss)

    @property
    def confusion_pct(self):
        return self._pct(self.confusion)

    @property
    def der(self) -> float:
        return self._pct(self.fa + self.miss + self.confusion)

    def as_dict(self) -> dict:
        return {"der": self.der, "fa": self.fa_pct, "miss": self.miss_pct, "confusion": self.confusion_pct}


def _scored_intervals(ref, hyp, collar, score_overlap):
    ref_bounds = sorted(ref.boundaries())
    extra = [b + s * collar for b in ref_bounds for s in (-1, 1)] if collar > 0 else []
    out = []
    for a, b, r, h in elementary_intervals(ref, hyp, extra):
        mid = 0.5 * (a + b)
        if collar > 0 and any(abs(mid - x) < collar for x in ref_bounds):
            continue
        if not score_overlap and len(r) > 1:
            continue
        out.append((b - a, r, h))
    return out


def der_components(ref, hyp, collar: float = 0.0, score_overlap: bool = True) -> DerResult:
    """Error seconds of one recording; see :func:`der` for percentages."""
    if collar < 0:
        raise ValueError("collar must be >= 0")
    ref, hyp = _as_annotation(ref), _as_annotation(hyp)
    pieces = _scored_intervals(ref, hyp, collar, score_overlap)
    scored = sum(dur * len(r) for dur, r, _ in pieces)
    if scored <= 0:
        raise ValueError("reference has no scored speech")
    ref_spk, hyp_spk = ref.speakers, hyp.speakers
    ri = {s: i for i, s in enumerate(ref_spk)}
    hi = {s: i for i, s in enumerate(hyp_spk)}
    overlap = np.zeros((len(ref_spk), len(hyp_spk)))
    for dur, r, h in pieces:
        for a in r:
            for b in h:
                overlap[ri[a], hi[b]] += dur
    mapping = optimal_mapping(overlap)
    fa = miss = conf = 0.0
    for dur, r, h in pieces:
        n_ref, n_hyp = len(r), len(h)
        mapped = {mapping.get(hi[b]) for b in h}
        correct = sum(1 for a in r if ri[a] in mapped)
        miss += dur * max(0, n_ref - n_hyp)
        fa += dur * max(0, n_hyp - n_ref)
        conf += dur * (min(n_ref, n_hyp) - correct)
    return DerResult(scored, fa, miss, conf)


def der(ref, hyp, collar: float = 0.0, score_overlap: bool = True) -> dict:
    """``{der, fa, miss, confusion}`` in percent of scored reference speech."""
    return der_components(ref, hyp, collar, score_overlap).as_dict()


def aggregate_der(results: Sequence[DerResult]) -> DerResult:
    """Time-weighted total over recordings."""
    if not results:
        raise ValueError("nothing to aggregate")
    return DerResult(*(sum(getattr(r, f) for r in results) for f in ("scored", "fa", "miss", "confusion")))


def purity_coverage(ref, hyp) -> dict:
    """Duration-weighted purity of hypothesis clusters and coverage of reference speakers, in percent."""
    ref, hyp = _as_annotation(ref), _as_annotation(hyp)
    if not ref.turns or not hyp.turns:
        raise ValueError("purity/coverage needs non-empty annotations")
    ref_spk, hyp_spk = ref.speakers, hyp.speakers
    ri = {s: i for i, s in enumerate(ref_spk)}
    hi = {s: i for i, s in enumerate(hyp_spk)}
    overlap = np.zeros((len(ref_spk), len(hyp_spk)))
    ref_dur = np.zeros(len(ref_spk))
    hyp_dur = np.zeros(len(hyp_spk))
    for a, b, r, h in elementary_intervals(ref, hyp):
        dur = b - a
        for s in r:
            ref_dur[ri[s]] += dur
        for s in h:
            hyp_dur[hi[s]] += dur
        for s in r:
            for t in h:
                overlap[ri[s], hi[t]] += dur
    purity = 100.0 * overlap.max(axis=0).sum() / hyp_dur.sum()
    coverage = 100.0 * overlap.max(axis=1).sum() / ref_dur.sum()
    return {"purity": purity, "coverage": coverage}


def speaker_count_mae(pairs: Sequence[tuple]) -> float:
    if not pairs:
        raise ValueError("speaker-count MAE needs at least one pair")
    return float(np.mean([abs(int(t) - int(p)) for t, p in pairs]))
