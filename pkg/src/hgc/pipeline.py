"""Per-recording inference glue shared by the command line and the experiment helpers."""

from __future__ import annotations

import logging
from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np

from .baselines import ahc, baseline_overlap, spectral
from .dataio import (DiarizationHypothesis, EmbeddingSequence, OverlapRegion, hypothesis_turns,
                     reference_hypothesis, segments_in_regions)
from .gnn import ScorerModel
from .hclust import (DEFAULT_K, DEFAULT_MAX_LEVELS, DEFAULT_TAU, GnnEdgeScorer, SimilarityEdgeScorer,
                     labels_to_hypothesis, sharc_levels)
from .metrics import DerResult, der_components, purity_coverage
from .overlap import DEFAULT_K_PRIME, apply_assignments, assign_second_speaker
from .similarity import PldaModel, PldaScorer, sigmoid_transform

log = logging.getLogger(__name__)

METHODS = ("ahc", "sc", "sharc")


@dataclass(frozen=True)
class InferenceConfig:
    method: str = "sharc"
    k: int = DEFAULT_K
    tau: float = DEFAULT_TAU
    max_levels: int = DEFAULT_MAX_LEVELS
    plda_alpha: float = 1.0         # sigmoid temperature of the SHARC similarity
    sc_alpha: float = 0.1           # sigmoid temperature before spectral clustering
    ahc_threshold: Optional[float] = None
    num_speakers: Optional[int] = None
    k_prime: int = DEFAULT_K_PRIME
    seed: int = 0

    def __post_init__(self):
        if self.method not in METHODS:
            raise ValueError(f"unknown method {self.method!r}, expected one of {METHODS}")
        if self.method == "ahc" and self.ahc_threshold is None and self.num_speakers is None:
            raise ValueError("ahc needs a stopping threshold or a speaker count")


def _raw_plda(seq: EmbeddingSequence, plda: PldaModel, x: Optional[np.ndarray] = None):
    x = seq.embeddings if x is None else x
    fitted = PldaScorer(plda).fit(x)
    return fitted.raw(x)


def diarize(seq: EmbeddingSequence, plda: PldaModel, config: InferenceConfig,
            model: Optional[ScorerModel] = None,
            regions: Optional[Sequence[OverlapRegion]] = None) -> DiarizationHypothesis:
    """Cluster one recording and, when overlap regions are given, add second speakers."""
    if len(seq) == 0:
        raise ValueError(f"recording {seq.recording_id} has no segments")
    if config.method == "sharc":
        edge_scorer = GnnEdgeScorer(model) if model is not None else SimilarityEdgeScorer()
        scorer = PldaScorer(plda, config.plda_alpha)
        trace = sharc_levels(seq.embeddings, scorer, edge_scorer, config.k, config.tau, config.max_levels)
        hyp = labels_to_hypothesis(seq, trace.segment_clusters)
        if regions:
            source = model if model is not None else _similarity_probs(trace)
            hyp = apply_assignments(hyp, assign_second_speaker(
                seq, hyp, regions, source, scorer, k=max(config.k, config.k_prime), k_prime=config.k_prime))
        return hyp
    raw = _raw_plda(seq, plda)
    if config.method == "ahc":
        labels = ahc(raw, config.ahc_threshold if config.ahc_threshold is not None else -np.inf,
                     config.num_speakers)
    else:
        labels = spectral(sigmoid_transform(raw, config.sc_alpha).values, config.num_speakers, seed=config.seed)
    hyp = labels_to_hypothesis(seq, labels)
    if regions:
        idx = segments_in_regions(seq, regions=regions)
        hyp = apply_assignments(hyp, baseline_overlap(raw, hyp.labels, idx, config.k_prime))
    return hyp


def _similarity_probs(trace):
    """Untrained overlap fallback: edge probability = level-0 similarity."""
    sim = trace.levels[0].similarity.values

    def probs(features, edges):
        return sim[edges.src, edges.dst]
    return probs


@dataclass(frozen=True)
class RecordingReport:
    recording_id: str
    result: DerResult
    true_speakers: int
    predicted_speakers: int
    purity: float
    coverage: float

    def row(self) -> dict:
        d = self.result.as_dict()
        return {"recording": self.recording_id, "der": d["der"], "fa": d["fa"], "miss": d["miss"],
                "confusion": d["confusion"], "true_speakers": self.true_speakers,
                "predicted_speakers": self.predicted_speakers, "purity": self.purity, "coverage": self.coverage}


def evaluate(ref_turns, hyp_turns, recording_id: str, collar: float = 0.0,
             score_overlap: bool = True) -> RecordingReport:
    result = der_components(ref_turns, hyp_turns, collar, score_overlap)
    pc = purity_coverage(ref_turns, hyp_turns)
    return RecordingReport(recording_id, result, len({t[2] for t in ref_turns}),
                           len({t[2] for t in hyp_turns}), pc["purity"], pc["coverage"])


def evaluate_sequence(seq: EmbeddingSequence, hyp: DiarizationHypothesis, collar: float = 0.0,
                      score_overlap: bool = True) -> RecordingReport:
    """Score a hypothesis against the labels carried by the sequence itself."""
    return evaluate(hypothesis_turns(reference_hypothesis(seq)), hypothesis_turns(hyp),
                    seq.recording_id, collar, score_overlap)
