"""Second-speaker assignment in overlap regions.

The first pass gives every segment a parent cluster.  The second pass masks
same-parent pairs out of the k-NN graph, scores the remaining cross-cluster
edges and hands each overlapped segment the dominant cluster among its most
probable neighbors.
"""

from __future__ import annotations

import logging
from collections import Counter
from dataclasses import dataclass
from typing import Callable, Optional, Sequence, Union

import numpy as np

from .dataio import EmbeddingSequence, DiarizationHypothesis, OverlapRegion, segments_in_regions
from .gnn import ScorerModel, densities, edge_coefficient, node_features
from .hclust import LevelGraph
from .similarity import Edges, knn_edges
from .train import TrainConfig, TrainGraph, TrainGraphSet, loss_terms, run_epochs

log = logging.getLogger(__name__)

DEFAULT_K_PRIME = 30


@dataclass(frozen=True)
class OverlapAssignment:
    segment_index: int
    primary: str
    secondary: str


def label_ordinals(labels: Sequence[str]) -> dict:
    """Rank of each label by first occurrence, used as the final tie-breaker."""
    order = {}
    for lab in labels:
        order.setdefault(lab, len(order))
    return order


def dominant_label(neighbor_labels: Sequence[str], weights: Sequence[float], ordinal: dict) -> str:
    """Most frequent label; ties go to the larger summed weight, then the lower ordinal."""
    counts = Counter(neighbor_labels)
    mass = Counter()
    for lab, w in zip(neighbor_labels, weights):
        mass[lab] += float(w)
    return min(counts, key=lambda lab: (-counts[lab], -mass[lab], ordinal.get(lab, len(ordinal))))


def _single_level_graph(x: np.ndarray, raw: np.ndarray, sim, edges: Edges) -> LevelGraph:
    n = x.shape[0]
    singles = [np.array([i]) for i in range(n)]
    return LevelGraph(0, x, x, np.arange(n), singles, singles, raw, sim, edges)


def intra_cluster_mask(parents: Sequence, keep_intra: float, seed: int) -> np.ndarray:
    """Allowed-pair matrix: cross-cluster pairs plus a seeded random share of same-cluster pairs."""
    lab = np.asarray(list(parents), dtype=object)
    same = lab[:, None] == lab[None, :]
    keep = np.random.default_rng(seed).random(same.shape) < keep_intra
    return ~same | keep


def build_overlap_train_graph(seq: EmbeddingSequence, parent_labels: Sequence[str], scorer, k: int,
                              keep_intra: float = 0.1, seed: int = 0,
                              embeddings: Optional[np.ndarray] = None) -> TrainGraph:
    """Training graph whose positives point from a segment to clusters of its true second speaker."""
    parents = list(parent_labels)
    if len(set(parents)) < 2:
        raise ValueError(f"recording {seq.recording_id}: overlap graph needs at least two clusters")
    x = seq.embeddings if embeddings is None else np.asarray(embeddings, dtype=np.float64)
    fitted = scorer.fit(x)
    raw = fitted.raw(x)
    sim = fitted.unit(raw)
    allowed = intra_cluster_mask(parents, keep_intra, seed)
    edges = knn_edges(raw, k, allowed)
    second = np.asarray(seq.secondary_labels, dtype=object)
    par = np.asarray(parents, dtype=object)
    p = (par[edges.dst] == second[edges.src]).astype(np.float64)
    d = densities(edges, edge_coefficient(p), sim.values)
    return TrainGraph(_single_level_graph(x, raw, sim, edges), p, d)


def train_overlap(data: Sequence[EmbeddingSequence], init: ScorerModel,
                  config: TrainConfig = TrainConfig.overlap_defaults(), plda=None,
                  parent_labels: Optional[Sequence[Sequence[str]]] = None,
                  history: Optional[list] = None, on_epoch=None) -> ScorerModel:
    """Fine-tune an initialized scorer on overlap graphs (front-end kept fixed).

    Parents default to the ground-truth primary speakers.
    """
    if init is None:
        raise ValueError("overlap training needs an initial model")
    if not data:
        raise ValueError("training needs at least one labeled recording")
    scorer = config.make_scorer(plda)
    model = init.copy()
    sets = []
    for r, seq in enumerate(data):
        parents = parent_labels[r] if parent_labels is not None else seq.labels
        if any(lab is None for lab in parents):
            raise ValueError(f"recording {seq.recording_id}: missing parent labels")
        x = model.inference_embeddings(seq.embeddings)
        tg = build_overlap_train_graph(seq, parents, scorer, config.k_train, config.keep_intra,
                                       config.seed + r, embeddings=x)
        sets.append(TrainGraphSet([tg]))
    return run_epochs(model, lambda b, rot: loss_terms(sets[b], model, rotation=rot), len(sets), config,
                      {"gnn": config.lr_gnn, "frontend": 0.0}, history, on_epoch)


EdgeProbs = Callable[[np.ndarray, Edges], np.ndarray]


def assign_second_speaker(seq: EmbeddingSequence, hyp: DiarizationHypothesis,
                          regions: Sequence[OverlapRegion], model: Union[ScorerModel, EdgeProbs],
                          scorer, k: int = 30, k_prime: int = DEFAULT_K_PRIME) -> list[OverlapAssignment]:
    """Second speaker for every segment whose midpoint lies in an overlap region.

    ``model`` is a trained scorer or any callable ``(node_features, edges) -> p_hat``.
    """
    if k_prime > k:
        raise ValueError(f"k_prime={k_prime} must not exceed k={k}")
    if len(hyp.labels) != len(seq):
        raise ValueError("hypothesis does not cover every segment")
    parents = list(hyp.labels)
    if len(set(parents)) < 2:
        log.warning("recording %s: one predicted speaker, no second-speaker assignment", seq.recording_id)
        return []
    targets = segments_in_regions(seq, regions=regions)
    if not len(targets):
        return []
    if isinstance(model, ScorerModel):
        x = model.inference_embeddings(seq.embeddings)
        predict = model.predict
    else:
        x, predict = seq.embeddings, model
    fitted = scorer.fit(x)
    raw = fitted.raw(x)
    allowed = intra_cluster_mask(parents, 0.0, 0)
    edges = knn_edges(raw, k, allowed)
    p_hat = np.asarray(predict(node_features(x), edges), dtype=np.float64)
    ordinal = label_ordinals(parents)
    out = []
    for i in targets:
        lo, hi = edges.indptr[i], edges.indptr[i + 1]
        nbrs, probs = edges.dst[lo:hi], p_hat[lo:hi]
        order = np.lexsort((nbrs, -probs))[:k_prime]
        second = dominant_label([parents[j] for j in nbrs[order]], probs[order], ordinal)
        out.append(OverlapAssignment(int(i), parents[i], second))
    return out


def apply_assignments(hyp: DiarizationHypothesis, assignments: Sequence[OverlapAssignment]) -> DiarizationHypothesis:
    secondary = dict(hyp.secondary)
    for a in assignments:
        secondary[a.segment_index] = a.secondary
    return DiarizationHypothesis(hyp.recording_id, hyp.onsets, hyp.durations, list(hyp.labels), secondary)
