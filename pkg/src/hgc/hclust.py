"""Density-ordered hierarchical merging driven by edge probabilities.

Each level holds a k-NN graph over cluster nodes.  Every node links to its most
confident neighbor among those with no lower density and probability at least
``tau``; connected components of those links become the next level's nodes.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from .dataio import DiarizationHypothesis, EmbeddingSequence
from .gnn import ScorerModel, densities, edge_coefficient, ground_truth_edges, node_features
from .similarity import Edges, ScoreMatrix, knn_edges

log = logging.getLogger(__name__)

DEFAULT_K = 30
DEFAULT_TAU = 0.8
DEFAULT_MAX_LEVELS = 15


@dataclass
class LevelGraph:
    level: int
    identity: np.ndarray            # N x D identity features
    average: np.ndarray             # N x D average features
    identity_index: np.ndarray      # level-0 segment carrying each identity feature
    average_sets: list              # level-0 indices averaged into each average feature
    member_map: list                # level-0 segments represented by each node
    raw_scores: np.ndarray
    similarity: ScoreMatrix
    edges: Edges
    p_hat: Optional[np.ndarray] = None
    densities: Optional[np.ndarray] = None

    @property
    def num_nodes(self) -> int:
        return self.identity.shape[0]

    @property
    def e_hat(self) -> np.ndarray:
        return edge_coefficient(self.p_hat)

    @property
    def features(self) -> np.ndarray:
        return node_features(self.identity, self.average)


@dataclass
class ClusterSet:
    clusters: list

    @property
    def n_c(self) -> int:
        return len(self.clusters)

    def labels(self, n: int) -> np.ndarray:
        out = np.empty(n, dtype=np.int64)
        for c, members in enumerate(self.clusters):
            out[list(members)] = c
        return out


# ---------------------------------------------------------------------------
# edge-probability sources
# ---------------------------------------------------------------------------

class EdgeScorer:
    """Produces ``p_hat`` for every edge of a level graph."""

    def prepare(self, embeddings: np.ndarray) -> np.ndarray:
        return embeddings

    def __call__(self, graph: LevelGraph) -> np.ndarray:
        raise NotImplementedError


class GnnEdgeScorer(EdgeScorer):
    def __init__(self, model: ScorerModel, refine: bool = True):
        self.model = model
        self.refine = refine

    def prepare(self, embeddings):
        if embeddings.shape[1] != self.model.dim:
            raise ValueError(f"embedding dimension {embeddings.shape[1]} does not match model dimension {self.model.dim}")
        return self.model.inference_embeddings(embeddings) if self.refine else embeddings

    def __call__(self, graph):
        return self.model.predict(graph.features, graph.edges)


class SimilarityEdgeScorer(EdgeScorer):
    """Untrained variant: the sigmoid-mapped similarity doubles as edge probability."""

    def __call__(self, graph):
        return graph.similarity.values[graph.edges.src, graph.edges.dst]


class OracleEdgeScorer(EdgeScorer):
    """``p_hat = 1`` iff the identity segments of both nodes share a ground-truth label."""

    def __init__(self, labels: Sequence):
        self.labels = list(labels)

    def __call__(self, graph):
        node_labels = [self.labels[i] for i in graph.identity_index]
        return ground_truth_edges(graph.edges, node_labels)


# ---------------------------------------------------------------------------
# graph construction
# ---------------------------------------------------------------------------

def build_level_graph(level, identity, average, identity_index, average_sets, member_map,
                      fitted_scorer, k: int) -> LevelGraph:
    raw = fitted_scorer.raw(identity)
    sim = fitted_scorer.unit(raw)
    n = identity.shape[0]
    edges = knn_edges(raw, max(1, min(k, n - 1))) if n > 1 else Edges.from_lists([[]])
    return LevelGraph(level, identity, average, np.asarray(identity_index), list(average_sets),
                      list(member_map), raw, sim, edges)


def initial_graph(embeddings: np.ndarray, fitted_scorer, k: int) -> LevelGraph:
    n = embeddings.shape[0]
    idx = [np.array([i]) for i in range(n)]
    return build_level_graph(0, embeddings, embeddings, np.arange(n), idx, idx, fitted_scorer, k)


def score_graph(graph: LevelGraph, edge_scorer: EdgeScorer) -> LevelGraph:
    """Attach edge probabilities and this level's pseudo densities."""
    p = np.asarray(edge_scorer(graph), dtype=np.float64).reshape(-1)
    if p.shape[0] != len(graph.edges):
        raise ValueError(f"edge scorer returned {p.shape[0]} values for {len(graph.edges)} edges")
    graph.p_hat = p
    graph.densities = densities(graph.edges, edge_coefficient(p), graph.similarity.values)
    return graph


def candidate_edge_set(graph: LevelGraph, i: int, tau: float) -> np.ndarray:
    lo, hi = graph.edges.indptr[i], graph.edges.indptr[i + 1]
    nbrs = graph.edges.dst[lo:hi]
    keep = (graph.densities[i] <= graph.densities[nbrs]) & (graph.p_hat[lo:hi] >= tau)
    return nbrs[keep]


def link_pass(graph: LevelGraph, tau: float) -> list[tuple[int, int]]:
    """One link per node with a non-empty candidate set, to its highest edge coefficient."""
    links = []
    e_hat = graph.e_hat
    d = graph.densities
    for i in range(graph.num_nodes):
        lo, hi = graph.edges.indptr[i], graph.edges.indptr[i + 1]
        nbrs = graph.edges.dst[lo:hi]
        keep = (d[i] <= d[nbrs]) & (graph.p_hat[lo:hi] >= tau)
        if not keep.any():
            continue
        cand, coef = nbrs[keep], e_hat[lo:hi][keep]
        best = coef.max()
        links.append((i, int(cand[coef == best].min())))
    return links


def connected_components(n: int, links) -> ClusterSet:
    parent = list(range(n))

    def find(x):
        root = x
        while parent[root] != root:
            root = parent[root]
        while parent[x] != root:
            parent[x], x = root, parent[x]
        return root

    for a, b in links:
        if not (0 <= a < n and 0 <= b < n):
            raise ValueError(f"link ({a}, {b}) outside {n} nodes")
        ra, rb = find(a), find(b)
        if ra != rb:
            parent[max(ra, rb)] = min(ra, rb)
    groups = {}
    for i in range(n):
        groups.setdefault(find(i), []).append(i)
    return ClusterSet([groups[r] for r in sorted(groups)])


def aggregate(graph: LevelGraph, clusters: ClusterSet, dens: Optional[np.ndarray] = None):
    """Next-level features: identity of the densest member, mean of member identities.

    Returns ``(identity, average, identity_index, average_sets, member_map)``.
    """
    dens = graph.densities if dens is None else dens
    identity, average, id_index, avg_sets, members = [], [], [], [], []
    for cluster in clusters.clusters:
        cluster = np.asarray(cluster)
        z = cluster[np.argmax(dens[cluster])]  # first maximum = lowest index
        identity.append(graph.identity[z])
        average.append(graph.identity[cluster].mean(axis=0))
        id_index.append(graph.identity_index[z])
        avg_sets.append(graph.identity_index[cluster])
        members.append(np.sort(np.concatenate([graph.member_map[j] for j in cluster])))
    return np.array(identity), np.array(average), np.array(id_index), avg_sets, members


def next_level_graph(graph: LevelGraph, clusters: ClusterSet, fitted_scorer, k: int,
                     dens: Optional[np.ndarray] = None) -> LevelGraph:
    identity, average, id_index, avg_sets, members = aggregate(graph, clusters, dens)
    return build_level_graph(graph.level + 1, identity, average, id_index, avg_sets, members,
                             fitted_scorer, k)


# ---------------------------------------------------------------------------
# full loop
# ---------------------------------------------------------------------------

@dataclass
class SharcTrace:
    levels: list = field(default_factory=list)
    segment_clusters: Optional[np.ndarray] = None

    @property
    def num_clusters(self) -> int:
        return int(self.segment_clusters.max()) + 1


def sharc_levels(embeddings: np.ndarray, scorer, edge_scorer: EdgeScorer, k: int = DEFAULT_K,
                 tau: float = DEFAULT_TAU, max_levels: int = DEFAULT_MAX_LEVELS) -> SharcTrace:
    embeddings = np.asarray(embeddings, dtype=np.float64)
    if embeddings.ndim != 2 or embeddings.shape[0] == 0:
        raise ValueError("clustering needs at least one embedding")
    x = edge_scorer.prepare(embeddings)
    n = x.shape[0]
    fitted = scorer.fit(x)
    graph = initial_graph(x, fitted, k)
    trace = SharcTrace()
    merges = 0
    while True:
        trace.levels.append(graph)
        if graph.num_nodes == 1:
            break
        score_graph(graph, edge_scorer)
        links = link_pass(graph, tau)
        if not links:
            break
        clusters = connected_components(graph.num_nodes, links)
        graph = next_level_graph(graph, clusters, fitted, k)
        merges += 1
        if merges >= max_levels:
            trace.levels.append(graph)
            break
    final = trace.levels[-1]
    seg = np.empty(n, dtype=np.int64)
    for c, members in enumerate(final.member_map):
        seg[members] = c
    trace.segment_clusters = canonical_labels(seg)
    log.debug("sharc: %d segments -> %d clusters in %d levels", n, trace.num_clusters, len(trace.levels))
    return trace


def canonical_labels(labels) -> np.ndarray:
    """Renumber cluster ids by order of first occurrence."""
    mapping = {}
    return np.array([mapping.setdefault(lab, len(mapping)) for lab in labels], dtype=np.int64)


def speaker_names(cluster_ids) -> list[str]:
    return [f"spk{c + 1}" for c in canonical_labels(cluster_ids)]


def labels_to_hypothesis(seq: EmbeddingSequence, cluster_ids) -> DiarizationHypothesis:
    return DiarizationHypothesis(seq.recording_id, seq.onsets, seq.durations, speaker_names(cluster_ids))


def sharc_cluster(seq: EmbeddingSequence, scorer, edge_scorer: EdgeScorer, k: int = DEFAULT_K,
                  tau: float = DEFAULT_TAU, max_levels: int = DEFAULT_MAX_LEVELS) -> DiarizationHypothesis:
    trace = sharc_levels(seq.embeddings, scorer, edge_scorer, k, tau, max_levels)
    return labels_to_hypothesis(seq, trace.segment_clusters)
