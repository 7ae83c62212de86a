from collections import deque

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from hgc import hclust
from hgc.dataio import SyntheticSpec, generate_synthetic
from hgc.hclust import (ClusterSet, LevelGraph, OracleEdgeScorer, SimilarityEdgeScorer, aggregate,
                        candidate_edge_set, connected_components, link_pass, sharc_cluster, sharc_levels)
from hgc.similarity import Edges, PldaModel, PldaScorer, ScoreMatrix, fit_plda


def toy_graph(neighbors, p_hat, dens, identity=None):
    n = len(neighbors)
    edges = Edges.from_lists(neighbors)
    identity = np.eye(n) if identity is None else identity
    singles = [np.array([i]) for i in range(n)]
    g = LevelGraph(0, identity, identity, np.arange(n), singles, singles, np.zeros((n, n)),
                   ScoreMatrix(np.zeros((n, n)), "raw"), edges)
    g.p_hat = np.asarray(p_hat, dtype=float)
    g.densities = np.asarray(dens, dtype=float)
    return g


def test_candidate_edge_set_examples():
    g = toy_graph([[1], [0]], [0.9, 0.9], [0.5, 0.6])
    assert list(candidate_edge_set(g, 0, 0.8)) == [1]
    g.p_hat[:] = 0.7
    assert len(candidate_edge_set(g, 0, 0.8)) == 0
    g = toy_graph([[1], [0]], [0.9, 0.9], [0.5, 0.5])
    assert list(candidate_edge_set(g, 0, 0.8)) == [1]


def test_link_pass_argmax_and_ties():
    g = toy_graph([[1, 2], [], []], [0.7, 0.95], [0.0, 1.0, 1.0])
    assert link_pass(g, 0.5) == [(0, 2)]
    g = toy_graph([[2, 1], [], []], [0.9, 0.9], [0.0, 1.0, 1.0])
    assert link_pass(g, 0.5) == [(0, 1)]
    g = toy_graph([[1], [0]], [0.1, 0.1], [0.0, 0.0])
    assert link_pass(g, 0.5) == []


def bfs_partition(n, links):
    adj = [[] for _ in range(n)]
    for a, b in links:
        adj[a].append(b)
        adj[b].append(a)
    seen, out = [False] * n, []
    for s in range(n):
        if seen[s]:
            continue
        comp, q = [], deque([s])
        seen[s] = True
        while q:
            u = q.popleft()
            comp.append(u)
            for v in adj[u]:
                if not seen[v]:
                    seen[v] = True
                    q.append(v)
        out.append(sorted(comp))
    return out


def test_connected_components_examples():
    assert connected_components(4, [(0, 1), (1, 2)]).clusters == [[0, 1, 2], [3]]
    assert connected_components(3, []).clusters == [[0], [1], [2]]
    with pytest.raises(ValueError):
        connected_components(2, [(0, 5)])


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 10_000))
def test_connected_components_match_bfs(seed):
    rng = np.random.default_rng(seed)
    n = 200
    links = [tuple(map(int, rng.integers(0, n, 2))) for _ in range(int(rng.integers(0, 250)))]
    assert connected_components(n, links).clusters == bfs_partition(n, links)


def test_aggregate_identity_and_average():
    ident = np.array([[0.0, 1.0], [2.0, 3.0], [4.0, 5.0]])
    g = toy_graph([[1], [0], []], [1, 1], [0.2, 0.7, 0.1], identity=ident)
    identity, average, idx, avg_sets, members = aggregate(g, ClusterSet([[0, 1], [2]]))
    assert np.array_equal(identity[0], ident[1]) and idx[0] == 1
    assert np.allclose(average[0], ident[:2].mean(0))
    assert np.array_equal(identity[1], ident[2]) and np.array_equal(average[1], ident[2])
    assert [list(m) for m in members] == [[0, 1], [2]]
    g.densities[:] = 0.3
    identity, *_ = aggregate(g, ClusterSet([[0, 1, 2]]))
    assert np.array_equal(identity[0], ident[0])


def _plda():
    seqs = [generate_synthetic(SyntheticSpec(4, 6, 150, 0.05, 1.0, seed=100 + s))[0] for s in range(4)]
    x = np.concatenate([s.embeddings for s in seqs])
    return fit_plda(x, [f"{i}/{lab}" for i, s in enumerate(seqs) for lab in s.labels])


PLDA = _plda()


def transitive_closure_partition(labels, edges):
    # brute-force oracle: components of same-label k-NN edges
    links = [(int(a), int(b)) for a, b in zip(edges.src, edges.dst) if labels[a] == labels[b]]
    return bfs_partition(len(labels), links)


@pytest.mark.parametrize("tau", [0.5, 0.8])
def test_oracle_scorer_recovers_partition(tau):
    seq, _ = generate_synthetic(SyntheticSpec(3, 6, 150, 0.05, 1.0, seed=4))
    trace = sharc_levels(seq.embeddings, PldaScorer(PLDA), OracleEdgeScorer(seq.labels), k=30, tau=tau)
    lab = np.array(seq.labels)
    got = trace.segment_clusters
    assert trace.num_clusters == 3
    for c in range(3):
        assert len(set(lab[got == c])) == 1
    first = trace.levels[0]
    closure = transitive_closure_partition(seq.labels, first.edges)
    assert len(closure) == 3


def test_member_maps_partition_every_level():
    seq, _ = generate_synthetic(SyntheticSpec(4, 6, 180, 0.05, 1.0, seed=8))
    trace = sharc_levels(seq.embeddings, PldaScorer(PLDA), SimilarityEdgeScorer(), k=10, tau=0.5)
    sizes = [g.num_nodes for g in trace.levels]
    assert all(a >= b for a, b in zip(sizes, sizes[1:]))
    for g in trace.levels:
        allm = np.sort(np.concatenate(g.member_map))
        assert np.array_equal(allm, np.arange(len(seq)))


def test_single_segment_and_tau_above_one():
    seq, _ = generate_synthetic(SyntheticSpec(2, 6, 1, 0.05, 1.0, seed=1))
    hyp = sharc_cluster(seq, PldaScorer(PLDA), SimilarityEdgeScorer())
    assert hyp.labels == ["spk1"]
    seq, _ = generate_synthetic(SyntheticSpec(2, 6, 25, 0.05, 1.0, seed=1))
    hyp = sharc_cluster(seq, PldaScorer(PLDA), OracleEdgeScorer(seq.labels), tau=1.1)
    assert hyp.num_speakers == 25


def test_k_clamped_on_small_levels():
    seq, _ = generate_synthetic(SyntheticSpec(2, 6, 6, 0.05, 1.0, seed=3))
    g = hclust.initial_graph(seq.embeddings, PldaScorer(PLDA).fit(seq.embeddings), 60)
    assert np.all(g.edges.out_degree() == 5)


def test_empty_input_rejected():
    with pytest.raises(ValueError):
        sharc_levels(np.zeros((0, 6)), PldaScorer(PLDA), SimilarityEdgeScorer())


def test_permutation_invariance_with_oracle():
    seq, _ = generate_synthetic(SyntheticSpec(3, 6, 120, 0.05, 1.0, seed=12))
    perm = np.random.default_rng(0).permutation(len(seq))
    lab = np.array(seq.labels)
    a = sharc_levels(seq.embeddings, PldaScorer(PLDA), OracleEdgeScorer(lab), k=20, tau=0.5)
    b = sharc_levels(seq.embeddings[perm], PldaScorer(PLDA), OracleEdgeScorer(lab[perm]), k=20, tau=0.5)
    # same partition up to renaming
    pairs = set(zip(a.segment_clusters[perm], b.segment_clusters))
    assert len(pairs) == a.num_clusters == b.num_clusters


def test_speaker_names_by_first_occurrence():
    assert hclust.speaker_names([5, 5, 2, 9, 2]) == ["spk1", "spk1", "spk2", "spk3", "spk2"]
