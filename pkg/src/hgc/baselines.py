"""Unsupervised baselines: average-linkage AHC and spectral clustering, plus the
similarity-based second-speaker assignment used with them."""

from __future__ import annotations

from typing import Optional, Sequence

import numpy as np

from .hclust import canonical_labels
from .overlap import OverlapAssignment, dominant_label, label_ordinals

MAX_SPEAKERS = 20
DEGREE_EPS = 1e-10


def ahc(scores: np.ndarray, stop_threshold: float, num_speakers: Optional[int] = None) -> np.ndarray:
    """Average-linkage agglomeration on a similarity matrix.

    Merges the most similar pair while its average similarity is at least
    ``stop_threshold``, or until ``num_speakers`` clusters remain when given.
    Ties pick the lowest ``(i, j)`` pair; a merged cluster keeps the lower slot.
    """
    s = np.array(scores, dtype=np.float64)
    n = s.shape[0]
    if n == 0:
        raise ValueError("ahc needs at least one item")
    if num_speakers is not None and not 1 <= num_speakers <= n:
        raise ValueError(f"num_speakers must lie in [1, {n}]")
    sizes = np.ones(n)
    active = np.ones(n, dtype=bool)
    assign = np.arange(n)
    sim = s.copy()
    np.fill_diagonal(sim, -np.inf)
    n_clusters = n
    while n_clusters > 1:
        if num_speakers is not None and n_clusters <= num_speakers:
            break
        masked = np.where(active[:, None] & active[None, :], sim, -np.inf)
        masked = np.triu(masked, 1) + np.tril(np.full((n, n), -np.inf))
        flat = int(np.argmax(masked))
        a, b = divmod(flat, n)
        best = masked[a, b]
        if num_speakers is None and not best >= stop_threshold:
            break
        merged = (sizes[a] * sim[a] + sizes[b] * sim[b]) / (sizes[a] + sizes[b])
        sim[a, :] = merged
        sim[:, a] = merged
        sim[a, a] = -np.inf
        sizes[a] += sizes[b]
        active[b] = False
        sim[b, :] = -np.inf
        sim[:, b] = -np.inf
        assign[assign == b] = a
        n_clusters -= 1
    return canonical_labels(assign)


# ---------------------------------------------------------------------------
# spectral clustering
# ---------------------------------------------------------------------------

def jacobi_eigh(a: np.ndarray, tol: float = 1e-12, max_sweeps: int = 50) -> tuple[np.ndarray, np.ndarray]:
    """Symmetric eigendecomposition by cyclic Jacobi rotations.

    Each sweep visits every pair once in round-robin order, so the rotations of
    one round act on disjoint index pairs and are applied together.  Returns
    ascending eigenvalues and the matching orthonormal eigenvectors (columns).
    """
    a = np.array(a, dtype=np.float64)
    n = a.shape[0]
    v = np.eye(n)
    if n == 1:
        return a.diagonal().copy(), v
    m = n + (n % 2)
    players = list(range(m))
    scale = max(np.abs(a).max(), 1e-300)
    for _ in range(max_sweeps):
        off = np.linalg.norm(a - np.diag(a.diagonal()))
        if off <= tol * scale:
            break
        for _ in range(m - 1):
            pairs = [(players[i], players[m - 1 - i]) for i in range(m // 2)]
            pairs = [(min(p, q), max(p, q)) for p, q in pairs if p < n and q < n]
            p = np.array([x for x, _ in pairs])
            q = np.array([y for _, y in pairs])
            apq = a[p, q]
            live = np.abs(apq) > 1e-300
            if live.any():
                p, q, apq = p[live], q[live], apq[live]
                theta = (a[q, q] - a[p, p]) / (2.0 * apq)
                t = np.sign(theta) / (np.abs(theta) + np.hypot(theta, 1.0))
                t[theta == 0] = 1.0
                c = 1.0 / np.hypot(t, 1.0)
                s = t * c
                rp, rq = a[p, :].copy(), a[q, :].copy()
                a[p, :] = c[:, None] * rp - s[:, None] * rq
                a[q, :] = s[:, None] * rp + c[:, None] * rq
                cp, cq = a[:, p].copy(), a[:, q].copy()
                a[:, p] = cp * c - cq * s
                a[:, q] = cp * s + cq * c
                vp, vq = v[:, p].copy(), v[:, q].copy()
                v[:, p] = vp * c - vq * s
                v[:, q] = vp * s + vq * c
            players = [players[0]] + [players[-1]] + players[1:-1]
    vals = a.diagonal().copy()
    order = np.argsort(vals, kind="stable")
    return vals[order], v[:, order]


def normalized_laplacian(affinity: np.ndarray) -> np.ndarray:
    s = np.asarray(affinity, dtype=np.float64)
    deg = s.sum(axis=1)
    deg = np.where(deg <= 0, DEGREE_EPS, deg)
    inv = 1.0 / np.sqrt(deg)
    lap = np.eye(len(s)) - inv[:, None] * s * inv[None, :]
    return 0.5 * (lap + lap.T)


def eigengap_count(eigenvalues: np.ndarray, max_speakers: int = MAX_SPEAKERS) -> int:
    """Position of the largest gap ``lambda[c] - lambda[c-1]`` for c = 1..max (1-based count)."""
    top = min(max_speakers, len(eigenvalues) - 1)
    if top < 1:
        return 1
    gaps = np.diff(eigenvalues[:top + 1])
    return int(np.argmax(gaps)) + 1


def kmeans(x: np.ndarray, n_clusters: int, seed: int = 0, restarts: int = 10,
           max_iter: int = 300) -> np.ndarray:
    """Lloyd iterations from seeded uniform initial picks; the lowest inertia run wins."""
    rng = np.random.default_rng(seed)
    n = x.shape[0]
    best, best_inertia = None, np.inf
    for _ in range(restarts):
        centers = x[rng.choice(n, size=n_clusters, replace=False)].copy()
        assign = None
        for _ in range(max_iter):
            dist = ((x[:, None, :] - centers[None, :, :]) ** 2).sum(axis=2)
            new = np.argmin(dist, axis=1)
            if assign is not None and np.array_equal(new, assign):
                break
            assign = new
            for c in range(n_clusters):
                members = x[assign == c]
                if len(members):
                    centers[c] = members.mean(axis=0)
        inertia = float(((x - centers[assign]) ** 2).sum())
        if inertia < best_inertia - 1e-12:
            best, best_inertia = assign, inertia
    return best


def spectral(affinity: np.ndarray, num_speakers: Optional[int] = None, max_speakers: int = MAX_SPEAKERS,
             seed: int = 0, restarts: int = 10) -> np.ndarray:
    """Normalized-Laplacian spectral clustering with eigengap speaker counting."""
    s = np.asarray(affinity, dtype=np.float64)
    n = s.shape[0]
    if n == 0:
        raise ValueError("spectral clustering needs at least one item")
    if n == 1:
        return np.zeros(1, dtype=np.int64)
    vals, vecs = jacobi_eigh(normalized_laplacian(s))
    count = num_speakers if num_speakers is not None else eigengap_count(vals, max_speakers)
    count = max(1, min(count, n))
    if count == 1:
        return np.zeros(n, dtype=np.int64)
    emb = vecs[:, :count]
    norms = np.linalg.norm(emb, axis=1, keepdims=True)
    emb = emb / np.where(norms > 0, norms, 1.0)
    return canonical_labels(kmeans(emb, count, seed=seed, restarts=restarts))


def baseline_overlap(scores: np.ndarray, labels: Sequence[str], overlap_indices: Sequence[int],
                     k_prime: int = 30) -> list[OverlapAssignment]:
    """Second speaker = dominant parent label among the top ``k_prime`` foreign-cluster scores."""
    labels = list(labels)
    if len(set(labels)) < 2:
        return []
    s = np.asarray(scores, dtype=np.float64)
    lab = np.asarray(labels, dtype=object)
    ordinal = label_ordinals(labels)
    out = []
    for i in overlap_indices:
        row = s[i].copy()
        foreign = lab != lab[i]
        cand = np.flatnonzero(foreign)
        top = cand[np.lexsort((cand, -row[cand]))][:k_prime]
        second = dominant_label([labels[j] for j in top], row[top], ordinal)
        out.append(OverlapAssignment(int(i), labels[i], second))
    return out
