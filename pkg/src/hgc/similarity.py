"""Pairwise scoring: two-covariance PLDA, cosine, the sigmoid score map and k-NN edges."""

from __future__ import annotations

import io
from dataclasses import dataclass
from pathlib import Path
from typing import Optional

import numpy as np

PCA_DIM = 30
PLDA_FORMAT_VERSION = 1
VAR_FLOOR = 1e-8


@dataclass(frozen=True)
class ScoreMatrix:
    values: np.ndarray
    kind: str = "raw"  # "raw" or "unit-interval"

    def __post_init__(self):
        v = self.values
        if v.ndim != 2 or v.shape[0] != v.shape[1]:
            raise ValueError(f"score matrix must be square, got {v.shape}")
        if self.kind not in ("raw", "unit-interval"):
            raise ValueError(f"unknown score kind {self.kind!r}")
        if not np.allclose(v, v.T, atol=1e-9, rtol=0):
            raise ValueError("score matrix is not symmetric")
        if self.kind == "unit-interval" and len(v) and (v.min() < 0 or v.max() > 1):
            raise ValueError("unit-interval scores outside [0, 1]")

    def __len__(self):
        return self.values.shape[0]


@dataclass(frozen=True)
class Edges:
    """Directed k-NN edges grouped by source node (``indptr`` is CSR-style)."""

    src: np.ndarray
    dst: np.ndarray
    indptr: np.ndarray

    @property
    def num_nodes(self) -> int:
        return len(self.indptr) - 1

    def __len__(self):
        return len(self.src)

    def neighbors(self, i: int) -> np.ndarray:
        return self.dst[self.indptr[i]:self.indptr[i + 1]]

    def out_degree(self) -> np.ndarray:
        return np.diff(self.indptr)

    @classmethod
    def from_lists(cls, lists) -> "Edges":
        counts = [len(x) for x in lists]
        indptr = np.concatenate([[0], np.cumsum(counts)]).astype(np.int64)
        src = np.repeat(np.arange(len(lists)), counts).astype(np.int64)
        dst = np.array([j for x in lists for j in x], dtype=np.int64)
        return cls(src, dst, indptr)


# ---------------------------------------------------------------------------
# PLDA
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class PldaModel:
    """Global whitening + two-covariance model fitted on training embeddings.

    ``within_cov`` / ``between_cov`` live in the whitened, length-normalized space;
    :meth:`adapt` projects them onto a recording's PCA basis.
    """

    mean: np.ndarray
    whitener: np.ndarray
    within_cov: np.ndarray
    between_cov: np.ndarray

    @property
    def dim(self) -> int:
        return self.mean.shape[0]

    def adapt(self, basis: np.ndarray) -> "RecordingPlda":
        return RecordingPlda.from_covariances(basis, basis.T @ self.within_cov @ basis,
                                              basis.T @ self.between_cov @ basis)

    def save(self, path) -> None:
        buf = io.BytesIO()
        np.savez(buf, version=np.array(PLDA_FORMAT_VERSION), **self.to_arrays())
        Path(path).write_bytes(buf.getvalue())

    def to_arrays(self, prefix: str = "") -> dict[str, np.ndarray]:
        return {f"{prefix}{name}": getattr(self, name)
                for name in ("mean", "whitener", "within_cov", "between_cov")}

    @classmethod
    def from_arrays(cls, arrays, prefix: str = "") -> "PldaModel":
        mean = np.asarray(arrays[f"{prefix}mean"], dtype=np.float64)
        d = mean.shape[0]
        mats = {}
        for name in ("whitener", "within_cov", "between_cov"):
            m = np.asarray(arrays[f"{prefix}{name}"], dtype=np.float64)
            if m.shape != (d, d):
                raise ValueError(f"PLDA field {name} has shape {m.shape}, expected {(d, d)}")
            mats[name] = m
        return cls(mean, **mats)

    @classmethod
    def load(cls, path) -> "PldaModel":
        with np.load(Path(path), allow_pickle=False) as data:
            if int(data["version"]) != PLDA_FORMAT_VERSION:
                raise ValueError(f"unsupported PLDA format version {int(data['version'])}")
            return cls.from_arrays(data)

    @classmethod
    def identity(cls, dim: int, between: float = 1.0, within: float = 1.0) -> "PldaModel":
        eye = np.eye(dim)
        return cls(np.zeros(dim), eye, within * eye, between * eye)


@dataclass(frozen=True)
class RecordingPlda:
    """PLDA restricted to one recording's PCA space and simultaneously diagonalized.

    ``transform`` maps PCA coordinates to a space where the within-class
    covariance is ``diag(within_var)`` and the between-class one ``diag(between_var)``.
    """

    pca_basis: np.ndarray
    transform: np.ndarray
    between_var: np.ndarray
    within_var: np.ndarray

    @classmethod
    def from_covariances(cls, basis, within, between) -> "RecordingPlda":
        d = within.shape[0]
        within = 0.5 * (within + within.T) + VAR_FLOOR * np.eye(d)
        between = 0.5 * (between + between.T)
        chol = np.linalg.cholesky(within)
        inv_chol = np.linalg.inv(chol)
        m = inv_chol @ between @ inv_chol.T
        psi, vecs = np.linalg.eigh(0.5 * (m + m.T))
        transform = vecs.T @ inv_chol
        return cls(basis, transform, np.clip(psi, 0.0, None), np.ones(d))

    @classmethod
    def isotropic(cls, dim: int, between: float, within: float = 1.0) -> "RecordingPlda":
        return cls(np.eye(dim), np.eye(dim), np.full(dim, float(between)), np.full(dim, float(within)))


def _llr_coefficients(between_var, within_var):
    t = between_var + within_var
    det = t * t - between_var * between_var
    cross = between_var / det
    quad = 0.5 / t - 0.5 * t / det
    const = float(np.sum(np.log(t) - 0.5 * np.log(det)))
    return cross, quad, const


def score_plda(a, b, model: RecordingPlda) -> float:
    """Same-speaker vs different-speaker log-likelihood ratio of two processed vectors."""
    a = model.transform @ np.asarray(a, dtype=np.float64)
    b = model.transform @ np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError(f"dimension mismatch {a.shape} vs {b.shape}")
    cross, quad, const = _llr_coefficients(model.between_var, model.within_var)
    return float(const + np.sum(cross * (a * b)) + np.sum(quad * (a * a + b * b)))


def plda_matrix(processed: np.ndarray, model: RecordingPlda) -> np.ndarray:
    y = processed @ model.transform.T
    cross, quad, const = _llr_coefficients(model.between_var, model.within_var)
    q = (y * y) @ quad
    s = const + (y * cross) @ y.T + q[:, None] + q[None, :]
    return 0.5 * (s + s.T)


def _whiten_normalize(x, model: PldaModel):
    z = (np.atleast_2d(x) - model.mean) @ model.whitener.T
    norms = np.linalg.norm(z, axis=1, keepdims=True)
    return z / np.where(norms > 0, norms, 1.0)


def fit_plda(vectors, labels) -> PldaModel:
    """Closed-form estimate: total-covariance whitening, then within/between class statistics."""
    x = np.asarray(vectors, dtype=np.float64)
    labels = np.asarray(labels)
    n, d = x.shape
    mean = x.mean(axis=0)
    cov = np.cov(x, rowvar=False, bias=True).reshape(d, d)
    vals, vecs = np.linalg.eigh(cov)
    vals = np.maximum(vals, VAR_FLOOR * max(vals.max(), 1.0))
    whitener = (vecs / np.sqrt(vals)) @ vecs.T
    provisional = PldaModel(mean, whitener, np.eye(d), np.eye(d))
    z = _whiten_normalize(x, provisional)
    zbar = z.mean(axis=0)
    within = np.zeros((d, d))
    between = np.zeros((d, d))
    for lab in np.unique(labels):
        zc = z[labels == lab]
        mc = zc.mean(axis=0)
        dev = zc - mc
        within += dev.T @ dev
        between += len(zc) * np.outer(mc - zbar, mc - zbar)
    return PldaModel(mean, whitener, within / n + VAR_FLOOR * np.eye(d), between / n)


@dataclass(frozen=True)
class Preprocessed:
    vectors: np.ndarray
    basis: np.ndarray
    center: np.ndarray
    dim: int
    pca_skipped: bool


def pca_dimension(n: int, d: int) -> int:
    return min(PCA_DIM, n - 1, d)


def recording_pca(z: np.ndarray, out_dim: int) -> tuple[np.ndarray, np.ndarray]:
    """Leading eigenvectors of the recording covariance, signs fixed for determinism."""
    center = z.mean(axis=0)
    cov = np.cov(z - center, rowvar=False, bias=True).reshape(z.shape[1], z.shape[1])
    vals, vecs = np.linalg.eigh(cov)
    order = np.argsort(-vals, kind="stable")[:out_dim]
    basis = vecs[:, order]
    flip = np.sign(basis[np.argmax(np.abs(basis), axis=0), np.arange(basis.shape[1])])
    return basis * np.where(flip == 0, 1.0, flip), center


def preprocess(x, model: PldaModel) -> Preprocessed:
    """Whiten, length-normalize, then project with a per-recording PCA.

    With fewer than two vectors the PCA is skipped and ``pca_skipped`` is set.
    """
    emb = x.embeddings if hasattr(x, "embeddings") else np.atleast_2d(np.asarray(x, dtype=np.float64))
    if emb.shape[1] != model.dim:
        raise ValueError(f"embedding dimension {emb.shape[1]} does not match PLDA dimension {model.dim}")
    z = _whiten_normalize(emb, model)
    n, d = z.shape
    if n < 2:
        return Preprocessed(z, np.eye(d), np.zeros(d), d, True)
    basis, center = recording_pca(z, pca_dimension(n, d))
    return Preprocessed((z - center) @ basis, basis, center, basis.shape[1], False)


# ---------------------------------------------------------------------------
# cosine, sigmoid, k-NN
# ---------------------------------------------------------------------------

def score_cosine(a, b) -> float:
    a, b = np.asarray(a, dtype=np.float64), np.asarray(b, dtype=np.float64)
    na, nb = np.linalg.norm(a), np.linalg.norm(b)
    if na == 0 or nb == 0:
        raise ValueError("cosine score of a zero vector")
    return float(np.clip(a @ b / (na * nb), -1.0, 1.0))


def cosine_matrix(x: np.ndarray) -> np.ndarray:
    norms = np.linalg.norm(x, axis=1, keepdims=True)
    if np.any(norms == 0):
        raise ValueError("cosine score of a zero vector")
    u = x / norms
    s = np.clip(u @ u.T, -1.0, 1.0)
    return 0.5 * (s + s.T)


def sigmoid_transform(scores, alpha: float = 0.1) -> ScoreMatrix:
    """Entrywise ``1 / (1 + exp(-s / alpha))``."""
    if not alpha > 0:
        raise ValueError("alpha must be positive")
    raw = scores.values if isinstance(scores, ScoreMatrix) else np.asarray(scores, dtype=np.float64)
    z = raw / alpha
    out = np.empty_like(z)
    pos = z >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-z[pos]))
    e = np.exp(z[~pos])
    out[~pos] = e / (1.0 + e)
    return ScoreMatrix(0.5 * (out + out.T), "unit-interval")


def knn_edges(scores, k: int, allowed: Optional[np.ndarray] = None) -> Edges:
    """Each node points at its ``min(k, N-1)`` highest-scoring other nodes.

    Ties go to the lower index.  ``allowed`` optionally masks candidate pairs;
    masked-out pairs are never selected, so out-degree may then drop below k.
    """
    s = scores.values if isinstance(scores, ScoreMatrix) else np.asarray(scores)
    n = s.shape[0]
    if k < 1:
        raise ValueError("k must be >= 1")
    lists = []
    for i in range(n):
        ok = np.ones(n, dtype=bool) if allowed is None else np.asarray(allowed[i], dtype=bool).copy()
        ok[i] = False
        cand = np.flatnonzero(ok)
        order = cand[np.argsort(-s[i, cand], kind="stable")]
        lists.append(order[:k])
    return Edges.from_lists(lists)


# ---------------------------------------------------------------------------
# scorer front-ends used by the clustering stack
# ---------------------------------------------------------------------------

class PldaScorer:
    """Per-recording PLDA scorer: the PCA basis is fitted once on level-0 embeddings
    and reused for identity features at every higher level."""

    name = "plda"

    def __init__(self, model: PldaModel, alpha: float = 1.0):
        self.model = model
        self.alpha = alpha

    def fit(self, embeddings: np.ndarray) -> "_FittedPlda":
        pre = preprocess(embeddings, self.model)
        return _FittedPlda(self, pre, self.model.adapt(pre.basis))


class _FittedPlda:
    def __init__(self, parent: PldaScorer, pre: Preprocessed, rec_model: RecordingPlda):
        self.parent = parent
        self.pre = pre
        self.rec_model = rec_model

    def project(self, features: np.ndarray) -> np.ndarray:
        z = _whiten_normalize(features, self.parent.model)
        return (z - self.pre.center) @ self.pre.basis

    def raw(self, features: np.ndarray) -> np.ndarray:
        return plda_matrix(self.project(features), self.rec_model)

    def unit(self, raw: np.ndarray) -> ScoreMatrix:
        return sigmoid_transform(raw, self.parent.alpha)


class CosineScorer:
    name = "cosine"

    def __init__(self, alpha: float = 0.1):
        self.alpha = alpha

    def fit(self, embeddings: np.ndarray) -> "CosineScorer":
        return self

    def raw(self, features: np.ndarray) -> np.ndarray:
        return cosine_matrix(np.atleast_2d(features))

    def unit(self, raw: np.ndarray) -> ScoreMatrix:
        return sigmoid_transform(raw, self.alpha)
