"""Supervision graphs, the connection/density losses and the two training stages."""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field, replace
from typing import Callable, Optional, Sequence

import numpy as np

from . import autodiff as ad
from .dataio import EmbeddingSequence
from .gnn import ScorerConfig, ScorerModel, densities, edge_coefficient, ground_truth_edges
from .hclust import LevelGraph, connected_components, initial_graph, next_level_graph
from .similarity import CosineScorer, PldaModel, PldaScorer, fit_plda

log = logging.getLogger(__name__)


class TrainingDiverged(RuntimeError):
    pass


@dataclass
class TrainGraph:
    """One supervision graph with ground-truth edge labels and densities."""

    graph: LevelGraph
    p: np.ndarray          # ground-truth edge probability per edge, 0 or 1
    d: np.ndarray          # ground-truth density per node

    @property
    def edge_mask(self) -> np.ndarray:
        """Connection-loss gate: the edge counts only when ``d_src <= d_dst``."""
        e = self.graph.edges
        return (self.d[e.src] <= self.d[e.dst]).astype(np.float64)

    def average_csr(self):
        sets = self.graph.average_sets
        indptr = np.concatenate([[0], np.cumsum([len(s) for s in sets])]).astype(np.int64)
        return indptr, np.concatenate(sets).astype(np.int64)


@dataclass
class TrainGraphSet:
    graphs: list = field(default_factory=list)

    @property
    def num_edges(self) -> int:
        return sum(len(g.graph.edges) for g in self.graphs)

    @property
    def num_nodes(self) -> int:
        return sum(g.graph.num_nodes for g in self.graphs)

    def __len__(self):
        return len(self.graphs)

    def __iter__(self):
        return iter(self.graphs)

    def extend(self, other: "TrainGraphSet") -> "TrainGraphSet":
        return TrainGraphSet(self.graphs + other.graphs)


def _require_labels(seq: EmbeddingSequence):
    if not seq.is_labeled:
        missing = [i for i, lab in enumerate(seq.labels) if lab is None]
        raise ValueError(f"recording {seq.recording_id}: segments {missing[:5]} have no speaker label")
    return list(seq.labels)


def ground_truth_links(edges, p: np.ndarray, d: np.ndarray) -> list[tuple[int, int]]:
    """Merge links of the supervision hierarchy: same-speaker edges toward no lower density
    (threshold 0), each node picking its lowest-index best neighbor."""
    links = []
    for i in range(edges.num_nodes):
        lo, hi = edges.indptr[i], edges.indptr[i + 1]
        nbrs = edges.dst[lo:hi]
        keep = (p[lo:hi] == 1.0) & (d[i] <= d[nbrs]) & (p[lo:hi] >= 0.0)
        if keep.any():
            links.append((i, int(nbrs[keep].min())))
    return links


def build_train_graphs(embeddings: np.ndarray, labels: Sequence, scorer, k: int,
                       max_levels: int = 15) -> TrainGraphSet:
    """Supervision graphs at every level of the ground-truth-driven hierarchy of one recording."""
    if any(lab is None for lab in labels):
        raise ValueError("training graphs need a label for every segment")
    labels = list(labels)
    fitted = scorer.fit(embeddings)
    graph = initial_graph(np.asarray(embeddings, dtype=np.float64), fitted, k)
    out = TrainGraphSet()
    for _ in range(max_levels + 1):
        node_labels = [labels[i] for i in graph.identity_index]
        p = ground_truth_edges(graph.edges, node_labels)
        d = densities(graph.edges, edge_coefficient(p), graph.similarity.values)
        out.graphs.append(TrainGraph(graph, p, d))
        if graph.num_nodes == 1 or len(set(node_labels)) == graph.num_nodes:
            break
        links = ground_truth_links(graph.edges, p, d)
        if not links:
            break
        clusters = connected_components(graph.num_nodes, links)
        graph = next_level_graph(graph, clusters, fitted, k, dens=d)
    return out


# ---------------------------------------------------------------------------
# losses
# ---------------------------------------------------------------------------

def loss_conn(p_hat, p, mask, num_edges: int) -> ad.Tensor:
    """Gated binary cross entropy averaged over all edges (gated-off edges count in the denominator)."""
    return ad.bce(p_hat, p, mask, denom=num_edges)


def loss_den(d_hat, d, num_nodes: int) -> ad.Tensor:
    return ad.mse(d_hat, d, denom=num_nodes)


def graph_features(tg: TrainGraph, refined: Optional[ad.Tensor] = None) -> ad.Tensor:
    """``[identity ; average]`` for a supervision graph, differentiable through ``refined``."""
    if refined is None:
        return ad.Tensor(tg.graph.features)
    indptr, indices = tg.average_csr()
    return ad.concat([ad.gather_rows(refined, tg.graph.identity_index),
                      ad.index_mean(refined, indptr, indices)])


@dataclass
class LossTerms:
    conn: ad.Tensor
    den: ad.Tensor

    @property
    def total(self) -> ad.Tensor:
        return ad.add(self.conn, self.den)


def random_rotation(rng: np.random.Generator, dim: int) -> np.ndarray:
    """Haar-distributed orthogonal matrix."""
    q, r = np.linalg.qr(rng.standard_normal((dim, dim)))
    return q * np.sign(np.diag(r))


def loss_terms(graphs: TrainGraphSet, model: ScorerModel, refined: Optional[ad.Tensor] = None,
               rotation: Optional[np.ndarray] = None) -> LossTerms:
    """Losses of one batch.  ``rotation`` (D x D) is applied to both feature halves when given."""
    n_e, n_v = max(graphs.num_edges, 1), max(graphs.num_nodes, 1)
    conn, den = ad.Tensor(0.0), ad.Tensor(0.0)
    block = None
    if rotation is not None:
        d = rotation.shape[0]
        block = ad.Tensor(np.block([[rotation, np.zeros((d, d))], [np.zeros((d, d)), rotation]]), op="const")
    for tg in graphs:
        feats = graph_features(tg, refined)
        if block is not None:
            feats = ad.matmul(feats, block)
        p_hat, d_hat = model.forward(feats, tg.graph.edges, tg.graph.similarity.values)
        if len(tg.graph.edges):
            conn = ad.add(conn, loss_conn(p_hat, tg.p, tg.edge_mask, n_e))
        den = ad.add(den, loss_den(d_hat, tg.d, n_v))
    return LossTerms(conn, den)


def total_loss(graphs: TrainGraphSet, model: ScorerModel, refined: Optional[ad.Tensor] = None) -> ad.Tensor:
    """Connection plus density loss over a set of graphs with shared normalizers."""
    return loss_terms(graphs, model, refined).total


# ---------------------------------------------------------------------------
# training loops
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 500
    lr_gnn: float = 1e-3
    lr_frontend: float = 1e-6
    k_train: int = 60
    seed: int = 0
    d_hidden: int = 256
    mlp_hidden: int = 256
    frontend_layers: int = 1
    plda_alpha: float = 1.0
    keep_intra: float = 0.1
    scorer: str = "plda"
    # random orthogonal rotation of node features per batch (off by default)
    rotation_augment: bool = False

    def make_scorer(self, plda: Optional[PldaModel]):
        if self.scorer == "cosine":
            return CosineScorer()
        if self.scorer != "plda":
            raise ValueError(f"unknown scorer {self.scorer!r}")
        if plda is None:
            raise ValueError("the plda scorer needs a PLDA model")
        return PldaScorer(plda, self.plda_alpha)

    @classmethod
    def e2e_defaults(cls, **kw) -> "TrainConfig":
        return cls(**{"epochs": 20, **kw})

    @classmethod
    def overlap_defaults(cls, stage: str = "e2e", **kw) -> "TrainConfig":
        return cls(**{"epochs": 100 if stage == "gnn" else 5, **kw})


def fit_training_plda(data: Sequence[EmbeddingSequence]) -> PldaModel:
    """PLDA on the training recordings, speakers kept distinct across recordings."""
    vecs, labs = [], []
    for seq in data:
        labels = _require_labels(seq)
        vecs.append(seq.embeddings)
        labs.extend(f"{seq.recording_id}/{lab}" for lab in labels)
    return fit_plda(np.concatenate(vecs), labs)


EpochCallback = Callable[[dict], None]


def run_epochs(model: ScorerModel, batches: Callable, n_batches: int, config: TrainConfig,
               rates: dict, history: Optional[list] = None, on_epoch: Optional[EpochCallback] = None,
               first_epoch: int = 1) -> ScorerModel:
    """SGD over ``batches(b, rotation)`` in a seeded shuffled order each epoch."""
    rng = np.random.default_rng(config.seed)
    rot_rng = np.random.default_rng([config.seed, 1])
    params = model.parameters()
    for epoch in range(first_epoch, first_epoch + config.epochs):
        sums = np.zeros(3)
        for b in rng.permutation(n_batches):
            rotation = random_rotation(rot_rng, model.dim) if config.rotation_augment else None
            terms = batches(int(b), rotation)
            loss = terms.total
            value = float(loss.value[0, 0])
            if not math.isfinite(value):
                raise TrainingDiverged(f"epoch {epoch}, batch {b}: non-finite loss {value}")
            ad.zero_grads(params)
            ad.backward(loss)
            try:
                ad.sgd_step(params, rates)
            except ad.NonFiniteGradientError as exc:
                raise TrainingDiverged(f"epoch {epoch}, batch {b}: {exc}") from None
            sums += (float(terms.conn.value[0, 0]), float(terms.den.value[0, 0]), value)
        row = dict(zip(("loss_conn", "loss_den", "total"), (sums / max(n_batches, 1)).tolist()))
        row = {"epoch": epoch, **row}
        log.info("epoch %d: conn=%.6f den=%.6f total=%.6f", epoch, row["loss_conn"], row["loss_den"], row["total"])
        if history is not None:
            history.append(row)
        if on_epoch is not None:
            on_epoch(row)
    return model


def train_gnn(data: Sequence[EmbeddingSequence], config: TrainConfig = TrainConfig(),
              plda: Optional[PldaModel] = None, init: Optional[ScorerModel] = None,
              history: Optional[list] = None, on_epoch: Optional[EpochCallback] = None) -> ScorerModel:
    """GNN-module stage: front-end frozen at identity, graph layer and edge MLP trained by SGD."""
    if not data:
        raise ValueError("training needs at least one labeled recording")
    dim = data[0].dim
    if plda is None:
        plda = fit_training_plda(data)
    scorer = config.make_scorer(plda)
    model = init.copy() if init is not None else ScorerModel(
        ScorerConfig(dim, config.d_hidden, config.mlp_hidden, config.frontend_layers, config.seed))
    sets = [build_train_graphs(seq.embeddings, _require_labels(seq), scorer, config.k_train) for seq in data]
    return run_epochs(model, lambda b, rot: loss_terms(sets[b], model, rotation=rot), len(sets), config,
                      {"gnn": config.lr_gnn, "frontend": 0.0}, history, on_epoch)


def train_e2e(data: Sequence[EmbeddingSequence], init: ScorerModel, config: TrainConfig = TrainConfig.e2e_defaults(),
              plda: Optional[PldaModel] = None, history: Optional[list] = None,
              on_epoch: Optional[EpochCallback] = None) -> ScorerModel:
    """Joint fine-tuning of front-end and GNN; graphs are rebuilt from the current refined embeddings."""
    if not data:
        raise ValueError("training needs at least one labeled recording")
    if plda is None:
        plda = fit_training_plda(data)
    scorer = config.make_scorer(plda)
    model = init.copy()
    labels = [_require_labels(seq) for seq in data]

    def batch(b, rotation):
        x = data[b].embeddings
        refined = model.frontend(ad.Tensor(x))
        graphs = build_train_graphs(refined.value, labels[b], scorer, config.k_train)
        return loss_terms(graphs, model, refined, rotation)

    return run_epochs(model, batch, len(data), config,
                      {"gnn": config.lr_gnn, "frontend": config.lr_frontend}, history, on_epoch)


def write_loss_csv(history: Sequence[dict], path) -> None:
    lines = ["epoch,loss_conn,loss_den,total"]
    lines += [f"{r['epoch']},{r['loss_conn']:.8f},{r['loss_den']:.8f},{r['total']:.8f}" for r in history]
    with open(path, "w") as fh:
        fh.write("\n".join(lines) + "\n")


def read_train_config(path, base: TrainConfig = TrainConfig()) -> TrainConfig:
    """``key=value`` lines; blank lines and ``#`` comments are ignored."""
    fields = {f: type(getattr(base, f)) for f in base.__dataclass_fields__}
    updates = {}
    with open(path) as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.split("#", 1)[0].strip()
            if not line:
                continue
            key, sep, val = line.partition("=")
            key = key.strip()
            if not sep:
                raise ValueError(f"{path}:{lineno}: expected key=value")
            if key not in fields:
                raise ValueError(f"{path}:{lineno}: unknown training key {key!r}")
            updates[key] = _parse_value(fields[key], val.strip(), f"{path}:{lineno}")
    return replace(base, **updates)


def _parse_value(kind, text: str, where: str):
    if kind is bool:
        if text.lower() not in ("0", "1", "true", "false"):
            raise ValueError(f"{where}: expected a boolean, got {text!r}")
        return text.lower() in ("1", "true")
    try:
        return kind(text)
    except ValueError:
        raise ValueError(f"{where}: cannot parse {text!r} as {kind.__name__}") from None
