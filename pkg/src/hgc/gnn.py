"""Learnable edge scorer: embedding front-end, one mean-aggregation graph layer and
an edge-classification MLP, plus the density formulas built on its output."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np

from . import autodiff as ad
from .similarity import Edges, PldaModel

DEFAULT_D_HIDDEN = 256
DEFAULT_MLP_HIDDEN = 256


@dataclass(frozen=True)
class ScorerConfig:
    dim: int
    d_hidden: int = DEFAULT_D_HIDDEN
    mlp_hidden: int = DEFAULT_MLP_HIDDEN
    frontend_layers: int = 1
    seed: int = 0

    def __post_init__(self):
        if self.dim < 1 or self.d_hidden < 1 or self.mlp_hidden < 1:
            raise ValueError("layer widths must be positive")
        if self.frontend_layers < 0:
            raise ValueError("frontend_layers must be >= 0")


def _glorot(rng, fan_in, fan_out):
    limit = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, size=(fan_in, fan_out))


class ScorerModel:
    """Parameters are held in ``self.params`` (name -> :class:`~hgc.autodiff.Parameter`)."""

    def __init__(self, config: ScorerConfig, params: Optional[dict] = None):
        self.config = config
        if params is None:
            params = self._init_params(config)
        self.params = params
        self._check_shapes()

    @staticmethod
    def _init_params(cfg: ScorerConfig) -> dict:
        rng = np.random.default_rng(cfg.seed)
        d, dh, h = cfg.dim, cfg.d_hidden, cfg.mlp_hidden
        p = {}
        for layer in range(cfg.frontend_layers):
            p[f"frontend.{layer}.weight"] = ad.Parameter(np.eye(d), "frontend", f"frontend.{layer}.weight")
            p[f"frontend.{layer}.bias"] = ad.Parameter(np.zeros((1, d)), "frontend", f"frontend.{layer}.bias")
        # node feature is [identity ; average] (2D), the layer sees [h_i ; neighbor mean] (4D)
        shapes = {
            "gnn.weight": (4 * d, dh),
            "edge.0.weight": (2 * dh, h),
            "edge.1.weight": (h, h),
            "edge.2.weight": (h, 2),
        }
        for name, (fi, fo) in shapes.items():
            p[name] = ad.Parameter(_glorot(rng, fi, fo), "gnn", name)
        for name, width in (("edge.0.bias", h), ("edge.1.bias", h), ("edge.2.bias", 2)):
            p[name] = ad.Parameter(np.zeros((1, width)), "gnn", name)
        return p

    def _check_shapes(self):
        cfg = self.config
        expect = {"gnn.weight": (4 * cfg.dim, cfg.d_hidden),
                  "edge.0.weight": (2 * cfg.d_hidden, cfg.mlp_hidden),
                  "edge.1.weight": (cfg.mlp_hidden, cfg.mlp_hidden),
                  "edge.2.weight": (cfg.mlp_hidden, 2)}
        for layer in range(cfg.frontend_layers):
            expect[f"frontend.{layer}.weight"] = (cfg.dim, cfg.dim)
        for name, shape in expect.items():
            if name not in self.params:
                raise ValueError(f"missing parameter {name}")
            if self.params[name].shape != shape:
                raise ValueError(f"parameter {name} has shape {self.params[name].shape}, expected {shape}")

    @property
    def dim(self) -> int:
        return self.config.dim

    def parameters(self) -> list[ad.Parameter]:
        return [self.params[k] for k in sorted(self.params)]

    def copy(self) -> "ScorerModel":
        return ScorerModel(self.config, {k: ad.Parameter(p.value, p.group, k) for k, p in self.params.items()})

    def state(self) -> dict[str, np.ndarray]:
        return {k: p.value.copy() for k, p in self.params.items()}

    # -- differentiable pieces ------------------------------------------------

    def frontend(self, x) -> ad.Tensor:
        out = ad.as_tensor(x)
        for layer in range(self.config.frontend_layers):
            out = ad.add(ad.matmul(out, self.params[f"frontend.{layer}.weight"]),
                         self.params[f"frontend.{layer}.bias"])
        return out

    def gnn_layer(self, node_features: ad.Tensor, edges: Edges) -> ad.Tensor:
        """``relu(W [h_i ; mean of neighbor h_j])``; a node without neighbors uses itself."""
        indptr, indices = _neighbor_sets(edges)
        agg = ad.index_mean(node_features, indptr, indices)
        return ad.relu(ad.matmul(ad.concat([node_features, agg]), self.params["gnn.weight"]))

    def edge_probabilities(self, latent: ad.Tensor, src, dst) -> ad.Tensor:
        """Linked-class softmax probability for each pair ``(src[e], dst[e])``.

        The first layer acts on ``[h_src ; h_dst]``; it is evaluated as two per-node
        projections gathered per edge, which is the same product.
        """
        dh = self.config.d_hidden
        w0 = self.params["edge.0.weight"]
        left = ad.matmul(latent, ad.slice_rows(w0, 0, dh))
        right = ad.matmul(latent, ad.slice_rows(w0, dh, 2 * dh))
        h = ad.add(ad.add(ad.gather_rows(left, src), ad.gather_rows(right, dst)), self.params["edge.0.bias"])
        h = ad.relu(h)
        h = ad.relu(ad.add(ad.matmul(h, self.params["edge.1.weight"]), self.params["edge.1.bias"]))
        logits = ad.add(ad.matmul(h, self.params["edge.2.weight"]), self.params["edge.2.bias"])
        return ad.column(ad.softmax_rows(logits), 1)

    def forward(self, node_features, edges: Edges, similarity: np.ndarray):
        """Edge probabilities (E x 1) and pseudo densities (N x 1) of one graph."""
        latent = self.gnn_layer(ad.as_tensor(node_features), edges)
        p_hat = self.edge_probabilities(latent, edges.src, edges.dst)
        return p_hat, pseudo_density_tensor(p_hat, edges, similarity)

    # -- numpy conveniences -----------------------------------------------------

    def refine(self, x: np.ndarray) -> np.ndarray:
        return self.frontend(x).value

    def inference_embeddings(self, x: np.ndarray) -> np.ndarray:
        """Average of the input embeddings and their refined version."""
        return 0.5 * (np.asarray(x, dtype=np.float64) + self.refine(x))

    def latent(self, node_features: np.ndarray, edges: Edges) -> np.ndarray:
        return self.gnn_layer(ad.Tensor(node_features), edges).value

    def predict(self, node_features: np.ndarray, edges: Edges) -> np.ndarray:
        latent = self.gnn_layer(ad.Tensor(node_features), edges)
        return self.edge_probabilities(latent, edges.src, edges.dst).value[:, 0]

    def edge_probability(self, latent: np.ndarray, i: int, j: int) -> float:
        if i == j:
            raise ValueError("edge probability needs two distinct nodes")
        return float(self.edge_probabilities(ad.Tensor(latent), [i], [j]).value[0, 0])


def _neighbor_sets(edges: Edges):
    counts = edges.out_degree()
    if np.all(counts > 0):
        return edges.indptr, edges.dst
    lists = [edges.neighbors(i) if counts[i] else np.array([i]) for i in range(edges.num_nodes)]
    sizes = [len(x) for x in lists]
    return np.concatenate([[0], np.cumsum(sizes)]), np.concatenate(lists).astype(np.int64)


def node_features(identity: np.ndarray, average: Optional[np.ndarray] = None) -> np.ndarray:
    """``[identity ; average]`` rows; at level 0 both halves are the embedding itself."""
    identity = np.asarray(identity, dtype=np.float64)
    return np.concatenate([identity, identity if average is None else average], axis=1)


def edge_coefficient(p):
    return 2.0 * np.asarray(p) - 1.0


def edge_similarities(edges: Edges, similarity: np.ndarray) -> np.ndarray:
    return np.asarray(similarity)[edges.src, edges.dst]


def pseudo_density_tensor(p_hat: ad.Tensor, edges: Edges, similarity: np.ndarray) -> ad.Tensor:
    e_hat = ad.affine(p_hat, 2.0, -1.0)
    return ad.index_mean(e_hat, edges.indptr, np.arange(len(edges)), edge_similarities(edges, similarity))


def densities(edges: Edges, e_values, similarity: np.ndarray) -> np.ndarray:
    """Density of every node: mean over its k-NN edges of ``e_ij * S(i, j)``."""
    e_values = np.asarray(e_values, dtype=np.float64)
    weighted = e_values * edge_similarities(edges, similarity)
    sums = np.bincount(edges.src, weights=weighted, minlength=edges.num_nodes)
    return sums / np.maximum(edges.out_degree(), 1)


def pseudo_density(neighbors, e_hat, s_row) -> float:
    """Single-node density from its neighbor edge coefficients and similarities."""
    neighbors = np.asarray(neighbors, dtype=np.int64)
    if len(neighbors) == 0:
        return 0.0
    return float(np.mean(np.asarray(e_hat, dtype=np.float64) * np.asarray(s_row)[neighbors]))


def ground_truth_edges(edges: Edges, labels) -> np.ndarray:
    labels = list(labels)
    if any(lab is None for lab in labels):
        raise ValueError("ground-truth density needs a label for every node")
    lab = np.asarray(labels, dtype=object)
    return (lab[edges.src] == lab[edges.dst]).astype(np.float64)


def ground_truth_density(i: int, neighbors, labels, s_row) -> float:
    neighbors = list(neighbors)
    if labels[i] is None or any(labels[j] is None for j in neighbors):
        raise ValueError("ground-truth density needs a label for every neighbor")
    e = [1.0 if labels[j] == labels[i] else -1.0 for j in neighbors]
    return pseudo_density(neighbors, e, s_row)


# ---------------------------------------------------------------------------
# checkpoints
# ---------------------------------------------------------------------------

def save_model(path, model: ScorerModel, plda: Optional[PldaModel] = None, meta: Optional[dict] = None) -> None:
    cfg = model.config
    info = {"dim": cfg.dim, "d_hidden": cfg.d_hidden, "mlp_hidden": cfg.mlp_hidden,
            "frontend_layers": cfg.frontend_layers, "seed": cfg.seed}
    info.update(meta or {})
    arrays = plda.to_arrays("plda.") if plda is not None else {}
    ad.save_checkpoint(path, model.params, info, arrays)


def load_model(path) -> tuple[ScorerModel, Optional[PldaModel], dict]:
    params, meta, arrays = ad.load_checkpoint(path)
    cfg = ScorerConfig(dim=int(meta["dim"]), d_hidden=int(meta["d_hidden"]),
                       mlp_hidden=int(meta["mlp_hidden"]),
                       frontend_layers=int(meta["frontend_layers"]), seed=int(meta.get("seed", 0)))
    plda = PldaModel.from_arrays(arrays, "plda.") if "plda.mean" in arrays else None
    return ScorerModel(cfg, params), plda, meta
