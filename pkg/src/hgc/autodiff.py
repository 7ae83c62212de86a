"""Small reverse-mode differentiation kernel over dense float64 matrices.

Every value is a 2-D array.  Operations record their parents together with a
closure mapping the output gradient to parent gradients; :func:`backward`
replays the tape in reverse topological order.  Only row-wise bias addition
broadcasts, every other shape must match exactly.
"""

from __future__ import annotations

import io
import json
from collections.abc import Iterable, Mapping, Sequence
from pathlib import Path

import numpy as np

BCE_EPS = 1e-7
CHECKPOINT_VERSION = 1

# Counts node visits during backward; the tests use it to check linear cost.
BACKWARD_VISITS = 0


class ShapeError(ValueError):
    pass


class NonFiniteGradientError(FloatingPointError):
    pass


class Tensor:
    __slots__ = ("value", "grad", "parents", "backward_fn", "op")

    def __init__(self, value, parents=(), backward_fn=None, op="leaf"):
        value = np.asarray(value, dtype=np.float64)
        if value.ndim == 0:
            value = value.reshape(1, 1)
        elif value.ndim == 1:
            value = value.reshape(-1, 1)
        if value.ndim != 2:
            raise ShapeError(f"{op}: tensors must be 2-D, got shape {value.shape}")
        self.value = value
        self.grad = np.zeros_like(value)
        self.parents = tuple(parents)
        self.backward_fn = backward_fn
        self.op = op

    @property
    def shape(self):
        return self.value.shape

    def zero_grad(self):
        self.grad = np.zeros_like(self.value)

    def __repr__(self):
        return f"Tensor(op={self.op}, shape={self.shape})"


class Parameter(Tensor):
    """Trainable leaf tagged with a learning-rate group (``frontend`` or ``gnn``)."""

    __slots__ = ("group", "name")

    GROUPS = ("frontend", "gnn")

    def __init__(self, value, group="gnn", name=""):
        if group not in self.GROUPS:
            raise ValueError(f"unknown learning-rate group {group!r}")
        super().__init__(np.array(value, dtype=np.float64, copy=True))
        if not np.all(np.isfinite(self.value)):
            raise ValueError(f"parameter {name!r} has non-finite entries")
        self.group = group
        self.name = name

    def __repr__(self):
        return f"Parameter({self.name!r}, group={self.group}, shape={self.shape})"


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x, op="const")


def _node(value, parents, backward_fn, op):
    return Tensor(value, parents=parents, backward_fn=backward_fn, op=op)


# ---------------------------------------------------------------------------
# primitives
# ---------------------------------------------------------------------------

def matmul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul: incompatible shapes {a.shape} and {b.shape}")
    av, bv = a.value, b.value

    def back(g):
        return g @ bv.T, av.T @ g

    return _node(av @ bv, (a, b), back, "matmul")


def add(a, b) -> Tensor:
    """Elementwise sum; ``b`` may also be a ``(1, M)`` row added to every row of ``a``."""
    a, b = as_tensor(a), as_tensor(b)
    if a.shape == b.shape:
        return _node(a.value + b.value, (a, b), lambda g: (g, g), "add")
    if b.shape == (1, a.shape[1]):
        return _node(a.value + b.value, (a, b),
                     lambda g: (g, g.sum(axis=0, keepdims=True)), "add")
    raise ShapeError(f"add: incompatible shapes {a.shape} and {b.shape}")


def affine(x, scale: float, shift: float = 0.0) -> Tensor:
    """``scale * x + shift`` with constant scalars."""
    x = as_tensor(x)
    return _node(scale * x.value + shift, (x,), lambda g: (scale * g,), "affine")


def concat(tensors: Sequence[Tensor]) -> Tensor:
    """Join along the feature axis, so row ``i`` becomes ``[a_i ; b_i ; ...]``."""
    tensors = [as_tensor(t) for t in tensors]
    rows = {t.shape[0] for t in tensors}
    if len(rows) != 1:
        raise ShapeError(f"concat: row counts differ {[t.shape for t in tensors]}")
    widths = [t.shape[1] for t in tensors]
    cuts = np.cumsum(widths)[:-1]

    def back(g):
        return tuple(np.split(g, cuts, axis=1))

    return _node(np.concatenate([t.value for t in tensors], axis=1), tensors, back, "concat")


def gather_rows(x, index) -> Tensor:
    x = as_tensor(x)
    index = np.asarray(index, dtype=np.int64)
    if index.size and (index.min() < 0 or index.max() >= x.shape[0]):
        raise ShapeError(f"gather_rows: index out of range for shape {x.shape}")
    n = x.shape[0]

    def back(g):
        out = np.zeros((n, g.shape[1]))
        np.add.at(out, index, g)
        return (out,)

    return _node(x.value[index], (x,), back, "gather_rows")


def index_mean(x, indptr, indices, weights=None) -> Tensor:
    """Row ``i`` of the result is ``mean_e w_e * x[indices[e]]`` over ``indptr[i]:indptr[i+1]``.

    Empty index sets give a zero row.
    """
    x = as_tensor(x)
    indptr = np.asarray(indptr, dtype=np.int64)
    indices = np.asarray(indices, dtype=np.int64)
    if indices.size and (indices.min() < 0 or indices.max() >= x.shape[0]):
        raise ShapeError(f"index_mean: index out of range for shape {x.shape}")
    n_out = len(indptr) - 1
    counts = np.diff(indptr)
    owner = np.repeat(np.arange(n_out), counts)
    coef = np.ones(len(indices)) if weights is None else np.asarray(weights, dtype=np.float64)
    if coef.shape != indices.shape:
        raise ShapeError(f"index_mean: {coef.shape[0]} weights for {indices.shape[0]} indices")
    coef = coef / np.maximum(counts, 1)[owner]
    out = np.zeros((n_out, x.shape[1]))
    np.add.at(out, owner, coef[:, None] * x.value[indices])
    n_in = x.shape[0]

    def back(g):
        gx = np.zeros((n_in, g.shape[1]))
        np.add.at(gx, indices, coef[:, None] * g[owner])
        return (gx,)

    return _node(out, (x,), back, "index_mean")


def slice_rows(x, start: int, stop: int) -> Tensor:
    x = as_tensor(x)
    if not 0 <= start < stop <= x.shape[0]:
        raise ShapeError(f"slice_rows: [{start}:{stop}] invalid for shape {x.shape}")
    n = x.shape[0]

    def back(g):
        out = np.zeros((n, g.shape[1]))
        out[start:stop] = g
        return (out,)

    return _node(x.value[start:stop], (x,), back, "slice_rows")


def column(x, j: int) -> Tensor:
    x = as_tensor(x)
    if not 0 <= j < x.shape[1]:
        raise ShapeError(f"column: index {j} invalid for shape {x.shape}")
    width = x.shape[1]

    def back(g):
        out = np.zeros((g.shape[0], width))
        out[:, j] = g[:, 0]
        return (out,)

    return _node(x.value[:, j:j + 1], (x,), back, "column")


def relu(x) -> Tensor:
    x = as_tensor(x)
    mask = x.value > 0
    return _node(np.where(mask, x.value, 0.0), (x,), lambda g: (g * mask,), "relu")


def _sigmoid(v):
    out = np.empty_like(v)
    pos = v >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-v[pos]))
    e = np.exp(v[~pos])
    out[~pos] = e / (1.0 + e)
    return out


def sigmoid(x) -> Tensor:
    x = as_tensor(x)
    s = _sigmoid(x.value)
    return _node(s, (x,), lambda g: (g * s * (1.0 - s),), "sigmoid")


def softmax_rows(x) -> Tensor:
    x = as_tensor(x)
    z = x.value - x.value.max(axis=1, keepdims=True)
    e = np.exp(z)
    s = e / e.sum(axis=1, keepdims=True)

    def back(g):
        return (s * (g - (g * s).sum(axis=1, keepdims=True)),)

    return _node(s, (x,), back, "softmax_rows")


def total(x) -> Tensor:
    """Sum of all entries as a 1x1 tensor."""
    x = as_tensor(x)
    shape = x.shape
    return _node(x.value.sum(), (x,), lambda g: (np.full(shape, g[0, 0]),), "sum")


def bce(pred, target, mask=None, denom=None) -> Tensor:
    """``-(1/denom) * sum mask * (t log p + (1-t) log(1-p))`` with p clipped to [eps, 1-eps].

    ``denom`` defaults to the number of entries (masked-out entries included).
    """
    pred = as_tensor(pred)
    t = np.asarray(target, dtype=np.float64).reshape(pred.shape)
    m = np.ones(pred.shape) if mask is None else np.asarray(mask, dtype=np.float64).reshape(pred.shape)
    denom = float(pred.value.size if denom is None else denom)
    if denom <= 0:
        raise ValueError("bce: denominator must be positive")
    raw = pred.value
    p = np.clip(raw, BCE_EPS, 1.0 - BCE_EPS)
    inside = (raw >= BCE_EPS) & (raw <= 1.0 - BCE_EPS)
    ll = t * np.log(p) + (1.0 - t) * np.log(1.0 - p)
    value = -(m * ll).sum() / denom

    def back(g):
        dp = -(m * (t / p - (1.0 - t) / (1.0 - p))) / denom
        return (g[0, 0] * dp * inside,)

    return _node(value, (pred,), back, "bce")


def mse(pred, target, denom=None) -> Tensor:
    """``(1/denom) * sum (pred - target)^2``; ``denom`` defaults to the entry count."""
    pred = as_tensor(pred)
    t = np.asarray(target, dtype=np.float64).reshape(pred.shape)
    denom = float(pred.value.size if denom is None else denom)
    if denom <= 0:
        raise ValueError("mse: denominator must be positive")
    diff = pred.value - t

    def back(g):
        return (g[0, 0] * 2.0 * diff / denom,)

    return _node((diff ** 2).sum() / denom, (pred,), back, "mse")


# ---------------------------------------------------------------------------
# backward pass and optimizer
# ---------------------------------------------------------------------------

def _topological(root: Tensor) -> list[Tensor]:
    order, seen = [], set()
    stack = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node.parents:
            if id(p) not in seen:
                stack.append((p, False))
    return order


def backward(loss: Tensor) -> None:
    """Accumulate d(loss)/d(node) into ``.grad`` of every node reachable from ``loss``."""
    global BACKWARD_VISITS
    if loss.shape != (1, 1):
        raise ShapeError(f"backward: loss must be scalar, got shape {loss.shape}")
    order = _topological(loss)
    # intermediate gradients start fresh; leaves keep accumulating until zeroed
    for node in order:
        if node.parents:
            node.grad = np.zeros_like(node.value)
    loss.grad = loss.grad + 1.0
    for node in reversed(order):
        BACKWARD_VISITS += 1
        if node.backward_fn is None:
            continue
        for parent, g in zip(node.parents, node.backward_fn(node.grad)):
            if g is not None:
                parent.grad = parent.grad + g


def sgd_step(params: Iterable[Parameter], rates: Mapping[str, float]) -> None:
    """Plain SGD: ``value -= rate[group] * grad``; gradients are reset afterwards."""
    params = list(params)
    for p in params:
        if not np.all(np.isfinite(p.grad)):
            raise NonFiniteGradientError(f"non-finite gradient in parameter {p.name!r}")
    for p in params:
        rate = float(rates.get(p.group, 0.0))
        if rate:
            p.value = p.value - rate * p.grad
        p.zero_grad()


def zero_grads(params: Iterable[Parameter]) -> None:
    for p in params:
        p.zero_grad()


# ---------------------------------------------------------------------------
# checkpoints
# ---------------------------------------------------------------------------

def save_checkpoint(path, params: Mapping[str, Parameter], meta: Mapping | None = None,
                    arrays: Mapping[str, np.ndarray] | None = None) -> None:
    """Write parameters (plus optional extra arrays and JSON metadata) to an ``.npz`` file."""
    payload = {"__version__": np.array(CHECKPOINT_VERSION),
               "__meta__": np.array(json.dumps(dict(meta or {}), sort_keys=True))}
    groups = {}
    for name, p in params.items():
        payload[f"param/{name}"] = p.value
        groups[name] = p.group
    payload["__groups__"] = np.array(json.dumps(groups, sort_keys=True))
    for name, arr in (arrays or {}).items():
        payload[f"array/{name}"] = np.asarray(arr)
    buf = io.BytesIO()
    np.savez(buf, **payload)
    Path(path).write_bytes(buf.getvalue())


def load_checkpoint(path):
    """Inverse of :func:`save_checkpoint`; returns ``(params, meta, arrays)``."""
    with np.load(Path(path), allow_pickle=False) as data:
        version = int(data["__version__"])
        if version != CHECKPOINT_VERSION:
            raise ValueError(f"unsupported checkpoint version {version}")
        meta = json.loads(str(data["__meta__"]))
        groups = json.loads(str(data["__groups__"]))
        params, arrays = {}, {}
        for key in data.files:
            if key.startswith("param/"):
                name = key[len("param/"):]
                params[name] = Parameter(data[key], group=groups[name], name=name)
            elif key.startswith("array/"):
                arrays[key[len("array/"):]] = np.array(data[key])
    return params, meta, arrays
