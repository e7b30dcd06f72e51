"""Dense float64 tensors (rank <= 2) with tape-free reverse-mode differentiation.

Every differentiable operation creates a new :class:`Tensor` that remembers its
parents, the name of its local-gradient rule and whatever context the rule
needs.  :func:`backward` walks the graph in reverse topological order and looks
each rule up in :data:`GRAD_RULES`, so a rule can be swapped out (the gradient
checker's negative control does exactly that).

Broadcasting is deliberately absent: binary ops need equal shapes; scalars
enter through :func:`scale` and :func:`shift`; bias rows enter through
:func:`affine`.
"""
from __future__ import annotations

from typing import Callable, Iterable, Sequence

import numpy as np

from .errors import DegenerateVectorError, DimensionError, DomainError

EPS_NORM = 1e-12

__all__ = [
    "Tensor", "GRAD_RULES", "EPS_NORM", "backward", "as_tensor",
    "add", "sub", "mul", "scale", "shift", "relu", "tanh", "exp", "log", "sigmoid",
    "elementwise", "matmul", "transpose", "reshape", "reduce", "reduce_sum",
    "reduce_mean", "reduce_max", "concat", "take_rows", "affine",
    "cosine_similarity", "rowwise_cosine", "normalize_rows", "log1p_sum_exp",
    "softmax_cross_entropy", "bce_with_logits",
]


class Tensor:
    """Immutable float64 array plus the bookkeeping needed to differentiate through it."""

    __slots__ = ("data", "requires_grad", "grad", "parents", "op", "ctx", "name")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        arr = np.array(data, dtype=np.float64)
        if arr.ndim > 2:
            raise DimensionError(f"tensors are limited to rank 2, got shape {arr.shape}")
        if not np.all(np.isfinite(arr)):
            bad = tuple(int(i) for i in np.argwhere(~np.isfinite(arr))[0]) if arr.ndim else ()
            raise FloatingPointError(f"non-finite entry at index {bad}")
        arr.flags.writeable = False
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        self.parents: tuple[Tensor, ...] = ()
        self.op = "leaf"
        self.ctx: dict = {}
        self.name = name

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def T(self) -> "Tensor":
        return transpose(self)

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        if self.data.size != 1:
            raise DimensionError(f"item() needs a single element, got shape {self.shape}")
        return float(self.data.reshape(-1)[0])

    def __repr__(self):
        tag = f", op={self.op}" if self.op != "leaf" else ""
        return f"Tensor(shape={self.shape}{tag}, requires_grad={self.requires_grad})"

    def __add__(self, other):
        return shift(self, other) if np.isscalar(other) else add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return shift(self, -other) if np.isscalar(other) else sub(self, other)

    def __rsub__(self, other):
        return shift(scale(self, -1.0), other)

    def __mul__(self, other):
        return scale(self, other) if np.isscalar(other) else mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return scale(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _node(data, op: str, parents: Sequence[Tensor], **ctx) -> Tensor:
    out = Tensor(data)
    if any(p.requires_grad for p in parents):
        out.requires_grad = True
        out.parents = tuple(parents)
        out.op = op
        out.ctx = ctx
    return out


def _same_shape(op: str, a: Tensor, b: Tensor):
    if a.shape != b.shape:
        raise DimensionError(f"{op}: shapes {a.shape} and {b.shape} differ")


# ---------------------------------------------------------------------------
# elementwise
# ---------------------------------------------------------------------------

def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _same_shape("add", a, b)
    return _node(a.data + b.data, "add", (a, b))


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _same_shape("sub", a, b)
    return _node(a.data - b.data, "sub", (a, b))


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _same_shape("mul", a, b)
    return _node(a.data * b.data, "mul", (a, b))


def scale(a, c: float) -> Tensor:
    a = as_tensor(a)
    c = float(c)
    return _node(a.data * c, "scale", (a,), c=c)


def shift(a, c: float) -> Tensor:
    a = as_tensor(a)
    return _node(a.data + float(c), "shift", (a,))


def relu(a) -> Tensor:
    a = as_tensor(a)
    return _node(np.maximum(a.data, 0.0), "relu", (a,))


def tanh(a) -> Tensor:
    a = as_tensor(a)
    return _node(np.tanh(a.data), "tanh", (a,))


def exp(a) -> Tensor:
    a = as_tensor(a)
    with np.errstate(over="ignore"):
        out = np.exp(a.data)
    return _node(out, "exp", (a,))


def log(a) -> Tensor:
    a = as_tensor(a)
    bad = np.argwhere(a.data <= 0)
    if bad.size:
        idx = tuple(int(i) for i in bad[0])
        raise DomainError(f"log of non-positive entry {a.data[idx]!r} at index {idx}")
    return _node(np.log(a.data), "log", (a,))


def _sigmoid(x: np.ndarray) -> np.ndarray:
    return 0.5 * (1.0 + np.tanh(0.5 * x))


def sigmoid(a) -> Tensor:
    a = as_tensor(a)
    return _node(_sigmoid(a.data), "sigmoid", (a,))


_UNARY = {"relu": relu, "tanh": tanh, "exp": exp, "log": log, "sigmoid": sigmoid}
_BINARY = {"add": add, "sub": sub, "mul": mul}


def elementwise(op: str, *inputs, c: float | None = None) -> Tensor:
    """Dispatch by tag: add/sub/mul (two tensors), scale (tensor, c), or a unary nonlinearity."""
    if op in _BINARY:
        return _BINARY[op](*inputs)
    if op == "scale":
        return scale(inputs[0], c if c is not None else inputs[1])
    if op in _UNARY:
        return _UNARY[op](*inputs)
    raise ValueError(f"unknown elementwise op {op!r}")


# ---------------------------------------------------------------------------
# linear algebra and shape manipulation
# ---------------------------------------------------------------------------

def matmul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim == 0 or b.ndim == 0:
        raise DimensionError(f"matmul: scalar operand (shapes {a.shape} and {b.shape})")
    if a.shape[-1] != b.shape[0]:
        raise DimensionError(f"matmul: inner dimensions differ for shapes {a.shape} and {b.shape}")
    return _node(a.data @ b.data, "matmul", (a, b))


def transpose(a) -> Tensor:
    a = as_tensor(a)
    return _node(a.data.T, "transpose", (a,))


def reshape(a, shape: Sequence[int]) -> Tensor:
    a = as_tensor(a)
    shape = tuple(int(s) for s in shape)
    if int(np.prod(shape)) != a.data.size:
        raise DimensionError(f"cannot reshape {a.shape} to {shape}")
    return _node(a.data.reshape(shape), "reshape", (a,))


def concat(tensors: Sequence[Tensor], axis: int = 1) -> Tensor:
    ts = [as_tensor(t) for t in tensors]
    if not ts:
        raise DimensionError("concat of an empty list")
    if any(t.ndim != ts[0].ndim for t in ts):
        raise DimensionError(f"concat: mixed ranks {[t.shape for t in ts]}")
    try:
        out = np.concatenate([t.data for t in ts], axis=axis)
    except ValueError as exc:
        raise DimensionError(f"concat: incompatible shapes {[t.shape for t in ts]}") from exc
    sizes = [t.shape[axis] for t in ts]
    return _node(out, "concat", ts, axis=axis, splits=np.cumsum(sizes)[:-1])


def take_rows(a, index: Iterable[int]) -> Tensor:
    a = as_tensor(a)
    idx = np.asarray(list(index), dtype=np.intp)
    return _node(a.data[idx], "take_rows", (a,), index=idx)


def affine(x, w, b) -> Tensor:
    """``x @ w + b`` with the bias row added to every sample row."""
    x, w, b = as_tensor(x), as_tensor(w), as_tensor(b)
    if x.ndim != 2 or w.ndim != 2 or b.ndim != 1:
        raise DimensionError(f"affine expects (n,p),(p,q),(q,), got {x.shape},{w.shape},{b.shape}")
    if x.shape[1] != w.shape[0] or w.shape[1] != b.shape[0]:
        raise DimensionError(f"affine: shapes {x.shape}, {w.shape}, {b.shape} do not chain")
    return _node(x.data @ w.data + b.data, "affine", (x, w, b))


# ---------------------------------------------------------------------------
# reductions
# ---------------------------------------------------------------------------

def _check_axis(op: str, a: Tensor, axis):
    if axis is None:
        if a.data.size == 0:
            raise DimensionError(f"{op} over an empty tensor")
        return
    if not -a.ndim <= axis < a.ndim:
        raise DimensionError(f"{op}: axis {axis} invalid for shape {a.shape}")
    if a.shape[axis] == 0:
        raise DimensionError(f"{op}: axis {axis} is empty for shape {a.shape}")


def reduce_sum(a, axis: int | None = None) -> Tensor:
    a = as_tensor(a)
    _check_axis("sum", a, axis)
    return _node(a.data.sum(axis=axis), "sum", (a,), axis=axis)


def reduce_mean(a, axis: int | None = None) -> Tensor:
    a = as_tensor(a)
    _check_axis("mean", a, axis)
    return _node(a.data.mean(axis=axis), "mean", (a,), axis=axis)


def reduce_max(a, axis: int | None = None) -> Tensor:
    a = as_tensor(a)
    _check_axis("max", a, axis)
    return _node(a.data.max(axis=axis), "max", (a,), axis=axis)


_REDUCE = {"sum": reduce_sum, "mean": reduce_mean, "max": reduce_max}


def reduce(op: str, a, axis: int | None = None) -> Tensor:
    if op not in _REDUCE:
        raise ValueError(f"unknown reduction {op!r}")
    return _REDUCE[op](a, axis)


# ---------------------------------------------------------------------------
# fused primitives used by the losses
# ---------------------------------------------------------------------------

def cosine_similarity(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim != 1:
        raise DimensionError(f"cosine_similarity expects vectors, got {a.shape}")
    _same_shape("cosine_similarity", a, b)
    na, nb = np.linalg.norm(a.data), np.linalg.norm(b.data)
    if na <= EPS_NORM or nb <= EPS_NORM:
        raise DegenerateVectorError(f"cosine similarity of near-zero vector (norms {na:.3g}, {nb:.3g})")
    c = float(a.data @ b.data) / (na * nb)
    return _node(c, "cosine", (a, b), na=na, nb=nb)


def rowwise_cosine(a, b) -> Tensor:
    """Cosine similarity between matching rows; returns a length-n vector."""
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim != 2:
        raise DimensionError(f"rowwise_cosine expects matrices, got {a.shape}")
    _same_shape("rowwise_cosine", a, b)
    na = np.linalg.norm(a.data, axis=1)
    nb = np.linalg.norm(b.data, axis=1)
    for which, norms in (("first", na), ("second", nb)):
        bad = np.flatnonzero(norms <= EPS_NORM)
        if bad.size:
            raise DegenerateVectorError(
                f"rowwise_cosine: {which} operand row {int(bad[0])} has near-zero norm {norms[bad[0]]:.3g}",
            )
    c = np.einsum("ij,ij->i", a.data, b.data) / (na * nb)
    return _node(c, "rowwise_cosine", (a, b), na=na, nb=nb)


def normalize_rows(a) -> Tensor:
    a = as_tensor(a)
    if a.ndim != 2:
        raise DimensionError(f"normalize_rows expects a matrix, got {a.shape}")
    norms = np.linalg.norm(a.data, axis=1)
    bad = np.flatnonzero(norms <= EPS_NORM)
    if bad.size:
        raise DegenerateVectorError(f"normalize_rows: row {int(bad[0])} has near-zero norm")
    return _node(a.data / norms[:, None], "normalize_rows", (a,), norms=norms)


def log1p_sum_exp(a, mask=None, axis: int | None = None) -> Tensor:
    """``log(1 + sum(exp(x)))`` over the entries selected by ``mask``.

    Stabilised as ``m + log(exp(-m) + sum(exp(x - m)))`` with ``m = max(0, max x)``.
    Entries outside the mask are ignored; an all-masked slice yields ``log 1 = 0``.
    """
    a = as_tensor(a)
    keep = np.ones(a.shape, dtype=bool) if mask is None else np.asarray(mask, dtype=bool)
    if keep.shape != a.shape:
        raise DimensionError(f"log1p_sum_exp: mask shape {keep.shape} != {a.shape}")
    if axis is not None:
        _check_axis("log1p_sum_exp", a, axis)
    x = np.where(keep, a.data, -np.inf)
    m = np.maximum(0.0, np.max(x, axis=axis, keepdims=True))
    e = np.where(keep, np.exp(x - m), 0.0)
    denom = np.exp(-m) + e.sum(axis=axis, keepdims=True)
    out = m + np.log(denom)
    weights = e / denom
    out = out.reshape(()) if axis is None else np.squeeze(out, axis=axis)
    return _node(out, "log1p_sum_exp", (a,), weights=weights, axis=axis)


def softmax_cross_entropy(logits, labels) -> Tensor:
    """Per-sample ``logsumexp(z) - z[y]`` for integer class labels."""
    z = as_tensor(logits)
    y = np.asarray(labels)
    if z.ndim != 2 or y.shape != (z.shape[0],):
        raise DimensionError(f"softmax_cross_entropy: logits {z.shape} vs labels {y.shape}")
    if y.size and (y.min() < 0 or y.max() >= z.shape[1]):
        raise DomainError(f"label index out of range [0, {z.shape[1]})")
    y = y.astype(np.intp)
    m = z.data.max(axis=1, keepdims=True)
    shifted = z.data - m
    lse = np.log(np.exp(shifted).sum(axis=1))
    rows = np.arange(z.shape[0])
    out = lse - shifted[rows, y]
    probs = np.exp(shifted - lse[:, None])
    return _node(out, "softmax_xent", (z,), probs=probs, labels=y)


def bce_with_logits(logits, targets) -> Tensor:
    """Elementwise ``-[y log s(z) + (1-y) log(1-s(z))]`` computed from logits."""
    z = as_tensor(logits)
    y = np.asarray(targets, dtype=np.float64)
    if y.shape != z.shape:
        raise DimensionError(f"bce_with_logits: logits {z.shape} vs targets {y.shape}")
    x = z.data
    out = np.maximum(x, 0.0) - x * y + np.log1p(np.exp(-np.abs(x)))
    return _node(out, "bce_logits", (z,), targets=y)


# ---------------------------------------------------------------------------
# local gradient rules: rule(node, upstream) -> tuple of parent adjoints
# ---------------------------------------------------------------------------

def _unbroadcast_reduce(g, shape, axis):
    if axis is None:
        return np.broadcast_to(g, shape)
    return np.broadcast_to(np.expand_dims(g, axis), shape)


def _g_matmul(n, g):
    a, b = n.parents
    a2 = a.data if a.ndim == 2 else a.data[None, :]
    b2 = b.data if b.ndim == 2 else b.data[:, None]
    g2 = np.asarray(g).reshape(a2.shape[0], b2.shape[1])
    return (g2 @ b2.T).reshape(a.shape), (a2.T @ g2).reshape(b.shape)


def _g_max(n, g):
    (a,) = n.parents
    axis = n.ctx["axis"]
    out = np.zeros(a.shape)
    if axis is None:
        out[np.unravel_index(np.argmax(a.data), a.shape)] = g
        return (out,)
    idx = np.expand_dims(np.argmax(a.data, axis=axis), axis)
    np.put_along_axis(out, idx, np.expand_dims(g, axis), axis=axis)
    return (out,)


def _g_concat(n, g):
    return tuple(np.split(g, n.ctx["splits"], axis=n.ctx["axis"]))


def _g_take_rows(n, g):
    (a,) = n.parents
    out = np.zeros(a.shape)
    np.add.at(out, n.ctx["index"], g)
    return (out,)


def _g_affine(n, g):
    x, w, _ = n.parents
    return g @ w.data.T, x.data.T @ g, g.sum(axis=0)


def _g_cosine(n, g):
    a, b = n.parents
    na, nb, c = n.ctx["na"], n.ctx["nb"], float(n.data)
    ga = b.data / (na * nb) - c * a.data / na**2
    gb = a.data / (na * nb) - c * b.data / nb**2
    return g * ga, g * gb


def _g_rowwise_cosine(n, g):
    a, b = n.parents
    na, nb, c = n.ctx["na"][:, None], n.ctx["nb"][:, None], n.data[:, None]
    gcol = np.asarray(g)[:, None]
    ga = b.data / (na * nb) - c * a.data / na**2
    gb = a.data / (na * nb) - c * b.data / nb**2
    return gcol * ga, gcol * gb


def _g_normalize_rows(n, g):
    y = n.data
    norms = n.ctx["norms"][:, None]
    proj = np.einsum("ij,ij->i", y, g)[:, None]
    return ((g - y * proj) / norms,)


def _g_log1p_sum_exp(n, g):
    axis = n.ctx["axis"]
    gexp = g if axis is None else np.expand_dims(g, axis)
    return (n.ctx["weights"] * gexp,)


def _g_softmax_xent(n, g):
    probs = n.ctx["probs"].copy()
    probs[np.arange(probs.shape[0]), n.ctx["labels"]] -= 1.0
    return (np.asarray(g)[:, None] * probs,)


def _g_bce_logits(n, g):
    (z,) = n.parents
    return (g * (_sigmoid(z.data) - n.ctx["targets"]),)


GRAD_RULES: dict[str, Callable] = {
    "add": lambda n, g: (g, g),
    "sub": lambda n, g: (g, -g),
    "mul": lambda n, g: (g * n.parents[1].data, g * n.parents[0].data),
    "scale": lambda n, g: (g * n.ctx["c"],),
    "shift": lambda n, g: (g,),
    # subgradient 0 at the kink
    "relu": lambda n, g: (g * (n.parents[0].data > 0),),
    "tanh": lambda n, g: (g * (1.0 - n.data**2),),
    "exp": lambda n, g: (g * n.data,),
    "log": lambda n, g: (g / n.parents[0].data,),
    "sigmoid": lambda n, g: (g * n.data * (1.0 - n.data),),
    "matmul": _g_matmul,
    "transpose": lambda n, g: (np.asarray(g).T,),
    "reshape": lambda n, g: (np.asarray(g).reshape(n.parents[0].shape),),
    "sum": lambda n, g: (_unbroadcast_reduce(g, n.parents[0].shape, n.ctx["axis"]),),
    "mean": lambda n, g: (
        _unbroadcast_reduce(g, n.parents[0].shape, n.ctx["axis"])
        * (n.data.size / n.parents[0].data.size),
    ),
    "max": _g_max,
    "concat": _g_concat,
    "take_rows": _g_take_rows,
    "affine": _g_affine,
    "cosine": _g_cosine,
    "rowwise_cosine": _g_rowwise_cosine,
    "normalize_rows": _g_normalize_rows,
    "log1p_sum_exp": _g_log1p_sum_exp,
    "softmax_xent": _g_softmax_xent,
    "bce_logits": _g_bce_logits,
}


def _topological_order(root: Tensor) -> list[Tensor]:
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
            if p.requires_grad and id(p) not in seen:
                stack.append((p, False))
    return order


def backward(root: Tensor) -> dict[Tensor, np.ndarray]:
    """Populate ``.grad`` on every leaf that requires it and return ``{leaf: d root / d leaf}``."""
    if root.data.size != 1:
        raise DimensionError(f"backward needs a scalar root, got shape {root.shape}")
    if not root.requires_grad:
        return {}
    order = _topological_order(root)
    adjoint = {id(node): np.zeros(node.shape) for node in order}
    adjoint[id(root)] = np.ones(root.shape)
    leaves = {}
    for node in reversed(order):
        g = adjoint[id(node)]
        if not node.parents:
            node.grad = g
            leaves[node] = g
            continue
        grads = GRAD_RULES[node.op](node, g)
        for parent, pg in zip(node.parents, grads):
            if parent.requires_grad:
                adjoint[id(parent)] = adjoint[id(parent)] + pg
    return leaves
