"""Dense float64 tensors with reverse-mode automatic differentiation.

The op set is deliberately small: exactly what a bidirectional triplet
transformer and its training loop need. Graphs are recorded eagerly through
parent links; ``backward`` replays them in reverse creation order, which is
a valid topological order because every node is created after its inputs.
All math runs in float64.
"""

from __future__ import annotations

import itertools
from dataclasses import dataclass, field

import numpy as np

from .errors import CapacityError, ConfigError, ContractError, DimensionError, EvaluationError

__all__ = [
    "Tensor", "ComputeGraph", "trace", "backward", "zero_grads",
    "matmul", "add", "sub", "mul", "scale", "concat", "slice_", "gather_rows",
    "rms_norm", "softmax_rows", "silu", "mean", "sum_", "max_reduce",
    "reshape", "transpose_last", "rope_rotate", "mse_loss", "cross_entropy",
    "finite_diff_check", "FiniteDiffReport",
]

_ids = itertools.count()


class Tensor:
    """A float64 array plus the bookkeeping needed for reverse-mode autodiff.

    ``data`` is immutable by convention once the tensor participates in a
    graph; only ``grad`` buffers are mutated afterwards. Leaves created with
    ``requires_grad=True`` accumulate gradients across ``backward`` calls
    until ``zero_grads`` resets them.
    """

    __slots__ = ("data", "requires_grad", "grad", "_parents", "_backward_fn", "_op", "_id")

    def __init__(self, data, requires_grad=False, _parents=(), _backward_fn=None, _op=None):
        self.data = np.asarray(data, dtype=np.float64)
        self.requires_grad = bool(requires_grad)
        self.grad = None
        self._parents = _parents
        self._backward_fn = _backward_fn
        self._op = _op
        self._id = next(_ids)

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def size(self):
        return self.data.size

    def item(self) -> float:
        if self.data.size != 1:
            raise ContractError(f"item() needs a single-element tensor, got shape {self.shape}")
        return float(self.data.reshape(()))

    def is_leaf(self) -> bool:
        return not self._parents

    def detach(self) -> "Tensor":
        return Tensor(self.data.copy())

    def __repr__(self):
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad}, op={self._op})"

    # Small operator sugar; everything routes through the module-level ops.
    def __add__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return sub(self, other)

    def __mul__(self, other):
        if isinstance(other, (int, float)):
            return scale(self, float(other))
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return scale(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, key):
        return slice_(self, key)


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(np.asarray(x, dtype=np.float64))


def _make(data, parents, backward_fn, op):
    req = any(p.requires_grad for p in parents)
    if not req:
        backward_fn = None
    return Tensor(data, requires_grad=req, _parents=tuple(parents), _backward_fn=backward_fn, _op=op)


def _unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    """Sum ``grad`` down to ``shape`` (inverse of numpy broadcasting)."""
    if grad.shape == tuple(shape):
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    keep = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if keep:
        grad = grad.sum(axis=keep, keepdims=True)
    return grad.reshape(shape)


# ---------------------------------------------------------------------------
# ops
# ---------------------------------------------------------------------------

def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product, np.matmul stack semantics for ndim >= 2 operands."""
    a, b = _as_tensor(a), _as_tensor(b)
    if a.ndim < 2 or b.ndim < 2:
        raise DimensionError("matmul operands must have ndim >= 2")
    if a.shape[-1] != b.shape[-2]:
        raise DimensionError(f"matmul inner dims differ: {a.shape} @ {b.shape}")
    out = np.matmul(a.data, b.data)

    def bw(g):
        ga = _unbroadcast(np.matmul(g, np.swapaxes(b.data, -1, -2)), a.shape)
        gb = _unbroadcast(np.matmul(np.swapaxes(a.data, -1, -2), g), b.shape)
        return ga, gb

    return _make(out, (a, b), bw, "matmul")


def add(a: Tensor, b: Tensor) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    out = a.data + b.data

    def bw(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return _make(out, (a, b), bw, "add")


def sub(a: Tensor, b: Tensor) -> Tensor:
    return add(a, scale(_as_tensor(b), -1.0))


def mul(a: Tensor, b: Tensor) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    out = a.data * b.data

    def bw(g):
        return _unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)

    return _make(out, (a, b), bw, "mul")


def scale(a: Tensor, s: float) -> Tensor:
    a = _as_tensor(a)
    s = float(s)

    def bw(g):
        return (g * s,)

    return _make(a.data * s, (a,), bw, "scale")


def concat(tensors, axis: int = 0) -> Tensor:
    tensors = [_as_tensor(t) for t in tensors]
    if not tensors:
        raise ContractError("concat needs at least one tensor")
    out = np.concatenate([t.data for t in tensors], axis=axis)
    sizes = [t.shape[axis] for t in tensors]
    splits = np.cumsum(sizes)[:-1]

    def bw(g):
        return tuple(np.split(g, splits, axis=axis))

    return _make(out, tensors, bw, "concat")


def slice_(a: Tensor, key) -> Tensor:
    """Slicing / indexing; gradient scatters back (duplicates accumulate)."""
    a = _as_tensor(a)
    out = a.data[key]

    def bw(g):
        acc = np.zeros_like(a.data)
        np.add.at(acc, key, g)
        return (acc,)

    return _make(out, (a,), bw, "slice")


def gather_rows(table: Tensor, ids) -> Tensor:
    """Row lookup ``table[ids]``; ids may have any shape. Backs embeddings."""
    table = _as_tensor(table)
    ids = np.asarray(ids)
    if not np.issubdtype(ids.dtype, np.integer):
        raise ContractError("gather ids must be integers")
    if table.ndim != 2:
        raise DimensionError("gather_rows expects a 2-D table")
    if ids.size and (ids.min() < 0 or ids.max() >= table.shape[0]):
        raise CapacityError(
            f"gather index out of range: ids in [{ids.min()}, {ids.max()}], table has {table.shape[0]} rows")
    out = table.data[ids]

    def bw(g):
        acc = np.zeros_like(table.data)
        np.add.at(acc, ids.reshape(-1), g.reshape(-1, table.shape[1]))
        return (acc,)

    return _make(out, (table,), bw, "gather")


def rms_norm(x: Tensor, gain: Tensor, eps: float = 1e-6) -> Tensor:
    """y = gain * x / sqrt(mean(x^2, last axis) + eps)."""
    x, gain = _as_tensor(x), _as_tensor(gain)
    n = x.shape[-1]
    if n < 1:
        raise DimensionError("rms_norm needs a non-empty last axis")
    ms = np.mean(x.data ** 2, axis=-1, keepdims=True)
    r = 1.0 / np.sqrt(ms + eps)
    out = gain.data * x.data * r

    def bw(g):
        gx_full = g * gain.data
        gx = gx_full * r - x.data * (r ** 3 / n) * np.sum(gx_full * x.data, axis=-1, keepdims=True)
        ggain = _unbroadcast(g * x.data * r, gain.shape)
        return gx, ggain

    return _make(out, (x, gain), bw, "rms_norm")


def softmax_rows(x: Tensor) -> Tensor:
    """Softmax over the last axis, max-subtracted for stability."""
    x = _as_tensor(x)
    z = x.data - np.max(x.data, axis=-1, keepdims=True)
    e = np.exp(z)
    p = e / np.sum(e, axis=-1, keepdims=True)

    def bw(g):
        return (p * (g - np.sum(g * p, axis=-1, keepdims=True)),)

    return _make(p, (x,), bw, "softmax_rows")


def silu(x: Tensor) -> Tensor:
    x = _as_tensor(x)
    sig = 1.0 / (1.0 + np.exp(-x.data))
    out = x.data * sig

    def bw(g):
        return (g * sig * (1.0 + x.data * (1.0 - sig)),)

    return _make(out, (x,), bw, "silu")


def _reduce(x: Tensor, axis, op_name, np_fn, grad_fn):
    x = _as_tensor(x)
    out = np_fn(x.data, axis=axis)

    def bw(g):
        return (grad_fn(np.asarray(g)),)

    return _make(out, (x,), bw, op_name)


def sum_(x: Tensor, axis=None) -> Tensor:
    x = _as_tensor(x)

    def grad_fn(g):
        if axis is None:
            return np.broadcast_to(g, x.shape).copy()
        return np.broadcast_to(np.expand_dims(g, axis), x.shape).copy()

    return _reduce(x, axis, "sum", np.sum, grad_fn)


def mean(x: Tensor, axis=None) -> Tensor:
    x = _as_tensor(x)
    n = x.size if axis is None else x.shape[axis]
    if n == 0:
        raise DimensionError("mean over an empty axis")

    def grad_fn(g):
        if axis is None:
            return np.broadcast_to(g / n, x.shape).copy()
        return np.broadcast_to(np.expand_dims(g, axis), x.shape) / n

    return _reduce(x, axis, "mean", np.mean, grad_fn)


def max_reduce(x: Tensor, axis: int) -> Tensor:
    """Max along ``axis``; ties route the gradient to the first maximum."""
    x = _as_tensor(x)
    idx = np.argmax(x.data, axis=axis)
    out = np.take_along_axis(x.data, np.expand_dims(idx, axis), axis=axis).squeeze(axis)

    def bw(g):
        acc = np.zeros_like(x.data)
        np.put_along_axis(acc, np.expand_dims(idx, axis), np.expand_dims(np.asarray(g), axis), axis=axis)
        return (acc,)

    return _make(out, (x,), bw, "max")


def reshape(x: Tensor, shape) -> Tensor:
    x = _as_tensor(x)
    out = x.data.reshape(shape)

    def bw(g):
        return (g.reshape(x.shape),)

    return _make(out, (x,), bw, "reshape")


def transpose_last(x: Tensor) -> Tensor:
    """Swap the last two axes (matmul plumbing)."""
    x = _as_tensor(x)
    if x.ndim < 2:
        raise DimensionError("transpose_last needs ndim >= 2")

    def bw(g):
        return (np.swapaxes(g, -1, -2),)

    return _make(np.swapaxes(x.data, -1, -2), (x,), bw, "transpose_last")


def _rope_tables(positions: np.ndarray, head_dim: int, base: float):
    half = head_dim // 2
    inv = base ** (-2.0 * np.arange(half) / head_dim)
    ang = np.asarray(positions, dtype=np.float64)[:, None] * inv[None, :]
    return np.cos(ang), np.sin(ang)


def rope_rotate(x: Tensor, positions, base: float = 10000.0) -> Tensor:
    """Rotary rotation of interleaved pairs (2i, 2i+1) along the last axis.

    ``x`` has shape (..., L, head_dim); ``positions`` is an integer per one
    of the L rows. Angles are position * base**(-2i/head_dim). The map is
    orthogonal, so the backward pass rotates the gradient by the negated
    angles.
    """
    x = _as_tensor(x)
    head_dim = x.shape[-1]
    if head_dim % 2 != 0:
        raise ConfigError("rope_rotate needs an even head dimension")
    positions = np.atleast_1d(np.asarray(positions))
    if x.ndim < 2 or x.shape[-2] != positions.shape[0]:
        raise DimensionError(f"positions length {positions.shape[0]} does not match rows {x.shape}")
    cos, sin = _rope_tables(positions, head_dim, float(base))

    def apply(v, c, s):
        even, odd = v[..., 0::2], v[..., 1::2]
        out = np.empty_like(v)
        out[..., 0::2] = even * c - odd * s
        out[..., 1::2] = even * s + odd * c
        return out

    def bw(g):
        return (apply(g, cos, -sin),)

    return _make(apply(x.data, cos, sin), (x,), bw, "rope")


def mse_loss(pred: Tensor, target) -> Tensor:
    """Mean squared error over all elements; target is held constant."""
    pred = _as_tensor(pred)
    t = target.data if isinstance(target, Tensor) else np.asarray(target, dtype=np.float64)
    if pred.shape != t.shape:
        raise DimensionError(f"mse shapes differ: {pred.shape} vs {t.shape}")
    d = pred.data - t
    out = np.mean(d ** 2)
    n = pred.size

    def bw(g):
        return (np.asarray(g) * 2.0 * d / n,)

    return _make(out, (pred,), bw, "mse")


def cross_entropy(logits: Tensor, ids) -> Tensor:
    """Mean cross-entropy of rows of ``logits`` (N, V) against integer ids (N,)."""
    logits = _as_tensor(logits)
    ids = np.asarray(ids)
    if logits.ndim != 2:
        raise DimensionError("cross_entropy expects (N, V) logits")
    n, v = logits.shape
    if ids.shape != (n,):
        raise DimensionError(f"ids shape {ids.shape} does not match {n} rows")
    if ids.size and (ids.min() < 0 or ids.max() >= v):
        raise ContractError("cross_entropy target id out of range")
    z = logits.data - np.max(logits.data, axis=-1, keepdims=True)
    lse = np.log(np.sum(np.exp(z), axis=-1))
    out = np.mean(lse - z[np.arange(n), ids])
    p = np.exp(z - lse[:, None])

    def bw(g):
        gl = p.copy()
        gl[np.arange(n), ids] -= 1.0
        return (np.asarray(g) * gl / n,)

    return _make(out, (logits,), bw, "cross_entropy")


# ---------------------------------------------------------------------------
# graph traversal and backward
# ---------------------------------------------------------------------------

@dataclass
class ComputeGraph:
    """Nodes reachable from a root, in topological (creation) order."""

    nodes: list = field(default_factory=list)

    def op_kinds(self):
        return [n._op for n in self.nodes]


def trace(root: Tensor) -> ComputeGraph:
    """Collect the subgraph that requires grad, sorted by creation order."""
    seen = set()
    nodes = []
    stack = [root]
    while stack:
        node = stack.pop()
        if id(node) in seen or not node.requires_grad:
            continue
        seen.add(id(node))
        nodes.append(node)
        stack.extend(node._parents)
    nodes.sort(key=lambda n: n._id)
    return ComputeGraph(nodes)


def backward(loss: Tensor) -> dict:
    """Reverse-mode pass from a scalar loss.

    Returns a map {leaf Tensor: gradient array} over every requires_grad
    leaf reachable from the loss, and accumulates the same values into each
    leaf's ``.grad`` buffer (repeated calls without ``zero_grads`` add up).
    Traversal runs in reverse creation order, so accumulation order is
    deterministic.
    """
    if loss.data.size != 1:
        raise ContractError(f"backward needs a scalar loss, got shape {loss.shape}")
    if not loss.requires_grad:
        return {}
    graph = trace(loss)
    grads = {id(loss): np.ones_like(loss.data)}
    leaf_grads = {}
    for node in reversed(graph.nodes):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if node.is_leaf():
            leaf_grads[node] = g
            continue
        for parent, pg in zip(node._parents, node._backward_fn(g)):
            if not parent.requires_grad or pg is None:
                continue
            key = id(parent)
            if key in grads:
                grads[key] = grads[key] + pg
            else:
                grads[key] = pg
    for leaf, g in leaf_grads.items():
        g = np.asarray(g, dtype=np.float64).reshape(leaf.shape)
        if leaf.grad is None:
            leaf.grad = g.copy()
        else:
            leaf.grad = leaf.grad + g
    return leaf_grads


def zero_grads(params) -> None:
    """Clear grad buffers on an iterable or dict of tensors."""
    tensors = params.values() if isinstance(params, dict) else params
    for t in tensors:
        t.grad = None


# ---------------------------------------------------------------------------
# finite-difference gradient checking
# ---------------------------------------------------------------------------

@dataclass
class FiniteDiffReport:
    """Per-parameter worst relative error between analytic and numeric grads."""

    max_rel_err: dict
    failures: list
    tol: float
    checked: int

    @property
    def passed(self) -> bool:
        return not self.failures

    def worst(self) -> float:
        return max(self.max_rel_err.values(), default=0.0)


def _rel_err(a: float, n: float) -> float:
    return abs(a - n) / max(1e-12, abs(a) + abs(n))


def finite_diff_check(f, params: dict, h: float = 1e-5, tol: float = 1e-4,
                      max_entries: int | None = None, rng=None) -> FiniteDiffReport:
    """Compare analytic gradients of ``f`` with central finite differences.

    ``f`` maps the given {name: Tensor} dict to a scalar Tensor, rebuilding
    its graph on every call. When ``max_entries`` is set, that many scalar
    entries are sampled (seeded) across all parameters; otherwise every
    entry is checked. Parameter values are perturbed in place and restored.
    """
    loss = f(params)
    if not np.isfinite(loss.data).all():
        raise EvaluationError("objective is not finite at the evaluation point")
    zero_grads(params)
    backward(loss)
    analytic = {name: (p.grad if p.grad is not None else np.zeros_like(p.data))
                for name, p in params.items()}

    entries = [(name, idx) for name, p in params.items() for idx in range(p.size)]
    if max_entries is not None and len(entries) > max_entries:
        rng = np.random.default_rng(0) if rng is None else rng
        chosen = rng.choice(len(entries), size=max_entries, replace=False)
        entries = [entries[i] for i in sorted(chosen)]

    max_err = {name: 0.0 for name in params}
    failures = []
    for name, idx in entries:
        flat = params[name].data.reshape(-1)
        saved = flat[idx]
        flat[idx] = saved + h
        up = f(params).item()
        flat[idx] = saved - h
        down = f(params).item()
        flat[idx] = saved
        if not (np.isfinite(up) and np.isfinite(down)):
            raise EvaluationError(f"objective not finite while perturbing {name}[{idx}]")
        numeric = (up - down) / (2.0 * h)
        err = _rel_err(float(analytic[name].reshape(-1)[idx]), numeric)
        if err > max_err[name]:
            max_err[name] = err
        if err > tol:
            failures.append((name, idx, err))
    return FiniteDiffReport(max_rel_err=max_err, failures=failures, tol=tol, checked=len(entries))
