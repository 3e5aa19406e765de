"""Minimal numpy-backed tensors with tape-based reverse-mode differentiation.

Operations executed while a :class:`Graph` is active are appended to that
graph in execution order, which is already a topological order.  Outside of a
graph the same functions run as plain numpy computations, which is what
inference, evaluation and finite-difference checks use.

Only the operations the MoEUT model needs are provided.  Broadcasting follows
numpy; gradients are summed back to the input shape.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence

import numpy as np

DEFAULT_DTYPE = np.float32
LN_EPS = 1e-5


class ShapeError(ValueError):
    """Operand shapes are incompatible."""


class GraphLifecycleError(RuntimeError):
    """A graph was used after it had been consumed or closed."""


class NumericError(FloatingPointError):
    """A computation produced NaN or Inf."""


class Tensor:
    """Dense float array that may participate in differentiation.

    ``data`` is a row-major numpy array; ``grad`` is filled by
    :meth:`Graph.backward` for tensors created with ``requires_grad=True``.
    """

    __slots__ = ("data", "grad", "requires_grad", "name", "__weakref__")

    def __init__(self, data, requires_grad: bool = False, name: Optional[str] = None, dtype=None):
        if isinstance(data, Tensor):
            data = data.data
        arr = np.asarray(data)
        if dtype is not None:
            arr = arr.astype(dtype, copy=False)
        elif not np.issubdtype(arr.dtype, np.floating):
            arr = arr.astype(DEFAULT_DTYPE)
        self.data = arr if arr.flags.c_contiguous else arr.copy()
        self.grad: Optional[np.ndarray] = None
        self.requires_grad = requires_grad
        self.name = name

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def dtype(self):
        return self.data.dtype

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        label = f", name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{label})"

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, key):
        return getitem(self, key)

    def sum(self, axis=None, keepdims=False):
        return sum_(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis=axis, keepdims=keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        return transpose(self, axes or None)


@dataclass(eq=False)
class Node:
    """One recorded operation."""

    op: str
    inputs: tuple
    output: Tensor
    backward: Optional[Callable[[np.ndarray], Sequence[Optional[np.ndarray]]]]
    meta: dict = field(default_factory=dict)


_ACTIVE: list["Graph"] = []


class Graph:
    """Recording tape for one forward/backward pass.

    Use as a context manager; every op run inside is recorded.  ``backward``
    may be called once.  The recorded nodes remain inspectable afterwards,
    but their gradient closures are released.
    """

    def __init__(self):
        self.nodes: list[Node] = []
        self.consumed = False
        self._open = False

    def __enter__(self) -> "Graph":
        if self.consumed:
            raise GraphLifecycleError("graph has already been consumed by backward()")
        _ACTIVE.append(self)
        self._open = True
        return self

    def __exit__(self, *exc) -> None:
        _ACTIVE.remove(self)
        self._open = False

    def record(self, node: Node) -> None:
        if self.consumed:
            raise GraphLifecycleError("cannot record into a consumed graph")
        self.nodes.append(node)

    def ops(self, kind: Optional[str] = None) -> list[Node]:
        return [n for n in self.nodes if kind is None or n.op == kind]

    def consumers(self, t: Tensor) -> list[Node]:
        return [n for n in self.nodes if any(i is t for i in n.inputs)]

    def producer(self, t: Tensor) -> Optional[Node]:
        for n in reversed(self.nodes):
            if n.output is t:
                return n
        return None

    def backward(self, loss: Tensor) -> None:
        if self.consumed:
            raise GraphLifecycleError("backward() called twice on the same graph")
        if loss.data.size != 1:
            raise ShapeError(f"backward() needs a scalar loss, got shape {loss.shape}")
        if not any(n.output is loss for n in self.nodes):
            raise GraphLifecycleError("loss was not produced inside this graph")
        grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
        for node in reversed(self.nodes):
            g = grads.pop(id(node.output), None)
            if g is None or node.backward is None:
                continue
            in_grads = node.backward(g)
            for t, gi in zip(node.inputs, in_grads):
                if gi is None or not isinstance(t, Tensor) or not t.requires_grad:
                    continue
                key = id(t)
                if key in grads:
                    grads[key] = grads[key] + gi
                else:
                    grads[key] = gi
        # whatever is left belongs to leaves
        leaves = {}
        for node in self.nodes:
            for t in node.inputs:
                if isinstance(t, Tensor) and t.requires_grad and id(t) in grads:
                    leaves[id(t)] = t
        for key, t in leaves.items():
            g = grads[key].astype(t.dtype, copy=False)
            t.grad = g if t.grad is None else t.grad + g
        for node in self.nodes:
            node.backward = None
        self.consumed = True


def active_graph() -> Optional[Graph]:
    return _ACTIVE[-1] if _ACTIVE else None


def as_tensor(x, like: Optional[Tensor] = None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    dtype = like.dtype if like is not None else None
    return Tensor(np.asarray(x, dtype=dtype) if dtype is not None else x)


def _emit(op, inputs, out_data, backward, **meta) -> Tensor:
    needs = any(isinstance(t, Tensor) and t.requires_grad for t in inputs)
    out = Tensor(out_data, requires_grad=needs)
    g = active_graph()
    if g is not None:
        g.record(Node(op, tuple(inputs), out, backward if needs else None, meta))
    return out


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    if g.shape == shape:
        return g
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g


# ---------------------------------------------------------------- elementwise

def add(a, b, tag: Optional[str] = None) -> Tensor:
    a = as_tensor(a, b if isinstance(b, Tensor) else None)
    b = as_tensor(b, a)
    sa, sb = a.shape, b.shape
    return _emit("add", (a, b), a.data + b.data,
                 lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)), tag=tag)


def sub(a, b) -> Tensor:
    a = as_tensor(a, b if isinstance(b, Tensor) else None)
    b = as_tensor(b, a)
    sa, sb = a.shape, b.shape
    return _emit("sub", (a, b), a.data - b.data,
                 lambda g: (_unbroadcast(g, sa), _unbroadcast(-g, sb)))


def mul(a, b) -> Tensor:
    if not isinstance(b, Tensor):
        c = np.asarray(b, dtype=a.dtype)
        return _emit("scale", (a,), a.data * c, lambda g: (g * c,))
    if not isinstance(a, Tensor):
        return mul(b, a)
    sa, sb = a.shape, b.shape
    ad, bd = a.data, b.data
    return _emit("mul", (a, b), ad * bd,
                 lambda g: (_unbroadcast(g * bd, sa), _unbroadcast(g * ad, sb)))


def sigmoid(x: Tensor) -> Tensor:
    y = 0.5 * (1.0 + np.tanh(0.5 * x.data))
    return _emit("sigmoid", (x,), y, lambda g: (g * y * (1.0 - y),))


def relu(x: Tensor) -> Tensor:
    mask = x.data > 0
    return _emit("relu", (x,), np.where(mask, x.data, 0).astype(x.dtype), lambda g: (g * mask,))


def exp(x: Tensor) -> Tensor:
    y = np.exp(x.data)
    return _emit("exp", (x,), y, lambda g: (g * y,))


def log(x: Tensor) -> Tensor:
    xd = x.data
    return _emit("log", (x,), np.log(xd), lambda g: (g / xd,))


def xlogx(x: Tensor) -> Tensor:
    """Elementwise ``x * log(x)`` with the limit 0 at x = 0."""
    xd = x.data
    safe = np.where(xd > 0, xd, 1)
    y = np.where(xd > 0, xd * np.log(safe), 0).astype(x.dtype)
    return _emit("xlogx", (x,), y, lambda g: (g * np.where(xd > 0, np.log(safe) + 1, 0),))


# ---------------------------------------------------------------- reductions / shape

def sum_(x: Tensor, axis=None, keepdims=False) -> Tensor:
    shape = x.shape

    def back(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, shape).copy(),)

    return _emit("sum", (x,), np.asarray(x.data.sum(axis=axis, keepdims=keepdims)), back)


def mean(x: Tensor, axis=None, keepdims=False) -> Tensor:
    n = x.data.size if axis is None else np.prod([x.shape[a] for a in np.atleast_1d(axis)])
    return mul(sum_(x, axis=axis, keepdims=keepdims), 1.0 / float(n))


def reshape(x: Tensor, shape) -> Tensor:
    old = x.shape
    return _emit("reshape", (x,), x.data.reshape(shape), lambda g: (g.reshape(old),))


def transpose(x: Tensor, axes=None) -> Tensor:
    if axes is None:
        axes = tuple(reversed(range(x.ndim)))
    inv = tuple(np.argsort(axes))
    return _emit("transpose", (x,), np.ascontiguousarray(x.data.transpose(axes)),
                 lambda g: (g.transpose(inv),))


def getitem(x: Tensor, key) -> Tensor:
    shape, dtype = x.shape, x.dtype

    def back(g):
        out = np.zeros(shape, dtype=dtype)
        np.add.at(out, key, g)
        return (out,)

    return _emit("getitem", (x,), np.array(x.data[key]), back)


def take_rows(x: Tensor, rows: np.ndarray) -> Tensor:
    """``x[rows]`` along the first axis; also serves as embedding lookup."""
    rows = np.asarray(rows)
    shape, dtype = x.shape, x.dtype

    def back(g):
        out = np.zeros(shape, dtype=dtype)
        np.add.at(out, rows, g)
        return (out,)

    return _emit("take_rows", (x,), x.data[rows], back)


def embedding(table: Tensor, ids: np.ndarray) -> Tensor:
    ids = np.asarray(ids)
    if ids.size and (ids.min() < 0 or ids.max() >= table.shape[0]):
        raise IndexError(f"token id out of range [0, {table.shape[0]})")
    return take_rows(table, ids)


def scatter_add_rows(src: Tensor, rows: np.ndarray, n_rows: int) -> Tensor:
    """Sum rows of ``src`` into an ``n_rows``-row output at positions ``rows``."""
    rows = np.asarray(rows)
    out = np.zeros((n_rows,) + src.shape[1:], dtype=src.dtype)
    np.add.at(out, rows, src.data)
    return _emit("scatter_add_rows", (src,), out, lambda g: (g[rows],))


def pick(x: Tensor, rows: np.ndarray, cols: np.ndarray) -> Tensor:
    """Elementwise gather ``x[rows, cols]`` from a 2-d tensor."""
    rows, cols = np.asarray(rows), np.asarray(cols)
    shape, dtype = x.shape, x.dtype

    def back(g):
        out = np.zeros(shape, dtype=dtype)
        np.add.at(out, (rows, cols), g)
        return (out,)

    return _emit("pick", (x,), x.data[rows, cols], back)


# ---------------------------------------------------------------- linear algebra

def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product with numpy batching rules for ``ndim > 2``."""
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul shape mismatch: {a.shape} @ {b.shape}")
    sa, sb = a.shape, b.shape
    ad, bd = a.data, b.data

    def back(g):
        ga = g @ np.swapaxes(bd, -1, -2)
        gb = np.swapaxes(ad, -1, -2) @ g
        return _unbroadcast(ga, sa), _unbroadcast(gb, sb)

    return _emit("matmul", (a, b), ad @ bd, back)


def grouped_matmul(x: Tensor, bank: Tensor, groups: np.ndarray) -> Tensor:
    """Row-wise ``x[r] @ bank[groups[r]]`` touching only the referenced slices.

    ``x`` is (P, d_in), ``bank`` is (E, d_in, d_out) and ``groups`` holds one
    slice index per row.  Slices that no row references receive exactly zero
    gradient and are never read.
    """
    groups = np.asarray(groups)
    if x.ndim != 2 or bank.ndim != 3 or x.shape[1] != bank.shape[1] or groups.shape != x.shape[:1]:
        raise ShapeError(f"grouped_matmul shape mismatch: x {x.shape}, bank {bank.shape}, "
                         f"groups {groups.shape}")
    order = np.argsort(groups, kind="stable")
    counts = np.bincount(groups, minlength=bank.shape[0])
    bounds = np.concatenate([[0], np.cumsum(counts)])
    active = np.flatnonzero(counts)
    xd, wd = x.data, bank.data
    out = np.empty((x.shape[0], bank.shape[2]), dtype=np.result_type(xd, wd))
    for e in active:
        r = order[bounds[e]:bounds[e + 1]]
        out[r] = xd[r] @ wd[e]

    def back(g):
        gx = np.empty_like(xd)
        gw = np.zeros_like(wd)
        for e in active:
            r = order[bounds[e]:bounds[e + 1]]
            gx[r] = g[r] @ wd[e].T
            gw[e] = xd[r].T @ g[r]
        return gx, gw

    return _emit("grouped_matmul", (x, bank), out, back, groups=active)


# ---------------------------------------------------------------- normalization / softmax

def softmax_lastdim(x: Tensor, mask: Optional[np.ndarray] = None) -> Tensor:
    """Softmax over the last axis; ``mask`` (True = keep) zeroes excluded entries."""
    xd = x.data
    if mask is not None:
        xd = np.where(mask, xd, -np.inf)
    m = np.max(xd, axis=-1, keepdims=True)
    e = np.exp(xd - m)
    y = e / e.sum(axis=-1, keepdims=True)

    def back(g):
        return (y * (g - (g * y).sum(axis=-1, keepdims=True)),)

    return _emit("softmax", (x,), y, back)


def log_softmax_lastdim(x: Tensor) -> Tensor:
    xd = x.data
    m = np.max(xd, axis=-1, keepdims=True)
    lse = m + np.log(np.exp(xd - m).sum(axis=-1, keepdims=True))
    y = xd - lse
    p = np.exp(y)
    return _emit("log_softmax", (x,), y, lambda g: (g - p * g.sum(axis=-1, keepdims=True),))


def layer_norm(x: Tensor, gain: Optional[Tensor] = None, bias: Optional[Tensor] = None,
               eps: float = LN_EPS, site: Optional[str] = None) -> Tensor:
    """Normalize the last axis to zero mean and unit variance, then apply the affine map."""
    xd = x.data
    d = xd.shape[-1]
    mu = xd.mean(axis=-1, keepdims=True)
    xc = xd - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    gd = gain.data if gain is not None else None
    y = xhat * gd if gd is not None else xhat.copy()
    if bias is not None:
        y = y + bias.data
    inputs = (x,) + tuple(t for t in (gain, bias) if t is not None)

    def back(g):
        dxhat = g * gd if gd is not None else g
        dx = inv * (dxhat - dxhat.mean(axis=-1, keepdims=True)
                    - xhat * (dxhat * xhat).mean(axis=-1, keepdims=True))
        out = [dx]
        lead = tuple(range(g.ndim - 1))
        if gain is not None:
            out.append((g * xhat).sum(axis=lead))
        if bias is not None:
            out.append(g.sum(axis=lead))
        return out

    return _emit("layer_norm", inputs, y.astype(xd.dtype, copy=False), back, site=site, d=d)


def cross_entropy(logits: Tensor, targets: np.ndarray) -> Tensor:
    """Mean token-level cross entropy of (N, V) logits against integer targets."""
    targets = np.asarray(targets).reshape(-1)
    ld = logits.data.reshape(-1, logits.shape[-1])
    if ld.shape[0] != targets.shape[0]:
        raise ShapeError(f"cross_entropy: {ld.shape[0]} rows vs {targets.shape[0]} targets")
    m = ld.max(axis=-1, keepdims=True)
    e = np.exp(ld - m)
    z = e.sum(axis=-1, keepdims=True)
    logp = ld - m - np.log(z)
    n = targets.shape[0]
    rows = np.arange(n)
    loss = -logp[rows, targets].mean()
    shape = logits.shape

    def back(g):
        p = e / z
        p[rows, targets] -= 1.0
        return ((p * (g / n)).reshape(shape),)

    return _emit("cross_entropy", (logits,), np.asarray(loss, dtype=ld.dtype), back)


# ---------------------------------------------------------------- routing helpers

def topk(s, k: int) -> tuple[np.ndarray, np.ndarray]:
    """Indices and values of the ``k`` largest entries along the last axis.

    Results are ordered by descending value; equal values keep the lower
    index first, so selection is a deterministic function of the input.
    """
    sd = s.data if isinstance(s, Tensor) else np.asarray(s)
    n = sd.shape[-1]
    if not 1 <= k <= n:
        raise ValueError(f"topk: k={k} must be in [1, {n}]")
    order = np.argsort(-sd, axis=-1, kind="stable")[..., :k]
    return order, np.take_along_axis(sd, order, axis=-1)


def rope(x: Tensor, positions: np.ndarray, base: float = 10000.0) -> Tensor:
    """Rotate consecutive element pairs of the last axis by ``position * base**(-2i/d)``.

    With an odd last dimension the trailing element is left unrotated.
    """
    d = x.shape[-1]
    m = d - d % 2
    cos, sin = rope_table(np.asarray(positions), d, base, x.dtype)
    xd = x.data
    xe, xo = xd[..., 0:m:2], xd[..., 1:m:2]
    out = xd.copy()
    out[..., 0:m:2] = xe * cos - xo * sin
    out[..., 1:m:2] = xe * sin + xo * cos

    def back(g):
        ge, go = g[..., 0:m:2], g[..., 1:m:2]
        gx = g.copy()
        gx[..., 0:m:2] = ge * cos + go * sin
        gx[..., 1:m:2] = -ge * sin + go * cos
        return (gx,)

    return _emit("rope", (x,), out, back)


def rope_table(positions: np.ndarray, d: int, base: float = 10000.0, dtype=np.float64):
    freqs = base ** (-np.arange(0, d - 1, 2, dtype=np.float64) / d)
    ang = positions.astype(np.float64)[:, None] * freqs[None, :]
    return np.cos(ang).astype(dtype), np.sin(ang).astype(dtype)


def check_finite(x: Tensor, where: str) -> None:
    if not np.all(np.isfinite(x.data)):
        raise NumericError(f"non-finite values produced at {where}")


def global_norm(arrays) -> float:
    return math.sqrt(sum(float(np.sum(np.square(a, dtype=np.float64))) for a in arrays))
