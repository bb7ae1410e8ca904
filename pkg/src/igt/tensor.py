"""Dense float32 tensors with a reverse-mode gradient tape.

Only the operations the model, gate and losses need are provided. Broadcasting
is limited to scalar-vs-tensor and equal shapes; row-vector bias addition is a
separate named op (``add_bias``) so the restriction stays checkable.

Recording happens only inside a ``with tape():`` block and only for ops that
touch at least one tensor with ``requires_grad``. Outside a tape every op is a
plain numpy computation, which is what inference uses.
"""

from __future__ import annotations

import contextlib
import math
from dataclasses import dataclass, field
from typing import Callable, Iterator, Sequence

import numpy as np

DTYPE = np.float32


class ShapeError(ValueError):
    pass


class DomainError(ValueError):
    pass


@dataclass
class Node:
    node_id: int
    inputs: tuple["Tensor", ...]
    backward: Callable[[np.ndarray], Sequence[np.ndarray | None]]


@dataclass
class Tape:
    nodes: list[Node] = field(default_factory=list)

    def record(self, out: "Tensor", inputs: tuple["Tensor", ...], backward) -> None:
        out.node_id = len(self.nodes)
        out._tape = self
        self.nodes.append(Node(out.node_id, inputs, backward))


_ACTIVE: list[Tape] = []


@contextlib.contextmanager
def tape() -> Iterator[Tape]:
    """Open a fresh gradient tape; ops inside the block are recorded on it."""
    t = Tape()
    _ACTIVE.append(t)
    try:
        yield t
    finally:
        _ACTIVE.pop()


@contextlib.contextmanager
def default_dtype(dtype) -> Iterator[None]:
    """Temporarily build tensors in another float type (float64 for tight gradient checks)."""
    global DTYPE
    old = DTYPE
    DTYPE = np.dtype(dtype).type
    try:
        yield
    finally:
        DTYPE = old


def active_tape() -> Tape | None:
    return _ACTIVE[-1] if _ACTIVE else None


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "node_id", "_tape", "name")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        arr = np.asarray(data, dtype=DTYPE)
        if not arr.flags.c_contiguous:
            arr = np.ascontiguousarray(arr)
        self.data = arr
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self.node_id: int | None = None
        self._tape: Tape | None = None
        self.name = name

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        if self.data.size != 1:
            raise ShapeError(f"expected a single-element tensor, got shape {self.shape}")
        return float(self.data.reshape(-1)[0])

    def zero_grad(self) -> None:
        self.grad = None

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def __repr__(self) -> str:
        rg = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}{rg})"

    __add__ = lambda self, other: add(self, other)
    __radd__ = lambda self, other: add(other, self)
    __sub__ = lambda self, other: add(self, neg(_as_tensor(other)))
    __rsub__ = lambda self, other: add(other, neg(self))
    __mul__ = lambda self, other: mul(self, other)
    __rmul__ = lambda self, other: mul(other, self)
    __neg__ = lambda self: neg(self)
    __matmul__ = lambda self, other: matmul(self, other)

    def __truediv__(self, other):
        if isinstance(other, Tensor):
            raise TypeError("division by a tensor is not supported")
        return mul(self, 1.0 / float(other))


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _make(data: np.ndarray, inputs: tuple[Tensor, ...], backward) -> Tensor:
    """Wrap an op result, recording it when a tape is open and a grad is needed."""
    needs = any(t.requires_grad for t in inputs)
    out = Tensor(data, requires_grad=needs)
    t = active_tape()
    if needs and t is not None:
        t.record(out, inputs, backward)
    return out


def _is_scalar(t: Tensor) -> bool:
    return t.ndim == 0


def _check_elementwise(a: Tensor, b: Tensor, op: str) -> None:
    if a.shape != b.shape and not (_is_scalar(a) or _is_scalar(b)):
        raise ShapeError(f"{op}: shapes {a.shape} and {b.shape} are not equal and neither is a scalar")


def _reduce_to(g: np.ndarray, t: Tensor) -> np.ndarray:
    if _is_scalar(t) and g.ndim != 0:
        return np.asarray(g.sum(dtype=np.float64), dtype=DTYPE)
    return g


# ---------------------------------------------------------------------------
# elementwise


def add(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _check_elementwise(a, b, "add")

    def backward(g):
        return _reduce_to(g, a), _reduce_to(g, b)

    return _make(a.data + b.data, (a, b), backward)


def neg(a: Tensor) -> Tensor:
    return _make(-a.data, (a,), lambda g: (-g,))


def mul(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _check_elementwise(a, b, "mul")
    ad, bd = a.data, b.data

    def backward(g):
        return _reduce_to(g * bd, a), _reduce_to(g * ad, b)

    return _make(ad * bd, (a, b), backward)


def relu(a: Tensor) -> Tensor:
    mask = a.data > 0
    return _make(np.where(mask, a.data, 0).astype(DTYPE), (a,), lambda g: (g * mask,))


_GELU_C = math.sqrt(2.0 / math.pi)


def gelu(a: Tensor) -> Tensor:
    """Tanh-approximated GELU."""
    x = a.data
    inner = _GELU_C * (x + 0.044715 * x ** 3)
    th = np.tanh(inner)
    out = 0.5 * x * (1 + th)

    def backward(g):
        dinner = _GELU_C * (1 + 3 * 0.044715 * x * x)
        return (g * (0.5 * (1 + th) + 0.5 * x * (1 - th * th) * dinner),)

    return _make(out, (a,), backward)


def sigmoid_np(x: np.ndarray) -> np.ndarray:
    # split by sign so exp never overflows
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    e = np.exp(x[~pos])
    out[~pos] = e / (1.0 + e)
    return out


def sigmoid(a: Tensor) -> Tensor:
    s = sigmoid_np(a.data)
    return _make(s, (a,), lambda g: (g * s * (1 - s),))


def log(a: Tensor) -> Tensor:
    if np.any(a.data <= 0):
        raise DomainError("log of non-positive input; add an epsilon guard before calling log")
    x = a.data
    return _make(np.log(x), (a,), lambda g: (g / x,))


def exp(a: Tensor) -> Tensor:
    e = np.exp(a.data)
    return _make(e, (a,), lambda g: (g * e,))


def max_with_scalar(a: Tensor, c: float) -> Tensor:
    """Elementwise ``max(a, c)``; at a tie the gradient goes to ``a``."""
    keep = a.data >= c
    out = np.where(keep, a.data, DTYPE(c)).astype(DTYPE)
    return _make(out, (a,), lambda g: (g * keep,))


# ---------------------------------------------------------------------------
# reductions and shape ops


def sum(a: Tensor) -> Tensor:  # noqa: A001 - mirrors numpy naming
    shape = a.shape
    out = np.asarray(a.data.sum(dtype=np.float64), dtype=DTYPE)
    return _make(out, (a,), lambda g: (np.full(shape, g, dtype=DTYPE),))


def mean(a: Tensor) -> Tensor:
    n = a.size
    shape = a.shape
    out = np.asarray(a.data.sum(dtype=np.float64) / n, dtype=DTYPE)
    return _make(out, (a,), lambda g: (np.full(shape, g / n, dtype=DTYPE),))


def reshape(a: Tensor, shape: Sequence[int]) -> Tensor:
    old = a.shape
    return _make(a.data.reshape(shape), (a,), lambda g: (g.reshape(old),))


def transpose(a: Tensor, axes: Sequence[int]) -> Tensor:
    axes = tuple(axes)
    inv = tuple(np.argsort(axes))
    return _make(np.ascontiguousarray(a.data.transpose(axes)), (a,), lambda g: (g.transpose(inv),))


def swap_last(a: Tensor) -> Tensor:
    axes = list(range(a.ndim))
    axes[-1], axes[-2] = axes[-2], axes[-1]
    return transpose(a, axes)


# ---------------------------------------------------------------------------
# linear algebra


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product.

    Accepts ``[m,k] @ [k,n]``, ``[..., m, k] @ [k, n]`` (a shared weight) and
    batched ``[..., m, k] @ [..., k, n]`` with identical leading extents.
    """
    a, b = _as_tensor(a), _as_tensor(b)
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul: cannot multiply {a.shape} by {b.shape}")
    if b.ndim > 2 and a.shape[:-2] != b.shape[:-2]:
        raise ShapeError(f"matmul: batch extents differ between {a.shape} and {b.shape}")
    ad, bd = a.data, b.data
    out = ad @ bd

    if b.ndim == 2:
        def backward(g):
            ga = g @ bd.T if a.requires_grad else None
            gb = None
            if b.requires_grad:
                k, n = bd.shape
                gb = ad.reshape(-1, k).T @ g.reshape(-1, n)
            return ga, gb
    else:
        def backward(g):
            ga = g @ np.swapaxes(bd, -1, -2) if a.requires_grad else None
            gb = np.swapaxes(ad, -1, -2) @ g if b.requires_grad else None
            return ga, gb

    return _make(out, (a, b), backward)


def add_bias(x: Tensor, b: Tensor) -> Tensor:
    """``x[..., n] + b[n]``, the one row-broadcast the model needs."""
    if b.ndim != 1 or x.shape[-1] != b.shape[0]:
        raise ShapeError(f"add_bias: bias {b.shape} does not match trailing extent of {x.shape}")
    n = b.shape[0]
    return _make(x.data + b.data, (x, b), lambda g: (g, g.reshape(-1, n).sum(axis=0)))


def embedding(table: Tensor, ids: np.ndarray) -> Tensor:
    ids = np.asarray(ids, dtype=np.int64)
    if ids.size and (ids.min() < 0 or ids.max() >= table.shape[0]):
        raise IndexError(f"embedding: ids outside [0, {table.shape[0]})")
    rows = table.shape

    def backward(g):
        gt = np.zeros(rows, dtype=DTYPE)
        np.add.at(gt, ids.reshape(-1), g.reshape(-1, rows[1]))
        return (gt,)

    return _make(table.data[ids], (table,), backward)


def layer_norm(x: Tensor, gamma: Tensor, beta: Tensor, eps: float = 1e-5) -> Tensor:
    d = x.shape[-1]
    if gamma.shape != (d,) or beta.shape != (d,):
        raise ShapeError(f"layer_norm: affine params {gamma.shape}/{beta.shape} vs width {d}")
    mu = x.data.mean(axis=-1, keepdims=True, dtype=np.float64)
    xc = x.data - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = (xc * inv).astype(DTYPE)
    out = xhat * gamma.data + beta.data
    gd = gamma.data

    def backward(g):
        gx = gg = gb = None
        if x.requires_grad:
            gh = (g * gd).astype(np.float64)
            gx = inv * (gh - gh.mean(axis=-1, keepdims=True)
                        - xhat * (gh * xhat).mean(axis=-1, keepdims=True))
            gx = gx.astype(DTYPE)
        if gamma.requires_grad:
            gg = (g * xhat).reshape(-1, d).sum(axis=0)
        if beta.requires_grad:
            gb = g.reshape(-1, d).sum(axis=0)
        return gx, gg, gb

    return _make(out.astype(DTYPE), (x, gamma, beta), backward)


def softmax_np(x: np.ndarray, axis: int = -1) -> np.ndarray:
    z = x - x.max(axis=axis, keepdims=True)
    e = np.exp(z.astype(np.float64))
    return (e / e.sum(axis=axis, keepdims=True)).astype(DTYPE)


def log_softmax_np(x: np.ndarray, axis: int = -1) -> np.ndarray:
    x64 = x.astype(np.float64)
    m = x64.max(axis=axis, keepdims=True)
    lse = m + np.log(np.exp(x64 - m).sum(axis=axis, keepdims=True))
    return x64 - lse


def causal_softmax(scores: Tensor) -> Tensor:
    """Row softmax over the last axis of ``[..., T, T]`` with future keys masked out."""
    T = scores.shape[-1]
    if scores.shape[-2] != T:
        raise ShapeError(f"causal_softmax: expected square trailing dims, got {scores.shape}")
    future = np.triu(np.ones((T, T), dtype=bool), k=1)
    masked = np.where(future, -np.inf, scores.data)
    y = softmax_np(masked)

    def backward(g):
        return (y * (g - (g * y).sum(axis=-1, keepdims=True)),)

    return _make(y, (scores,), backward)


# ---------------------------------------------------------------------------
# losses


def softmax_cross_entropy(logits: Tensor, target) -> Tensor:
    """Mean of ``-log softmax(logits)[target]`` over rows.

    ``logits`` is ``[V]`` with an integer target, or ``[N, V]`` with ``N`` targets.
    """
    single = logits.ndim == 1
    z = logits.data.reshape(1, -1) if single else logits.data
    if z.ndim != 2:
        raise ShapeError(f"softmax_cross_entropy: logits must be [V] or [N,V], got {logits.shape}")
    tgt = np.atleast_1d(np.asarray(target, dtype=np.int64))
    n, V = z.shape
    if tgt.shape != (n,):
        raise ShapeError(f"softmax_cross_entropy: {tgt.shape[0]} targets for {n} rows")
    if np.any(tgt < 0) or np.any(tgt >= V):
        raise IndexError(f"softmax_cross_entropy: target outside [0, {V})")
    logp = log_softmax_np(z)
    rows = np.arange(n)
    loss = -logp[rows, tgt].sum() / n

    def backward(g):
        p = np.exp(logp)
        p[rows, tgt] -= 1.0
        return ((p * (float(g) / n)).astype(DTYPE).reshape(logits.shape),)

    return _make(np.asarray(loss, dtype=DTYPE), (logits,), backward)


def bce_with_logits(logits: Tensor, targets, mask, row_valid=None) -> Tensor:
    """Masked binary cross-entropy on logits.

    Each row's loss is the mean over indices where ``mask`` is 1 (sum divided by
    the unmasked count); for ``[N, V]`` input the result is the mean over rows
    flagged in ``row_valid`` (all rows by default).
    """
    z = logits.data
    y = np.asarray(targets, dtype=DTYPE)
    m = np.asarray(mask, dtype=DTYPE)
    if y.shape != z.shape:
        raise ShapeError(f"bce_with_logits: targets {y.shape} vs logits {z.shape}")
    if m.shape != z.shape[-1:] and m.shape != z.shape:
        raise ShapeError(f"bce_with_logits: mask {m.shape} vs logits {z.shape}")
    m = np.broadcast_to(m, z.shape)
    count = m.sum(axis=-1, dtype=np.float64)
    if np.any(count == 0):
        raise ValueError("bce_with_logits: mask has no unmasked index; the mean is undefined")
    if z.ndim == 1:
        w = np.asarray(1.0)
        rows_w = 1.0 / count
    else:
        valid = np.ones(z.shape[0], dtype=bool) if row_valid is None else np.asarray(row_valid, dtype=bool)
        nv = int(valid.sum())
        if nv == 0:
            raise ValueError("bce_with_logits: no valid rows")
        w = valid.astype(np.float64) / nv
        rows_w = (w / count)[:, None]
    z64 = z.astype(np.float64)
    per = np.maximum(z64, 0) - z64 * y + np.log1p(np.exp(-np.abs(z64)))
    loss = (per * m * rows_w).sum()

    def backward(g):
        gz = (sigmoid_np(z) - y) * m * rows_w * float(g)
        return (gz.astype(DTYPE),)

    return _make(np.asarray(loss, dtype=DTYPE), (logits,), backward)


# ---------------------------------------------------------------------------
# backward pass


def backward(loss: Tensor) -> None:
    """Populate ``.grad`` on every leaf with ``requires_grad`` reachable from ``loss``.

    Gradients accumulate across calls until the leaves are zeroed.
    """
    if loss.size != 1:
        raise ShapeError(f"backward needs a scalar loss, got shape {loss.shape}")
    if not loss.requires_grad:
        return
    t = loss._tape
    if t is None or loss.node_id is None:
        # a leaf used directly as the loss
        loss.grad = np.ones_like(loss.data) if loss.grad is None else loss.grad + 1
        return
    pending: dict[int, np.ndarray] = {loss.node_id: np.ones_like(loss.data)}
    for node in reversed(t.nodes[: loss.node_id + 1]):
        g = pending.pop(node.node_id, None)
        if g is None:
            continue
        for inp, gi in zip(node.inputs, node.backward(g)):
            if gi is None or not inp.requires_grad:
                continue
            gi = np.asarray(gi, dtype=DTYPE).reshape(inp.shape)
            if inp.node_id is not None and inp._tape is t:
                prev = pending.get(inp.node_id)
                pending[inp.node_id] = gi if prev is None else prev + gi
            else:
                inp.grad = gi.copy() if inp.grad is None else inp.grad + gi
