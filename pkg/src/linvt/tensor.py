"""Dense float64 tensors with tape-based reverse-mode differentiation.

Every op is a pure function of its inputs. Gradients are only tracked while a
:class:`Tape` is active on the current thread; outside a tape the ops run as
plain numpy code with no bookkeeping::

    w = Tensor(np.ones((3, 2)), requires_grad=True)
    with Tape() as tape:
        loss = (x @ w).sum()
    tape.backward(loss)
    tape.grad(w)
"""

from __future__ import annotations

import math
import threading
from dataclasses import dataclass
from typing import Callable, NamedTuple, Sequence

import numpy as np

from .errors import (
    BackwardError,
    DimensionError,
    HeadSplitError,
    NumericInputError,
    SelectionError,
    WindowError,
)

_local = threading.local()


def _tape_stack() -> list:
    stack = getattr(_local, "stack", None)
    if stack is None:
        stack = _local.stack = []
    return stack


def active_tape() -> "Tape | None":
    stack = _tape_stack()
    return stack[-1] if stack else None


class Node(NamedTuple):
    op: str
    out: "Tensor"
    parents: tuple
    backward: Callable[[np.ndarray], tuple]


class Tape:
    """Append-only record of differentiable ops.

    Nodes are appended as ops execute, so insertion order is already a
    topological order. A tape belongs to one thread and one training step.
    """

    def __init__(self):
        self.nodes: list[Node] = []
        self.grads: dict[int, np.ndarray] = {}
        self._tensors: dict[int, Tensor] = {}

    def __enter__(self) -> "Tape":
        _tape_stack().append(self)
        return self

    def __exit__(self, *exc) -> None:
        _tape_stack().remove(self)

    def record(self, op, out, parents, backward) -> int:
        out.node_id = len(self.nodes)
        out._tape = self
        self.nodes.append(Node(op, out, tuple(parents), backward))
        return out.node_id

    def backward(self, root: "Tensor") -> "Tape":
        if root.data.size != 1:
            raise BackwardError(f"backward needs a scalar root, got shape {root.shape}")
        if root._tape is not self:
            raise BackwardError("root was not recorded on this tape")
        self.grads = {id(root): np.ones_like(root.data)}
        self._tensors = {id(root): root}
        for node in reversed(self.nodes[: root.node_id + 1]):
            g = self.grads.get(id(node.out))
            if g is None:
                continue
            for parent, pg in zip(node.parents, node.backward(g)):
                if pg is None or not parent.requires_grad:
                    continue
                key = id(parent)
                if key in self.grads:
                    self.grads[key] = self.grads[key] + pg
                else:
                    self.grads[key] = np.asarray(pg, dtype=np.float64).reshape(parent.data.shape)
                    self._tensors[key] = parent
        return self

    def grad(self, t: "Tensor") -> np.ndarray:
        """Gradient of the last backward root with respect to ``t`` (zeros if unreached)."""
        g = self.grads.get(id(t))
        if g is None or self._tensors.get(id(t)) is not t:
            return np.zeros_like(t.data)
        return g


class Tensor:
    __slots__ = ("data", "requires_grad", "node_id", "_tape")

    def __init__(self, data, requires_grad: bool = False):
        arr = np.array(data, dtype=np.float64)
        arr.setflags(write=False)
        self.data = arr
        self.requires_grad = requires_grad
        self.node_id = None
        self._tape = None

    @classmethod
    def _wrap(cls, arr: np.ndarray) -> "Tensor":
        t = cls.__new__(cls)
        arr = np.asarray(arr, dtype=np.float64)
        arr.setflags(write=False)
        t.data = arr
        t.requires_grad = False
        t.node_id = None
        t._tape = None
        return t

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    def numpy(self) -> np.ndarray:
        return self.data

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}{flag})"

    def __len__(self) -> int:
        return self.shape[0]

    __add__ = lambda self, o: add(self, o)
    __radd__ = lambda self, o: add(o, self)
    __sub__ = lambda self, o: sub(self, o)
    __rsub__ = lambda self, o: sub(o, self)
    __mul__ = lambda self, o: mul(self, o)
    __rmul__ = lambda self, o: mul(o, self)
    __truediv__ = lambda self, o: div(self, o)
    __rtruediv__ = lambda self, o: div(o, self)
    __matmul__ = lambda self, o: matmul(self, o)
    __neg__ = lambda self: mul(self, -1.0)
    __pow__ = lambda self, p: power(self, p)
    __getitem__ = lambda self, idx: getitem(self, idx)

    def sum(self, axis=None, keepdims=False):
        return tsum(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis, keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        return transpose(self, axes or None)

    @property
    def T(self):
        return transpose(self, None)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor._wrap(np.asarray(x, dtype=np.float64))


def _op(name: str, data: np.ndarray, parents: Sequence[Tensor], backward) -> Tensor:
    out = Tensor._wrap(data)
    tape = active_tape()
    if tape is not None and any(p.requires_grad for p in parents):
        out.requires_grad = True
        tape.record(name, out, parents, backward)
    return out


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for i, n in enumerate(shape):
        if n == 1 and g.shape[i] != 1:
            g = g.sum(axis=i, keepdims=True)
    return g


# -- elementwise -------------------------------------------------------------

def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    return _op("add", a.data + b.data, (a, b),
               lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)))


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    return _op("sub", a.data - b.data, (a, b),
               lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)))


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    return _op("mul", a.data * b.data, (a, b),
               lambda g: (_unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)))


def div(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    out = a.data / b.data
    return _op("div", out, (a, b),
               lambda g: (_unbroadcast(g / b.data, a.shape),
                          _unbroadcast(-g * out / b.data, b.shape)))


def power(a, p: float) -> Tensor:
    a = as_tensor(a)
    return _op("pow", a.data ** p, (a,), lambda g: (g * p * a.data ** (p - 1),))


def exp(a) -> Tensor:
    a = as_tensor(a)
    out = np.exp(a.data)
    return _op("exp", out, (a,), lambda g: (g * out,))


def log(a) -> Tensor:
    a = as_tensor(a)
    return _op("log", np.log(a.data), (a,), lambda g: (g / a.data,))


def sqrt(a) -> Tensor:
    a = as_tensor(a)
    out = np.sqrt(a.data)
    return _op("sqrt", out, (a,), lambda g: (g * 0.5 / out,))


_GELU_C = math.sqrt(2.0 / math.pi)


def gelu(a) -> Tensor:
    """Tanh-approximated GELU (smooth everywhere, which keeps gradient checks clean)."""
    a = as_tensor(a)
    x = a.data
    inner = _GELU_C * (x + 0.044715 * x ** 3)
    t = np.tanh(inner)
    out = 0.5 * x * (1.0 + t)

    def backward(g):
        dinner = _GELU_C * (1.0 + 3 * 0.044715 * x ** 2)
        return (g * (0.5 * (1.0 + t) + 0.5 * x * (1.0 - t ** 2) * dinner),)

    return _op("gelu", out, (a,), backward)


def detach(a) -> Tensor:
    """Same values, no gradient path."""
    return Tensor._wrap(as_tensor(a).data)


# -- reductions and shape ------------------------------------------------------

def tsum(a, axis=None, keepdims=False) -> Tensor:
    a = as_tensor(a)
    out = a.data.sum(axis=axis, keepdims=keepdims)

    def backward(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, a.shape),)

    return _op("sum", out, (a,), backward)


def mean(a, axis=None, keepdims=False) -> Tensor:
    a = as_tensor(a)
    n = a.data.size if axis is None else np.prod([a.shape[i] for i in np.atleast_1d(axis)])
    return tsum(a, axis, keepdims) * (1.0 / n)


def reshape(a, shape) -> Tensor:
    a = as_tensor(a)
    return _op("reshape", a.data.reshape(shape).copy(), (a,), lambda g: (g.reshape(a.shape),))


def transpose(a, axes=None) -> Tensor:
    a = as_tensor(a)
    if axes is None:
        axes = tuple(reversed(range(a.ndim)))
    inverse = tuple(np.argsort(axes))
    return _op("transpose", np.transpose(a.data, axes), (a,),
               lambda g: (np.transpose(g, inverse),))


def swapaxes(a, i: int, j: int) -> Tensor:
    a = as_tensor(a)
    axes = list(range(a.ndim))
    axes[i], axes[j] = axes[j], axes[i]
    return transpose(a, tuple(axes))


def getitem(a, idx) -> Tensor:
    a = as_tensor(a)

    def backward(g):
        full = np.zeros_like(a.data)
        np.add.at(full, idx, g)
        return (full,)

    return _op("getitem", a.data[idx], (a,), backward)


def take(a, indices, axis: int = 0) -> Tensor:
    """Gather along ``axis``; values are copied bit-for-bit."""
    a = as_tensor(a)
    indices = np.asarray(indices, dtype=np.intp)
    out = np.take(a.data, indices, axis=axis)

    def backward(g):
        full = np.zeros_like(a.data)
        moved = np.moveaxis(full, axis, 0)
        np.add.at(moved, indices, np.moveaxis(g, axis, 0))
        return (full,)

    return _op("take", out, (a,), backward)


def concat(tensors: Sequence, axis: int = 0) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    sizes = [t.shape[axis] for t in tensors]
    splits = np.cumsum(sizes)[:-1]
    return _op("concat", np.concatenate([t.data for t in tensors], axis=axis), tensors,
               lambda g: tuple(np.split(g, splits, axis=axis)))


# -- linear algebra ------------------------------------------------------------

def matmul(a, b) -> Tensor:
    """Matrix product; leading dimensions broadcast like ``numpy.matmul``."""
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise DimensionError(f"cannot multiply shapes {a.shape} and {b.shape}")

    def backward(g):
        ga = g @ np.swapaxes(b.data, -1, -2)
        gb = np.swapaxes(a.data, -1, -2) @ g
        return _unbroadcast(ga, a.shape), _unbroadcast(gb, b.shape)

    return _op("matmul", a.data @ b.data, (a, b), backward)


def softmax(x, axis: int = -1) -> Tensor:
    x = as_tensor(x)
    if not np.all(np.isfinite(x.data)):
        raise NumericInputError("softmax received non-finite input")
    shifted = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    out = e / e.sum(axis=axis, keepdims=True)

    def backward(g):
        return (out * (g - (g * out).sum(axis=axis, keepdims=True)),)

    return _op("softmax", out, (x,), backward)


def log_softmax(x, axis: int = -1) -> Tensor:
    x = as_tensor(x)
    if not np.all(np.isfinite(x.data)):
        raise NumericInputError("log_softmax received non-finite input")
    shifted = x.data - x.data.max(axis=axis, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=axis, keepdims=True))
    out = shifted - lse
    probs = np.exp(out)
    return _op("log_softmax", out, (x,),
               lambda g: (g - probs * g.sum(axis=axis, keepdims=True),))


def layer_norm(x, gain, bias, eps: float = 1e-5) -> Tensor:
    """Normalize over the last axis, then apply elementwise gain and bias."""
    x, gain, bias = as_tensor(x), as_tensor(gain), as_tensor(bias)
    mu = x.data.mean(axis=-1, keepdims=True)
    xc = x.data - mu
    inv = 1.0 / np.sqrt((xc ** 2).mean(axis=-1, keepdims=True) + eps)
    xhat = xc * inv
    def backward(g):
        gx = g * gain.data
        dx = inv * (gx - gx.mean(axis=-1, keepdims=True)
                    - xhat * (gx * xhat).mean(axis=-1, keepdims=True))
        return (dx, _unbroadcast(g * xhat, gain.shape), _unbroadcast(g, bias.shape))

    return _op("layer_norm", xhat * gain.data + bias.data, (x, gain, bias), backward)


def mean_pool(x, window: int, stride: int) -> Tensor:
    """Unweighted mean over row windows ``[j*stride, j*stride + window)``."""
    x = as_tensor(x)
    if x.ndim != 2:
        raise DimensionError(f"mean_pool expects a 2-d input, got shape {x.shape}")
    n = x.shape[0]
    if stride < 1 or window < 1:
        raise WindowError(f"window and stride must be >= 1 (window={window}, stride={stride})")
    if window > n:
        raise WindowError(f"window {window} exceeds sequence length {n}")
    m = (n - window) // stride + 1
    starts = np.arange(m) * stride
    rows = (starts[:, None] + np.arange(window)[None, :]).ravel()
    windows = x.data[rows].reshape(m, window, x.shape[1])
    out = windows.sum(axis=1) / window

    def backward(g):
        full = np.zeros_like(x.data)
        np.add.at(full, rows, np.repeat(g / window, window, axis=0))
        return (full,)

    return _op("mean_pool", out, (x,), backward)


def pooled_count(n: int, window: int, stride: int) -> int:
    return (n - window) // stride + 1


def topk_indices(scores, k: int) -> list[int]:
    """Indices of the ``k`` largest scores, ties to the smaller index, returned ascending."""
    s = np.asarray(scores.data if isinstance(scores, Tensor) else scores, dtype=np.float64).ravel()
    n = s.size
    if not 1 <= k <= n:
        raise SelectionError(f"cannot select k={k} of {n} scores")
    if not np.all(np.isfinite(s)):
        raise NumericInputError("topk received non-finite scores")
    order = np.argsort(-s, kind="stable")
    return sorted(int(i) for i in order[:k])


# -- attention -----------------------------------------------------------------

@dataclass(frozen=True)
class AttentionWeights:
    """Projection matrices are ``[c_in, c_out]`` and applied as ``x @ w + b``."""

    wq: Tensor
    bq: Tensor
    wk: Tensor
    bk: Tensor
    wv: Tensor
    bv: Tensor
    wo: Tensor
    bo: Tensor


def multi_head_attention(q, kv, heads: int, weights: AttentionWeights, return_attn: bool = False):
    """Scaled dot-product attention of ``q [..., a, c]`` over ``kv [..., b, c]``.

    With ``return_attn`` the head-averaged attention matrix ``[..., a, b]`` is
    returned as well.
    """
    q, kv = as_tensor(q), as_tensor(kv)
    c = q.shape[-1]
    if kv.shape[-1] != c:
        raise DimensionError(f"query width {q.shape} does not match key width {kv.shape}")
    if heads < 1 or c % heads:
        raise HeadSplitError(f"channels {c} not divisible by heads {heads}")
    d = c // heads

    def split(x):
        t = reshape(x, x.shape[:-1] + (heads, d))
        return swapaxes(t, -2, -3)

    qh = split(q @ weights.wq + weights.bq)
    kh = split(kv @ weights.wk + weights.bk)
    vh = split(kv @ weights.wv + weights.bv)
    attn = softmax(matmul(qh, swapaxes(kh, -1, -2)) * (1.0 / math.sqrt(d)), axis=-1)
    ctx = swapaxes(attn @ vh, -2, -3)
    out = reshape(ctx, ctx.shape[:-2] + (c,)) @ weights.wo + weights.bo
    if return_attn:
        return out, mean(attn, axis=-3)
    return out
