"""Reverse-mode automatic differentiation over dense numpy tensors.

Tensors store float32 by default (float64 is accepted for high-precision
work such as gradient checking); reductions accumulate in float64 before
casting back. A computation graph is recorded whenever any input of an op
requires gradients and grad mode is enabled; ``backward`` walks it once in
reverse topological order. Graphs are confined to a single thread.
"""

from __future__ import annotations

import math
from contextlib import contextmanager

import numpy as np

_GRAD_ENABLED = True

_GELU_C = math.sqrt(2.0 / math.pi)
_GELU_A = 0.044715


class AutogradError(ValueError):
    """Shape mismatch, invalid op argument, or a malformed backward call."""


@contextmanager
def no_grad():
    """Disable graph recording inside the block (for eval/sampling)."""
    global _GRAD_ENABLED
    prev = _GRAD_ENABLED
    _GRAD_ENABLED = False
    try:
        yield
    finally:
        _GRAD_ENABLED = prev


def grad_enabled() -> bool:
    return _GRAD_ENABLED


class Tensor:
    """A dense real array plus an optional gradient and graph linkage."""

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        arr = np.asarray(data, dtype=dtype)
        if arr.dtype not in (np.float32, np.float64):
            arr = arr.astype(np.float32)
        self.data = arr
        self.grad = None
        self.requires_grad = bool(requires_grad)
        self._parents = ()
        self._backward = None

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def dtype(self):
        return self.data.dtype

    def item(self) -> float:
        return float(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def _accumulate(self, g, owned: bool = False) -> None:
        # `owned` marks a freshly computed array the closure will not reuse;
        # it can become the grad buffer without a defensive copy.
        if self.grad is None:
            if owned and g.base is None and g.dtype == self.data.dtype \
                    and g.shape == self.data.shape:
                self.grad = g
            else:
                self.grad = np.array(g, dtype=self.data.dtype)
        else:
            self.grad += g

    def __repr__(self) -> str:
        return f"Tensor(shape={self.data.shape}, requires_grad={self.requires_grad})"

    # operator sugar
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, key):
        return slice_(self, key)

    def reshape(self, *shape):
        return reshape(self, shape if len(shape) != 1 or isinstance(shape[0], int) else shape[0])

    def transpose(self, axes):
        return transpose(self, axes)

    def sum(self, axis=None, keepdims=False):
        return sum_(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis=axis, keepdims=keepdims)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _pair(a, b):
    """Coerce binary-op operands; bare python scalars adopt the tensor dtype."""
    if isinstance(a, Tensor) and not isinstance(b, (Tensor, np.ndarray)):
        return a, Tensor(np.asarray(b, dtype=a.dtype))
    if isinstance(b, Tensor) and not isinstance(a, (Tensor, np.ndarray)):
        return Tensor(np.asarray(a, dtype=b.dtype)), b
    return as_tensor(a), as_tensor(b)


def _node(data, parents, backward_fn) -> Tensor:
    """Wrap an op result, recording the graph only when it is needed."""
    out = Tensor(data)
    if _GRAD_ENABLED and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = backward_fn
    return out


def _unbroadcast(grad, shape):
    """Reduce a broadcast gradient back down to ``shape``."""
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, size in enumerate(shape):
        if size == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


def backward(loss: Tensor) -> None:
    """Backpropagate from a scalar tensor; leaf grads accumulate until zeroed."""
    if not isinstance(loss, Tensor) or loss.data.size != 1:
        raise AutogradError("backward requires a scalar Tensor loss")
    if not loss.requires_grad:
        raise AutogradError("loss does not require grad; no graph was recorded")
    topo = []
    seen = set()
    stack = [(loss, False)]
    while stack:
        node, processed = stack.pop()
        if processed:
            topo.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if p.requires_grad and id(p) not in seen:
                stack.append((p, False))
    loss._accumulate(np.ones_like(loss.data))
    for node in reversed(topo):
        if node._backward is not None:
            node._backward(node.grad)
            # interior grads are spent once consumed; free them eagerly so
            # buffers recycle instead of piling up across the whole pass
            node.grad = None


# ---------------------------------------------------------------------------
# forward ops


def add(a, b) -> Tensor:
    a, b = _pair(a, b)
    data = a.data + b.data

    def bwd(g):
        if a.requires_grad:
            a._accumulate(_unbroadcast(g, a.shape))
        if b.requires_grad:
            b._accumulate(_unbroadcast(g, b.shape))

    return _node(data, (a, b), bwd)


def sub(a, b) -> Tensor:
    a, b = _pair(a, b)
    data = a.data - b.data

    def bwd(g):
        if a.requires_grad:
            a._accumulate(_unbroadcast(g, a.shape))
        if b.requires_grad:
            b._accumulate(_unbroadcast(-g, b.shape))

    return _node(data, (a, b), bwd)


def neg(a) -> Tensor:
    a = as_tensor(a)

    def bwd(g):
        if a.requires_grad:
            a._accumulate(-g)

    return _node(-a.data, (a,), bwd)


def mul(a, b) -> Tensor:
    a, b = _pair(a, b)
    data = a.data * b.data

    def bwd(g):
        if a.requires_grad:
            a._accumulate(_unbroadcast(g * b.data, a.shape), owned=True)
        if b.requires_grad:
            b._accumulate(_unbroadcast(g * a.data, b.shape), owned=True)

    return _node(data, (a, b), bwd)


def matmul(a, b) -> Tensor:
    """Matrix product with numpy-style stacked (batched) dimensions."""
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2:
        raise AutogradError(f"matmul needs >=2-d operands, got {a.shape} @ {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise AutogradError(f"matmul shape mismatch: {a.shape} @ {b.shape}")
    data = a.data @ b.data

    def bwd(g):
        if a.requires_grad:
            a._accumulate(_unbroadcast(g @ b.data.swapaxes(-1, -2), a.shape), owned=True)
        if b.requires_grad:
            b._accumulate(_unbroadcast(a.data.swapaxes(-1, -2) @ g, b.shape), owned=True)

    return _node(data, (a, b), bwd)


def embedding_lookup(table, ids) -> Tensor:
    """Row gather: result[..., :] = table[ids[...]]."""
    table = as_tensor(table)
    ids = np.asarray(ids)
    if not np.issubdtype(ids.dtype, np.integer):
        raise AutogradError("embedding ids must be integers")
    if ids.size and (ids.min() < 0 or ids.max() >= table.shape[0]):
        raise AutogradError("embedding id out of range")
    data = table.data[ids]

    def bwd(g):
        if table.requires_grad:
            if table.grad is None:
                table.grad = np.zeros_like(table.data)
            np.add.at(table.grad, ids.reshape(-1), g.reshape(-1, table.shape[-1]))

    return _node(data, (table,), bwd)


def layer_norm(x, gain, bias, eps: float = 1e-5) -> Tensor:
    """Normalize over the last axis, then scale and shift."""
    x, gain, bias = as_tensor(x), as_tensor(gain), as_tensor(bias)
    n = x.shape[-1]
    mu = x.data.mean(axis=-1, keepdims=True, dtype=np.float64)
    xc = x.data - mu.astype(x.dtype)
    var = np.mean(np.square(xc), axis=-1, keepdims=True, dtype=np.float64)
    inv = (1.0 / np.sqrt(var + eps)).astype(x.dtype)
    xhat = xc * inv
    del xc
    data = xhat * gain.data
    data += bias.data

    def bwd(g):
        if gain.requires_grad:
            gain._accumulate(_unbroadcast(g * xhat, gain.shape), owned=True)
        if bias.requires_grad:
            bias._accumulate(_unbroadcast(g, bias.shape))
        if x.requires_grad:
            gh = g * gain.data
            s1 = gh.sum(axis=-1, keepdims=True)
            s2 = (gh * xhat).sum(axis=-1, keepdims=True)
            gh *= n
            gh -= s1
            gh -= xhat * s2
            gh *= inv
            gh *= 1.0 / n
            x._accumulate(gh, owned=True)

    return _node(data, (x, gain, bias), bwd)


def softmax(x, axis: int = -1) -> Tensor:
    """Softmax along ``axis``; -inf entries yield exact zeros."""
    x = as_tensor(x)
    y = x.data - np.max(x.data, axis=axis, keepdims=True)
    np.exp(y, out=y)
    y /= y.sum(axis=axis, keepdims=True)

    def bwd(g):
        if x.requires_grad:
            dx = g * y
            dx -= y * dx.sum(axis=axis, keepdims=True)
            x._accumulate(dx, owned=True)

    return _node(y, (x,), bwd)


def gelu(x) -> Tensor:
    """GELU with the tanh approximation used by GPT-2-style models."""
    x = as_tensor(x)
    v = x.data
    v2 = v * v
    t = v2 * v
    t *= _GELU_A
    t += v
    t *= _GELU_C
    np.tanh(t, out=t)
    data = t + 1.0
    data *= v
    data *= 0.5

    def bwd(g):
        if x.requires_grad:
            dv = v2 * (3.0 * _GELU_A)
            dv += 1.0
            tt = t * t
            np.subtract(1.0, tt, out=tt)
            dv *= tt
            dv *= v
            dv *= _GELU_C
            dv += t
            dv += 1.0
            dv *= 0.5
            dv *= g
            x._accumulate(dv, owned=True)

    return _node(data, (x,), bwd)


def tanh(x) -> Tensor:
    x = as_tensor(x)
    t = np.tanh(x.data)

    def bwd(g):
        if x.requires_grad:
            x._accumulate(g * (1.0 - t * t), owned=True)

    return _node(t, (x,), bwd)


def sigmoid(x) -> Tensor:
    x = as_tensor(x)
    s = 1.0 / (1.0 + np.exp(-x.data))

    def bwd(g):
        if x.requires_grad:
            x._accumulate(g * (s * (1.0 - s)), owned=True)

    return _node(s, (x,), bwd)


def dropout(x, p: float, train: bool, rng: np.random.Generator | None = None) -> Tensor:
    """Inverted dropout; identity when ``train`` is False or p == 0."""
    x = as_tensor(x)
    if not 0.0 <= p <= 1.0:
        raise AutogradError(f"dropout p must lie in [0,1], got {p}")
    if not train or p == 0.0:
        def bwd_id(g):
            if x.requires_grad:
                x._accumulate(g)

        return _node(x.data, (x,), bwd_id)
    if rng is None:
        raise AutogradError("train-mode dropout needs an explicit rng")
    if p == 1.0:
        mask = np.zeros(x.shape, dtype=x.dtype)
    else:
        draw_dtype = x.dtype if x.dtype in (np.float32, np.float64) else np.float64
        mask = rng.random(x.shape, dtype=draw_dtype)
        np.greater_equal(mask, p, out=mask, casting="unsafe")
        mask *= 1.0 / (1.0 - p)
    data = x.data * mask

    def bwd(g):
        if x.requires_grad:
            x._accumulate(g * mask, owned=True)

    return _node(data, (x,), bwd)


def concat(tensors, axis: int = 0) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    data = np.concatenate([t.data for t in tensors], axis=axis)
    sizes = [t.shape[axis] for t in tensors]

    def bwd(g):
        offset = 0
        for t, size in zip(tensors, sizes):
            if t.requires_grad:
                idx = [slice(None)] * g.ndim
                idx[axis] = slice(offset, offset + size)
                if t.grad is None:
                    t.grad = np.array(g[tuple(idx)])
                else:
                    t.grad += g[tuple(idx)]
            offset += size

    return _node(data, tuple(tensors), bwd)


def slice_(x, key) -> Tensor:
    """Basic (view-style) indexing with ints, slices, and ellipses."""
    x = as_tensor(x)
    data = x.data[key]

    def bwd(g):
        if x.requires_grad:
            if x.grad is None:
                x.grad = np.zeros_like(x.data)
            x.grad[key] += g

    return _node(data, (x,), bwd)


def reshape(x, shape) -> Tensor:
    x = as_tensor(x)
    data = x.data.reshape(shape)

    def bwd(g):
        if x.requires_grad:
            x._accumulate(g.reshape(x.shape))

    return _node(data, (x,), bwd)


def transpose(x, axes) -> Tensor:
    x = as_tensor(x)
    axes = tuple(axes)
    inverse = tuple(np.argsort(axes))
    data = x.data.transpose(axes)

    def bwd(g):
        if x.requires_grad:
            x._accumulate(g.transpose(inverse))

    return _node(data, (x,), bwd)


def sum_(x, axis=None, keepdims: bool = False) -> Tensor:
    x = as_tensor(x)
    data = x.data.sum(axis=axis, keepdims=keepdims, dtype=np.float64).astype(x.dtype)

    def bwd(g):
        if not x.requires_grad:
            return
        if axis is None:
            x._accumulate(np.broadcast_to(g, x.shape).copy(), owned=True)
        else:
            if not keepdims:
                g = np.expand_dims(g, axis)
            x._accumulate(np.broadcast_to(g, x.shape).copy(), owned=True)

    return _node(data, (x,), bwd)


def mean(x, axis=None, keepdims: bool = False) -> Tensor:
    x = as_tensor(x)
    count = x.data.size if axis is None else x.shape[axis]
    return mul(sum_(x, axis=axis, keepdims=keepdims), 1.0 / count)


def select_positions(x, positions) -> Tensor:
    """Pick one time step per batch row: out[b] = x[b, positions[b]]."""
    x = as_tensor(x)
    positions = np.asarray(positions)
    if positions.ndim != 1 or positions.shape[0] != x.shape[0]:
        raise AutogradError("positions must be one index per batch row")
    rows = np.arange(x.shape[0])
    data = x.data[rows, positions]

    def bwd(g):
        if x.requires_grad:
            if x.grad is None:
                x.grad = np.zeros_like(x.data)
            x.grad[rows, positions] += g

    return _node(data, (x,), bwd)


def cross_entropy_loss(logits, targets, mask=None) -> Tensor:
    """Mean negative log-softmax probability of the target ids.

    ``logits`` has shape (..., V); ``targets`` matches the leading shape.
    ``mask`` (same leading shape, boolean) selects which positions enter
    the unweighted mean. Natural log throughout.
    """
    logits = as_tensor(logits)
    v = logits.shape[-1]
    flat = logits.data.reshape(-1, v)
    t = np.asarray(targets).reshape(-1)
    if t.shape[0] != flat.shape[0]:
        raise AutogradError("targets shape does not match logits")
    if t.size and (t.min() < 0 or t.max() >= v):
        raise AutogradError("target id out of range")
    if mask is None:
        m = np.ones(t.shape[0], dtype=bool)
    else:
        m = np.asarray(mask, dtype=bool).reshape(-1)
        if m.shape[0] != t.shape[0]:
            raise AutogradError("mask shape does not match targets")
    n = int(m.sum())
    if n == 0:
        raise AutogradError("cross_entropy_loss mask selects no positions")

    shifted = flat - flat.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    z = e.sum(axis=-1, keepdims=True, dtype=np.float64)
    log_probs = shifted - np.log(z).astype(flat.dtype)
    nll = -log_probs[np.arange(t.shape[0]), t]
    loss = np.asarray(nll[m].sum(dtype=np.float64) / n, dtype=flat.dtype)

    def bwd(g):
        if logits.requires_grad:
            probs = (e / z).astype(flat.dtype)
            probs[np.arange(t.shape[0]), t] -= 1.0
            probs *= (m / n).astype(flat.dtype)[:, None]
            probs *= g
            logits._accumulate(probs.reshape(logits.shape), owned=True)

    return _node(loss, (logits,), bwd)


# ---------------------------------------------------------------------------
# optimizers


class Optimizer:
    """Adam / AdamW over a named parameter dict.

    AdamW applies decoupled weight decay; plain Adam folds any decay into
    the gradient (classic L2 coupling, default decay 0).
    """

    def __init__(self, params: dict, kind: str = "adam", lr: float = 1e-3,
                 betas: tuple = (0.9, 0.999), eps: float = 1e-8,
                 weight_decay: float | None = None):
        kind = kind.lower()
        if kind not in ("adam", "adamw"):
            raise AutogradError(f"unknown optimizer kind: {kind}")
        self.kind = kind
        self.params = params
        self.lr = lr
        self.betas = betas
        self.eps = eps
        self.weight_decay = (0.0 if kind == "adam" else 0.01) if weight_decay is None else weight_decay
        self.step_count = 0
        self.m = {k: np.zeros_like(p.data) for k, p in params.items()}
        self.v = {k: np.zeros_like(p.data) for k, p in params.items()}

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.grad = None

    def step(self) -> None:
        self.step_count += 1
        b1, b2 = self.betas
        bc1 = 1.0 - b1**self.step_count
        bc2 = 1.0 - b2**self.step_count
        for name, p in self.params.items():
            if p.grad is None:
                raise AutogradError(f"missing gradient for parameter {name!r}")
            g = p.grad
            if self.kind == "adam" and self.weight_decay:
                g = g + self.weight_decay * p.data
            m = self.m[name]
            v = self.v[name]
            m *= b1
            tmp = g * (1.0 - b1)
            m += tmp
            v *= b2
            np.multiply(g, g, out=tmp)
            tmp *= 1.0 - b2
            v += tmp
            if self.kind == "adamw" and self.weight_decay:
                p.data *= 1.0 - self.lr * self.weight_decay
            np.multiply(v, 1.0 / bc2, out=tmp)
            np.sqrt(tmp, out=tmp)
            tmp += self.eps
            np.divide(m, tmp, out=tmp)
            tmp *= self.lr / bc1
            p.data -= tmp


def clip_grad_norm(params: dict, max_norm: float) -> float:
    """Scale all grads so their global L2 norm is at most ``max_norm``."""
    total = 0.0
    for p in params.values():
        if p.grad is not None:
            total += float(np.sum(p.grad.astype(np.float64) ** 2))
    norm = math.sqrt(total)
    if norm > max_norm > 0:
        scale = max_norm / (norm + 1e-12)
        for p in params.values():
            if p.grad is not None:
                p.grad *= scale
    return norm
