"""A small reverse-mode autodiff over numpy arrays.

Each op builds an output ``Tensor`` whose ``_backward`` closure pushes the
upstream gradient into its parents. ``Tensor.backward`` walks the graph in
reverse topological order. Gradients accumulate by summation, so a tensor
used twice receives both contributions.
"""

from __future__ import annotations

import math
from typing import Callable, Iterable, Sequence

import numpy as np


class GraphError(RuntimeError):
    pass


class NonFiniteError(FloatingPointError):
    pass


_CHECK_FINITE = True


def set_finite_checks(enabled: bool) -> None:
    global _CHECK_FINITE
    _CHECK_FINITE = enabled


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "name", "_parents", "_backward", "_op", "_spent")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None, dtype=None):
        arr = np.asarray(data, dtype=dtype)
        if arr.dtype.kind != "f":
            arr = arr.astype(np.float64)
        self.data = arr
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self.name = name
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable[[np.ndarray], None] | None = None
        self._op = "leaf"
        self._spent = False

    # -- basic protocol
    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def size(self) -> int:
        return self.data.size

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data)

    def __repr__(self) -> str:
        tag = f" name={self.name}" if self.name else ""
        return f"Tensor(shape={self.shape}, op={self._op}{tag})"

    def zero_grad(self) -> None:
        self.grad = None

    # -- graph construction
    @staticmethod
    def _make(data: np.ndarray, parents: Sequence["Tensor"], op: str, backward) -> "Tensor":
        if _CHECK_FINITE and not np.all(np.isfinite(data)):
            raise NonFiniteError(f"non-finite values produced by {op}")
        out = Tensor(data)
        out._op = op
        if any(p.requires_grad for p in parents):
            out.requires_grad = True
            out._parents = tuple(parents)
            out._backward = backward
        return out

    def _accumulate(self, g: np.ndarray) -> None:
        if not self.requires_grad:
            return
        g = np.asarray(g, dtype=self.data.dtype)
        if g.shape != self.data.shape:
            g = _unbroadcast(g, self.data.shape)
        if self.grad is None:
            self.grad = g
        else:
            self.grad = self.grad + g

    def backward(self) -> None:
        """Populate ``.grad`` on every tensor reachable from this scalar."""
        if self.data.size != 1:
            raise GraphError(f"backward needs a scalar, got shape {self.shape}")
        if self._spent:
            raise GraphError("backward already ran on this graph; rebuild it before calling again")
        order: list[Tensor] = []
        seen: set[int] = set()
        stack: list[tuple[Tensor, bool]] = [(self, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                order.append(node)
                continue
            if id(node) in seen or not node.requires_grad:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for p in node._parents:
                if id(p) not in seen:
                    stack.append((p, False))
        self.grad = np.ones_like(self.data)
        for node in reversed(order):
            if node._backward is not None and node.grad is not None:
                node._backward(node.grad)
        for node in order:
            node._spent = True

    # -- operator sugar
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return add(self, neg(as_tensor(other, self.dtype)))

    def __rsub__(self, other):
        return add(as_tensor(other, self.dtype), neg(self))

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return neg(self)

    def __truediv__(self, other):
        if isinstance(other, Tensor):
            raise TypeError("division by a Tensor is not supported; multiply by its reciprocal")
        return mul(self, 1.0 / other)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, idx):
        return getitem(self, idx)

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


def as_tensor(x, dtype=None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(np.asarray(x, dtype=dtype if dtype is not None else np.float64))


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g


def _like(x: np.ndarray | float, ref: Tensor):
    return np.asarray(x, dtype=ref.dtype)


# ----------------------------------------------------------------- elementwise


def add(a, b) -> Tensor:
    a = as_tensor(a)
    b = as_tensor(b, a.dtype)

    def backward(g):
        a._accumulate(g)
        b._accumulate(g)

    return Tensor._make(a.data + b.data, (a, b), "add", backward)


def neg(a: Tensor) -> Tensor:
    return Tensor._make(-a.data, (a,), "neg", lambda g: a._accumulate(-g))


def mul(a, b) -> Tensor:
    a = as_tensor(a)
    if not isinstance(b, Tensor):
        b = Tensor(_like(b, a))

    def backward(g):
        a._accumulate(g * b.data)
        b._accumulate(g * a.data)

    return Tensor._make(a.data * b.data, (a, b), "mul", backward)


def exp(a: Tensor) -> Tensor:
    out = np.exp(a.data)
    return Tensor._make(out, (a,), "exp", lambda g: a._accumulate(g * out))


def log(a: Tensor) -> Tensor:
    with np.errstate(divide="ignore", invalid="ignore"):
        out = np.log(a.data)
    return Tensor._make(out, (a,), "log", lambda g: a._accumulate(g / a.data))


def sigmoid(a: Tensor) -> Tensor:
    out = 0.5 * (1.0 + np.tanh(0.5 * a.data))
    return Tensor._make(out, (a,), "sigmoid", lambda g: a._accumulate(g * out * (1.0 - out)))


def tanh(a: Tensor) -> Tensor:
    out = np.tanh(a.data)
    return Tensor._make(out, (a,), "tanh", lambda g: a._accumulate(g * (1.0 - out * out)))


_GELU_C = math.sqrt(2.0 / math.pi)


def gelu(a: Tensor) -> Tensor:
    """Tanh-approximated GELU."""
    x = a.data
    x2 = x * x
    th = np.tanh(_GELU_C * x * (1.0 + 0.044715 * x2))
    half = 0.5 * (1.0 + th)
    out = x * half

    def backward(g):
        # d/dx = half + 0.5 x (1 - th^2) c (1 + 3 * 0.044715 x^2)
        d = 1.0 - th * th
        d *= x
        d *= 1.0 + 3 * 0.044715 * x2
        d *= 0.5 * _GELU_C
        d += half
        d *= g
        a._accumulate(d)

    return Tensor._make(out, (a,), "gelu", backward)


# ------------------------------------------------------------------ reductions


def tsum(a: Tensor, axis=None, keepdims=False) -> Tensor:
    out = a.data.sum(axis=axis, keepdims=keepdims)

    def backward(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        a._accumulate(np.broadcast_to(g, a.shape))

    return Tensor._make(np.asarray(out), (a,), "sum", backward)


def mean(a: Tensor, axis=None, keepdims=False) -> Tensor:
    n = a.size if axis is None else np.prod([a.shape[ax] for ax in np.atleast_1d(axis)])
    return mul(tsum(a, axis, keepdims), 1.0 / float(n))


# ---------------------------------------------------------------------- shapes


def matmul(a: Tensor, b: Tensor) -> Tensor:
    def backward(g):
        if a.requires_grad:
            ga = g @ np.swapaxes(b.data, -1, -2) if b.ndim > 1 else np.multiply.outer(g, b.data)
            a._accumulate(ga)
        if b.requires_grad:
            if b.ndim == 2 and a.ndim > 2:
                gb = a.data.reshape(-1, a.shape[-1]).T @ g.reshape(-1, g.shape[-1])
            else:
                gb = np.swapaxes(a.data, -1, -2) @ g
            b._accumulate(gb)

    return Tensor._make(a.data @ b.data, (a, b), "matmul", backward)


def reshape(a: Tensor, shape) -> Tensor:
    return Tensor._make(a.data.reshape(shape), (a,), "reshape", lambda g: a._accumulate(g.reshape(a.shape)))


def transpose(a: Tensor, axes=None) -> Tensor:
    axes = tuple(axes) if axes is not None else tuple(reversed(range(a.ndim)))
    inverse = tuple(np.argsort(axes))
    return Tensor._make(
        a.data.transpose(axes), (a,), "transpose", lambda g: a._accumulate(g.transpose(inverse))
    )


def swapaxes(a: Tensor, ax1: int, ax2: int) -> Tensor:
    return Tensor._make(
        np.swapaxes(a.data, ax1, ax2), (a,), "swapaxes", lambda g: a._accumulate(np.swapaxes(g, ax1, ax2))
    )


def _is_basic(idx) -> bool:
    items = idx if isinstance(idx, tuple) else (idx,)
    return all(isinstance(i, (int, np.integer, slice)) or i is None or i is Ellipsis for i in items)


def getitem(a: Tensor, idx) -> Tensor:
    basic = _is_basic(idx)

    def backward(g):
        full = np.zeros_like(a.data)
        if basic:
            full[idx] = g
        else:
            np.add.at(full, idx, g)
        a._accumulate(full)

    return Tensor._make(np.array(a.data[idx]), (a,), "getitem", backward)


def concat(tensors: Sequence[Tensor], axis: int = -1) -> Tensor:
    sizes = [t.shape[axis] for t in tensors]
    bounds = np.cumsum([0] + sizes)

    def backward(g):
        for t, lo, hi in zip(tensors, bounds[:-1], bounds[1:]):
            sl = [slice(None)] * g.ndim
            sl[axis] = slice(lo, hi)
            t._accumulate(g[tuple(sl)])

    return Tensor._make(np.concatenate([t.data for t in tensors], axis=axis), tuple(tensors), "concat", backward)


def embedding(table: Tensor, ids: np.ndarray) -> Tensor:
    ids = np.asarray(ids, dtype=np.int64)

    def backward(g):
        full = np.zeros_like(table.data)
        np.add.at(full, ids.reshape(-1), g.reshape(-1, table.shape[-1]))
        table._accumulate(full)

    return Tensor._make(table.data[ids], (table,), "embedding", backward)


# --------------------------------------------------------------- fused kernels


def softmax(a: Tensor, axis: int = -1, mask: np.ndarray | None = None) -> Tensor:
    """Softmax along ``axis``; positions where ``mask`` is False get exactly 0."""
    x = a.data
    if mask is not None:
        x = np.where(mask, x, -np.inf)
    z = x - x.max(axis=axis, keepdims=True)
    e = np.exp(z)
    out = e / e.sum(axis=axis, keepdims=True)

    def backward(g):
        a._accumulate(out * (g - (g * out).sum(axis=axis, keepdims=True)))

    return Tensor._make(out, (a,), "softmax", backward)


def log_softmax(a: Tensor, axis: int = -1) -> Tensor:
    x = a.data
    z = x - x.max(axis=axis, keepdims=True)
    out = z - np.log(np.exp(z).sum(axis=axis, keepdims=True))

    def backward(g):
        a._accumulate(g - np.exp(out) * g.sum(axis=axis, keepdims=True))

    return Tensor._make(out, (a,), "log_softmax", backward)


def layer_norm(x: Tensor, gamma: Tensor, beta: Tensor, eps: float = 1e-5) -> Tensor:
    d = x.data
    mu = d.mean(axis=-1, keepdims=True)
    xc = d - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    out = xhat * gamma.data + beta.data

    def backward(g):
        lead = tuple(range(g.ndim - 1))
        gamma._accumulate((g * xhat).sum(axis=lead))
        beta._accumulate(g.sum(axis=lead))
        if x.requires_grad:
            gh = g * gamma.data
            x._accumulate(
                inv * (gh - gh.mean(axis=-1, keepdims=True) - xhat * (gh * xhat).mean(axis=-1, keepdims=True))
            )

    return Tensor._make(out.astype(d.dtype, copy=False), (x, gamma, beta), "layer_norm", backward)


def causal_depthwise_conv(x: Tensor, weight: Tensor, bias: Tensor) -> Tensor:
    """Per-channel causal convolution over the time axis.

    ``x`` is (..., T, D), ``weight`` is (k, D). Tap ``k - 1`` multiplies the
    current frame and tap 0 the frame ``k - 1`` steps back, so output frame
    t never reads input frames after t.
    """
    k = weight.shape[0]
    T = x.shape[-2]
    pad = [(0, 0)] * x.ndim
    pad[-2] = (k - 1, 0)
    xp = np.pad(x.data, pad)
    out = np.broadcast_to(bias.data, x.shape).copy()
    for j in range(k):
        out += weight.data[j] * xp[..., j : j + T, :]

    def backward(g):
        lead = tuple(range(g.ndim - 1))
        bias._accumulate(g.sum(axis=lead))
        if weight.requires_grad:
            gw = np.empty_like(weight.data)
            for j in range(k):
                gw[j] = (g * xp[..., j : j + T, :]).sum(axis=lead)
            weight._accumulate(gw)
        if x.requires_grad:
            gxp = np.zeros_like(xp)
            for j in range(k):
                gxp[..., j : j + T, :] += g * weight.data[j]
            x._accumulate(gxp[..., k - 1 :, :])

    return Tensor._make(out, (x, weight, bias), "causal_dwconv", backward)


def cross_entropy(logits: Tensor, targets: np.ndarray, label_smoothing: float = 0.0) -> Tensor:
    """Mean over all leading positions of ``-log softmax(logits)[target]``."""
    z = logits.data
    C = z.shape[-1]
    flat = z.reshape(-1, C)
    tgt = np.asarray(targets, dtype=np.int64).reshape(-1)
    if len(tgt) != len(flat):
        raise ValueError(f"{len(tgt)} targets for {len(flat)} logit rows")
    if len(tgt) and (tgt.min() < 0 or tgt.max() >= C):
        raise ValueError(f"target id outside [0, {C})")
    shifted = flat - flat.max(axis=1, keepdims=True)
    logp = shifted - np.log(np.exp(shifted).sum(axis=1, keepdims=True))
    onehot = np.zeros_like(flat)
    onehot[np.arange(len(tgt)), tgt] = 1.0
    if label_smoothing:
        onehot = (1.0 - label_smoothing) * onehot + label_smoothing / C
    n = len(tgt)
    loss = -(onehot * logp).sum() / n

    def backward(g):
        grad = (np.exp(logp) * onehot.sum(axis=1, keepdims=True) - onehot) / n
        logits._accumulate((g * grad).reshape(z.shape))

    return Tensor._make(np.asarray(loss, dtype=z.dtype), (logits,), "cross_entropy", backward)


def parameters_of(tensors: Iterable[Tensor]) -> list[Tensor]:
    return [t for t in tensors if t.requires_grad]
