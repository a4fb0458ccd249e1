"""Dense tensors with reverse-mode automatic differentiation.

Every op returns a new :class:`TensorNode`.  When any input requires a
gradient (and grad mode is enabled) the node records its parents and a
closure that pushes the upstream gradient back to them.  ``backward`` walks
the graph once in reverse topological order.

Two precision modes exist: float32 (default) and float64, selected with
:func:`precision`.  Gradient checks run in float64.
"""

from __future__ import annotations

import contextlib
import math
from typing import Callable, Iterable, Sequence

import numpy as np
from scipy.special import erf

_DTYPE = np.float32
_GRAD_ENABLED = True

_SQRT2 = math.sqrt(2.0)
_INV_SQRT_2PI = 1.0 / math.sqrt(2.0 * math.pi)


def default_dtype():
    return _DTYPE


@contextlib.contextmanager
def precision(bits: int):
    """Temporarily switch the dtype used for newly created tensors."""
    global _DTYPE
    if bits not in (32, 64):
        raise ValueError(f"precision must be 32 or 64, got {bits}")
    prev = _DTYPE
    _DTYPE = np.float64 if bits == 64 else np.float32
    try:
        yield
    finally:
        _DTYPE = prev


@contextlib.contextmanager
def no_grad():
    """Disable graph construction (inference)."""
    global _GRAD_ENABLED
    prev = _GRAD_ENABLED
    _GRAD_ENABLED = False
    try:
        yield
    finally:
        _GRAD_ENABLED = prev


def grad_enabled() -> bool:
    return _GRAD_ENABLED


class TensorNode:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "op", "name")
    __array_priority__ = 100.0

    def __init__(self, data, requires_grad: bool = False, name: str | None = None, dtype=None):
        arr = np.asarray(data, dtype=dtype or _DTYPE)
        if arr.ndim > 0 and not arr.flags.c_contiguous:
            arr = np.ascontiguousarray(arr)
        self.data = arr
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self._parents: tuple[TensorNode, ...] = ()
        self._backward: Callable[[np.ndarray], None] | None = None
        self.op = "leaf"
        self.name = name

    # -- basic properties ------------------------------------------------
    @property
    def shape(self) -> tuple[int, ...]:
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

    def __len__(self):
        return self.data.shape[0]

    def __repr__(self):
        tag = f", name={self.name!r}" if self.name else ""
        return f"TensorNode(shape={self.shape}, op={self.op}{tag})"

    def zero_grad(self):
        self.grad = None

    def detach(self) -> "TensorNode":
        return TensorNode(self.data, dtype=self.data.dtype)

    # -- autodiff --------------------------------------------------------
    def backward(self, grad: np.ndarray | None = None):
        """Accumulate d(self)/d(leaf) into every reachable ``requires_grad`` leaf.

        Intermediate gradients are released after use; leaf gradients
        accumulate across calls until cleared.
        """
        if grad is None:
            if self.data.size != 1:
                raise ValueError(f"backward() needs a scalar loss, got shape {self.shape}")
            grad = np.ones_like(self.data)
        if not self.requires_grad:
            return

        order: list[TensorNode] = []
        visited: set[int] = set()
        stack: list[tuple[TensorNode, bool]] = [(self, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                order.append(node)
                continue
            if id(node) in visited:
                continue
            visited.add(id(node))
            stack.append((node, True))
            for p in node._parents:
                if p.requires_grad and id(p) not in visited:
                    stack.append((p, False))

        grads: dict[int, np.ndarray] = {id(self): grad}
        for node in reversed(order):
            g = grads.pop(id(node), None)
            if g is None:
                continue
            if node._backward is None:
                node.grad = g.copy() if node.grad is None else node.grad + g
                continue
            for parent, pg in zip(node._parents, node._backward(g)):
                if pg is None or not parent.requires_grad:
                    continue
                key = id(parent)
                if key in grads:
                    grads[key] = grads[key] + pg
                else:
                    grads[key] = pg

    # -- operator sugar --------------------------------------------------
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

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __rmatmul__(self, other):
        return matmul(other, self)

    def __pow__(self, k):
        return power(self, k)

    def __getitem__(self, idx):
        return index(self, idx)

    def sum(self, axis=None, keepdims=False):
        return tsum(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis, keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return transpose(self, axes)


def tensor(data, requires_grad: bool = False, name: str | None = None) -> TensorNode:
    return TensorNode(data, requires_grad=requires_grad, name=name)


def _as_node(x) -> TensorNode:
    if isinstance(x, TensorNode):
        return x
    dtype = x.dtype if isinstance(x, np.ndarray) and x.dtype.kind == "f" else _DTYPE
    return TensorNode(x, dtype=dtype)


def _make(data: np.ndarray, parents: Sequence[TensorNode], backward, op: str) -> TensorNode:
    out = TensorNode.__new__(TensorNode)
    out.data = data
    out.grad = None
    out.name = None
    out.op = op
    if _GRAD_ENABLED and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = backward
    else:
        out.requires_grad = False
        out._parents = ()
        out._backward = None
    return out


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if g.shape == shape:
        return g
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g


# -- elementwise arithmetic ----------------------------------------------

def add(a, b) -> TensorNode:
    a, b = _as_node(a), _as_node(b)

    def bw(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return _make(a.data + b.data, (a, b), bw, "add")


def sub(a, b) -> TensorNode:
    a, b = _as_node(a), _as_node(b)

    def bw(g):
        return _unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)

    return _make(a.data - b.data, (a, b), bw, "sub")


def mul(a, b) -> TensorNode:
    a, b = _as_node(a), _as_node(b)

    def bw(g):
        ga = _unbroadcast(g * b.data, a.shape) if a.requires_grad else None
        gb = _unbroadcast(g * a.data, b.shape) if b.requires_grad else None
        return ga, gb

    return _make(a.data * b.data, (a, b), bw, "mul")


def div(a, b) -> TensorNode:
    a, b = _as_node(a), _as_node(b)
    out = a.data / b.data

    def bw(g):
        ga = _unbroadcast(g / b.data, a.shape) if a.requires_grad else None
        gb = _unbroadcast(-g * out / b.data, b.shape) if b.requires_grad else None
        return ga, gb

    return _make(out, (a, b), bw, "div")


def power(a, k: float) -> TensorNode:
    a = _as_node(a)

    def bw(g):
        return (g * k * a.data ** (k - 1),)

    return _make(a.data ** k, (a,), bw, f"pow{k}")


def exp(a) -> TensorNode:
    a = _as_node(a)
    out = np.exp(a.data)
    return _make(out, (a,), lambda g: (g * out,), "exp")


def log(a) -> TensorNode:
    a = _as_node(a)
    return _make(np.log(a.data), (a,), lambda g: (g / a.data,), "log")


def tabs(a) -> TensorNode:
    a = _as_node(a)
    return _make(np.abs(a.data), (a,), lambda g: (g * np.sign(a.data),), "abs")


def relu(a) -> TensorNode:
    a = _as_node(a)
    mask = a.data > 0
    return _make(a.data * mask, (a,), lambda g: (g * mask,), "relu")


def gelu(a) -> TensorNode:
    """Exact GELU, x * Phi(x), with Phi the standard normal CDF."""
    a = _as_node(a)
    x = a.data
    cdf = 0.5 * (1.0 + erf(x / _SQRT2))
    out = (x * cdf).astype(x.dtype, copy=False)

    def bw(g):
        pdf = _INV_SQRT_2PI * np.exp(-0.5 * x * x)
        return (g * (cdf + x * pdf),)

    return _make(out, (a,), bw, "gelu")


def silu(a) -> TensorNode:
    a = _as_node(a)
    x = a.data
    sig = 1.0 / (1.0 + np.exp(-x))
    return _make(x * sig, (a,), lambda g: (g * sig * (1.0 + x * (1.0 - sig)),), "silu")


# -- reductions and shape ops --------------------------------------------

def _norm_axes(axis, ndim):
    if axis is None:
        return tuple(range(ndim))
    if isinstance(axis, int):
        axis = (axis,)
    out = []
    for ax in axis:
        if not -ndim <= ax < ndim:
            raise ValueError(f"axis {ax} out of range for {ndim}-d tensor")
        out.append(ax % ndim)
    return tuple(out)


def tsum(a, axis=None, keepdims=False) -> TensorNode:
    a = _as_node(a)
    axes = _norm_axes(axis, a.ndim)
    out = a.data.sum(axis=axes, keepdims=keepdims)

    def bw(g):
        if not keepdims:
            g = np.expand_dims(g, axes)
        return (np.broadcast_to(g, a.shape).copy(),)

    return _make(np.asarray(out), (a,), bw, "sum")


def mean(a, axis=None, keepdims=False) -> TensorNode:
    a = _as_node(a)
    axes = _norm_axes(axis, a.ndim)
    n = int(np.prod([a.shape[i] for i in axes])) if axes else 1
    return tsum(a, axis, keepdims) * (1.0 / n)


def tmax(a, axis: int, keepdims=False) -> TensorNode:
    """Max along one axis; ties route the gradient to the first maximiser."""
    a = _as_node(a)
    (ax,) = _norm_axes(axis, a.ndim)
    idx = np.argmax(a.data, axis=ax)
    out = np.take_along_axis(a.data, np.expand_dims(idx, ax), axis=ax)
    if not keepdims:
        out = np.squeeze(out, axis=ax)

    def bw(g):
        ga = np.zeros_like(a.data)
        gk = g if keepdims else np.expand_dims(g, ax)
        np.put_along_axis(ga, np.expand_dims(idx, ax), gk, axis=ax)
        return (ga,)

    return _make(out, (a,), bw, "max")


def reshape(a, shape) -> TensorNode:
    a = _as_node(a)
    return _make(a.data.reshape(shape), (a,), lambda g: (g.reshape(a.shape),), "reshape")


def transpose(a, axes) -> TensorNode:
    a = _as_node(a)
    axes = tuple(axes) if axes else tuple(reversed(range(a.ndim)))
    inv = tuple(np.argsort(axes))
    out = np.ascontiguousarray(a.data.transpose(axes))
    return _make(out, (a,), lambda g: (g.transpose(inv),), "transpose")


def index(a, idx) -> TensorNode:
    """Basic or advanced indexing; gradients scatter-add back."""
    a = _as_node(a)
    out = a.data[idx]
    out = np.ascontiguousarray(out) if isinstance(out, np.ndarray) else np.asarray(out)

    def bw(g):
        ga = np.zeros_like(a.data)
        np.add.at(ga, idx, g)
        return (ga,)

    return _make(out, (a,), bw, "index")


def concat(parts: Sequence, axis: int = -1) -> TensorNode:
    nodes = [_as_node(p) for p in parts]
    out = np.concatenate([n.data for n in nodes], axis=axis)
    bounds = np.cumsum([n.shape[axis] for n in nodes])[:-1]

    def bw(g):
        return tuple(np.split(g, bounds, axis=axis))

    return _make(out, nodes, bw, "concat")


def split(a, sizes: Sequence[int], axis: int = -1) -> list[TensorNode]:
    a = _as_node(a)
    if sum(sizes) != a.shape[axis]:
        raise ValueError(f"split sizes {list(sizes)} do not sum to {a.shape[axis]}")
    out, start = [], 0
    for n in sizes:
        sl = [slice(None)] * a.ndim
        sl[axis] = slice(start, start + n)
        out.append(index(a, tuple(sl)))
        start += n
    return out


def embedding(table: TensorNode, ids: np.ndarray) -> TensorNode:
    ids = np.asarray(ids, dtype=np.int64)

    def bw(g):
        gt = np.zeros_like(table.data)
        np.add.at(gt, ids.reshape(-1), g.reshape(-1, table.shape[-1]))
        return (gt,)

    return _make(table.data[ids], (table,), bw, "embedding")


# -- linear algebra --------------------------------------------------------

def matmul(a, b) -> TensorNode:
    """Batched matmul with numpy broadcasting over leading dims."""
    a, b = _as_node(a), _as_node(b)

    def bw(g):
        ga = gb = None
        if a.requires_grad:
            bd = b.data if b.ndim > 1 else b.data[None, :]
            gg = g if b.ndim > 1 else g[..., None]
            ga = _unbroadcast(gg @ np.swapaxes(bd, -1, -2), a.shape)
        if b.requires_grad:
            ad = a.data if a.ndim > 1 else a.data[None, :]
            gg = g if a.ndim > 1 else g[..., None, :]
            gb = np.swapaxes(ad, -1, -2) @ gg
            gb = _unbroadcast(gb, b.shape if b.ndim > 1 else (b.shape[0], 1))
            if b.ndim == 1:
                gb = gb.reshape(b.shape)
        return ga, gb

    return _make(a.data @ b.data, (a, b), bw, "matmul")


# -- normalisation, softmax, losses ----------------------------------------

def softmax(a, axis: int = -1) -> TensorNode:
    a = _as_node(a)
    if not -a.ndim <= axis < a.ndim:
        raise ValueError(f"axis {axis} out of range for {a.ndim}-d tensor")
    z = a.data - a.data.max(axis=axis, keepdims=True)
    e = np.exp(z)
    out = e / e.sum(axis=axis, keepdims=True)

    def bw(g):
        return (out * (g - (g * out).sum(axis=axis, keepdims=True)),)

    return _make(out, (a,), bw, "softmax")


def log_softmax(a, axis: int = -1) -> TensorNode:
    a = _as_node(a)
    z = a.data - a.data.max(axis=axis, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=axis, keepdims=True))
    out = z - lse

    def bw(g):
        return (g - np.exp(out) * g.sum(axis=axis, keepdims=True),)

    return _make(out, (a,), bw, "log_softmax")


def cross_entropy(logits, targets: np.ndarray, mask: np.ndarray | None = None) -> TensorNode:
    """Mean token-level cross entropy over positions where ``mask`` is set.

    ``logits`` has shape (..., V); ``targets`` matches its leading shape.
    """
    logits = _as_node(logits)
    targets = np.asarray(targets, dtype=np.int64)
    v = logits.shape[-1]
    flat = logits.data.reshape(-1, v)
    t = targets.reshape(-1)
    w = np.ones(t.shape, dtype=flat.dtype) if mask is None else np.asarray(mask, dtype=flat.dtype).reshape(-1)
    denom = w.sum()
    if denom <= 0:
        raise ValueError("cross_entropy: mask selects no positions")
    z = flat - flat.max(axis=1, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=1))
    nll = lse - z[np.arange(len(t)), t]
    loss = np.asarray((nll * w).sum() / denom, dtype=flat.dtype)

    def bw(g):
        p = np.exp(z - lse[:, None])
        p[np.arange(len(t)), t] -= 1.0
        p *= (w / denom)[:, None] * g
        return (p.reshape(logits.shape),)

    return _make(loss, (logits,), bw, "cross_entropy")


def rms_norm(x, weight, eps: float = 1e-6) -> TensorNode:
    """x / sqrt(mean(x^2) + eps) * weight over the last axis."""
    x, weight = _as_node(x), _as_node(weight)
    xd = x.data
    inv = 1.0 / np.sqrt((xd * xd).mean(axis=-1, keepdims=True) + eps)
    xhat = xd * inv
    out = xhat * weight.data

    def bw(g):
        gw = _unbroadcast(g * xhat, weight.shape) if weight.requires_grad else None
        gx = None
        if x.requires_grad:
            gh = g * weight.data
            d = xd.shape[-1]
            gx = inv * (gh - xhat * (gh * xhat).sum(axis=-1, keepdims=True) / d)
        return gx, gw

    return _make(out, (x, weight), bw, "rms_norm")


def rational(x, a, b, abs_of_sum: bool = True) -> TensorNode:
    """Elementwise P(x) / (1 + |Q(x)|) with P = sum_j a_j x^j, Q = sum_i b_i x^i (i >= 1).

    With ``abs_of_sum=False`` the denominator is 1 + sum_i |b_i x^i| instead.
    Both polynomials are evaluated with Horner's scheme.
    """
    x, a, b = _as_node(x), _as_node(a), _as_node(b)
    xd, ad, bd = x.data, a.data, b.data
    m, n = ad.shape[0] - 1, bd.shape[0]

    p = np.full_like(xd, ad[m])
    dp = np.zeros_like(xd)
    for j in range(m - 1, -1, -1):
        dp = dp * xd + p
        p = p * xd + ad[j]

    if abs_of_sum:
        q = np.full_like(xd, bd[n - 1])
        dq = np.zeros_like(xd)
        for i in range(n - 2, -1, -1):
            dq = dq * xd + q
            q = q * xd + bd[i]
        # q currently holds sum_i b_i x^(i-1); multiply through by x
        dq = dq * xd + q
        q = q * xd
        s = np.sign(q)
        den = 1.0 + np.abs(q)
        ddx_den = s * dq
    else:
        den = np.ones_like(xd)
        ddx_den = np.zeros_like(xd)
        xp = np.ones_like(xd)
        for i in range(n):
            prev = xp
            xp = xp * xd
            term = bd[i] * xp
            den = den + np.abs(term)
            ddx_den = ddx_den + np.sign(term) * bd[i] * (i + 1) * prev
    out = p / den

    def bw(g):
        gx = ga = gb = None
        if x.requires_grad:
            gx = g * (dp * den - p * ddx_den) / (den * den)
        if a.requires_grad:
            gd = g / den
            ga = np.empty_like(ad)
            xp = np.ones_like(xd)
            for j in range(m + 1):
                ga[j] = (gd * xp).sum()
                xp = xp * xd
        if b.requires_grad:
            gden = -g * p / (den * den)
            gb = np.empty_like(bd)
            xp = xd.copy()
            for i in range(n):
                sgn = s if abs_of_sum else np.sign(bd[i] * xp)
                gb[i] = (gden * sgn * xp).sum()
                xp = xp * xd
        return gx, ga, gb

    return _make(out, (x, a, b), bw, "rational")


def num_elements(params: Iterable[TensorNode]) -> int:
    return sum(p.data.size for p in params)
