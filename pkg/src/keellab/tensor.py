"""Dense float64 tensors with tape-based reverse-mode differentiation.

Every operation that touches a tensor with ``requires_grad`` records its
parents and a closure mapping the output gradient to parent gradients. The
tape is the implicit DAG reachable from the loss; :func:`backward` walks it
once in reverse topological order.

Only two broadcasting forms are supported: a scalar against anything, and a
1-D vector against the trailing dimension of the other operand. Anything
else is a :class:`DimensionError`.
"""

from __future__ import annotations

import contextlib
import math
from dataclasses import dataclass, field
from typing import Callable, Iterable, Optional, Sequence

import numpy as np

from .errors import ContractError, DimensionError, NumericDomainError

_GRAD_ENABLED = True


@contextlib.contextmanager
def no_grad():
    """Disable graph recording inside the block."""
    global _GRAD_ENABLED
    prev = _GRAD_ENABLED
    _GRAD_ENABLED = False
    try:
        yield
    finally:
        _GRAD_ENABLED = prev


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "op")

    def __init__(self, data, requires_grad: bool = False):
        arr = np.array(data, dtype=np.float64)
        self.data: np.ndarray = arr
        self.grad: Optional[np.ndarray] = None
        self.requires_grad = bool(requires_grad)
        self._parents: tuple = ()
        self._backward: Optional[Callable] = None
        self.op = "leaf"

    @classmethod
    def _wrap(cls, arr: np.ndarray) -> "Tensor":
        t = cls.__new__(cls)
        t.data = arr
        t.grad = None
        t.requires_grad = False
        t._parents = ()
        t._backward = None
        t.op = "leaf"
        return t

    # -- basic introspection -------------------------------------------------
    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        if self.data.size != 1:
            raise ContractError(f"item() on tensor of shape {self.shape}")
        return float(self.data.reshape(()))

    def numpy(self) -> np.ndarray:
        return self.data

    def zero_grad(self) -> None:
        self.grad = None

    def detach(self) -> "Tensor":
        return Tensor._wrap(self.data)

    def __repr__(self):
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}{flag}, op={self.op})"

    # -- operators -----------------------------------------------------------
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return add(neg(self), other)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        if isinstance(other, Tensor):
            raise DimensionError("division is only defined by a Python scalar")
        return scale(self, 1.0 / float(other))

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def sum(self, axis=None):
        return sum_(self, axis)

    def mean(self, axis=None):
        return mean(self, axis)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return transpose(self, axes or None)

    def exp(self):
        return exp(self)

    def log(self):
        return log(self)

    def backward(self, retain_graph: bool = False) -> None:
        backward(self, retain_graph=retain_graph)


def tensor(data, requires_grad: bool = False) -> Tensor:
    return Tensor(data, requires_grad=requires_grad)


def _make(data: np.ndarray, parents: Sequence[Tensor], backward_fn, op: str) -> Tensor:
    out = Tensor._wrap(data)
    out.op = op
    if _GRAD_ENABLED and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = backward_fn
    return out


def _as_tensor(x) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor._wrap(np.asarray(x, dtype=np.float64))


def _check_broadcast(a: Tensor, b: Tensor, opname: str) -> None:
    sa, sb = a.shape, b.shape
    if sa == sb or a.size == 1 and a.ndim <= 1 or b.size == 1 and b.ndim <= 1:
        return
    if b.ndim == 1 and a.ndim >= 1 and sa[-1] == sb[0]:
        return
    if a.ndim == 1 and b.ndim >= 1 and sb[-1] == sa[0]:
        return
    raise DimensionError(f"{opname}: incompatible shapes {sa} and {sb}")


def _reduce_to(g: np.ndarray, shape: tuple) -> np.ndarray:
    if g.shape == shape:
        return g
    if len(shape) == 0 or (len(shape) == 1 and shape[0] == 1 and g.shape[-1:] != (1,)):
        return np.asarray(g.sum()).reshape(shape)
    lead = g.ndim - len(shape)
    return g.sum(axis=tuple(range(lead))).reshape(shape)


# -- elementwise -------------------------------------------------------------

def add(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _check_broadcast(a, b, "add")
    sa, sb = a.shape, b.shape

    def bw(g):
        return _reduce_to(g, sa), _reduce_to(g, sb)

    return _make(a.data + b.data, (a, b), bw, "add")


def sub(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _check_broadcast(a, b, "sub")
    sa, sb = a.shape, b.shape

    def bw(g):
        return _reduce_to(g, sa), _reduce_to(-g, sb)

    return _make(a.data - b.data, (a, b), bw, "sub")


def mul(a, b) -> Tensor:
    if not isinstance(b, Tensor) and np.ndim(b) == 0:
        return scale(a, float(b))
    if not isinstance(a, Tensor) and np.ndim(a) == 0:
        return scale(b, float(a))
    a, b = _as_tensor(a), _as_tensor(b)
    _check_broadcast(a, b, "mul")
    ad, bd = a.data, b.data
    sa, sb = a.shape, b.shape

    def bw(g):
        ga = _reduce_to(g * bd, sa) if a.requires_grad else None
        gb = _reduce_to(g * ad, sb) if b.requires_grad else None
        return ga, gb

    return _make(ad * bd, (a, b), bw, "mul")


def scale(x: Tensor, c: float) -> Tensor:
    c = float(c)

    def bw(g):
        return (g * c,)

    return _make(x.data * c, (x,), bw, "scale")


def neg(x: Tensor) -> Tensor:
    return _make(-x.data, (x,), lambda g: (-g,), "neg")


def identity(x: Tensor) -> Tensor:
    """A pass-through node; its ``grad`` isolates the gradient along one use of ``x``."""
    return _make(x.data, (x,), lambda g: (g,), "tap")


def exp(x: Tensor) -> Tensor:
    with np.errstate(over="ignore"):
        y = np.exp(x.data)
    if not np.all(np.isfinite(y)) and np.all(np.isfinite(x.data)):
        raise NumericDomainError("exp overflowed")
    return _make(y, (x,), lambda g: (g * y,), "exp")


def log(x: Tensor) -> Tensor:
    xd = x.data
    if np.any(xd <= 0):
        raise NumericDomainError("log of a non-positive value")
    return _make(np.log(xd), (x,), lambda g: (g / xd,), "log")


def _sigmoid(v: np.ndarray) -> np.ndarray:
    out = np.empty_like(v)
    pos = v >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-v[pos]))
    e = np.exp(v[~pos])
    out[~pos] = e / (1.0 + e)
    return out


def silu(x: Tensor) -> Tensor:
    xd = x.data
    s = _sigmoid(xd)

    def bw(g):
        return (g * (s * (1.0 + xd * (1.0 - s))),)

    return _make(xd * s, (x,), bw, "silu")


_GELU_K = math.sqrt(2.0 / math.pi)
_GELU_C = 0.044715


def gelu(x: Tensor) -> Tensor:
    """GELU in its tanh form, ``0.5 x (1 + tanh(k (x + 0.044715 x^3)))``."""
    xd = x.data
    x2 = xd * xd
    t = np.tanh(_GELU_K * (xd + _GELU_C * x2 * xd))

    def bw(g):
        dt = (1.0 - t * t) * (_GELU_K * (1.0 + 3.0 * _GELU_C * x2))
        return (g * (0.5 * (1.0 + t) + 0.5 * xd * dt),)

    return _make(0.5 * xd * (1.0 + t), (x,), bw, "gelu")


def elementwise(op: str, *args, **kwargs) -> Tensor:
    """Dispatch by name: add, sub, mul, scale, silu, gelu, exp, log."""
    table = {"add": add, "sub": sub, "mul": mul, "scale": scale,
             "silu": silu, "gelu": gelu, "exp": exp, "log": log}
    try:
        fn = table[op]
    except KeyError:
        raise ContractError(f"unknown elementwise op {op!r}") from None
    return fn(*args, **kwargs)


# -- reductions and shape ops ------------------------------------------------

def sum_(x: Tensor, axis=None) -> Tensor:
    shape = x.shape

    def bw(g):
        if axis is None:
            return (np.broadcast_to(g, shape).copy(),)
        return (np.broadcast_to(np.expand_dims(g, axis), shape).copy(),)

    return _make(np.asarray(x.data.sum(axis=axis)), (x,), bw, "sum")


def mean(x: Tensor, axis=None) -> Tensor:
    n = x.size if axis is None else np.prod([x.shape[a] for a in np.atleast_1d(axis)])
    return scale(sum_(x, axis), 1.0 / float(n))


def reshape(x: Tensor, shape) -> Tensor:
    old = x.shape
    try:
        y = x.data.reshape(shape)
    except ValueError as e:
        raise DimensionError(f"cannot reshape {old} to {tuple(shape)}") from e
    return _make(y, (x,), lambda g: (g.reshape(old),), "reshape")


def transpose(x: Tensor, axes=None) -> Tensor:
    if axes is None:
        axes = tuple(reversed(range(x.ndim)))
    inv = tuple(np.argsort(axes))
    return _make(x.data.transpose(axes), (x,), lambda g: (g.transpose(inv),), "transpose")


# -- linear algebra ----------------------------------------------------------

def matmul(a: Tensor, b: Tensor) -> Tensor:
    """``a @ b`` for 2-D operands, batched ``(..., m, k) @ (k, n)``, or equal-batch 3/4-D."""
    a, b = _as_tensor(a), _as_tensor(b)
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise DimensionError(f"matmul: shapes {a.shape} and {b.shape} do not align")
    if b.ndim > 2 and a.shape[:-2] != b.shape[:-2]:
        raise DimensionError(f"matmul: batch dims of {a.shape} and {b.shape} differ")
    ad, bd = a.data, b.data
    out = ad @ bd

    def bw(g):
        ga = gb = None
        if a.requires_grad:
            ga = g @ np.swapaxes(bd, -1, -2)
        if b.requires_grad:
            if bd.ndim == 2 and ad.ndim > 2:
                k = ad.shape[-1]
                gb = ad.reshape(-1, k).T @ g.reshape(-1, g.shape[-1])
            else:
                gb = np.swapaxes(ad, -1, -2) @ g
        return ga, gb

    return _make(out, (a, b), bw, "matmul")


def softmax_rows(x: Tensor) -> Tensor:
    """Softmax along the last axis, stabilised by subtracting the row max."""
    xd = x.data
    e = np.exp(xd - xd.max(axis=-1, keepdims=True))
    y = e / e.sum(axis=-1, keepdims=True)

    def bw(g):
        return (y * (g - (g * y).sum(axis=-1, keepdims=True)),)

    return _make(y, (x,), bw, "softmax")


# -- fused model primitives --------------------------------------------------

def rms_normalize(x: Tensor, gamma: Tensor, eps: float, root_dim: bool = True) -> Tensor:
    """``x / (||x|| / c + eps) * gamma`` along the last axis, ``c = sqrt(d)`` or 1."""
    xd, gd = x.data, gamma.data
    d = xd.shape[-1]
    if gd.shape != (d,):
        raise DimensionError(f"rmsnorm: gamma shape {gd.shape} does not match input {x.shape}")
    c = math.sqrt(d) if root_dim else 1.0
    norm = np.sqrt(np.einsum("...i,...i->...", xd, xd))[..., None]
    r = norm / c + eps
    if np.any(r == 0):
        raise NumericDomainError("rmsnorm of a zero vector with eps=0")
    xhat = xd / r
    y = xhat * gd

    def bw(g):
        gx = gg = None
        if x.requires_grad:
            gy = g * gd
            dot = np.einsum("...i,...i->...", gy, xd)[..., None]
            with np.errstate(divide="ignore", invalid="ignore"):
                coef = np.where(norm > 0, dot / (r * r * c * norm), 0.0)
            gx = gy / r - xd * coef
        if gamma.requires_grad:
            gg = (g * xhat).reshape(-1, d).sum(axis=0)
        return gx, gg

    return _make(y, (x, gamma), bw, "rmsnorm")


def embedding(weight: Tensor, ids: np.ndarray) -> Tensor:
    ids = np.asarray(ids, dtype=np.int64)
    V = weight.shape[0]
    if ids.size and (ids.min() < 0 or ids.max() >= V):
        raise ContractError(f"token id out of range for vocabulary of {V}")

    def bw(g):
        gw = np.zeros_like(weight.data)
        np.add.at(gw, ids.reshape(-1), g.reshape(-1, weight.shape[1]))
        return (gw,)

    return _make(weight.data[ids], (weight,), bw, "embedding")


def cross_entropy(logits: Tensor, targets: np.ndarray) -> Tensor:
    """Mean next-token negative log-likelihood; ``logits`` is ``(..., V)``."""
    ld = logits.data
    V = ld.shape[-1]
    flat = ld.reshape(-1, V)
    t = np.asarray(targets, dtype=np.int64).reshape(-1)
    if t.shape[0] != flat.shape[0]:
        raise DimensionError(f"cross_entropy: {flat.shape[0]} rows vs {t.shape[0]} targets")
    shifted = flat - flat.max(axis=1, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=1))
    rows = np.arange(t.shape[0])
    nll = lse - shifted[rows, t]
    n = t.shape[0]

    def bw(g):
        p = np.exp(shifted - lse[:, None])
        p[rows, t] -= 1.0
        return ((p * (float(g) / n)).reshape(ld.shape),)

    return _make(np.asarray(nll.mean()), (logits,), bw, "cross_entropy")


def rope(x: Tensor, cos: np.ndarray, sin: np.ndarray) -> Tensor:
    """Rotary embedding on ``(..., T, hd)`` using the half-split pairing."""
    xd = x.data
    h = xd.shape[-1] // 2
    x1, x2 = xd[..., :h], xd[..., h:]
    y = np.concatenate([x1 * cos - x2 * sin, x2 * cos + x1 * sin], axis=-1)

    def bw(g):
        g1, g2 = g[..., :h], g[..., h:]
        return (np.concatenate([g1 * cos + g2 * sin, g2 * cos - g1 * sin], axis=-1),)

    return _make(y, (x,), bw, "rope")


def repeat_heads(x: Tensor, n_rep: int) -> Tensor:
    """``(B, Hkv, T, hd) -> (B, Hkv * n_rep, T, hd)``, each KV head repeated in place."""
    if n_rep == 1:
        return x
    B, H, T, D = x.shape

    def bw(g):
        return (g.reshape(B, H, n_rep, T, D).sum(axis=2),)

    return _make(np.repeat(x.data, n_rep, axis=1), (x,), bw, "repeat_heads")


def attention_core(q: Tensor, k: Tensor, v: Tensor, causal: bool = True) -> Tensor:
    """``softmax(q k^T / sqrt(hd) + mask) v`` over ``(..., T, hd)`` operands."""
    qd, kd, vd = q.data, k.data, v.data
    T, D = qd.shape[-2], qd.shape[-1]
    s = 1.0 / math.sqrt(D)
    scores = (qd @ np.swapaxes(kd, -1, -2)) * s
    if causal:
        mask = np.triu(np.ones((T, T), dtype=bool), k=1)
        scores = np.where(mask, -np.inf, scores)
    scores -= scores.max(axis=-1, keepdims=True)
    p = np.exp(scores)
    p /= p.sum(axis=-1, keepdims=True)
    out = p @ vd

    def bw(g):
        gv = np.swapaxes(p, -1, -2) @ g
        gp = g @ np.swapaxes(vd, -1, -2)
        gs = p * (gp - (gp * p).sum(axis=-1, keepdims=True)) * s
        gq = gs @ kd
        gk = np.swapaxes(gs, -1, -2) @ qd
        return gq, gk, gv

    return _make(out, (q, k, v), bw, "attention")


# -- backward ----------------------------------------------------------------

@dataclass
class Graph:
    """Executed operations reachable from an output, inputs before consumers."""

    nodes: list = field(default_factory=list)

    @classmethod
    def from_output(cls, out: Tensor) -> "Graph":
        order: list = []
        seen: set = set()
        stack = [(out, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                order.append(node)
                continue
            if id(node) in seen:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for p in node._parents:
                if p.requires_grad and id(p) not in seen:
                    stack.append((p, False))
        return cls(order)


def backward(loss: Tensor, retain_graph: bool = False) -> None:
    """Populate ``.grad`` of every grad-requiring tensor reachable from ``loss``.

    Gradients accumulate into existing ``.grad`` arrays. Unless
    ``retain_graph`` is set, closures and parent links are dropped afterwards.
    """
    if loss.size != 1:
        raise ContractError(f"backward needs a scalar loss, got shape {loss.shape}")
    if not loss.requires_grad:
        return
    graph = Graph.from_output(loss)
    seed = np.ones_like(loss.data)
    pending = {id(loss): seed}
    for node in reversed(graph.nodes):
        g = pending.pop(id(node), None)
        if g is None:
            continue
        node.grad = g if node.grad is None else node.grad + g
        if node._backward is None:
            continue
        grads = node._backward(g)
        for parent, pg in zip(node._parents, grads):
            if pg is None or not parent.requires_grad:
                continue
            key = id(parent)
            prev = pending.get(key)
            pending[key] = pg if prev is None else prev + pg
        if not retain_graph:
            node._backward = None
            node._parents = ()


def zero_grad(tensors: Iterable[Tensor]) -> None:
    for t in tensors:
        t.grad = None


def finite_diff_check(f: Callable[[Tensor], Tensor], x: Tensor, h: float = 1e-5) -> float:
    """Max over coordinates of ``|analytic - central| / (|central| + 1e-8)``.

    ``f`` must be deterministic and return a scalar tensor. ``x`` is perturbed
    in place and restored.
    """
    was = x.requires_grad
    x.requires_grad = True
    x.grad = None
    out = f(x)
    backward(out)
    analytic = np.zeros_like(x.data) if x.grad is None else x.grad.copy()
    x.grad = None
    x.requires_grad = was

    flat = x.data.reshape(-1)
    numeric = np.empty(flat.shape[0])
    with no_grad():
        for i in range(flat.shape[0]):
            orig = flat[i]
            flat[i] = orig + h
            fp = f(x).item()
            flat[i] = orig - h
            fm = f(x).item()
            flat[i] = orig
            numeric[i] = (fp - fm) / (2.0 * h)
    a = analytic.reshape(-1)
    return float(np.max(np.abs(a - numeric) / (np.abs(numeric) + 1e-8)))
