"""Small dense tensor engine with reverse-mode autodiff.

Only the operations the model needs are provided.  Every op computes its
forward value eagerly with numpy and, when any input participates in the
graph, records a closure that maps the output gradient to input gradients.
Each recorded op gets a global sequence number so that ``backward`` can
replay the graph in exact reverse execution order.
"""

from __future__ import annotations

import itertools
import math
from typing import Callable, Sequence

import numpy as np

DTYPE = np.float64

_SEQ = itertools.count()


class GraphError(RuntimeError):
    """Raised on misuse of the gradient graph (e.g. a second backward)."""


class GradCheckError(ArithmeticError):
    pass


class Tensor:
    """Dense float64 array that can take part in gradient computation."""

    __slots__ = ("data", "requires_grad", "grad", "_parents", "_backward", "_seq", "_consumed")

    def __init__(self, data, requires_grad: bool = False):
        self.data = np.asarray(data, dtype=DTYPE)
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable | None = None
        self._seq = next(_SEQ)
        self._consumed = False

    # -- basic properties -------------------------------------------------
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

    def __repr__(self):
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}{flag})"

    def zero_grad(self):
        self.grad = None

    # -- operator sugar ---------------------------------------------------
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return add(self, mul(other, -1.0))

    def __rsub__(self, other):
        return add(mul(self, -1.0), other)

    def __neg__(self):
        return mul(self, -1.0)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __matmul__(self, other):
        return matmul(self, other)

    def sum(self):
        return tensor_sum(self)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        return transpose(self, axes or None)

    # -- autodiff ---------------------------------------------------------
    def backward(self, grad=None):
        """Accumulate d(self)/d(leaf) into ``leaf.grad`` for every leaf.

        The graph below ``self`` is released afterwards; calling backward a
        second time without a fresh forward pass raises :class:`GraphError`.
        """
        if self._consumed:
            raise GraphError("backward called twice on the same graph; run the forward pass again")
        if grad is None:
            if self.data.size != 1:
                raise GraphError(f"backward without explicit grad needs a scalar output, got shape {self.shape}")
            grad = np.ones_like(self.data)
        grad = np.asarray(grad, dtype=DTYPE)
        if grad.shape != self.shape:
            raise ValueError(f"seed gradient shape {grad.shape} != output shape {self.shape}")

        nodes = _collect(self)
        nodes.sort(key=lambda t: t._seq, reverse=True)
        grads: dict[int, np.ndarray] = {id(self): grad}
        for node in nodes:
            g = grads.pop(id(node), None)
            if node._backward is None:
                if node.requires_grad and g is not None:
                    node.grad = g.copy() if node.grad is None else node.grad + g
                continue
            if g is None:
                continue
            for parent, pg in zip(node._parents, node._backward(g)):
                if pg is None or not _in_graph(parent):
                    continue
                key = id(parent)
                grads[key] = grads[key] + pg if key in grads else pg
        for node in nodes:
            if node._backward is not None:
                node._backward = None
                node._parents = ()
                node._consumed = True
        self._consumed = True


def _in_graph(t: Tensor) -> bool:
    return t.requires_grad or t._backward is not None


def _collect(root: Tensor) -> list[Tensor]:
    seen: set[int] = set()
    out: list[Tensor] = []
    stack = [root]
    while stack:
        t = stack.pop()
        if id(t) in seen:
            continue
        seen.add(id(t))
        out.append(t)
        stack.extend(p for p in t._parents if _in_graph(p))
    return out


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def make_op(data: np.ndarray, parents: Sequence[Tensor], backward: Callable) -> Tensor:
    """Wrap ``data`` as the output of an op.

    ``backward(g)`` must return one gradient (or ``None``) per parent.  The
    op is only recorded when at least one parent is part of a graph.
    """
    out = Tensor(data)
    if any(_in_graph(p) for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = backward
    return out


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, n in enumerate(shape):
        if n == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g


# -- elementwise ---------------------------------------------------------
def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)

    def backward(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return make_op(a.data + b.data, (a, b), backward)


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)

    def backward(g):
        return _unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)

    return make_op(a.data * b.data, (a, b), backward)


def scale(a: Tensor, c: float) -> Tensor:
    return mul(a, float(c))


def tensor_sum(a: Tensor) -> Tensor:
    def backward(g):
        return (np.broadcast_to(g, a.shape).copy(),)

    return make_op(np.asarray(a.data.sum()), (a,), backward)


def gelu(x: Tensor) -> Tensor:
    """tanh-approximated GELU: 0.5 x (1 + tanh(sqrt(2/pi) (x + 0.044715 x^3)))."""
    c = math.sqrt(2.0 / math.pi)
    u = c * (x.data + 0.044715 * x.data**3)
    t = np.tanh(u)
    out = 0.5 * x.data * (1.0 + t)

    def backward(g):
        du = c * (1.0 + 3 * 0.044715 * x.data**2)
        return (g * (0.5 * (1.0 + t) + 0.5 * x.data * (1.0 - t * t) * du),)

    return make_op(out, (x,), backward)


# -- shape ops -----------------------------------------------------------
def reshape(a: Tensor, shape) -> Tensor:
    shape = tuple(shape)
    out = a.data.reshape(shape)
    if out.size != a.data.size:
        raise ValueError(f"cannot reshape {a.shape} into {shape}")

    def backward(g):
        return (g.reshape(a.shape),)

    return make_op(out, (a,), backward)


def transpose(a: Tensor, axes=None) -> Tensor:
    axes = tuple(range(a.ndim))[::-1] if axes is None else tuple(axes)
    inverse = tuple(np.argsort(axes))

    def backward(g):
        return (g.transpose(inverse),)

    return make_op(a.data.transpose(axes), (a,), backward)


def embedding(weight: Tensor, ids) -> Tensor:
    """Row gather ``weight[ids]``; the backward pass scatter-adds."""
    ids = np.asarray(ids, dtype=np.int64)
    if ids.size and (ids.min() < 0 or ids.max() >= weight.shape[0]):
        raise IndexError(f"embedding index out of range [0, {weight.shape[0]})")

    def backward(g):
        gw = np.zeros_like(weight.data)
        np.add.at(gw, ids, g)
        return (gw,)

    return make_op(weight.data[ids], (weight,), backward)


# -- linear algebra ------------------------------------------------------
def matmul(a, b) -> Tensor:
    """Matrix product with at most one leading (broadcast) batch dimension."""
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2 or a.ndim > 3 or b.ndim > 3:
        raise ValueError(f"matmul expects 2-D or 3-D operands, got {a.shape} and {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise ValueError(f"matmul dimension mismatch: {a.shape} @ {b.shape}")
    if a.ndim == 3 and b.ndim == 3 and a.shape[0] != b.shape[0]:
        raise ValueError(f"matmul batch mismatch: {a.shape} @ {b.shape}")

    def backward(g):
        ga = g @ np.swapaxes(b.data, -1, -2)
        gb = np.swapaxes(a.data, -1, -2) @ g
        return _unbroadcast(ga, a.shape), _unbroadcast(gb, b.shape)

    return make_op(a.data @ b.data, (a, b), backward)


# -- normalisation and probabilities -------------------------------------
def rmsnorm(x: Tensor, gamma: Tensor, eps: float = 1e-12) -> Tensor:
    """x / sqrt(mean(x^2) + eps) * gamma over the last axis.

    ``gamma`` may be any shape that broadcasts against ``x`` (per-head gains
    use ``(h, 1, d)``).
    """
    if eps <= 0:
        raise ValueError("eps must be positive")
    if gamma.shape[-1] != x.shape[-1]:
        raise ValueError(f"gamma last dim {gamma.shape[-1]} != x last dim {x.shape[-1]}")
    r = 1.0 / np.sqrt(np.mean(x.data * x.data, axis=-1, keepdims=True) + eps)
    xhat = x.data * r
    out = xhat * gamma.data

    def backward(g):
        gg = g * gamma.data
        d = x.shape[-1]
        gx = r * gg - xhat * (r * np.sum(gg * xhat, axis=-1, keepdims=True) / d)
        return gx, _unbroadcast(g * xhat, gamma.shape)

    return make_op(out, (x, gamma), backward)


def _masked_softmax_array(s: np.ndarray, mask: np.ndarray) -> np.ndarray:
    z = np.where(mask, s, -np.inf)
    row_max = z.max(axis=-1, keepdims=True)
    row_max = np.where(np.isfinite(row_max), row_max, 0.0)
    with np.errstate(over="ignore"):  # differences of huge opposite-sign scores underflow to exp(-inf)
        e = np.where(mask, np.exp(z - row_max), 0.0)
    denom = e.sum(axis=-1, keepdims=True)
    return np.divide(e, denom, out=np.zeros_like(e), where=denom > 0)


def softmax_masked(scores: Tensor, mask) -> Tensor:
    """Softmax along the last axis with disallowed entries forced to 0.

    Masking is additive (blocked scores are treated as -inf).  Rows with no
    allowed entry return all zeros and pass no gradient.
    """
    mask = np.asarray(mask, dtype=bool)
    if mask.shape != scores.shape:
        try:
            mask = np.broadcast_to(mask, scores.shape)
        except ValueError:
            raise ValueError(f"mask shape {mask.shape} incompatible with scores {scores.shape}") from None
    p = _masked_softmax_array(scores.data, mask)

    def backward(g):
        return (p * (g - np.sum(g * p, axis=-1, keepdims=True)),)

    return make_op(p, (scores,), backward)


def cross_entropy(logits: Tensor, targets, ignore=None) -> Tensor:
    """Mean next-token negative log-likelihood over non-ignored rows."""
    targets = np.asarray(targets, dtype=np.int64)
    n, v = logits.shape
    if targets.shape != (n,):
        raise ValueError(f"targets shape {targets.shape} != ({n},)")
    ignore = np.zeros(n, dtype=bool) if ignore is None else np.asarray(ignore, dtype=bool)
    if ignore.shape != (n,):
        raise ValueError("ignore mask must have one entry per target")
    keep = ~ignore
    if np.any((targets[keep] < 0) | (targets[keep] >= v)):
        raise IndexError(f"target outside vocabulary range [0, {v})")
    count = int(keep.sum())
    if count == 0:
        return make_op(np.asarray(0.0), (logits,), lambda g: (np.zeros_like(logits.data),))

    z = logits.data[keep]
    t = targets[keep]
    zmax = z.max(axis=1, keepdims=True)
    lse = np.log(np.exp(z - zmax).sum(axis=1)) + zmax[:, 0]
    nll = lse - z[np.arange(count), t]
    value = nll.sum() / count

    def backward(g):
        p = np.exp(z - lse[:, None])
        p[np.arange(count), t] -= 1.0
        out = np.zeros_like(logits.data)
        out[keep] = p * (g / count)
        return (out,)

    return make_op(np.asarray(value), (logits,), backward)


# -- gradient checking ---------------------------------------------------
def grad_check(f: Callable[[Tensor], Tensor], x: Tensor, h: float = 1e-5, coords=None) -> float:
    """Max relative error between the analytic and central-difference gradient.

    The error per coordinate is ``|analytic - numeric| / max(1, |analytic|)``.
    ``coords`` optionally restricts the check to a list of flat indices.
    """
    if not 1e-6 <= h <= 1e-3:
        raise ValueError("h must lie in [1e-6, 1e-3] for float64 differences")
    x.requires_grad = True
    x.grad = None
    f(x).backward()
    analytic = np.zeros_like(x.data) if x.grad is None else x.grad.copy()
    x.grad = None

    flat = x.data.reshape(-1)
    idx = range(flat.size) if coords is None else coords
    worst = 0.0
    for i in idx:
        orig = flat[i]
        flat[i] = orig + h
        fp = float(f(x).data)
        flat[i] = orig - h
        fm = float(f(x).data)
        flat[i] = orig
        num = (fp - fm) / (2 * h)
        a = analytic.reshape(-1)[i]
        if not (math.isfinite(a) and math.isfinite(num)):
            coord = np.unravel_index(i, x.shape)
            raise GradCheckError(f"non-finite gradient at coordinate {coord}: analytic={a}, numeric={num}")
        worst = max(worst, abs(a - num) / max(1.0, abs(a)))
    return worst
