"""Dense tensors with reverse-mode automatic differentiation.

Every op produces a new :class:`Tensor` that remembers its parents and a
closure mapping the output gradient to one gradient per parent.
:func:`backward` walks the graph in reverse topological order and
accumulates gradients additively, so a tensor consumed twice receives the
sum of both path gradients.

Arrays are float32 by default. Ops preserve the dtype of their inputs, which
lets the gradient checker replay a graph in float64.
"""

from __future__ import annotations

import contextlib
import math
from typing import Iterable, Sequence

import numpy as np
from scipy.special import erf

from pewire.errors import ContractError, NumericFault, ShapeError

DTYPE = np.float32
LN_EPS = 1e-6

_grad_enabled = True


@contextlib.contextmanager
def no_grad():
    """Build no graph inside the block (evaluation passes)."""
    global _grad_enabled
    prev = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = prev


class Tensor:
    """A graph node: output array, op tag, parents and a backward rule."""

    __slots__ = ("data", "grad", "requires_grad", "op", "parents", "_backward", "name")

    def __init__(
        self,
        data,
        requires_grad: bool = False,
        name: str | None = None,
        op: str = "leaf",
        parents: tuple["Tensor", ...] = (),
        backward=None,
    ):
        arr = np.asarray(data)
        if arr.dtype not in (np.float32, np.float64):
            arr = arr.astype(DTYPE)
        self.data = arr
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self.op = op
        self.parents = parents
        self._backward = backward
        self.name = name

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

    def __repr__(self) -> str:
        label = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}, op={self.op}{label})"

    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return add(self, neg(as_tensor(other, self.dtype)))

    def __neg__(self):
        return neg(self)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(self, other)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, index):
        return getitem(self, index)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return transpose(self, axes)

    def sum(self, axis=None):
        return tensor_sum(self, axis)

    def mean(self, axis=None):
        return mean(self, axis)


class Param(Tensor):
    """A named leaf tensor owned by a model. ``trainable`` gates gradients."""

    __slots__ = ()

    def __init__(self, name: str, value, trainable: bool = True):
        super().__init__(value, requires_grad=trainable, name=name)

    @property
    def trainable(self) -> bool:
        return self.requires_grad

    @trainable.setter
    def trainable(self, flag: bool) -> None:
        self.requires_grad = flag

    def __repr__(self) -> str:
        return f"Param({self.name!r}, shape={self.shape}, trainable={self.trainable})"


def as_tensor(x, dtype=None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(np.asarray(x, dtype=dtype or DTYPE))


def _check_finite(out: np.ndarray, op: str) -> None:
    # a single reduction is cheaper than an elementwise mask; confirm on failure
    if not math.isfinite(float(out.sum())) and not np.isfinite(out).all():
        raise NumericFault(f"non-finite value produced by op '{op}'", op=op)


def _make(out: np.ndarray, op: str, parents: tuple[Tensor, ...], backward) -> Tensor:
    _check_finite(out, op)
    needs = _grad_enabled and any(p.requires_grad for p in parents)
    if not needs:
        return Tensor(out, op=op)
    return Tensor(out, requires_grad=True, op=op, parents=parents, backward=backward)


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if grad.shape == shape:
        return grad
    lead = grad.ndim - len(shape)
    if lead:
        grad = grad.sum(axis=tuple(range(lead)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad


def _check_broadcast(a: tuple[int, ...], b: tuple[int, ...], op: str) -> None:
    # only suffix broadcasting (bias onto rows, PE table onto a batch)
    small, big = (a, b) if len(a) <= len(b) else (b, a)
    tail = big[len(big) - len(small):]
    if any(s != t and s != 1 for s, t in zip(small, tail)):
        raise ShapeError(f"{op}: cannot broadcast shapes {a} and {b}")


# ---------------------------------------------------------------------------
# elementwise


def add(a, b) -> Tensor:
    a = as_tensor(a)
    b = as_tensor(b, a.dtype)
    _check_broadcast(a.shape, b.shape, "add")
    out = a.data + b.data

    def backward(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return _make(out, "add", (a, b), backward)


def neg(a: Tensor) -> Tensor:
    return _make(-a.data, "neg", (a,), lambda g: (-g,))


def mul(a, b) -> Tensor:
    a = as_tensor(a)
    if not isinstance(b, Tensor):
        c = float(b)
        return _make(a.data * a.data.dtype.type(c), "scale", (a,), lambda g: (g * c,))
    _check_broadcast(a.shape, b.shape, "mul")
    out = a.data * b.data

    def backward(g):
        return _unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)

    return _make(out, "mul", (a, b), backward)


def square(a: Tensor) -> Tensor:
    return _make(a.data * a.data, "square", (a,), lambda g: (2.0 * a.data * g,))


def _gelu_cdf(x: np.ndarray) -> np.ndarray:
    cdf = erf(x * x.dtype.type(1.0 / math.sqrt(2.0)))
    cdf += 1.0
    cdf *= 0.5
    return cdf


def _gelu_grad(x: np.ndarray, cdf: np.ndarray | None = None) -> np.ndarray:
    if cdf is None:
        cdf = _gelu_cdf(x)
    pdf = x * x
    pdf *= -0.5
    np.exp(pdf, out=pdf)
    pdf *= x.dtype.type(1.0 / math.sqrt(2.0 * math.pi))
    pdf *= x
    pdf += cdf
    return pdf


def gelu(x: Tensor) -> Tensor:
    """Exact GELU, ``x * Phi(x)`` with the normal CDF computed through erf."""
    xd = x.data
    cdf = _gelu_cdf(xd)
    out = xd * cdf

    def backward(g):
        return (g * _gelu_grad(xd, cdf),)

    return _make(out, "gelu", (x,), backward)


# ---------------------------------------------------------------------------
# linear algebra


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """``a[..., m, k] @ b[k, n]`` (weights) or batched ``a[..., m, k] @ b[..., k, n]``."""
    a = as_tensor(a)
    b = as_tensor(b, a.dtype)
    if a.ndim < 2 or b.ndim < 2:
        raise ShapeError(f"matmul needs rank >= 2 operands, got {a.shape} and {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul inner dimensions differ: {a.shape} @ {b.shape}")
    if b.ndim > 2 and a.shape[:-2] != b.shape[:-2]:
        raise ShapeError(f"matmul batch dimensions differ: {a.shape} @ {b.shape}")
    out = np.matmul(a.data, b.data)

    def backward(g):
        ga = np.matmul(g, np.swapaxes(b.data, -1, -2))
        if b.ndim == 2:
            k, n = b.shape
            gb = a.data.reshape(-1, k).T @ g.reshape(-1, n)
        else:
            gb = np.matmul(np.swapaxes(a.data, -1, -2), g)
        return ga, gb

    return _make(out, "matmul", (a, b), backward)


def linear(x: Tensor, weight: Tensor, bias: Tensor | None = None) -> Tensor:
    y = matmul(x, weight)
    return y if bias is None else add(y, bias)


# ---------------------------------------------------------------------------
# normalisation


def _ln_stats(x: np.ndarray, eps: float):
    mu = x.mean(axis=-1, keepdims=True)
    xc = x - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + x.dtype.type(eps))
    return xc * inv, inv


def layer_norm(x: Tensor, gamma: Tensor, beta: Tensor, eps: float = LN_EPS) -> Tensor:
    """Row-wise layer norm over the last axis with population variance."""
    d = x.shape[-1]
    if d < 2:
        raise ShapeError(f"layer_norm needs at least 2 features per row, got {d}")
    if eps <= 0:
        raise ContractError("layer_norm eps must be positive")
    if gamma.shape != (d,) or beta.shape != (d,):
        raise ShapeError(f"layer_norm affine shapes {gamma.shape}/{beta.shape} do not match d={d}")
    xhat, inv = _ln_stats(x.data, eps)
    out = xhat * gamma.data + beta.data

    def backward(g):
        lead = tuple(range(g.ndim - 1))
        dgamma = (g * xhat).sum(axis=lead)
        dbeta = g.sum(axis=lead)
        dxhat = g * gamma.data
        dx = inv * (
            dxhat
            - dxhat.mean(axis=-1, keepdims=True)
            - xhat * (dxhat * xhat).mean(axis=-1, keepdims=True)
        )
        return dx, dgamma, dbeta

    return _make(out, "layer_norm", (x, gamma, beta), backward)


def normalize_rows(x: np.ndarray, eps: float = LN_EPS) -> np.ndarray:
    """Pre-affine layer-norm output for a plain array."""
    if x.shape[-1] < 2:
        raise ShapeError("normalize_rows needs at least 2 features per row")
    return _ln_stats(x, eps)[0]


def softmax_array(x: np.ndarray) -> np.ndarray:
    # float64 internally: keeps shifted inputs within 1e-7 of each other at f32
    z = x.astype(np.float64)
    z -= z.max(axis=-1, keepdims=True)
    np.exp(z, out=z)
    z /= z.sum(axis=-1, keepdims=True)
    return z.astype(x.dtype, copy=False)


def softmax(x: Tensor) -> Tensor:
    if x.shape[-1] < 1:
        raise ShapeError("softmax over an empty axis")
    s = softmax_array(x.data)

    def backward(g):
        return (s * (g - (g * s).sum(axis=-1, keepdims=True)),)

    return _make(s, "softmax", (x,), backward)


def cross_entropy(logits: Tensor, labels) -> Tensor:
    """Mean negative log-likelihood of integer ``labels`` under ``logits[B, K]``."""
    labels = np.asarray(labels, dtype=np.int64)
    if logits.ndim != 2 or labels.shape != (logits.shape[0],):
        raise ShapeError(f"cross_entropy expects logits[B,K] and labels[B], got {logits.shape}, {labels.shape}")
    z = logits.data
    m = z.max(axis=-1, keepdims=True)
    lse = m[:, 0] + np.log(np.exp(z - m).sum(axis=-1))
    rows = np.arange(z.shape[0])
    out = np.asarray((lse - z[rows, labels]).mean(), dtype=z.dtype)

    def backward(g):
        p = softmax_array(z)
        p[rows, labels] -= 1.0
        return (p * (g / z.shape[0]),)

    return _make(out, "cross_entropy", (logits,), backward)


# ---------------------------------------------------------------------------
# reductions and shape manipulation


def tensor_sum(x: Tensor, axis=None) -> Tensor:
    out = np.asarray(x.data.sum(axis=axis), dtype=x.dtype)

    def backward(g):
        if axis is not None:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, x.shape).copy(),)

    return _make(out, "sum", (x,), backward)


def mean(x: Tensor, axis=None) -> Tensor:
    n = x.data.size if axis is None else x.shape[axis]
    out = np.asarray(x.data.mean(axis=axis), dtype=x.dtype)

    def backward(g):
        if axis is not None:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g / n, x.shape).copy(),)

    return _make(out, "mean", (x,), backward)


def reshape(x: Tensor, shape: Sequence[int]) -> Tensor:
    out = x.data.reshape(shape)
    return _make(out, "reshape", (x,), lambda g: (g.reshape(x.shape),))


def transpose(x: Tensor, axes: Sequence[int]) -> Tensor:
    axes = tuple(axes)
    inverse = tuple(np.argsort(axes))
    out = np.transpose(x.data, axes)
    return _make(out, "transpose", (x,), lambda g: (np.transpose(g, inverse),))


def getitem(x: Tensor, index) -> Tensor:
    """Basic (slice/int) indexing; advanced indexing is not supported."""
    if not isinstance(index, tuple):
        index = (index,)
    for item in index:
        if not isinstance(item, (int, slice, type(Ellipsis), type(None))):
            raise ContractError("only basic slicing is supported")
    out = x.data[index]

    def backward(g):
        full = np.zeros_like(x.data)
        full[index] += g
        return (full,)

    return _make(np.ascontiguousarray(out), "getitem", (x,), backward)


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = tuple(tensors)
    out = np.concatenate([t.data for t in tensors], axis=axis)
    splits = np.cumsum([t.shape[axis] for t in tensors])[:-1]

    def backward(g):
        return tuple(np.split(g, splits, axis=axis))

    return _make(out, "concat", tensors, backward)


def broadcast_rows(x: Tensor, batch: int) -> Tensor:
    """Repeat ``x`` along a new leading batch axis."""
    out = np.broadcast_to(x.data, (batch,) + x.shape).copy()
    return _make(out, "broadcast", (x,), lambda g: (g.sum(axis=0),))


# ---------------------------------------------------------------------------
# reverse sweep


def _topo_order(root: Tensor) -> list[Tensor]:
    order: list[Tensor] = []
    seen: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(root, False)]
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


def backward(root: Tensor) -> dict[str, np.ndarray]:
    """Backpropagate from a scalar ``root``.

    Sets ``.grad`` on every leaf that requires a gradient and returns the
    gradients of named leaves (model params) keyed by name.
    """
    if root.data.size != 1:
        raise ContractError(f"backward root must be scalar, got shape {root.shape}")
    if not root.requires_grad:
        return {}
    order = _topo_order(root)
    grads: dict[int, np.ndarray] = {id(root): np.ones_like(root.data)}
    named: dict[str, np.ndarray] = {}
    for node in reversed(order):
        g = grads.pop(id(node), None)
        if g is None:
            g = np.zeros_like(node.data)
        if node._backward is None:
            node.grad = g
            if node.name is not None:
                named[node.name] = g
            continue
        for parent, pg in zip(node.parents, node._backward(g)):
            if not parent.requires_grad:
                continue
            pg = np.asarray(pg, dtype=parent.dtype)
            if pg.shape != parent.shape:
                raise ShapeError(f"backward of '{node.op}' produced {pg.shape} for input {parent.shape}")
            key = id(parent)
            if key in grads:
                grads[key] = grads[key] + pg
            else:
                grads[key] = pg
    return named


def leaves(root: Tensor) -> Iterable[Tensor]:
    for node in _topo_order(root):
        if node._backward is None:
            yield node
