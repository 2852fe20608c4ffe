"""Reverse-mode automatic differentiation over numpy arrays.

A :class:`Tensor` wraps an ``ndarray`` and, when gradients are being
recorded, remembers the operation that produced it.  Calling
:meth:`Tensor.backward` on a scalar walks that record in reverse
topological order and accumulates ``.grad`` on every leaf that has
``requires_grad=True``.

Only the handful of operations the operator network needs are provided,
several of them fused (``linear``, ``layer_norm``, ``softmax``) so that the
backward pass stays close to the cost of the forward pass.
"""
from __future__ import annotations

import contextlib
import math
from typing import Callable, Sequence

import numpy as np
import scipy.sparse as sp

__all__ = [
    "NumericError",
    "Tensor",
    "as_tensor",
    "no_grad",
    "is_grad_enabled",
    "concat",
    "stack",
    "gather_rows",
    "linear",
    "matmul",
    "softmax",
    "softmax_weighted_sum",
    "gelu",
    "layer_norm",
    "l2_norm",
    "exp",
]


class NumericError(ArithmeticError):
    """Raised when an operation produces or receives NaN/Inf values."""


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


def is_grad_enabled() -> bool:
    return _GRAD_ENABLED


def _check_finite(arr: np.ndarray, op: str) -> None:
    if not np.isfinite(arr).all():
        raise NumericError(f"non-finite values in {op}")


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum ``grad`` down to ``shape`` (inverse of numpy broadcasting)."""
    if grad.shape == shape:
        return grad
    ndim_extra = grad.ndim - len(shape)
    if ndim_extra > 0:
        grad = grad.sum(axis=tuple(range(ndim_extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


class Tensor:
    """An ndarray plus the bookkeeping needed for reverse-mode gradients."""

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "name")
    __array_priority__ = 100

    def __init__(
        self,
        data,
        requires_grad: bool = False,
        name: str | None = None,
        _parents: tuple["Tensor", ...] = (),
        _backward: Callable[[np.ndarray], Sequence[np.ndarray | None]] | None = None,
    ):
        if isinstance(data, Tensor):
            data = data.data
        arr = np.asarray(data)
        if arr.dtype.kind != "f":
            arr = arr.astype(np.float64)
        self.data: np.ndarray = arr
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self.name = name
        self._parents = _parents
        self._backward = _backward

    # -- basic properties -------------------------------------------------

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

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def __len__(self) -> int:
        return len(self.data)

    def __repr__(self) -> str:
        tag = f", name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{tag})"

    # -- graph construction -----------------------------------------------

    @staticmethod
    def _make(data: np.ndarray, parents: tuple["Tensor", ...], backward) -> "Tensor":
        if _GRAD_ENABLED and any(p.requires_grad for p in parents):
            return Tensor(data, requires_grad=True, _parents=parents, _backward=backward)
        return Tensor(data)

    def backward(self, grad: np.ndarray | None = None) -> None:
        """Accumulate d(self)/d(leaf) into ``leaf.grad`` for every reachable leaf."""
        if grad is None:
            if self.data.size != 1:
                raise ValueError(f"backward() needs a scalar, got shape {self.shape}")
            grad = np.ones_like(self.data)
        if not self.requires_grad:
            return

        order: list[Tensor] = []
        seen: set[int] = set()
        stack: list[tuple[Tensor, bool]] = [(self, False)]
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

        grads: dict[int, np.ndarray] = {id(self): np.asarray(grad, dtype=self.dtype)}
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

    # -- arithmetic -------------------------------------------------------

    def __add__(self, other) -> "Tensor":
        other = as_tensor(other, self.dtype)
        a_shape, b_shape = self.shape, other.shape
        return Tensor._make(
            self.data + other.data,
            (self, other),
            lambda g: (_unbroadcast(g, a_shape), _unbroadcast(g, b_shape)),
        )

    __radd__ = __add__

    def __sub__(self, other) -> "Tensor":
        other = as_tensor(other, self.dtype)
        a_shape, b_shape = self.shape, other.shape
        return Tensor._make(
            self.data - other.data,
            (self, other),
            lambda g: (_unbroadcast(g, a_shape), _unbroadcast(-g, b_shape)),
        )

    def __rsub__(self, other) -> "Tensor":
        return as_tensor(other, self.dtype) - self

    def __neg__(self) -> "Tensor":
        return Tensor._make(-self.data, (self,), lambda g: (-g,))

    def __mul__(self, other) -> "Tensor":
        other = as_tensor(other, self.dtype)
        a, b = self, other

        def backward(g):
            ga = _unbroadcast(g * b.data, a.shape) if a.requires_grad else None
            gb = _unbroadcast(g * a.data, b.shape) if b.requires_grad else None
            return ga, gb

        return Tensor._make(a.data * b.data, (a, b), backward)

    __rmul__ = __mul__

    def __truediv__(self, other) -> "Tensor":
        other = as_tensor(other, self.dtype)
        a, b = self, other
        with np.errstate(divide="ignore", invalid="ignore"):
            out = a.data / b.data
        _check_finite(out, "division")

        def backward(g):
            ga = _unbroadcast(g / b.data, a.shape) if a.requires_grad else None
            gb = _unbroadcast(-g * out / b.data, b.shape) if b.requires_grad else None
            return ga, gb

        return Tensor._make(out, (a, b), backward)

    def __rtruediv__(self, other) -> "Tensor":
        return as_tensor(other, self.dtype) / self

    def __matmul__(self, other) -> "Tensor":
        return matmul(self, other)

    def __getitem__(self, index) -> "Tensor":
        shape = self.shape
        out = self.data[index]
        basic = _is_basic_index(index)

        def backward(g):
            full = np.zeros(shape, dtype=g.dtype)
            if basic:
                full[index] += g
            else:
                np.add.at(full, index, g)
            return (full,)

        return Tensor._make(out, (self,), backward)

    # -- reductions and shape ops ----------------------------------------

    def sum(self, axis=None, keepdims: bool = False) -> "Tensor":
        shape = self.shape

        def backward(g):
            if axis is not None and not keepdims:
                g = np.expand_dims(g, axis)
            return (np.broadcast_to(g, shape).copy(),)

        return Tensor._make(
            np.asarray(self.data.sum(axis=axis, keepdims=keepdims)), (self,), backward
        )

    def mean(self, axis=None, keepdims: bool = False) -> "Tensor":
        n = self.size if axis is None else np.prod([self.shape[a] for a in np.atleast_1d(axis)])
        return self.sum(axis=axis, keepdims=keepdims) * (1.0 / float(n))

    def reshape(self, *shape) -> "Tensor":
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        old = self.shape
        return Tensor._make(self.data.reshape(shape), (self,), lambda g: (g.reshape(old),))

    def transpose(self, *axes) -> "Tensor":
        if not axes:
            axes = tuple(reversed(range(self.ndim)))
        elif len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        inverse = tuple(np.argsort(axes))
        return Tensor._make(
            self.data.transpose(axes), (self,), lambda g: (g.transpose(inverse),)
        )

    @property
    def T(self) -> "Tensor":
        return self.transpose()


def _is_basic_index(index) -> bool:
    items = index if isinstance(index, tuple) else (index,)
    return all(isinstance(i, (int, slice, type(None), type(Ellipsis))) for i in items)


def as_tensor(x, dtype=None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    arr = np.asarray(x, dtype=dtype) if dtype is not None else np.asarray(x)
    return Tensor(arr)


# -- free functions ---------------------------------------------------------


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """``a @ b`` with numpy broadcasting over leading dimensions."""
    a, b = as_tensor(a), as_tensor(b, a.dtype)
    if a.ndim < 2 or b.ndim < 2:
        raise ValueError("matmul operands need at least 2 dimensions")

    def backward(g):
        ga = gb = None
        if a.requires_grad:
            ga = _unbroadcast(g @ np.swapaxes(b.data, -1, -2), a.shape)
        if b.requires_grad:
            gb = _unbroadcast(np.swapaxes(a.data, -1, -2) @ g, b.shape)
        return ga, gb

    return Tensor._make(a.data @ b.data, (a, b), backward)


def linear(x: Tensor, w: Tensor, b: Tensor | None = None) -> Tensor:
    """Affine map over the last axis: ``x @ w + b`` with ``w`` of shape (in, out)."""
    x = as_tensor(x, w.dtype)
    if x.shape[-1] != w.shape[0]:
        raise ValueError(f"linear: input width {x.shape[-1]} != weight rows {w.shape[0]}")
    lead = x.shape[:-1]
    x2 = x.data.reshape(-1, w.shape[0])
    out = x2 @ w.data
    if b is not None:
        out += b.data
    out = out.reshape(*lead, w.shape[1])

    def backward(g):
        g2 = g.reshape(-1, w.shape[1])
        gx = (g2 @ w.data.T).reshape(x.shape) if x.requires_grad else None
        gw = x2.T @ g2 if w.requires_grad else None
        if b is None:
            return gx, gw
        gb = g2.sum(axis=0) if b.requires_grad else None
        return gx, gw, gb

    parents = (x, w) if b is None else (x, w, b)
    return Tensor._make(out, parents, backward)


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    if len(tensors) == 1:
        return tensors[0]
    sizes = [t.shape[axis] for t in tensors]
    cuts = np.cumsum(sizes)[:-1]

    def backward(g):
        return tuple(np.split(g, cuts, axis=axis))

    return Tensor._make(
        np.concatenate([t.data for t in tensors], axis=axis), tuple(tensors), backward
    )


def stack(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]

    def backward(g):
        return tuple(np.take(g, i, axis=axis) for i in range(len(tensors)))

    return Tensor._make(
        np.stack([t.data for t in tensors], axis=axis), tuple(tensors), backward
    )


def gather_rows(x: Tensor, index: np.ndarray, scatter: sp.spmatrix | None = None) -> Tensor:
    """``x[index]`` for a 2-D ``x`` and an integer index array of any shape.

    ``scatter`` may be a precomputed sparse (rows(x), index.size) 0/1 matrix
    that performs the transpose of the gather; passing it avoids rebuilding
    it on every backward pass.
    """
    index = np.asarray(index)
    n, width = x.shape
    flat = index.reshape(-1)

    def backward(g):
        mat = scatter if scatter is not None else scatter_matrix(flat, n)
        return (np.asarray(mat @ g.reshape(-1, width), dtype=g.dtype),)

    return Tensor._make(x.data[flat].reshape(*index.shape, width), (x,), backward)


def scatter_matrix(flat_index: np.ndarray, n_rows: int, dtype=np.float64) -> sp.csr_matrix:
    """Sparse matrix ``S`` with ``S @ G`` summing rows of ``G`` into ``flat_index``."""
    flat_index = np.asarray(flat_index).reshape(-1)
    cols = np.arange(flat_index.size)
    data = np.ones(flat_index.size, dtype=dtype)
    return sp.csr_matrix((data, (flat_index, cols)), shape=(n_rows, flat_index.size))


def softmax(x: Tensor, axis: int = -1) -> Tensor:
    """Numerically stable softmax along ``axis``."""
    x = as_tensor(x)
    if not -x.ndim <= axis < x.ndim:
        raise ValueError(f"softmax axis {axis} invalid for shape {x.shape}")
    _check_finite(x.data, "softmax input")
    shifted = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    # float64 accumulation keeps float32 slices summing to 1 within ~1e-7
    denom = e.sum(axis=axis, keepdims=True, dtype=np.float64)
    out = e * (1.0 / denom).astype(e.dtype)

    def backward(g):
        return (out * (g - (g * out).sum(axis=axis, keepdims=True)),)

    return Tensor._make(out, (x,), backward)


def softmax_weighted_sum(logits: Tensor, values: Tensor, axis: int = 1) -> Tensor:
    """``sum(softmax(logits, axis) * values, axis)``, fused.

    Saves the intermediate weight tensor from being materialised as a
    separate graph node; this is the neighbour aggregation of vector
    attention.
    """
    logits, values = as_tensor(logits), as_tensor(values)
    if logits.shape != values.shape:
        raise ValueError(f"shape mismatch {logits.shape} vs {values.shape}")
    _check_finite(logits.data, "softmax input")
    e = np.exp(logits.data - logits.data.max(axis=axis, keepdims=True))
    w = e / e.sum(axis=axis, keepdims=True)
    out = (w * values.data).sum(axis=axis)

    def backward(g):
        g = np.expand_dims(g, axis)
        gv = w * g if values.requires_grad else None
        gl = None
        if logits.requires_grad:
            dw = values.data * g
            gl = w * (dw - (w * dw).sum(axis=axis, keepdims=True))
        return gl, gv

    return Tensor._make(out, (logits, values), backward)


_GELU_C = math.sqrt(2.0 / math.pi)


def gelu(x: Tensor) -> Tensor:
    """GELU, tanh form."""
    x = as_tensor(x)
    d = x.data
    c = d.dtype.type(_GELU_C)
    a = d.dtype.type(0.044715)
    sq = d * d
    t = sq * a
    t += 1.0
    t *= d
    t *= c
    np.tanh(t, out=t)
    out = t + 1.0
    out *= d
    out *= 0.5

    def backward(g):
        # d/dx = 0.5 (1 + t) + 0.5 x (1 - t^2) c (1 + 3 a x^2)
        inner = sq * (3.0 * a)
        inner += 1.0
        inner *= c
        one_m = t * t
        np.subtract(1.0, one_m, out=one_m)
        inner *= one_m
        inner *= d
        inner += t
        inner += 1.0
        inner *= 0.5
        inner *= g
        return (inner,)

    return Tensor._make(out, (x,), backward)


def layer_norm(x: Tensor, gamma: Tensor, beta: Tensor, eps: float = 1e-5) -> Tensor:
    """Normalize over the last axis, then scale and shift."""
    x = as_tensor(x)
    d = x.data
    mu = d.mean(axis=-1, keepdims=True)
    xc = d - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    out = xhat * gamma.data + beta.data
    _check_finite(out, "layer_norm")
    width = d.shape[-1]

    def backward(g):
        gx = gg = gb = None
        if gamma.requires_grad:
            gg = (g * xhat).reshape(-1, width).sum(axis=0)
        if beta.requires_grad:
            gb = g.reshape(-1, width).sum(axis=0)
        if x.requires_grad:
            gh = g * gamma.data
            gx = inv * (
                gh
                - gh.mean(axis=-1, keepdims=True)
                - xhat * (gh * xhat).mean(axis=-1, keepdims=True)
            )
        return gx, gg, gb

    return Tensor._make(out, (x, gamma, beta), backward)


def l2_norm(x: Tensor) -> Tensor:
    """Euclidean norm over all entries (a scalar)."""
    x = as_tensor(x)
    with np.errstate(over="ignore", invalid="ignore"):
        val = np.sqrt(np.sum(x.data * x.data))
    _check_finite(val, "l2_norm")

    def backward(g):
        if val == 0:
            return (np.zeros_like(x.data),)
        return ((g / val) * x.data,)

    return Tensor._make(np.asarray(val, dtype=x.dtype), (x,), backward)


def exp(x: Tensor) -> Tensor:
    x = as_tensor(x)
    out = np.exp(x.data)
    _check_finite(out, "exp")
    return Tensor._make(out, (x,), lambda g: (g * out,))
