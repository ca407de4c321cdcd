"""Minimal reverse-mode automatic differentiation over numpy arrays.

Every trainable quantity in the model is a :class:`Tensor`. Operations
build a computation graph; ``Tensor.backward()`` walks it in reverse
topological order and accumulates gradients into ``.grad`` (numpy arrays).

Design notes:
  - broadcasting follows numpy semantics; gradients of broadcast operands
    are summed back to the operand shape
  - the softmax and layer-norm primitives dispatch their inner loops to
    mmcare.kernels (compiled extension when available, numpy otherwise)
  - ``no_grad()`` disables graph construction for inference paths
"""

from __future__ import annotations

import contextlib
from typing import Callable, Iterable, Optional, Sequence

import numpy as np

from . import kernels

_grad_enabled = True


@contextlib.contextmanager
def no_grad():
    """Disable graph construction inside the block (inference / eval)."""
    global _grad_enabled
    prev = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = prev


def is_grad_enabled() -> bool:
    return _grad_enabled


def _unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    """Sum `grad` down to `shape` (inverse of numpy broadcasting)."""
    if grad.shape == shape:
        return grad
    # collapse extra leading axes
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    # sum over axes that were broadcast from size 1
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad


class Tensor:
    """A numpy array plus gradient bookkeeping."""

    __slots__ = ("data", "grad", "requires_grad", "_backward", "_parents", "name")

    # Make ndarray <op> Tensor defer to the reflected Tensor ops instead of
    # broadcasting into an object array.
    __array_ufunc__ = None

    def __init__(self, data, requires_grad: bool = False, name: Optional[str] = None):
        self.data = np.asarray(data)
        self.grad: Optional[np.ndarray] = None
        self.requires_grad = requires_grad
        self._backward: Optional[Callable[[np.ndarray], None]] = None
        self._parents: tuple = ()
        self.name = name

    # -- introspection -------------------------------------------------
    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def dtype(self):
        return self.data.dtype

    def __repr__(self) -> str:
        tag = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.data.shape}, dtype={self.data.dtype}{tag})"

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data)

    # -- graph construction --------------------------------------------
    @staticmethod
    def _make(data: np.ndarray, parents: Sequence["Tensor"],
              backward: Callable[[np.ndarray], None]) -> "Tensor":
        req = _grad_enabled and any(p.requires_grad for p in parents)
        out = Tensor(data, requires_grad=req)
        if req:
            out._parents = tuple(parents)
            out._backward = backward
        return out

    def _accumulate(self, g: np.ndarray) -> None:
        if self.grad is None:
            self.grad = g.astype(self.data.dtype, copy=True)
        else:
            self.grad += g

    def backward(self, grad: Optional[np.ndarray] = None) -> None:
        """Accumulate gradients of `self` into every reachable leaf."""
        if not self.requires_grad:
            raise RuntimeError("backward() on a tensor that does not require grad")
        if grad is None:
            if self.data.size != 1:
                raise RuntimeError("backward() without gradient requires a scalar")
            grad = np.ones_like(self.data)

        # iterative topological sort
        order: list[Tensor] = []
        seen: set[int] = set()
        stack: list[tuple[Tensor, bool]] = [(self, False)]
        while stack:
            node, processed = stack.pop()
            if processed:
                order.append(node)
                continue
            if id(node) in seen:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for p in node._parents:
                if p.requires_grad and id(p) not in seen:
                    stack.append((p, False))

        grads: dict[int, np.ndarray] = {id(self): np.asarray(grad, dtype=self.data.dtype)}
        for node in reversed(order):
            g = grads.pop(id(node), None)
            if g is None:
                continue
            if node._backward is None:
                node._accumulate(g)
                continue
            node._backward_dispatch(g, grads)

    def _backward_dispatch(self, g: np.ndarray, grads: dict) -> None:
        # _backward returns per-parent gradients (None for non-grad parents)
        parent_grads = self._backward(g)
        for p, pg in zip(self._parents, parent_grads):
            if pg is None or not p.requires_grad:
                continue
            key = id(p)
            if key in grads:
                grads[key] = grads[key] + pg
            else:
                grads[key] = pg
        if self.name is not None:
            # named intermediates double as leaves for inspection
            self._accumulate(g)

    # -- arithmetic ------------------------------------------------------
    def __add__(self, other):
        other = as_tensor(other)
        a, b = self, other
        out = Tensor._make(a.data + b.data, (a, b), lambda g: (
            _unbroadcast(g, a.data.shape), _unbroadcast(g, b.data.shape)))
        return out

    __radd__ = __add__

    def __sub__(self, other):
        other = as_tensor(other)
        a, b = self, other
        return Tensor._make(a.data - b.data, (a, b), lambda g: (
            _unbroadcast(g, a.data.shape), _unbroadcast(-g, b.data.shape)))

    def __rsub__(self, other):
        return as_tensor(other).__sub__(self)

    def __neg__(self):
        a = self
        return Tensor._make(-a.data, (a,), lambda g: (-g,))

    def __mul__(self, other):
        other = as_tensor(other)
        a, b = self, other
        return Tensor._make(a.data * b.data, (a, b), lambda g: (
            _unbroadcast(g * b.data, a.data.shape),
            _unbroadcast(g * a.data, b.data.shape)))

    __rmul__ = __mul__

    def __truediv__(self, other):
        other = as_tensor(other)
        a, b = self, other
        return Tensor._make(a.data / b.data, (a, b), lambda g: (
            _unbroadcast(g / b.data, a.data.shape),
            _unbroadcast(-g * a.data / (b.data ** 2), b.data.shape)))

    def __rtruediv__(self, other):
        return as_tensor(other).__truediv__(self)

    def __pow__(self, p):
        if not isinstance(p, (int, float)):
            raise TypeError("only scalar exponents are supported")
        a = self
        return Tensor._make(a.data ** p, (a,),
                            lambda g: (g * p * a.data ** (p - 1),))

    def __matmul__(self, other):
        other = as_tensor(other)
        a, b = self, other

        def backward(g):
            ga = gb = None
            if a.requires_grad:
                if b.data.ndim == 1:
                    ga = _unbroadcast(np.multiply.outer(g, b.data), a.data.shape)
                elif b.data.ndim == 2 and a.data.ndim > 2:
                    m = b.data.shape[1]
                    ga = (g.reshape(-1, m) @ b.data.T).reshape(a.data.shape)
                else:
                    ga = _unbroadcast(np.matmul(g, np.swapaxes(b.data, -1, -2)),
                                      a.data.shape)
            if b.requires_grad:
                if a.data.ndim == 1:
                    gb = _unbroadcast(np.multiply.outer(a.data, g), b.data.shape)
                elif b.data.ndim == 1:
                    gb = _unbroadcast(
                        (np.swapaxes(a.data, -1, -2) @ g[..., None])[..., 0],
                        b.data.shape)
                elif b.data.ndim == 2 and a.data.ndim > 2:
                    # batched x times shared weight: one flat product beats
                    # per-slice products followed by a broadcast reduction
                    k, m = b.data.shape
                    flat_a = np.ascontiguousarray(a.data).reshape(-1, k)
                    gb = flat_a.T @ g.reshape(-1, m)
                else:
                    gb = _unbroadcast(np.matmul(np.swapaxes(a.data, -1, -2), g),
                                      b.data.shape)
            return ga, gb

        if a.data.ndim > 2 and b.data.ndim == 2:
            # one flat product instead of a loop of tiny per-slice products
            k = a.data.shape[a.data.ndim - 1]
            out = (a.data.reshape(-1, k) @ b.data).reshape(
                a.data.shape[:-1] + (b.data.shape[1],))
        else:
            out = np.matmul(a.data, b.data)
        return Tensor._make(out, (a, b), backward)

    # -- shape ops -------------------------------------------------------
    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        a = self
        return Tensor._make(a.data.reshape(shape), (a,),
                            lambda g: (g.reshape(a.data.shape),))

    def swapaxes(self, ax1: int, ax2: int):
        a = self
        return Tensor._make(np.swapaxes(a.data, ax1, ax2), (a,),
                            lambda g: (np.swapaxes(g, ax1, ax2),))

    def transpose(self, *axes):
        if not axes:
            axes = tuple(reversed(range(self.data.ndim)))
        inv = np.argsort(axes)
        a = self
        return Tensor._make(a.data.transpose(axes), (a,),
                            lambda g: (g.transpose(inv),))

    @property
    def T(self):
        return self.transpose()

    def __getitem__(self, idx):
        a = self

        def backward(g):
            ga = np.zeros_like(a.data)
            np.add.at(ga, idx, g)
            return (ga,)

        return Tensor._make(a.data[idx], (a,), backward)

    # -- reductions --------------------------------------------------------
    def sum(self, axis=None, keepdims: bool = False):
        a = self

        def backward(g):
            if axis is None:
                return (np.broadcast_to(g, a.data.shape).copy(),)
            gg = g
            if not keepdims:
                gg = np.expand_dims(gg, axis)
            return (np.broadcast_to(gg, a.data.shape).copy(),)

        return Tensor._make(a.data.sum(axis=axis, keepdims=keepdims), (a,), backward)

    def mean(self, axis=None, keepdims: bool = False):
        if axis is None:
            n = self.data.size
        elif isinstance(axis, tuple):
            n = int(np.prod([self.data.shape[i] for i in axis]))
        else:
            n = self.data.shape[axis]
        return self.sum(axis=axis, keepdims=keepdims) * (1.0 / n)

    # -- elementwise nonlinearities ----------------------------------------
    def tanh(self):
        a = self
        y = np.tanh(a.data)
        return Tensor._make(y, (a,), lambda g: (g * (1.0 - y * y),))

    def exp(self):
        a = self
        y = np.exp(a.data)
        return Tensor._make(y, (a,), lambda g: (g * y,))

    def log(self):
        a = self
        return Tensor._make(np.log(a.data), (a,), lambda g: (g / a.data,))

    def sigmoid(self):
        a = self
        y = 1.0 / (1.0 + np.exp(-a.data))
        return Tensor._make(y, (a,), lambda g: (g * y * (1.0 - y),))

    def relu(self):
        a = self
        mask = a.data > 0
        return Tensor._make(a.data * mask, (a,), lambda g: (g * mask,))

    def clip(self, lo: float, hi: float):
        a = self
        mask = (a.data > lo) & (a.data < hi)
        return Tensor._make(np.clip(a.data, lo, hi), (a,), lambda g: (g * mask,))


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(np.asarray(x))


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    sizes = [t.data.shape[axis] for t in tensors]
    splits = np.cumsum(sizes)[:-1]

    def backward(g):
        return tuple(np.split(g, splits, axis=axis))

    return Tensor._make(np.concatenate([t.data for t in tensors], axis=axis),
                        tensors, backward)


def stack(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]

    def backward(g):
        parts = np.split(g, len(tensors), axis=axis)
        return tuple(np.squeeze(p, axis=axis) for p in parts)

    return Tensor._make(np.stack([t.data for t in tensors], axis=axis),
                        tensors, backward)


def scatter_rows(values: Tensor, idx: np.ndarray, n_rows: int) -> Tensor:
    """Place `values` (k × ...) into a zero tensor of n_rows rows at `idx`.

    Inverse of row gathering; used to recombine per-expert outputs.
    Indices must be unique.
    """
    values = as_tensor(values)
    idx = np.asarray(idx)
    out_shape = (n_rows,) + values.data.shape[1:]

    def forward():
        out = np.zeros(out_shape, dtype=values.data.dtype)
        out[idx] = values.data
        return out

    return Tensor._make(forward(), (values,), lambda g: (g[idx],))


def masked_softmax(x: Tensor, mask: Optional[np.ndarray] = None) -> Tensor:
    """Numerically stable softmax over the last axis, after adding `mask`.

    `mask` is a plain array (no gradient) broadcastable to x's shape;
    * entries of a large negative constant suppress positions.
    """
    x = as_tensor(x)
    logits = x.data if mask is None else x.data + mask
    y = kernels.softmax_fwd(logits)

    def backward(g):
        return (kernels.softmax_bwd(y, g),)

    return Tensor._make(y, (x,), backward)


def layer_norm(x: Tensor, gain: Tensor, bias: Tensor, eps: float = 1e-5) -> Tensor:
    """Layer normalization over the last axis with learned gain/bias."""
    x, gain, bias = as_tensor(x), as_tensor(gain), as_tensor(bias)
    y, xhat, inv_std = kernels.layernorm_fwd(x.data, gain.data, bias.data, eps)

    def backward(g):
        gx, ggain, gbias = kernels.layernorm_bwd(g, xhat, inv_std, gain.data)
        return (gx,
                _unbroadcast(ggain, gain.data.shape),
                _unbroadcast(gbias, bias.data.shape))

    return Tensor._make(y, (x, gain, bias), backward)


def fused_mlp(x: Tensor, w1: Tensor, b1: Tensor, w2: Tensor, b2: Tensor) -> Tensor:
    """relu(x @ w1 + b1) @ w2 + b2 as one graph node.

    Equivalent to composing the elementary ops but avoids six intermediate
    nodes and their temporaries, which dominates cost at small widths.
    """
    x, w1, b1, w2, b2 = (as_tensor(t) for t in (x, w1, b1, w2, b2))
    k = x.data.shape[x.data.ndim - 1]
    xf = np.ascontiguousarray(x.data).reshape(-1, k)
    hidden = xf @ w1.data
    hidden += b1.data
    np.maximum(hidden, 0, out=hidden)
    out = hidden @ w2.data
    out += b2.data
    out_shape = x.data.shape[:-1] + (w2.data.shape[1],)

    def backward(g):
        gf = g.reshape(-1, g.shape[g.ndim - 1])
        gh = gf @ w2.data.T
        gh *= hidden > 0
        return (None if not x.requires_grad else (gh @ w1.data.T).reshape(x.data.shape),
                xf.T @ gh, gh.sum(axis=0), hidden.T @ gf, gf.sum(axis=0))

    return Tensor._make(out.reshape(out_shape), (x, w1, b1, w2, b2), backward)


def parameter(rng: np.random.Generator, shape: tuple, scale: Optional[float] = None,
              dtype=np.float32, name: Optional[str] = None) -> Tensor:
    """Gaussian-initialized trainable tensor; default scale 1/sqrt(fan_in)."""
    if scale is None:
        fan_in = shape[0] if len(shape) > 1 else max(shape[0], 1)
        scale = 1.0 / np.sqrt(fan_in)
    data = (rng.standard_normal(shape) * scale).astype(dtype)
    return Tensor(data, requires_grad=True, name=name)


def zeros_parameter(shape: tuple, dtype=np.float32, name: Optional[str] = None) -> Tensor:
    return Tensor(np.zeros(shape, dtype=dtype), requires_grad=True, name=name)
