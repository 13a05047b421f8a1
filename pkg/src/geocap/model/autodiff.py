"""Minimal reverse-mode automatic differentiation over numpy arrays.

A :class:`Tensor` wraps an ndarray and remembers how it was produced; calling
``backward()`` on a scalar result walks the graph in reverse topological
order and accumulates gradients into every tensor with ``requires_grad``.
Only the operations the caption model needs are provided. Everything works
for float32 (training) and float64 (wide-precision gradient checking).
"""

from __future__ import annotations

from contextlib import contextmanager

import numpy as np

from .. import _accel

_GRAD_ENABLED = True


@contextmanager
def no_grad():
    """Disable graph construction inside the block (inference mode)."""
    global _GRAD_ENABLED
    prev = _GRAD_ENABLED
    _GRAD_ENABLED = False
    try:
        yield
    finally:
        _GRAD_ENABLED = prev


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward")

    def __init__(self, data, requires_grad: bool = False):
        self.data = np.asarray(data)
        self.grad = None
        self.requires_grad = requires_grad
        self._parents = ()
        self._backward = None

    @property
    def shape(self):
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    def backward(self):
        if self.data.size != 1:
            raise ValueError("backward() requires a scalar tensor")
        order: list[Tensor] = []
        visited: set[int] = set()
        stack: list[tuple[Tensor, bool]] = [(self, False)]
        while stack:
            node, processed = stack.pop()
            if processed:
                order.append(node)
                continue
            if id(node) in visited or not node.requires_grad:
                continue
            visited.add(id(node))
            stack.append((node, True))
            for parent in node._parents:
                if parent.requires_grad and id(parent) not in visited:
                    stack.append((parent, False))
        self.grad = np.ones_like(self.data)
        for node in reversed(order):
            if node._backward is not None:
                node._backward()

    def item(self) -> float:
        return float(self.data)

    # convenience arithmetic
    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return add(self, scale(as_tensor(other, self.dtype), -1.0))

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(self, other)

    def __neg__(self):
        return scale(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, grad={self.requires_grad})"


def parameter(data) -> Tensor:
    arr = np.ascontiguousarray(data)
    return Tensor(arr, requires_grad=True)


def as_tensor(value, dtype=None) -> Tensor:
    if isinstance(value, Tensor):
        return value
    return Tensor(np.asarray(value, dtype=dtype))


def _sum_to_shape(grad: np.ndarray, shape) -> np.ndarray:
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, dim in enumerate(shape):
        if dim == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


def _accumulate(t: Tensor, grad) -> None:
    if not t.requires_grad:
        return
    grad = np.asarray(grad)
    if grad.shape != t.data.shape:
        grad = _sum_to_shape(grad, t.data.shape)
    if t.grad is None:
        t.grad = np.zeros_like(t.data)
    t.grad += grad


def _make(data: np.ndarray, parents, backward) -> Tensor:
    requires = _GRAD_ENABLED and any(p.requires_grad for p in parents)
    out = Tensor(data, requires_grad=requires)
    if requires:
        out._parents = tuple(parents)
        out._backward = backward
    return out


def add(a: Tensor, b) -> Tensor:
    a = as_tensor(a)
    b = as_tensor(b, a.dtype)
    out_data = a.data + b.data

    def backward():
        _accumulate(a, out.grad)
        _accumulate(b, out.grad)

    out = _make(out_data, (a, b), backward)
    return out


def mul(a: Tensor, b) -> Tensor:
    a = as_tensor(a)
    b = as_tensor(b, a.dtype)
    out_data = a.data * b.data

    def backward():
        _accumulate(a, out.grad * b.data)
        _accumulate(b, out.grad * a.data)

    out = _make(out_data, (a, b), backward)
    return out


def scale(a: Tensor, s: float) -> Tensor:
    out_data = a.data * a.data.dtype.type(s)

    def backward():
        _accumulate(a, out.grad * a.data.dtype.type(s))

    out = _make(out_data, (a,), backward)
    return out


def matmul(a: Tensor, b: Tensor) -> Tensor:
    out_data = a.data @ b.data

    def backward():
        g = out.grad
        if a.requires_grad:
            _accumulate(a, g @ np.swapaxes(b.data, -1, -2))
        if b.requires_grad:
            _accumulate(b, np.swapaxes(a.data, -1, -2) @ g)

    out = _make(out_data, (a, b), backward)
    return out


def relu(a: Tensor) -> Tensor:
    mask = a.data > 0
    out_data = np.where(mask, a.data, a.data.dtype.type(0))

    def backward():
        _accumulate(a, out.grad * mask)

    out = _make(out_data, (a,), backward)
    return out


def reshape(a: Tensor, shape) -> Tensor:
    out_data = a.data.reshape(shape)

    def backward():
        _accumulate(a, out.grad.reshape(a.data.shape))

    out = _make(out_data, (a,), backward)
    return out


def swapaxes(a: Tensor, ax1: int, ax2: int) -> Tensor:
    out_data = np.ascontiguousarray(np.swapaxes(a.data, ax1, ax2))

    def backward():
        _accumulate(a, np.swapaxes(out.grad, ax1, ax2))

    out = _make(out_data, (a,), backward)
    return out


def concat(tensors, axis: int = 0) -> Tensor:
    tensors = list(tensors)
    out_data = np.concatenate([t.data for t in tensors], axis=axis)
    sizes = [t.data.shape[axis] for t in tensors]

    def backward():
        offset = 0
        index = [slice(None)] * out.grad.ndim
        for t, size in zip(tensors, sizes):
            index[axis] = slice(offset, offset + size)
            _accumulate(t, out.grad[tuple(index)])
            offset += size

    out = _make(out_data, tuple(tensors), backward)
    return out


def index_rows(a: Tensor, indices) -> Tensor:
    """Gather rows along axis 0; repeated indices accumulate gradient."""
    idx = np.asarray(indices, dtype=np.int64)
    out_data = a.data[idx]

    def backward():
        if a.requires_grad:
            if a.grad is None:
                a.grad = np.zeros_like(a.data)
            np.add.at(a.grad, idx, out.grad)

    out = _make(out_data, (a,), backward)
    return out


def take_per_row(a: Tensor, col_indices) -> Tensor:
    """Pick one column per row of a 2-d tensor."""
    idx = np.asarray(col_indices, dtype=np.int64)
    rows = np.arange(a.data.shape[0])
    out_data = a.data[rows, idx]

    def backward():
        if a.requires_grad:
            if a.grad is None:
                a.grad = np.zeros_like(a.data)
            np.add.at(a.grad, (rows, idx), out.grad)

    out = _make(out_data, (a,), backward)
    return out


def mean_all(a: Tensor) -> Tensor:
    out_data = np.asarray(a.data.mean())

    def backward():
        _accumulate(a, np.full(a.data.shape, out.grad / a.data.size, dtype=a.data.dtype))

    out = _make(out_data, (a,), backward)
    return out


def _rows_view(x: np.ndarray) -> np.ndarray:
    return np.ascontiguousarray(x.reshape(-1, x.shape[-1]))


def softmax_last(a: Tensor) -> Tensor:
    x2 = _rows_view(a.data)
    y2 = _accel.softmax_rows(x2)
    out_data = y2.reshape(a.data.shape)

    def backward():
        g2 = _rows_view(out.grad)
        gx = _accel.softmax_rows_grad(y2, g2)
        _accumulate(a, gx.reshape(a.data.shape))

    out = _make(out_data, (a,), backward)
    return out


def log_softmax_last(a: Tensor) -> Tensor:
    x2 = _rows_view(a.data)
    ls2 = _accel.log_softmax_rows(x2)
    out_data = ls2.reshape(a.data.shape)

    def backward():
        g2 = _rows_view(out.grad)
        gx = g2 - np.exp(ls2) * g2.sum(axis=1, keepdims=True)
        _accumulate(a, gx.reshape(a.data.shape))

    out = _make(out_data, (a,), backward)
    return out


def layer_norm(a: Tensor, gamma: Tensor, beta: Tensor, eps: float) -> Tensor:
    x2 = _rows_view(a.data)
    y2, mean, rstd = _accel.layer_norm_rows(x2, gamma.data, beta.data, a.data.dtype.type(eps))
    out_data = y2.reshape(a.data.shape)

    def backward():
        g2 = _rows_view(out.grad)
        gx, dgamma, dbeta = _accel.layer_norm_rows_grad(g2, x2, gamma.data, mean, rstd)
        _accumulate(a, gx.reshape(a.data.shape))
        _accumulate(gamma, dgamma)
        _accumulate(beta, dbeta)

    out = _make(out_data, (a, gamma, beta), backward)
    return out


def dropout(a: Tensor, p: float, rng: np.random.Generator) -> Tensor:
    """Inverted dropout; identity when ``p`` is zero."""
    if p <= 0.0:
        return a
    keep = (rng.random(a.data.shape) >= p).astype(a.data.dtype)
    keep /= a.data.dtype.type(1.0 - p)
    out_data = a.data * keep

    def backward():
        _accumulate(a, out.grad * keep)

    out = _make(out_data, (a,), backward)
    return out


class Adam:
    """Adam with optional per-element gradient value clipping."""

    def __init__(self, params, lr: float, beta1=0.9, beta2=0.999, eps=1e-8, clip=0.0):
        self.params = list(params)
        self.lr = float(lr)
        self.beta1 = float(beta1)
        self.beta2 = float(beta2)
        self.eps = float(eps)
        self.clip = float(clip)
        self.t = 0
        self._m = [np.zeros(p.data.size, dtype=p.data.dtype) for p in self.params]
        self._v = [np.zeros(p.data.size, dtype=p.data.dtype) for p in self.params]

    def zero_grad(self):
        for p in self.params:
            p.grad = None

    def step(self):
        self.t += 1
        bc1 = 1.0 - self.beta1**self.t
        bc2 = 1.0 - self.beta2**self.t
        for p, m, v in zip(self.params, self._m, self._v):
            if p.grad is None:
                continue
            flat = p.data.reshape(-1)
            _accel.adam_step(
                flat,
                np.ascontiguousarray(p.grad.reshape(-1)),
                m,
                v,
                self.lr,
                self.beta1,
                self.beta2,
                self.eps,
                bc1,
                bc2,
                self.clip,
            )
