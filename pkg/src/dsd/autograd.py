"""Minimal reverse-mode automatic differentiation over numpy arrays.

Every model in the package (patch embedding, attention, routers, experts,
losses) is written against :class:`Tensor`, so a single ``backward()`` call
yields exact gradients for all parameters. Arithmetic is float64 throughout.
"""
from __future__ import annotations

import numpy as np
from scipy import special

Array = np.ndarray


def _unbroadcast(grad: Array, shape: tuple[int, ...]) -> Array:
    """Sum ``grad`` down to ``shape`` (reverse of numpy broadcasting)."""
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
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward")

    __array_priority__ = 100.0

    def __init__(self, data, requires_grad: bool = False, _parents=(), _backward=None):
        self.data = np.asarray(data, dtype=np.float64)
        self.grad: Array | None = None
        self.requires_grad = requires_grad
        self._parents = _parents
        self._backward = _backward

    # -- bookkeeping -----------------------------------------------------
    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"

    def numpy(self) -> Array:
        return self.data

    def item(self) -> float:
        return float(self.data)

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def _accum(self, g: Array) -> None:
        if self.grad is None:
            self.grad = np.array(g, dtype=np.float64, copy=True)
        else:
            self.grad += g

    def backward(self, grad: Array | None = None) -> None:
        if grad is None:
            if self.data.size != 1:
                raise ValueError("backward() without a seed gradient needs a scalar output")
            grad = np.ones_like(self.data)
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
        # interior gradients start fresh so the same graph can be back-propagated
        # from several roots; leaf gradients keep accumulating
        for node in order:
            if node._parents:
                node.grad = None
        self._accum(np.asarray(grad, dtype=np.float64))
        for node in reversed(order):
            if node._backward is not None and node.grad is not None:
                node._backward(node.grad)

    # -- arithmetic ------------------------------------------------------
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return add(self, neg(as_tensor(other)))

    def __rsub__(self, other):
        return add(as_tensor(other), neg(self))

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        return mul(self, reciprocal(as_tensor(other)))

    def __rtruediv__(self, other):
        return mul(as_tensor(other), reciprocal(self))

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __rmatmul__(self, other):
        return matmul(as_tensor(other), self)

    def __pow__(self, p: float):
        return power(self, p)

    def __getitem__(self, idx):
        return getitem(self, idx)

    def sum(self, axis=None, keepdims: bool = False):
        return tsum(self, axis, keepdims)

    def mean(self, axis=None, keepdims: bool = False):
        return tmean(self, axis, keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], tuple):
            shape = shape[0]
        return reshape(self, shape)

    def swapaxes(self, a: int, b: int):
        return swapaxes(self, a, b)

    @property
    def T(self):
        return swapaxes(self, -1, -2)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _make(data: Array, parents: tuple[Tensor, ...], backward) -> Tensor:
    live = tuple(p for p in parents if p.requires_grad)
    if not live:
        return Tensor(data)
    return Tensor(data, requires_grad=True, _parents=live, _backward=backward)


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    out = a.data + b.data

    def backward(g):
        if a.requires_grad:
            a._accum(_unbroadcast(g, a.shape))
        if b.requires_grad:
            b._accum(_unbroadcast(g, b.shape))

    return _make(out, (a, b), backward)


def neg(a: Tensor) -> Tensor:
    def backward(g):
        a._accum(-g)

    return _make(-a.data, (a,), backward)


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    out = a.data * b.data

    def backward(g):
        if a.requires_grad:
            a._accum(_unbroadcast(g * b.data, a.shape))
        if b.requires_grad:
            b._accum(_unbroadcast(g * a.data, b.shape))

    return _make(out, (a, b), backward)


def reciprocal(a: Tensor) -> Tensor:
    out = 1.0 / a.data

    def backward(g):
        a._accum(-g * out * out)

    return _make(out, (a,), backward)


def power(a: Tensor, p: float) -> Tensor:
    out = a.data**p

    def backward(g):
        a._accum(g * p * a.data ** (p - 1))

    return _make(out, (a,), backward)


def sqrt(a: Tensor) -> Tensor:
    out = np.sqrt(a.data)

    def backward(g):
        a._accum(g * 0.5 / out)

    return _make(out, (a,), backward)


def exp(a: Tensor) -> Tensor:
    out = np.exp(a.data)

    def backward(g):
        a._accum(g * out)

    return _make(out, (a,), backward)


def log(a: Tensor) -> Tensor:
    def backward(g):
        a._accum(g / a.data)

    return _make(np.log(a.data), (a,), backward)


def matmul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if b.ndim == 2 and a.ndim >= 2:
        return _matmul_2d(a, b)
    out = np.matmul(a.data, b.data)

    def backward(g):
        if a.requires_grad:
            bd = b.data if b.ndim > 1 else b.data[:, None]
            gg = g if b.ndim > 1 else g[..., None]
            a._accum(_unbroadcast(np.matmul(gg, np.ascontiguousarray(np.swapaxes(bd, -1, -2))), a.shape))
        if b.requires_grad:
            ad = a.data if a.ndim > 1 else a.data[None, :]
            gg = g if a.ndim > 1 else g[..., None, :]
            if b.ndim == 1:
                gb = np.matmul(np.ascontiguousarray(np.swapaxes(ad, -1, -2)), g[..., None])[..., 0]
            elif ad.ndim == 3 and gg.ndim == 3 and ad.shape[0] == gg.shape[0] <= 16:
                # per-batch products on transposed views hit BLAS directly
                gc = np.ascontiguousarray(gg)
                gb = np.stack([ad[i].T @ gc[i] for i in range(ad.shape[0])])
            else:
                gb = np.matmul(np.ascontiguousarray(np.swapaxes(ad, -1, -2)), gg)
            b._accum(_unbroadcast(gb, b.shape))

    return _make(out, (a, b), backward)


def _matmul_2d(a: Tensor, b: Tensor) -> Tensor:
    """(..., K) @ (K, N) as a single flattened product."""
    k, n = b.shape
    a2 = a.data.reshape(-1, k)
    out = (a2 @ b.data).reshape(a.shape[:-1] + (n,))

    def backward(g):
        g2 = g.reshape(-1, n)
        if a.requires_grad:
            a._accum((g2 @ b.data.T).reshape(a.shape))
        if b.requires_grad:
            b._accum(a2.T @ g2)

    return _make(out, (a, b), backward)


def tsum(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    out = a.data.sum(axis=axis, keepdims=keepdims)

    def backward(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        a._accum(np.broadcast_to(g, a.shape))

    return _make(out, (a,), backward)


def tmean(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    n = a.data.size if axis is None else np.prod([a.shape[i] for i in np.atleast_1d(axis)])
    return tsum(a, axis, keepdims) * (1.0 / float(n))


def reshape(a: Tensor, shape) -> Tensor:
    def backward(g):
        a._accum(g.reshape(a.shape))

    return _make(a.data.reshape(shape), (a,), backward)


def swapaxes(a: Tensor, i: int, j: int) -> Tensor:
    def backward(g):
        a._accum(np.swapaxes(g, i, j))

    return _make(np.swapaxes(a.data, i, j), (a,), backward)


def getitem(a: Tensor, idx) -> Tensor:
    def backward(g):
        full = np.zeros_like(a.data)
        np.add.at(full, idx, g)
        a._accum(full)

    return _make(a.data[idx], (a,), backward)


def concat(parts: list[Tensor], axis: int = 0) -> Tensor:
    parts = [as_tensor(p) for p in parts]
    out = np.concatenate([p.data for p in parts], axis=axis)
    sizes = np.cumsum([p.shape[axis] for p in parts])[:-1]

    def backward(g):
        for p, gp in zip(parts, np.split(g, sizes, axis=axis)):
            if p.requires_grad:
                p._accum(gp)

    return _make(out, tuple(parts), backward)


def where(mask: Array, a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    out = np.where(mask, a.data, b.data)

    def backward(g):
        if a.requires_grad:
            a._accum(_unbroadcast(np.where(mask, g, 0.0), a.shape))
        if b.requires_grad:
            b._accum(_unbroadcast(np.where(mask, 0.0, g), b.shape))

    return _make(out, (a, b), backward)


def leaky_relu(a: Tensor, slope: float = 0.2) -> Tensor:
    pos = a.data > 0

    def backward(g):
        a._accum(np.where(pos, g, slope * g))

    return _make(np.where(pos, a.data, slope * a.data), (a,), backward)


def gelu(a: Tensor) -> Tensor:
    """Exact (erf-based) GELU."""
    cdf = special.ndtr(a.data)
    pdf = np.exp(-0.5 * a.data**2) / np.sqrt(2.0 * np.pi)

    def backward(g):
        a._accum(g * (cdf + a.data * pdf))

    return _make(a.data * cdf, (a,), backward)


def normal_cdf(a: Tensor) -> Tensor:
    out = special.ndtr(a.data)

    def backward(g):
        a._accum(g * np.exp(-0.5 * a.data**2) / np.sqrt(2.0 * np.pi))

    return _make(out, (a,), backward)


def softmax(a: Tensor, axis: int = -1, mask: Array | None = None) -> Tensor:
    """Softmax with max-subtraction; ``mask`` (boolean, broadcastable) excludes entries."""
    z = a.data
    if mask is not None:
        z = np.where(mask, z, -np.inf)
    z = z - z.max(axis=axis, keepdims=True)
    e = np.exp(z)
    out = e / e.sum(axis=axis, keepdims=True)

    def backward(g):
        a._accum(out * (g - (g * out).sum(axis=axis, keepdims=True)))

    return _make(out, (a,), backward)


def layer_norm(x: Tensor, scale: Tensor, shift: Tensor, eps: float = 1e-5) -> Tensor:
    mu = x.mean(axis=-1, keepdims=True)
    xc = x - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    return xc * power(var + eps, -0.5) * scale + shift


def l2_normalize(x: Tensor, axis: int = -1) -> Tensor:
    norm = sqrt((x * x).sum(axis=axis, keepdims=True))
    return x / norm
