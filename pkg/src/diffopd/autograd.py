"""A small reverse-mode autodiff over numpy arrays.

Only the operations the losses in this package need are provided.  Operands may
mix :class:`Tensor` and plain arrays/scalars; plain values are constants.  The
module-level functions (:func:`exp`, :func:`minimum`, ...) also accept plain
arrays and then simply return arrays, so loss code can be written once and run
either with or without gradient tracking.
"""
from __future__ import annotations

import numpy as np


def _unbroadcast(g, shape):
    if g.shape == shape:
        return g
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, n in enumerate(shape):
        if n == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g


def _data(x):
    return x.data if isinstance(x, Tensor) else x


class Tensor:
    # ndarray <op> Tensor must defer to the Tensor's reflected operator
    __array_ufunc__ = None

    def __init__(self, data, parents=(), backward=None, requires_grad=False):
        self.data = np.asarray(data, dtype=np.float64)
        self.grad = None
        self._parents = parents
        self._backward = backward
        self.requires_grad = requires_grad or any(p.requires_grad for p in parents)

    def __repr__(self):
        return f"Tensor({self.data!r})"

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    def item(self) -> float:
        return float(self.data)

    def __len__(self):
        return len(self.data)

    # -- graph construction -------------------------------------------------

    @staticmethod
    def _lift(x):
        return x if isinstance(x, Tensor) else Tensor(x)

    def __add__(self, other):
        other = Tensor._lift(other)
        a, b = self.shape, other.shape
        return Tensor(self.data + other.data, (self, other),
                      lambda g: (_unbroadcast(g, a), _unbroadcast(g, b)))

    __radd__ = __add__

    def __neg__(self):
        return Tensor(-self.data, (self,), lambda g: (-g,))

    def __sub__(self, other):
        return self + (-Tensor._lift(other))

    def __rsub__(self, other):
        return Tensor._lift(other) + (-self)

    def __mul__(self, other):
        other = Tensor._lift(other)
        x, y = self.data, other.data
        return Tensor(x * y, (self, other),
                      lambda g: (_unbroadcast(g * y, x.shape), _unbroadcast(g * x, y.shape)))

    __rmul__ = __mul__

    def __truediv__(self, other):
        other = Tensor._lift(other)
        x, y = self.data, other.data
        return Tensor(x / y, (self, other),
                      lambda g: (_unbroadcast(g / y, x.shape),
                                 _unbroadcast(-g * x / (y * y), y.shape)))

    def __rtruediv__(self, other):
        return Tensor._lift(other) / self

    def __pow__(self, p):
        if isinstance(p, Tensor):
            raise TypeError("tensor exponents are not supported")
        x = self.data
        return Tensor(x ** p, (self,), lambda g: (g * p * x ** (p - 1),))

    def __getitem__(self, idx):
        x = self.data

        def back(g):
            out = np.zeros_like(x)
            np.add.at(out, idx, g)
            return (out,)

        return Tensor(x[idx], (self,), back)

    def sum(self, axis=None, keepdims=False):
        x = self.data

        def back(g):
            if axis is not None and not keepdims:
                g = np.expand_dims(g, axis)
            return (np.broadcast_to(g, x.shape).copy(),)

        return Tensor(x.sum(axis=axis, keepdims=keepdims), (self,), back)

    def mean(self, axis=None, keepdims=False):
        n = self.data.size if axis is None else self.data.shape[axis]
        return self.sum(axis=axis, keepdims=keepdims) / n

    def reshape(self, *shape):
        old = self.shape
        return Tensor(self.data.reshape(*shape), (self,), lambda g: (g.reshape(old),))

    # -- reverse pass --------------------------------------------------------

    def backward(self, grad=None):
        if grad is None:
            if self.data.size != 1:
                raise ValueError("backward() without a seed needs a scalar output")
            grad = np.ones_like(self.data)
        order = []
        seen = set()
        stack = [(self, False)]
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
        grads = {id(self): np.asarray(grad, dtype=np.float64)}
        for node in reversed(order):
            g = grads.pop(id(node), None)
            if g is None:
                continue
            if node._backward is None:
                node.grad = g if node.grad is None else node.grad + g
                continue
            for p, pg in zip(node._parents, node._backward(g)):
                if pg is None or not p.requires_grad:
                    continue
                key = id(p)
                grads[key] = pg if key not in grads else grads[key] + pg


def exp(x):
    if not isinstance(x, Tensor):
        return np.exp(x)
    y = np.exp(x.data)
    return Tensor(y, (x,), lambda g: (g * y,))


def log(x):
    if not isinstance(x, Tensor):
        return np.log(x)
    d = x.data
    return Tensor(np.log(d), (x,), lambda g: (g / d,))


def square_norm(x, axis=-1):
    """Sum of squares along ``axis``."""
    return (x * x).sum(axis=axis)


def minimum(a, b):
    if not isinstance(a, Tensor) and not isinstance(b, Tensor):
        return np.minimum(a, b)
    a, b = Tensor._lift(a), Tensor._lift(b)
    pick_a = a.data <= b.data
    return Tensor(np.where(pick_a, a.data, b.data), (a, b),
                  lambda g: (_unbroadcast(np.where(pick_a, g, 0.0), a.shape),
                             _unbroadcast(np.where(pick_a, 0.0, g), b.shape)))


def maximum(a, b):
    return -minimum(-a, -b)


def clip(x, lo, hi):
    if not isinstance(x, Tensor):
        return np.clip(x, lo, hi)
    d = x.data
    inside = (d >= lo) & (d <= hi)
    return Tensor(np.clip(d, lo, hi), (x,), lambda g: (np.where(inside, g, 0.0),))


def stack(items, axis=0):
    """Stack tensors (or arrays) along a new leading axis."""
    if not any(isinstance(t, Tensor) for t in items):
        return np.stack(items, axis=axis)
    if axis != 0:
        raise ValueError("only axis=0 is supported for tensors")
    items = [Tensor._lift(t) for t in items]
    data = np.stack([t.data for t in items])
    return Tensor(data, tuple(items), lambda g: tuple(g[k] for k in range(len(items))))


def value(x):
    """Underlying array of a tensor or array-like."""
    return np.asarray(_data(x))
