"""Minimal reverse-mode automatic differentiation over numpy arrays.

Each :class:`Tensor` records the vector-Jacobian products of the operation
that produced it. :func:`backward` walks the graph in reverse topological
order. Only the operations needed by the displacement network and the
solver losses are provided; all of them work on whole arrays.
"""
from __future__ import annotations

import numpy as np


class Tensor:
    __slots__ = ("value", "parents", "requires_grad")

    __array_priority__ = 100.0

    def __init__(self, value, parents=(), requires_grad=False):
        self.value = np.asarray(value, dtype=np.float64)
        self.parents = tuple(parents)
        self.requires_grad = requires_grad or any(p.requires_grad for p, _ in self.parents)
        if not self.requires_grad:
            self.parents = ()

    @property
    def shape(self):
        return self.value.shape

    @property
    def ndim(self):
        return self.value.ndim

    def __repr__(self):
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"

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
        other = as_tensor(other)
        return mul(self, reciprocal(other))

    def __rtruediv__(self, other):
        return mul(as_tensor(other), reciprocal(self))

    def __neg__(self):
        return neg(self)

    def __pow__(self, p):
        return power(self, p)

    def __getitem__(self, index):
        return take(self, index)

    def sum(self, axis=None):
        return tsum(self, axis)


def as_tensor(x):
    return x if isinstance(x, Tensor) else Tensor(x)


def _unbroadcast(g, shape):
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


def add(a, b):
    a, b = as_tensor(a), as_tensor(b)
    sa, sb = a.shape, b.shape
    return Tensor(
        a.value + b.value,
        [(a, lambda g: _unbroadcast(g, sa)), (b, lambda g: _unbroadcast(g, sb))],
    )


def neg(a):
    return Tensor(-a.value, [(a, lambda g: -g)])


def mul(a, b):
    a, b = as_tensor(a), as_tensor(b)
    av, bv = a.value, b.value
    return Tensor(
        av * bv,
        [(a, lambda g: _unbroadcast(g * bv, av.shape)), (b, lambda g: _unbroadcast(g * av, bv.shape))],
    )


def reciprocal(a):
    r = 1.0 / a.value
    return Tensor(r, [(a, lambda g: -g * r * r)])


def power(a, p):
    v = a.value
    return Tensor(v**p, [(a, lambda g: g * p * v ** (p - 1))])


def tanh(a):
    t = np.tanh(a.value)
    return Tensor(t, [(a, lambda g: g * (1.0 - t * t))])


def log(a):
    v = a.value
    return Tensor(np.log(v), [(a, lambda g: g / v)])


def tsum(a, axis=None):
    shape = a.shape

    def vjp(g):
        if axis is not None:
            g = np.expand_dims(g, axis)
        return np.broadcast_to(g, shape)

    return Tensor(a.value.sum(axis=axis), [(a, vjp)])


def mean(a, axis=None):
    n = a.value.size if axis is None else np.prod([a.shape[i] for i in np.atleast_1d(axis)])
    return tsum(a, axis) * (1.0 / n)


def _is_basic(index):
    items = index if isinstance(index, tuple) else (index,)
    return all(i is None or i is Ellipsis or isinstance(i, (int, np.integer, slice)) for i in items)


def take(a, index):
    shape = a.shape
    basic = _is_basic(index)

    def vjp(g):
        out = np.zeros(shape)
        if basic:
            out[index] = g
        else:
            np.add.at(out, index, g)
        return out

    return Tensor(a.value[index], [(a, vjp)])


def gather(a, indices, axis):
    """``np.take(a, indices, axis)`` for a short, fixed index list."""
    indices = [int(i) for i in indices]
    shape = a.shape
    axis = axis % a.ndim

    def vjp(g):
        out = np.zeros(shape)
        lead = (slice(None),) * axis
        for pos, i in enumerate(indices):
            out[lead + (i,)] += g[lead + (pos,)]
        return out

    return Tensor(np.take(a.value, indices, axis=axis), [(a, vjp)])


def transpose(a, axes):
    inv = np.argsort(axes)
    return Tensor(np.transpose(a.value, axes), [(a, lambda g: np.transpose(g, inv))])


def reshape(a, shape):
    old = a.shape
    return Tensor(a.value.reshape(shape), [(a, lambda g: g.reshape(old))])


def stack(tensors, axis=0):
    tensors = [as_tensor(t) for t in tensors]
    parents = []
    for i, t in enumerate(tensors):
        parents.append((t, lambda g, i=i: np.take(g, i, axis=axis)))
    return Tensor(np.stack([t.value for t in tensors], axis=axis), parents)


def concat(tensors, axis=0):
    tensors = [as_tensor(t) for t in tensors]
    bounds = np.cumsum([0] + [t.shape[axis] for t in tensors])
    parents = []
    for i, t in enumerate(tensors):
        sl = slice(bounds[i], bounds[i + 1])
        parents.append((t, lambda g, sl=sl: g[(slice(None),) * (axis % g.ndim) + (sl,)]))
    return Tensor(np.concatenate([t.value for t in tensors], axis=axis), parents)


def linear(x, W, b=None):
    """``x @ W.T (+ b)`` for ``x`` with arbitrary leading dimensions."""
    x, W = as_tensor(x), as_tensor(W)
    xv, Wv = x.value, W.value
    out = xv @ Wv.T
    parents = [
        (x, lambda g: g @ Wv),
        (W, lambda g: g.reshape(-1, g.shape[-1]).T @ xv.reshape(-1, xv.shape[-1])),
    ]
    if b is not None:
        b = as_tensor(b)
        out = out + b.value
        parents.append((b, lambda g: g.reshape(-1, g.shape[-1]).sum(axis=0)))
    return Tensor(out, parents)


def einsum(subscripts, *operands):
    """Differentiable einsum. Each operand index must also appear in another operand or the output."""
    ops = [as_tensor(o) for o in operands]
    lhs, out_sub = subscripts.replace(" ", "").split("->")
    in_subs = lhs.split(",")
    values = [o.value for o in ops]
    result = np.einsum(subscripts, *values, optimize=True)
    parents = []
    for i, o in enumerate(ops):
        if not o.requires_grad:
            continue
        others = [s for j, s in enumerate(in_subs) if j != i]
        other_vals = [v for j, v in enumerate(values) if j != i]
        expr = ",".join([out_sub] + others) + "->" + in_subs[i]
        parents.append((o, lambda g, expr=expr, ov=other_vals: np.einsum(expr, g, *ov, optimize=True)))
    return Tensor(result, parents)


def custom(value, parents):
    """Wrap a value computed outside the tape with hand-written VJPs."""
    return Tensor(value, parents)


def backward(root: Tensor, seed=None):
    """Accumulate d(root)/d(leaf) for every reachable tensor.

    Returns a dict keyed by ``id(tensor)``; leaves are looked up with
    :func:`grad_of`.
    """
    order = []
    seen = set()
    stack_ = [(root, False)]
    while stack_:
        node, done = stack_.pop()
        if done:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack_.append((node, True))
        for p, _ in node.parents:
            if p.requires_grad and id(p) not in seen:
                stack_.append((p, False))

    grads = {id(root): np.ones_like(root.value) if seed is None else np.asarray(seed, dtype=np.float64)}
    for node in reversed(order):
        g = grads.pop(id(node), None) if node.parents else grads.get(id(node))
        if g is None or not node.parents:
            continue
        for p, vjp in node.parents:
            if not p.requires_grad:
                continue
            contrib = vjp(g)
            key = id(p)
            if key in grads:
                grads[key] = grads[key] + contrib
            else:
                grads[key] = contrib
    return grads


def grad_of(grads, tensor):
    g = grads.get(id(tensor))
    return np.zeros_like(tensor.value) if g is None else g
