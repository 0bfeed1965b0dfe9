"""Reverse-mode automatic differentiation on a tape of numpy-valued nodes.

A :class:`Node` holds a value (a float64 array; scalars are 0-d arrays), an
adjoint filled in by :meth:`Tape.backward`, and its parents together with a
vector-Jacobian product for each.  Nodes are appended to their tape in
creation order, which is a topological order, so the backward sweep simply
walks the tape in reverse.

The op functions (``add``, ``exp``, ``lse`` ...) accept plain arrays too; if
no argument is a Node they return a plain numpy result and record nothing.
That lets the model code run unchanged for gradient-free evaluation.
"""
from __future__ import annotations

import numpy as np


class DomainError(ArithmeticError):
    """An op was applied outside its domain (log of a non-positive value, division by zero)."""


class Node:
    __slots__ = ("value", "grad", "parents", "tape", "name")
    __array_priority__ = 1000  # make ndarray <op> Node defer to Node's reflected ops

    def __init__(self, value, parents=(), tape=None, name=None):
        value = np.asarray(value)
        # float64 unless the caller asked for extended precision
        self.value = value if value.dtype == np.longdouble else value.astype(np.float64, copy=False)
        self.grad = None
        self.parents = parents
        self.tape = tape
        self.name = name

    @property
    def shape(self):
        return self.value.shape

    @property
    def ndim(self):
        return self.value.ndim

    def __repr__(self):
        label = f" {self.name!r}" if self.name else ""
        return f"Node{label}(shape={self.value.shape})"

    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(other, self)

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __rmatmul__(self, other):
        return matmul(other, self)

    def __getitem__(self, idx):
        return getitem(self, idx)


class Tape:
    """Ordered node storage for one forward/backward pass."""

    def __init__(self):
        self.nodes: list[Node] = []
        self.leaves: list[Node] = []

    def leaf(self, value, name=None) -> Node:
        node = Node(np.array(value), (), self, name)
        self.nodes.append(node)
        self.leaves.append(node)
        return node

    def clear(self):
        self.nodes.clear()
        self.leaves.clear()

    def backward(self, root: Node) -> dict:
        """Fill adjoints of every node reachable from ``root``.

        Returns ``{leaf name: gradient}`` (unnamed leaves are keyed by their
        position in :attr:`leaves`).  Adjoints are reset first, so calling
        this twice gives identical results.
        """
        if root.tape is not self:
            raise ValueError("root does not live on this tape")
        for node in self.nodes:
            node.grad = None
        root.grad = np.ones_like(root.value)
        for node in reversed(self.nodes):
            g = node.grad
            if g is None:
                continue
            for parent, vjp in node.parents:
                contrib = vjp(g)
                if parent.grad is None:
                    parent.grad = contrib  # never mutated in place, so aliasing is safe
                else:
                    parent.grad = parent.grad + contrib
        out = {}
        for k, leaf in enumerate(self.leaves):
            key = leaf.name if leaf.name is not None else k
            out[key] = leaf.grad if leaf.grad is not None else np.zeros_like(leaf.value)
        return out


def backward(root: Node) -> dict:
    return root.tape.backward(root)


def value(a):
    return a.value if isinstance(a, Node) else a


def _tape_of(args):
    for a in args:
        if isinstance(a, Node):
            return a.tape
    return None


def _record(val, tape, parents):
    node = Node(val, tuple((p, f) for p, f in parents if isinstance(p, Node)), tape)
    tape.nodes.append(node)
    return node


def _unbroadcast(g, shape):
    g = np.asarray(g)
    if g.shape == shape:
        return g
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g


def _shape(a):
    return np.shape(value(a))


# -- elementwise arithmetic --------------------------------------------------


def add(a, b):
    tape = _tape_of((a, b))
    va, vb = value(a), value(b)
    out = va + vb
    if tape is None:
        return out
    sa, sb = _shape(a), _shape(b)
    return _record(out, tape, [(a, lambda g: _unbroadcast(g, sa)), (b, lambda g: _unbroadcast(g, sb))])


def sub(a, b):
    tape = _tape_of((a, b))
    va, vb = value(a), value(b)
    out = va - vb
    if tape is None:
        return out
    sa, sb = _shape(a), _shape(b)
    return _record(out, tape, [(a, lambda g: _unbroadcast(g, sa)), (b, lambda g: -_unbroadcast(g, sb))])


def mul(a, b):
    tape = _tape_of((a, b))
    va, vb = value(a), value(b)
    out = va * vb
    if tape is None:
        return out
    sa, sb = _shape(a), _shape(b)
    return _record(out, tape, [(a, lambda g: _unbroadcast(g * vb, sa)), (b, lambda g: _unbroadcast(g * va, sb))])


def div(a, b):
    tape = _tape_of((a, b))
    va, vb = value(a), value(b)
    if np.any(np.asarray(vb) == 0.0):
        raise DomainError("division by zero")
    out = va / vb
    if tape is None:
        return out
    sa, sb = _shape(a), _shape(b)
    return _record(
        out,
        tape,
        [(a, lambda g: _unbroadcast(g / vb, sa)), (b, lambda g: _unbroadcast(-g * out / vb, sb))],
    )


def neg(a):
    if not isinstance(a, Node):
        return -a
    return _record(-a.value, a.tape, [(a, lambda g: -g)])


def exp(a):
    out = np.exp(value(a))
    if not isinstance(a, Node):
        return out
    return _record(out, a.tape, [(a, lambda g: g * out)])


def log(a):
    va = value(a)
    if np.any(np.asarray(va) <= 0.0):
        raise DomainError("log of a non-positive value")
    out = np.log(va)
    if not isinstance(a, Node):
        return out
    return _record(out, a.tape, [(a, lambda g: g / va)])


def tanh(a):
    out = np.tanh(value(a))
    if not isinstance(a, Node):
        return out
    return _record(out, a.tape, [(a, lambda g: g * (1.0 - out * out))])


def safe_log(a, floor_value=-1e6):
    """Elementwise log that maps non-positive entries to ``floor_value``.

    Those entries get zero gradient.  Returns ``(result, count)`` where
    ``count`` is the number of substituted entries.
    """
    va = np.asarray(value(a))
    ok = va > 0.0
    out = np.where(ok, np.log(np.where(ok, va, 1.0)), floor_value)
    count = int(va.size - np.count_nonzero(ok))
    if not isinstance(a, Node):
        return out, count
    safe = np.where(ok, va, 1.0)
    return _record(out, a.tape, [(a, lambda g: np.where(ok, g / safe, 0.0))]), count


# -- linear algebra and reductions -------------------------------------------


def matmul(a, b):
    tape = _tape_of((a, b))
    va, vb = value(a), value(b)
    out = va @ vb
    if tape is None:
        return out
    return _record(out, tape, [(a, lambda g: g @ np.swapaxes(vb, -1, -2)), (b, lambda g: np.swapaxes(va, -1, -2) @ g)])


def sum(a, axis=None):  # noqa: A001 - mirrors numpy naming
    va = value(a)
    out = np.sum(va, axis=axis)
    if not isinstance(a, Node):
        return out
    shape = va.shape

    def vjp(g):
        if axis is not None:
            g = np.expand_dims(g, axis)
        return np.broadcast_to(g, shape)

    return _record(out, a.tape, [(a, vjp)])


def mean(a, axis=None):
    n = np.size(value(a)) if axis is None else np.shape(value(a))[axis]
    return mul(sum(a, axis), 1.0 / n)


def reshape(a, shape):
    va = value(a)
    out = np.reshape(va, shape)
    if not isinstance(a, Node):
        return out
    old = va.shape
    return _record(out, a.tape, [(a, lambda g: np.reshape(g, old))])


def getitem(a, idx):
    va = value(a)
    out = va[idx]
    if not isinstance(a, Node):
        return out

    def vjp(g):
        full = np.zeros_like(va)
        np.add.at(full, idx, g)
        return full

    return _record(out, a.tape, [(a, vjp)])


def concat(items, axis=0):
    vals = [value(a) for a in items]
    out = np.concatenate(vals, axis=axis)
    tape = _tape_of(items)
    if tape is None:
        return out
    bounds = np.cumsum([0] + [v.shape[axis] for v in vals])
    parents = []
    for k, a in enumerate(items):
        sl = [slice(None)] * out.ndim
        sl[axis] = slice(bounds[k], bounds[k + 1])
        sl = tuple(sl)
        parents.append((a, lambda g, sl=sl: g[sl]))
    return _record(out, tape, parents)


def tile_rows(a, reps):
    """Stack ``reps`` copies of ``a`` along axis 0."""
    if reps == 1:
        return a
    return concat([a] * reps, axis=0)


# -- soft and hard extrema ---------------------------------------------------


def lse(a, beta=1.0, axis=-1):
    """Temperature-scaled log-sum-exp ``(1/beta) log sum exp(beta * a)`` along ``axis``.

    A smooth upper bound on the maximum that tends to it as ``beta`` grows.
    ``beta`` may itself be a (scalar) Node; its gradient is propagated.
    """
    va, vb = value(a), value(beta)
    e = vb * va
    m = np.max(e, axis=axis, keepdims=True)
    e -= m
    np.exp(e, out=e)
    s = np.sum(e, axis=axis, keepdims=True)
    out = np.squeeze((m + np.log(s)) / vb, axis=axis)
    tape = _tape_of((a, beta))
    if tape is None:
        return out
    w = e
    w /= s
    parents = [(a, lambda g: np.expand_dims(g, axis) * w)]
    if isinstance(beta, Node):
        # d/dbeta = (sum_j w_j a_j - out) / beta
        dbeta = (np.sum(w * va, axis=axis) - out) / vb
        parents.append((beta, lambda g: _unbroadcast(g * dbeta, np.shape(vb))))
    return _record(out, tape, parents)


def soft_max(a, beta=1.0, axis=-1):
    return lse(a, beta, axis)


def soft_min(a, beta=1.0, axis=-1):
    return neg(lse(neg(a), beta, axis))


def hard_max(a, axis=-1):
    va = value(a)
    out = np.max(va, axis=axis)
    if not isinstance(a, Node):
        return out
    idx = np.expand_dims(np.argmax(va, axis=axis), axis)

    def vjp(g):
        full = np.zeros_like(va)
        np.put_along_axis(full, idx, np.expand_dims(g, axis), axis=axis)
        return full

    return _record(out, a.tape, [(a, vjp)])


def hard_min(a, axis=-1):
    return neg(hard_max(neg(a), axis))


_KINDS = {
    "add": add,
    "sub": sub,
    "mul": mul,
    "div": div,
    "neg": neg,
    "exp": exp,
    "log": log,
    "tanh": tanh,
    "lse": lse,
    "max": hard_max,
    "min": hard_min,
    "sum": sum,
    "matmul": matmul,
}


def forward_op(kind: str, *inputs, **kwargs):
    """Apply the op named ``kind``; see the module functions for semantics."""
    try:
        fn = _KINDS[kind]
    except KeyError:
        raise ValueError(f"unknown op {kind!r}") from None
    return fn(*inputs, **kwargs)


def numerical_gradient(f, params: dict, h: float = 1e-6) -> dict:
    """Central-difference gradient of scalar ``f(params)`` w.r.t. every entry of every array.

    Arithmetic stays in the dtype of ``params``, so extended-precision arrays
    give extended-precision quotients.
    """
    grads = {}
    for name, arr in params.items():
        g = np.zeros_like(arr)
        flat = arr.reshape(-1)
        gflat = g.reshape(-1)
        for k in range(flat.size):
            orig = flat[k]
            flat[k] = orig + h
            fp = value(f(params))
            flat[k] = orig - h
            fm = value(f(params))
            flat[k] = orig
            gflat[k] = (fp - fm) / (2.0 * h)
        grads[name] = g
    return grads
