"""Small array-valued differentiation engine.

Reverse mode records primitive ops onto a :class:`Tape` and replays adjoints
backwards from a scalar. Forward mode pushes tangents through :class:`Dual`
values. Both share the same closed primitive set, and the generic helpers at
the bottom (``relu``, ``sigmoid``, ...) dispatch on the argument type so model
code is written once and runs on plain arrays, taped ``Var`` and ``Dual``.
"""
from __future__ import annotations

import os
import threading

import numpy as np
import scipy.sparse as sp
from scipy.special import expit

__all__ = [
    "Var",
    "Dual",
    "Tape",
    "UnsupportedPrimitiveError",
    "NonScalarError",
    "reverse_grad",
    "forward_jvp",
    "finite_diff_check",
    "set_debug",
    "relu",
    "sigmoid",
    "log",
    "clip",
    "absolute",
    "square",
    "mean",
    "total",
    "inner",
    "reshape",
    "value_of",
]


class UnsupportedPrimitiveError(TypeError):
    """Raised when an operation outside the supported primitive set touches a traced value."""


class NonScalarError(ValueError):
    pass


_debug = os.environ.get("FAIRPATH_DEBUG", "") not in ("", "0")
_state = threading.local()


def set_debug(flag: bool) -> None:
    """Toggle finiteness assertions on every primitive result."""
    global _debug
    _debug = bool(flag)


def _check(value, name):
    if _debug and not np.all(np.isfinite(value)):
        raise FloatingPointError(f"non-finite value produced by {name}")
    return value


def _active_tape():
    stack = getattr(_state, "tapes", None)
    return stack[-1] if stack else None


def _unbroadcast(g, shape):
    if g.shape == shape:
        return g
    if len(shape) == 0:
        return np.asarray(g.sum())
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, size in enumerate(shape):
        if size == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g


class Tape:
    """Records primitive ops while active (``with Tape() as tape:``).

    Nodes are appended in creation order, which is already a topological
    order, so the backward pass is a reversed sweep.
    """

    def __init__(self):
        self.nodes = []

    def __enter__(self):
        if not hasattr(_state, "tapes"):
            _state.tapes = []
        _state.tapes.append(self)
        return self

    def __exit__(self, *exc):
        _state.tapes.pop()
        return False

    def watch(self, array) -> Var:
        return Var(np.asarray(array, dtype=np.float64), requires_grad=True)

    def clear(self):
        self.nodes = []

    def gradient(self, root: Var, params):
        """Adjoints of scalar ``root`` w.r.t. each of ``params``; clears the tape."""
        if not isinstance(root, Var):
            raise TypeError("root must be a Var produced on this tape")
        if root.value.size != 1:
            raise NonScalarError(f"gradient root must be scalar, got shape {root.value.shape}")
        adj = {id(root): np.ones_like(root.value)}
        for node in reversed(self.nodes):
            g = adj.pop(id(node), None)
            if g is None:
                continue
            for parent, pg in zip(node._parents, node._backward(g)):
                if pg is None or not parent._tracked:
                    continue
                key = id(parent)
                if key in adj:
                    adj[key] = adj[key] + pg
                else:
                    adj[key] = pg
                if not parent._parents:
                    # leaf: keep its adjoint around for lookup below
                    parent._leaf_grad = adj[key]
        grads = []
        for p in params:
            if id(p) == id(root):
                grads.append(np.ones_like(p.value))
            else:
                g = getattr(p, "_leaf_grad", None)
                grads.append(np.zeros_like(p.value) if g is None else np.asarray(g, dtype=np.float64))
                p._leaf_grad = None
        self.clear()
        return grads


class Var:
    """A value that may be recorded on the active tape."""

    __slots__ = ("value", "_parents", "_backward", "_tracked", "_leaf_grad", "op")

    def __init__(self, value, requires_grad=False, _parents=(), _backward=None, op="leaf"):
        self.value = np.asarray(value, dtype=np.float64)
        self._parents = _parents
        self._backward = _backward
        self._tracked = requires_grad or bool(_parents)
        self._leaf_grad = None
        self.op = op

    shape = property(lambda self: self.value.shape)
    ndim = property(lambda self: self.value.ndim)
    T = property(lambda self: _transpose(self))

    def __len__(self):
        return len(self.value)

    def __repr__(self):
        return f"Var(op={self.op}, shape={self.value.shape})"

    def __array_ufunc__(self, ufunc, method, *inputs, **kwargs):
        op = _UFUNCS.get(ufunc) if method == "__call__" and not kwargs else None
        if op is None:
            raise UnsupportedPrimitiveError(f"unsupported primitive on traced value: {ufunc.__name__}.{method}")
        return op(*inputs)

    def __add__(self, other):
        return _add(self, other)

    def __radd__(self, other):
        return _add(other, self)

    def __sub__(self, other):
        return _sub(self, other)

    def __rsub__(self, other):
        return _sub(other, self)

    def __mul__(self, other):
        return _mul(self, other)

    def __rmul__(self, other):
        return _mul(other, self)

    def __truediv__(self, other):
        if isinstance(other, (Var, Dual)):
            raise UnsupportedPrimitiveError("division by a traced value is not a supported primitive")
        return _mul(self, 1.0 / np.asarray(other, dtype=np.float64))

    def __neg__(self):
        return _mul(self, -1.0)

    def __matmul__(self, other):
        return _matmul(self, other)

    def __rmatmul__(self, other):
        return _matmul(other, self)

    def __pow__(self, p):
        if p == 2:
            return _square(self)
        raise UnsupportedPrimitiveError("only squaring is supported")

    def __abs__(self):
        return _abs(self)

    def relu(self):
        return _relu(self)

    def sigmoid(self):
        return _sigmoid(self)

    def log(self):
        return _log(self)

    def clip(self, lo, hi):
        return _clip(self, lo, hi)

    def abs(self):
        return _abs(self)

    def square(self):
        return _square(self)

    def sum(self, axis=None):
        return _sum(self, axis)

    def mean(self, axis=None):
        return _mean(self, axis)

    def reshape(self, *shape):
        return _reshape(self, shape)

    def __getattr__(self, name):
        if name.startswith("__"):
            raise AttributeError(name)
        raise UnsupportedPrimitiveError(f"'{name}' is not a supported primitive on traced values")


def _make(value, parents, backward, op):
    value = _check(value, op)
    parents = tuple(p for p in parents)
    tape = _active_tape()
    if tape is None or not any(isinstance(p, Var) and p._tracked for p in parents):
        return Var(value, op=op)
    out = Var(value, _parents=parents, _backward=backward, op=op)
    tape.nodes.append(out)
    return out


def _as_var(x):
    return x if isinstance(x, Var) else Var(x)


def _add(a, b):
    a, b = _as_var(a), _as_var(b)
    sa, sb = a.value.shape, b.value.shape
    return _make(a.value + b.value, (a, b), lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)), "add")


def _sub(a, b):
    a, b = _as_var(a), _as_var(b)
    sa, sb = a.value.shape, b.value.shape
    return _make(a.value - b.value, (a, b), lambda g: (_unbroadcast(g, sa), _unbroadcast(-g, sb)), "sub")


def _mul(a, b):
    a, b = _as_var(a), _as_var(b)
    av, bv = a.value, b.value
    need_a, need_b = a._tracked, b._tracked

    def backward(g):
        return (_unbroadcast(g * bv, av.shape) if need_a else None,
                _unbroadcast(g * av, bv.shape) if need_b else None)

    return _make(av * bv, (a, b), backward, "mul")


def _sparse_matmul(a, b):
    # constant sparse design matrix times a (possibly traced) dense operand
    bv = b.value
    return _make(np.asarray(a @ bv), (b,), lambda g: (np.asarray(a.T @ g),), "matmul")


def _matmul(a, b):
    if sp.issparse(a):
        return _sparse_matmul(a, _as_var(b))
    a, b = _as_var(a), _as_var(b)
    av, bv = a.value, b.value
    if av.ndim not in (1, 2) or bv.ndim not in (1, 2):
        raise ValueError("matmul supports 1-D and 2-D operands only")
    need_a, need_b = a._tracked, b._tracked

    def backward(g):
        if av.ndim == 2 and bv.ndim == 2:
            ga = g @ bv.T if need_a else None
            gb = av.T @ g if need_b else None
        elif av.ndim == 2:
            ga = np.outer(g, bv) if need_a else None
            gb = av.T @ g if need_b else None
        elif bv.ndim == 2:
            ga = bv @ g if need_a else None
            gb = np.outer(av, g) if need_b else None
        else:
            ga, gb = g * bv, g * av
        return ga, gb

    return _make(av @ bv, (a, b), backward, "matmul")


def _transpose(a):
    return _make(a.value.T, (a,), lambda g: (g.T,), "transpose")


def _reshape(a, shape):
    old = a.value.shape
    return _make(a.value.reshape(*shape), (a,), lambda g: (g.reshape(old),), "reshape")


def _relu(a):
    mask = a.value > 0
    return _make(np.maximum(a.value, 0.0), (a,), lambda g: (g * mask,), "relu")


def _sigmoid(a):
    s = expit(a.value)
    return _make(s, (a,), lambda g: (g * s * (1.0 - s),), "sigmoid")


def _log(a):
    av = a.value
    return _make(np.log(av), (a,), lambda g: (g / av,), "log")


def _clip(a, lo, hi):
    av = a.value
    inside = (av >= lo) & (av <= hi)
    return _make(np.clip(av, lo, hi), (a,), lambda g: (g * inside,), "clip")


def _abs(a):
    sign = np.sign(a.value)  # sign(0) = 0 gives the 0 subgradient
    return _make(np.abs(a.value), (a,), lambda g: (g * sign,), "abs")


def _square(a):
    av = a.value
    return _make(av * av, (a,), lambda g: (2.0 * g * av,), "square")


def _sum(a, axis=None):
    shape = a.value.shape

    def backward(g):
        if axis is not None:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, shape).copy(),)

    return _make(a.value.sum(axis=axis), (a,), backward, "sum")


def _mean(a, axis=None):
    shape = a.value.shape
    count = a.value.size if axis is None else shape[axis]

    def backward(g):
        if axis is not None:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g / count, shape).copy(),)

    return _make(a.value.mean(axis=axis), (a,), backward, "mean")


_UFUNCS = {
    np.add: _add,
    np.subtract: _sub,
    np.multiply: _mul,
    np.matmul: _matmul,
    np.absolute: _abs,
    np.square: _square,
    np.log: _log,
    np.negative: lambda a: _mul(a, -1.0),
}


class Dual:
    """Value with a tangent, for forward-mode directional derivatives."""

    __slots__ = ("value", "tangent")
    __array_ufunc__ = None

    def __init__(self, value, tangent):
        self.value = np.asarray(value, dtype=np.float64)
        self.tangent = np.asarray(tangent, dtype=np.float64)
        if self.value.shape != self.tangent.shape:
            raise ValueError(f"tangent shape {self.tangent.shape} != value shape {self.value.shape}")

    shape = property(lambda self: self.value.shape)
    ndim = property(lambda self: self.value.ndim)

    def __len__(self):
        return len(self.value)

    @staticmethod
    def _split(x):
        if isinstance(x, Dual):
            return x.value, x.tangent
        x = np.asarray(x, dtype=np.float64)
        return x, np.zeros_like(x)

    def __add__(self, other):
        ov, ot = self._split(other)
        return Dual(self.value + ov, self.tangent + ot)

    __radd__ = __add__

    def __sub__(self, other):
        ov, ot = self._split(other)
        return Dual(self.value - ov, self.tangent - ot)

    def __rsub__(self, other):
        ov, ot = self._split(other)
        return Dual(ov - self.value, ot - self.tangent)

    def __mul__(self, other):
        ov, ot = self._split(other)
        return Dual(self.value * ov, self.tangent * ov + self.value * ot)

    __rmul__ = __mul__

    def __truediv__(self, other):
        if isinstance(other, Dual):
            raise UnsupportedPrimitiveError("division by a traced value is not a supported primitive")
        return self * (1.0 / np.asarray(other, dtype=np.float64))

    def __neg__(self):
        return Dual(-self.value, -self.tangent)

    def __matmul__(self, other):
        ov, ot = self._split(other)
        return Dual(self.value @ ov, self.tangent @ ov + self.value @ ot)

    def __rmatmul__(self, other):
        ov, ot = self._split(other)
        return Dual(ov @ self.value, ot @ self.value + ov @ self.tangent)

    def __pow__(self, p):
        if p == 2:
            return self.square()
        raise UnsupportedPrimitiveError("only squaring is supported")

    def __abs__(self):
        return self.abs()

    def relu(self):
        mask = self.value > 0
        return Dual(np.maximum(self.value, 0.0), self.tangent * mask)

    def sigmoid(self):
        s = expit(self.value)
        return Dual(s, self.tangent * s * (1.0 - s))

    def log(self):
        return Dual(np.log(self.value), self.tangent / self.value)

    def clip(self, lo, hi):
        inside = (self.value >= lo) & (self.value <= hi)
        return Dual(np.clip(self.value, lo, hi), self.tangent * inside)

    def abs(self):
        return Dual(np.abs(self.value), self.tangent * np.sign(self.value))

    def square(self):
        return Dual(self.value * self.value, 2.0 * self.value * self.tangent)

    def sum(self, axis=None):
        return Dual(self.value.sum(axis=axis), self.tangent.sum(axis=axis))

    def mean(self, axis=None):
        return Dual(self.value.mean(axis=axis), self.tangent.mean(axis=axis))

    def reshape(self, *shape):
        return Dual(self.value.reshape(*shape), self.tangent.reshape(*shape))


_TRACED = (Var, Dual)


def relu(x):
    return x.relu() if isinstance(x, _TRACED) else np.maximum(np.asarray(x, dtype=np.float64), 0.0)


def sigmoid(x):
    return x.sigmoid() if isinstance(x, _TRACED) else expit(np.asarray(x, dtype=np.float64))


def log(x):
    return x.log() if isinstance(x, _TRACED) else np.log(x)


def clip(x, lo, hi):
    return x.clip(lo, hi) if isinstance(x, _TRACED) else np.clip(x, lo, hi)


def absolute(x):
    return x.abs() if isinstance(x, _TRACED) else np.abs(x)


def square(x):
    return x.square() if isinstance(x, _TRACED) else np.square(x)


def mean(x, axis=None):
    return x.mean(axis) if isinstance(x, _TRACED) else np.mean(x, axis=axis)


def total(x, axis=None):
    return x.sum(axis) if isinstance(x, _TRACED) else np.sum(x, axis=axis)


def inner(a, b):
    return total(a * b)


def reshape(x, *shape):
    return x.reshape(*shape) if isinstance(x, _TRACED) else np.reshape(x, shape)


def value_of(x):
    return x.value if isinstance(x, _TRACED) else np.asarray(x)


def reverse_grad(fn, params):
    """Evaluate ``fn(*params)`` on a fresh tape and return ``(value, grads)``.

    ``fn`` must return a scalar built from supported primitives.
    """
    with Tape() as tape:
        watched = [tape.watch(p) for p in params]
        out = fn(*watched)
        if not isinstance(out, Var):
            raise TypeError("function output does not depend on any watched parameter")
        grads = tape.gradient(out, watched)
    return float(out.value), grads


def forward_jvp(fn, point, direction):
    """Exact directional derivative of ``fn`` at ``point`` along ``direction``."""
    point = np.asarray(point, dtype=np.float64)
    direction = np.asarray(direction, dtype=np.float64)
    if point.shape != direction.shape:
        raise ValueError(f"direction shape {direction.shape} does not match input shape {point.shape}")
    out = fn(Dual(point, direction))
    if not isinstance(out, Dual):
        return np.zeros_like(np.asarray(out, dtype=np.float64))
    tangent = out.tangent
    return float(tangent) if tangent.ndim == 0 else tangent


def finite_diff_check(fn, point, analytic_gradient, step=1e-6, floor=1e-4):
    """Worst-coordinate relative error between ``analytic_gradient`` and central differences.

    The per-coordinate denominator is ``max(|analytic|, |numeric|, floor)`` so
    coordinates whose true derivative is ~0 do not report spurious noise.
    """
    if step <= 0:
        raise ValueError("step must be positive")
    x = np.array(point, dtype=np.float64)
    g = np.asarray(analytic_gradient, dtype=np.float64).reshape(x.shape)
    flat = x.reshape(-1)
    numeric = np.empty(flat.size)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + step
        fp = float(fn(x))
        flat[i] = orig - step
        fm = float(fn(x))
        flat[i] = orig
        numeric[i] = (fp - fm) / (2.0 * step)
    analytic = g.reshape(-1)
    denom = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), floor)
    return float(np.max(np.abs(analytic - numeric) / denom)) if flat.size else 0.0
