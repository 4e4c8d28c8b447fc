"""Reverse-mode autodiff over numpy arrays with graph-resident tangents.

Every :class:`Node` may carry a ``tangent`` which is itself a ``Node`` built
from ordinary graph ops.  A directional derivative computed with :func:`jvp`
is therefore an ordinary differentiable value: a loss assembled from it can be
passed to :func:`backward` (forward-over-reverse).

Tangent rules run with tangent propagation switched off, so the tangent of a
tangent is never formed.  ``None`` stands for an all-zero tangent.
"""
from __future__ import annotations

import contextlib
import threading
from typing import Callable, Iterable, Mapping, Sequence

import numpy as np

from .errors import NonFiniteError, ShapeError, UnsupportedOpError

DEFAULT_DTYPE = np.float64


class _Mode(threading.local):
    # per-thread, so concurrent evaluations cannot flip each other's mode
    grad = True
    tangent = True


_mode = _Mode()


@contextlib.contextmanager
def no_grad():
    """Build values (and tangents) without recording a reverse graph."""
    prev = _mode.grad
    _mode.grad = False
    try:
        yield
    finally:
        _mode.grad = prev


@contextlib.contextmanager
def _primal_only():
    prev = _mode.tangent
    _mode.tangent = False
    try:
        yield
    finally:
        _mode.tangent = prev


class Node:
    """A value in the computation graph."""

    __slots__ = ("value", "tangent", "parents", "vjp", "requires_grad", "op", "__weakref__")
    __array_ufunc__ = None  # make ndarray <op> Node defer to Node's reflected op

    def __init__(self, value, requires_grad=False, op="leaf"):
        self.value = value
        self.tangent = None
        self.parents = ()
        self.vjp = None
        self.requires_grad = requires_grad
        self.op = op

    @property
    def shape(self):
        return self.value.shape

    @property
    def ndim(self):
        return self.value.ndim

    @property
    def dtype(self):
        return self.value.dtype

    def __repr__(self):
        t = "" if self.tangent is None else ", tangent"
        return f"Node({self.op}, shape={self.shape}{t})"

    def __len__(self):
        return self.value.shape[0]

    __add__ = lambda self, o: add(self, o)
    __radd__ = lambda self, o: add(o, self)
    __sub__ = lambda self, o: sub(self, o)
    __rsub__ = lambda self, o: sub(o, self)
    __mul__ = lambda self, o: mul(self, o)
    __rmul__ = lambda self, o: mul(o, self)
    __truediv__ = lambda self, o: div(self, o)
    __rtruediv__ = lambda self, o: div(o, self)
    __matmul__ = lambda self, o: matmul(self, o)
    __rmatmul__ = lambda self, o: matmul(o, self)
    __neg__ = lambda self: neg(self)
    __getitem__ = lambda self, idx: getitem(self, idx)

    def __pow__(self, p):
        return power(self, p)

    def sum(self, axis=None, keepdims=False):
        return sum_(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis, keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return transpose(self, axes or None)

    @property
    def T(self):
        return transpose(self, None)


def lift(x, dtype=None) -> Node:
    """Wrap arrays and scalars as constant nodes; pass nodes through."""
    if isinstance(x, Node):
        return x
    arr = np.asarray(x, dtype=dtype)
    if arr.dtype.kind in "iub" and dtype is None:
        arr = arr.astype(DEFAULT_DTYPE)
    return Node(arr)


def param(x) -> Node:
    """A leaf that receives gradients."""
    return Node(np.asarray(x, dtype=DEFAULT_DTYPE) if not isinstance(x, np.ndarray) else x, True)


def record(op: str, value, parents: Sequence[Node], vjp: Callable) -> Node:
    """Create an op output; keeps the reverse edge only if some parent needs it."""
    out = Node(value, op=op)
    if _mode.grad:
        for p in parents:
            if p.requires_grad:
                out.requires_grad = True
                out.parents = tuple(parents)
                out.vjp = vjp
                break
    return out


def _wants_tangent(*nodes) -> bool:
    if not _mode.tangent:
        return False
    for n in nodes:
        if n.tangent is not None:
            return True
    return False


def attach_tangent(out: Node, rule: Callable[[], Node | None], *inputs: Node) -> Node:
    """Run ``rule`` (built from graph ops) to set ``out.tangent`` if any input has one."""
    if _wants_tangent(*inputs):
        with _primal_only():
            t = rule()
        if t is not None and t.shape != out.shape:
            t = broadcast_to(t, out.shape)
        out.tangent = t
    return out


def _tadd(a, b):
    if a is None:
        return b
    if b is None:
        return a
    return add(a, b)


def _unbroadcast(g, shape):
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


# -- elementwise binary -------------------------------------------------------

def add(a, b) -> Node:
    a, b = lift(a), lift(b)
    sa, sb = a.shape, b.shape
    ra, rb = a.requires_grad, b.requires_grad
    out = record("add", a.value + b.value, (a, b),
                 lambda g: (_unbroadcast(g, sa) if ra else None, _unbroadcast(g, sb) if rb else None))
    return attach_tangent(out, lambda: _tadd(a.tangent, b.tangent), a, b)


def sub(a, b) -> Node:
    a, b = lift(a), lift(b)
    sa, sb = a.shape, b.shape
    ra, rb = a.requires_grad, b.requires_grad
    out = record("sub", a.value - b.value, (a, b),
                 lambda g: (_unbroadcast(g, sa) if ra else None, _unbroadcast(-g, sb) if rb else None))
    return attach_tangent(
        out, lambda: _tadd(a.tangent, None if b.tangent is None else neg(b.tangent)), a, b)


def mul(a, b) -> Node:
    a, b = lift(a), lift(b)
    av, bv = a.value, b.value
    ra, rb = a.requires_grad, b.requires_grad
    out = record("mul", av * bv, (a, b),
                 lambda g: (_unbroadcast(g * bv, av.shape) if ra else None,
                            _unbroadcast(g * av, bv.shape) if rb else None))
    return attach_tangent(
        out,
        lambda: _tadd(None if a.tangent is None else mul(a.tangent, b),
                      None if b.tangent is None else mul(a, b.tangent)),
        a, b)


def div(a, b) -> Node:
    a, b = lift(a), lift(b)
    av, bv = a.value, b.value
    val = av / bv
    out = record("div", val, (a, b),
                 lambda g: (_unbroadcast(g / bv, av.shape),
                            _unbroadcast(-g * val / bv, bv.shape)))

    def rule():
        t = None if a.tangent is None else div(a.tangent, b)
        if b.tangent is not None:
            t = _tadd(t, neg(div(mul(out, b.tangent), b)))
        return t

    return attach_tangent(out, rule, a, b)


def neg(a) -> Node:
    a = lift(a)
    out = record("neg", -a.value, (a,), lambda g: (-g,))
    return attach_tangent(out, lambda: neg(a.tangent), a)


# -- elementwise unary --------------------------------------------------------

def power(a, p: float) -> Node:
    a = lift(a)
    av = a.value
    out = record("power", av ** p, (a,), lambda g: (g * p * av ** (p - 1),))
    return attach_tangent(out, lambda: mul(a.tangent, mul(power(a, p - 1), p)), a)


def exp(a) -> Node:
    a = lift(a)
    val = np.exp(a.value)
    out = record("exp", val, (a,), lambda g: (g * val,))
    return attach_tangent(out, lambda: mul(a.tangent, out), a)


def log(a) -> Node:
    a = lift(a)
    av = a.value
    out = record("log", np.log(av), (a,), lambda g: (g / av,))
    return attach_tangent(out, lambda: div(a.tangent, a), a)


def sqrt(a) -> Node:
    a = lift(a)
    val = np.sqrt(a.value)
    out = record("sqrt", val, (a,), lambda g: (g * 0.5 / val,))
    return attach_tangent(out, lambda: div(mul(a.tangent, 0.5), out), a)


def sin(a) -> Node:
    a = lift(a)
    av = a.value
    out = record("sin", np.sin(av), (a,), lambda g: (g * np.cos(av),))
    return attach_tangent(out, lambda: mul(a.tangent, cos(a)), a)


def cos(a) -> Node:
    a = lift(a)
    av = a.value
    out = record("cos", np.cos(av), (a,), lambda g: (-g * np.sin(av),))
    return attach_tangent(out, lambda: neg(mul(a.tangent, sin(a))), a)


def tanh(a) -> Node:
    a = lift(a)
    val = np.tanh(a.value)
    out = record("tanh", val, (a,), lambda g: (g * (1.0 - val * val),))
    return attach_tangent(out, lambda: mul(a.tangent, sub(1.0, mul(out, out))), a)


def sigmoid(a) -> Node:
    a = lift(a)
    val = 0.5 * (1.0 + np.tanh(0.5 * a.value))
    out = record("sigmoid", val, (a,), lambda g: (g * val * (1.0 - val),))
    return attach_tangent(out, lambda: mul(a.tangent, mul(out, sub(1.0, out))), a)


def silu(a) -> Node:
    a = lift(a)
    return mul(a, sigmoid(a))


def _row_mean(v):
    # mean over the last axis as a matrix-vector product; much faster than a
    # ufunc reduction when the axis is short and the batch is long
    d = v.shape[-1]
    return (v @ np.full(d, 1.0 / d))[..., None]


def _rms_factor(xv, eps):
    return 1.0 / np.sqrt(_row_mean(xv * xv) + eps)


def rms_normalize(a, eps) -> Node:
    """``x / sqrt(mean(x**2, -1) + eps)`` as one primitive.

    Backward: ``r (g - y mean(g y))``.  The tangent is the primitive
    :func:`rms_normalize_tangent`, itself reverse-differentiable.
    """
    a = lift(a)
    xv = a.value
    r = _rms_factor(xv, eps)
    y = xv * r
    out = record("rms_normalize", y, (a,),
                 lambda g: (r * (g - y * _row_mean(g * y)),))
    return attach_tangent(out, lambda: None if a.tangent is None else rms_normalize_tangent(a, a.tangent, eps), a)


def rms_normalize_tangent(a, a_dot, eps) -> Node:
    """Directional derivative of :func:`rms_normalize` at ``a`` along ``a_dot``.

    With ``r = (|x|^2/d + eps)^-1/2`` and ``c = x.xd/d`` this is
    ``r xd - r^3 c x``.
    """
    a, a_dot = lift(a), lift(a_dot)
    x, xd = a.value, a_dot.value
    r = _rms_factor(x, eps)
    r3 = r * r * r
    c = _row_mean(x * xd)
    val = r * xd - r3 * c * x
    ra, rd = a.requires_grad, a_dot.requires_grad

    def vjp(g):
        gx = gd = None
        gdot = _row_mean(g * xd)
        gx_ = _row_mean(g * x)
        if ra:
            gx = (3.0 * r3 * r * r * c * gx_ - r3 * gdot) * x - r3 * c * g - r3 * gx_ * xd
        if rd:
            gd = r * g - r3 * gx_ * x
        return gx, gd

    return record("rms_normalize_tangent", val, (a, a_dot), vjp)


# -- linear algebra and reductions -------------------------------------------

def matmul(a, b) -> Node:
    a, b = lift(a), lift(b)
    av, bv = a.value, b.value
    if av.ndim < 2 or bv.ndim < 2:
        raise ShapeError(f"matmul needs rank >= 2 operands, got {av.shape} @ {bv.shape}")
    if av.shape[-1] != bv.shape[-2]:
        raise ShapeError(f"matmul inner dims differ: {av.shape} @ {bv.shape}")

    ra, rb = a.requires_grad, b.requires_grad

    def vjp(g):
        ga = gb = None
        if ra:
            ga = _unbroadcast(g @ np.swapaxes(bv, -1, -2), av.shape)
        if rb:
            if bv.ndim == 2:
                # batched activations times a shared weight: one flat GEMM
                k, n = bv.shape
                gb = av.reshape(-1, k).T @ g.reshape(-1, n)
            else:
                gb = _unbroadcast(np.swapaxes(av, -1, -2) @ g, bv.shape)
        return ga, gb

    out = record("matmul", av @ bv, (a, b), vjp)
    return attach_tangent(
        out,
        lambda: _tadd(None if a.tangent is None else matmul(a.tangent, b),
                      None if b.tangent is None else matmul(a, b.tangent)),
        a, b)


def _norm_axis(axis, ndim):
    if axis is None:
        return tuple(range(ndim))
    if isinstance(axis, int):
        axis = (axis,)
    return tuple(sorted(ax % ndim for ax in axis))


def sum_(a, axis=None, keepdims=False) -> Node:
    a = lift(a)
    shape = a.shape
    axes = _norm_axis(axis, a.ndim)

    def vjp(g):
        if not keepdims:
            g = np.expand_dims(g, axes)
        return (np.broadcast_to(g, shape),)

    out = record("sum", a.value.sum(axis=axes, keepdims=keepdims), (a,), vjp)
    return attach_tangent(out, lambda: sum_(a.tangent, axes, keepdims), a)


def mean(a, axis=None, keepdims=False) -> Node:
    a = lift(a)
    axes = _norm_axis(axis, a.ndim)
    count = 1
    for ax in axes:
        count *= a.shape[ax]
    return mul(sum_(a, axes, keepdims), 1.0 / count)


def reshape(a, shape) -> Node:
    a = lift(a)
    orig = a.shape
    out = record("reshape", a.value.reshape(shape), (a,), lambda g: (g.reshape(orig),))
    return attach_tangent(out, lambda: reshape(a.tangent, shape), a)


def transpose(a, axes=None) -> Node:
    a = lift(a)
    if axes is None:
        axes = tuple(reversed(range(a.ndim)))
    inv = tuple(np.argsort(axes))
    out = record("transpose", a.value.transpose(axes), (a,), lambda g: (g.transpose(inv),))
    return attach_tangent(out, lambda: transpose(a.tangent, axes), a)


def broadcast_to(a, shape) -> Node:
    a = lift(a)
    orig = a.shape
    out = record("broadcast_to", np.broadcast_to(a.value, shape), (a,),
                 lambda g: (_unbroadcast(g, orig),))
    return attach_tangent(out, lambda: broadcast_to(a.tangent, shape), a)


def getitem(a, idx) -> Node:
    """Basic (slice/int/None/Ellipsis) indexing."""
    a = lift(a)
    shape, dtype = a.shape, a.dtype

    def vjp(g):
        full = np.zeros(shape, dtype=dtype)
        full[idx] = g
        return (full,)

    out = record("getitem", a.value[idx], (a,), vjp)
    return attach_tangent(out, lambda: getitem(a.tangent, idx), a)


def take_rows(table, index) -> Node:
    """``table[index]`` for an integer index array (embedding lookup)."""
    table = lift(table)
    index = np.asarray(index)
    shape = table.shape

    def vjp(g):
        full = np.zeros(shape, dtype=g.dtype)
        np.add.at(full, index, g)
        return (full,)

    out = record("take_rows", table.value[index], (table,), vjp)
    return attach_tangent(out, lambda: take_rows(table.tangent, index), table)


def concat(nodes: Sequence, axis=0) -> Node:
    nodes = [lift(n) for n in nodes]
    values = [n.value for n in nodes]
    ax = axis % values[0].ndim
    bounds = np.cumsum([v.shape[ax] for v in values])[:-1]

    def vjp(g):
        return tuple(np.split(g, bounds, axis=ax))

    out = record("concat", np.concatenate(values, axis=ax), nodes, vjp)

    def rule():
        parts = [n.tangent if n.tangent is not None else Node(np.zeros_like(n.value))
                 for n in nodes]
        return concat(parts, ax)

    return attach_tangent(out, rule, *nodes)


def stop_grad(a) -> Node:
    """Constant with the same value.  Blocks both the gradient and the tangent."""
    a = lift(a)
    return Node(a.value, op="stop_grad")


def defop(name: str, forward: Callable, vjp_rule: Callable, jvp_rule: Callable | None = None):
    """Register a custom op.

    ``forward(*arrays) -> array``; ``vjp_rule(g, *arrays) -> tuple of arrays``;
    ``jvp_rule(*nodes) -> Node`` builds the tangent from graph ops and may read
    ``node.tangent``.  Without ``jvp_rule`` the op refuses tangent inputs.
    """

    def op(*inputs):
        nodes = [lift(x) for x in inputs]
        arrays = [n.value for n in nodes]
        out = record(name, forward(*arrays), nodes, lambda g: vjp_rule(g, *arrays))
        if _wants_tangent(*nodes):
            if jvp_rule is None:
                raise UnsupportedOpError(name)
            attach_tangent(out, lambda: jvp_rule(*nodes), *nodes)
        return out

    op.__name__ = name
    return op


# -- drivers ------------------------------------------------------------------

def jvp(f: Callable, inputs: Sequence, tangents: Sequence):
    """Evaluate ``f(*inputs)`` and its directional derivative along ``tangents``.

    Returns ``(primal, tangent_out)``, both graph nodes.  ``tangent_out`` stays
    on the reverse graph, so gradients can flow through it.
    """
    if len(inputs) != len(tangents):
        raise ShapeError(f"jvp got {len(inputs)} inputs but {len(tangents)} tangents")
    wrapped = []
    for x, t in zip(inputs, tangents):
        x = lift(x)
        node = Node(x.value, op="jvp_input")
        if x.requires_grad and _mode.grad:
            node.requires_grad = True
            node.parents = (x,)
            node.vjp = lambda g: (g,)
        if t is not None:
            t = lift(t, dtype=x.dtype)
            if np.ndim(t.value) == 0 and x.shape != ():
                t = Node(np.full(x.shape, t.value, dtype=x.dtype))
            if t.shape != x.shape:
                raise ShapeError(f"tangent shape {t.shape} does not match input shape {x.shape}")
            node.tangent = t
        wrapped.append(node)
    prev = _mode.tangent
    _mode.tangent = True
    try:
        out = f(*wrapped)
    finally:
        _mode.tangent = prev
    if not isinstance(out, Node):
        raise TypeError("jvp: f must return a Node")
    tangent = out.tangent if out.tangent is not None else Node(np.zeros_like(out.value))
    primal = Node(out.value, op="jvp_primal")
    if out.requires_grad:
        primal.requires_grad, primal.parents, primal.vjp = True, (out,), lambda g: (g,)
    return primal, tangent


def _toposort(root: Node):
    order, seen = [], set()
    stack = [(root, False)]
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


def grad(loss: Node, wrt: Sequence[Node], check_finite=False):
    """Gradients of scalar ``loss`` w.r.t. ``wrt``; unreached nodes get zeros."""
    if loss.value.size != 1:
        raise ShapeError(f"backward needs a scalar loss, got shape {loss.shape}")
    grads = {}
    if loss.requires_grad:
        grads[id(loss)] = np.ones_like(loss.value)
        for node in reversed(_toposort(loss)):
            g = grads.get(id(node))
            if g is None or node.vjp is None:
                continue
            for p, gp in zip(node.parents, node.vjp(g)):
                if gp is None or not p.requires_grad:
                    continue
                prev = grads.get(id(p))
                grads[id(p)] = gp if prev is None else prev + gp
    out = []
    for n in wrt:
        g = grads.get(id(n))
        g = np.zeros_like(n.value) if g is None else np.array(g, dtype=n.dtype).reshape(n.shape)
        if check_finite and not np.all(np.isfinite(g)):
            raise NonFiniteError("gradient")
        out.append(g)
    return out


def backward(loss: Node, params: Mapping[str, Node]) -> dict:
    """Gradient map aligned with ``params`` (same keys, same order)."""
    names = list(params)
    gs = grad(loss, [params[k] for k in names])
    return dict(zip(names, gs))


def value(x):
    return x.value if isinstance(x, Node) else np.asarray(x)


def as_params(arrays: Mapping[str, np.ndarray], requires_grad=True) -> dict:
    return {k: Node(v, requires_grad) for k, v in arrays.items()}


def constants(arrays: Mapping[str, np.ndarray]) -> dict:
    return {k: Node(value(v)) for k, v in arrays.items()}


def zeros_like(x) -> Node:
    return Node(np.zeros_like(value(x)))


__all__ = [
    "Node", "lift", "param", "record", "attach_tangent", "no_grad", "add", "sub", "mul",
    "div", "neg", "power", "exp", "log", "sqrt", "sin", "cos", "tanh", "sigmoid", "silu",
    "matmul", "sum_", "mean", "reshape", "transpose", "broadcast_to", "getitem",
    "take_rows", "concat", "stop_grad", "defop", "jvp", "grad", "backward", "value",
    "as_params", "constants", "rms_normalize", "rms_normalize_tangent",
]
