"""Small reverse-mode autodiff over numpy arrays of rank <= 2.

Every op builds a :class:`Node` holding its value, its parents and a backward
closure.  Nodes get a global creation index, so reverse creation order is a
valid reverse topological order and accumulation is deterministic.

Ops that have no useful derivative (spike firing) are added with
:func:`register_custom_op`, which lets the caller supply the backward rule.
"""
from __future__ import annotations

import itertools
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

_counter = itertools.count()


class ContractViolation(ValueError):
    """Raised when an op is called outside its preconditions."""


class ShapeError(ContractViolation):
    pass


class ArityError(ContractViolation):
    pass


class NumericError(ArithmeticError):
    """A forward or backward value became non-finite."""

    def __init__(self, op: str, detail: str = ""):
        self.op = op
        msg = f"non-finite value in op '{op}'"
        super().__init__(f"{msg}: {detail}" if detail else msg)


class InconclusiveGradCheck(RuntimeError):
    pass


class Node:
    __slots__ = ("value", "parents", "backward_fn", "requires_grad", "index", "op", "name", "grad")

    def __init__(self, value, parents=(), backward_fn=None, requires_grad=False, op="leaf", name=None):
        value = np.asarray(value)
        if value.ndim > 2:
            raise ShapeError(f"rank {value.ndim} > 2 not supported (op '{op}')")
        if not np.issubdtype(value.dtype, np.floating):
            value = value.astype(np.float64)
        self.value = value
        self.parents = tuple(parents)
        self.backward_fn = backward_fn
        self.requires_grad = requires_grad
        self.index = next(_counter)
        self.op = op
        self.name = name
        self.grad = None

    @property
    def shape(self):
        return self.value.shape

    @property
    def dtype(self):
        return self.value.dtype

    def __repr__(self):
        label = self.name or self.op
        return f"Node({label}, shape={self.shape}, index={self.index})"

    # operator sugar
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


def leaf(value, name=None, requires_grad=True, dtype=None) -> Node:
    """A differentiable input (parameter)."""
    arr = np.array(value, dtype=dtype) if dtype is not None else np.array(value)
    return Node(arr, requires_grad=requires_grad, name=name)


def const(value, dtype=None) -> Node:
    arr = np.asarray(value, dtype=dtype) if dtype is not None else np.asarray(value)
    return Node(arr, requires_grad=False, op="const")


def as_node(x, like: Node | None = None) -> Node:
    if isinstance(x, Node):
        return x
    dtype = like.dtype if like is not None else None
    return const(x, dtype=dtype)


def _check_finite(op: str, out: np.ndarray) -> None:
    # the sum is a cheap screen; only scan elementwise when it trips
    with np.errstate(over="ignore", invalid="ignore"):
        s = out.sum()
    if not np.isfinite(s) and not np.isfinite(out).all():
        raise NumericError(op, f"shape {out.shape}")


def _make(op: str, value, parents: Sequence[Node], backward_fn) -> Node:
    _check_finite(op, value)
    needs = any(p.requires_grad for p in parents)
    return Node(value, parents, backward_fn if needs else None, needs, op)


def _binary_shapes(op: str, a: Node, b: Node) -> None:
    sa, sb = a.shape, b.shape
    if sa == sb or sa == () or sb == ():
        return
    raise ShapeError(f"{op}: incompatible shapes {sa} and {sb}")


def _reduce_to(g: np.ndarray, shape: tuple) -> np.ndarray:
    if g.shape == shape:
        return g
    if shape == ():
        return np.asarray(g.sum(), dtype=g.dtype)
    return g.sum(axis=0)


# ---------------------------------------------------------------- elementwise


def add(a, b) -> Node:
    a, b = _pair(a, b)
    _binary_shapes("add", a, b)

    def bw(g):
        return _reduce_to(g, a.shape), _reduce_to(g, b.shape)

    return _make("add", a.value + b.value, (a, b), bw)


def sub(a, b) -> Node:
    a, b = _pair(a, b)
    _binary_shapes("sub", a, b)

    def bw(g):
        return _reduce_to(g, a.shape), _reduce_to(-g, b.shape)

    return _make("sub", a.value - b.value, (a, b), bw)


def mul(a, b) -> Node:
    a, b = _pair(a, b)
    _binary_shapes("mul", a, b)
    av, bv = a.value, b.value

    def bw(g):
        return _reduce_to(g * bv, a.shape), _reduce_to(g * av, b.shape)

    return _make("mul", av * bv, (a, b), bw)


def div(a, b) -> Node:
    a, b = _pair(a, b)
    _binary_shapes("div", a, b)
    av, bv = a.value, b.value
    if np.any(bv == 0):
        raise ContractViolation("div: zero denominator")
    out = av / bv

    def bw(g):
        return _reduce_to(g / bv, a.shape), _reduce_to(-g * out / bv, b.shape)

    return _make("div", out, (a, b), bw)


def neg(a: Node) -> Node:
    return _make("neg", -a.value, (a,), lambda g: (-g,))


def exp(a: Node) -> Node:
    with np.errstate(over="ignore"):
        out = np.exp(a.value)
    return _make("exp", out, (a,), lambda g: (g * out,))


def log(a: Node) -> Node:
    if np.any(a.value <= 0):
        raise ContractViolation("log: non-positive argument")
    av = a.value
    return _make("log", np.log(av), (a,), lambda g: (g / av,))


def tanh(a: Node) -> Node:
    out = np.tanh(a.value)
    return _make("tanh", out, (a,), lambda g: (g * (1 - out * out),))


def sigmoid(a: Node) -> Node:
    out = 0.5 * (np.tanh(0.5 * a.value) + 1)
    return _make("sigmoid", out, (a,), lambda g: (g * out * (1 - out),))


def relu(a: Node) -> Node:
    out = np.maximum(a.value, 0)
    return _make("relu", out, (a,), lambda g: (g * (out > 0),))


def maximum(a: Node, c: float) -> Node:
    """max(a, c) against a constant; ties send the gradient to ``a``."""
    mask = a.value >= c
    out = np.where(mask, a.value, c).astype(a.dtype)
    return _make("maximum", out, (a,), lambda g: (g * mask,))


def abs_(a: Node) -> Node:
    sign = np.sign(a.value)
    return _make("abs", np.abs(a.value), (a,), lambda g: (g * sign,))


def square(a: Node) -> Node:
    av = a.value
    return _make("square", av * av, (a,), lambda g: (2 * g * av,))


def sqrt(a: Node) -> Node:
    if np.any(a.value < 0):
        raise ContractViolation("sqrt: negative argument")
    out = np.sqrt(a.value)
    return _make("sqrt", out, (a,), lambda g: (g * 0.5 / out,))


def sin(a: Node) -> Node:
    av = a.value
    return _make("sin", np.sin(av), (a,), lambda g: (g * np.cos(av),))


def cos(a: Node) -> Node:
    av = a.value
    return _make("cos", np.cos(av), (a,), lambda g: (-g * np.sin(av),))


# ----------------------------------------------------------------- structural


def matmul(a: Node, b: Node) -> Node:
    """Matrix-matrix or matrix-vector product."""
    a, b = _pair(a, b)
    if a.value.ndim != 2 or b.value.ndim not in (1, 2) or a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul: incompatible shapes {a.shape} and {b.shape}")
    av, bv = a.value, b.value

    def bw(g):
        ga = None
        if a.requires_grad:
            ga = np.outer(g, bv) if bv.ndim == 1 else g @ bv.T
        return ga, (av.T @ g if b.requires_grad else None)

    return _make("matmul", av @ bv, (a, b), bw)


def dot(a: Node, b: Node) -> Node:
    a, b = _pair(a, b)
    if a.value.ndim != 1 or a.shape != b.shape:
        raise ShapeError(f"dot: needs equal-length vectors, got {a.shape} and {b.shape}")
    av, bv = a.value, b.value
    return _make("dot", np.asarray(av @ bv), (a, b), lambda g: (g * bv, g * av))


def add_bias(x: Node, b: Node) -> Node:
    """(P, H) + (H,) row broadcast, the only non-scalar broadcast allowed."""
    x, b = _pair(x, b)
    if x.value.ndim != 2 or b.value.ndim != 1 or x.shape[1] != b.shape[0]:
        raise ShapeError(f"add_bias: incompatible shapes {x.shape} and {b.shape}")
    return _make("add_bias", x.value + b.value, (x, b),
                 lambda g: (g, g.sum(axis=0) if b.requires_grad else None))


def broadcast(a: Node, shape: tuple) -> Node:
    """Broadcast a scalar node to ``shape``."""
    if a.shape not in ((), (1,)):
        raise ShapeError(f"broadcast: only scalars broadcast, got {a.shape}")
    src = a.shape
    out = np.broadcast_to(a.value.reshape(()), shape).copy()
    return _make("broadcast", out, (a,), lambda g: (np.asarray(g.sum(), dtype=g.dtype).reshape(src),))


def sum_(a: Node, axis: int | None = None) -> Node:
    shape = a.shape
    out = np.asarray(a.value.sum(axis=axis))

    def bw(g):
        if axis is None:
            return (np.broadcast_to(g, shape).copy(),)
        return (np.broadcast_to(np.expand_dims(g, axis), shape).copy(),)

    return _make("sum", out, (a,), bw)


def mean(a: Node, axis: int | None = None) -> Node:
    n = a.value.size if axis is None else a.shape[axis]
    return mul(sum_(a, axis), 1.0 / n)


def reshape(a: Node, shape: tuple) -> Node:
    src = a.shape
    return _make("reshape", a.value.reshape(shape), (a,), lambda g: (g.reshape(src),))


def cols(a: Node, start: int, stop: int | None = None) -> Node:
    """Column slice ``a[:, start:stop]``; a single index keeps rank 1."""
    if a.value.ndim != 2:
        raise ShapeError("cols: needs a matrix")
    single = stop is None
    sl = start if single else slice(start, stop)
    out = a.value[:, sl]
    shape, dtype = a.shape, a.dtype

    def bw(g):
        full = np.zeros(shape, dtype=dtype)
        full[:, sl] = g
        return (full,)

    return _make("cols", out, (a,), bw)


def rows(a: Node, start: int, stop: int) -> Node:
    """Row slice ``a[start:stop]``."""
    shape, dtype = a.shape, a.dtype

    def bw(g):
        full = np.zeros(shape, dtype=dtype)
        full[start:stop] = g
        return (full,)

    return _make("rows", a.value[start:stop], (a,), bw)


def concat_cols(parts: Sequence[Node]) -> Node:
    parts = [as_node(p) for p in parts]
    mats = [p.value if p.value.ndim == 2 else p.value[:, None] for p in parts]
    widths = [m.shape[1] for m in mats]
    if len({m.shape[0] for m in mats}) != 1:
        raise ShapeError("concat_cols: row counts differ")
    bounds = np.cumsum([0] + widths)

    def bw(g):
        out = []
        for p, lo, hi in zip(parts, bounds[:-1], bounds[1:]):
            piece = g[:, lo:hi]
            out.append(piece if p.value.ndim == 2 else piece[:, 0])
        return tuple(out)

    return _make("concat_cols", np.concatenate(mats, axis=1), parts, bw)


def exclusive_cumsum(a: Node) -> Node:
    """Row-wise exclusive prefix sum along axis 1 (transmittance exponents)."""
    if a.value.ndim != 2:
        raise ShapeError("exclusive_cumsum: needs a matrix")
    av = a.value
    out = np.zeros_like(av)
    np.cumsum(av[:, :-1], axis=1, out=out[:, 1:])

    def bw(g):
        # d out_j / d a_i = 1 for i < j  ->  reverse inclusive sum shifted by one
        rev = np.cumsum(g[:, ::-1], axis=1)[:, ::-1]
        res = np.zeros_like(g)
        res[:, :-1] = rev[:, 1:]
        return (res,)

    return _make("exclusive_cumsum", out, (a,), bw)


def _pair(a, b):
    if isinstance(a, Node) and not isinstance(b, Node):
        return a, const(b, dtype=a.dtype)
    if isinstance(b, Node) and not isinstance(a, Node):
        return const(a, dtype=b.dtype), b
    if not isinstance(a, Node):
        return const(a), const(b)
    return a, b


# ------------------------------------------------------------------ custom ops

_CUSTOM_OPS: dict[str, "CustomOp"] = {}


@dataclass
class CustomOp:
    """An op whose backward rule is supplied by the caller.

    ``forward(*values, **kw)`` returns ``(out, ctx)``; ``backward(ctx, g)``
    returns one partial per input (``None`` for a non-differentiable input).
    """

    name: str
    forward: Callable
    backward: Callable
    arity: int
    calls: int = field(default=0, repr=False)

    def __call__(self, *inputs, **kwargs) -> Node:
        if len(inputs) != self.arity:
            raise ArityError(f"{self.name}: expected {self.arity} inputs, got {len(inputs)}")
        nodes = [as_node(x) for x in inputs]
        out, ctx = self.forward(*[n.value for n in nodes], **kwargs)

        def bw(g):
            self.calls += 1
            grads = self.backward(ctx, g)
            if not isinstance(grads, tuple) or len(grads) != self.arity:
                got = len(grads) if isinstance(grads, tuple) else 1
                raise ArityError(f"{self.name}: backward returned {got} partials for {self.arity} inputs")
            return grads

        return _make(self.name, np.asarray(out), nodes, bw)


def register_custom_op(name: str, forward: Callable, backward: Callable, arity: int) -> CustomOp:
    if arity < 1:
        raise ArityError("custom op needs at least one input")
    op = CustomOp(name, forward, backward, arity)
    _CUSTOM_OPS[name] = op
    return op


def get_custom_op(name: str) -> CustomOp:
    return _CUSTOM_OPS[name]


# ------------------------------------------------------------------- backward


def _reachable(root: Node) -> list[Node]:
    seen = {id(root): root}
    stack = [root]
    while stack:
        n = stack.pop()
        for p in n.parents:
            if p.requires_grad and id(p) not in seen:
                seen[id(p)] = p
                stack.append(p)
    return sorted(seen.values(), key=lambda n: n.index, reverse=True)


def backward(root: Node, wrt: Sequence[Node] = ()) -> dict[Node, np.ndarray]:
    """Accumulate d(root)/d(node) for every reachable differentiable leaf.

    Returns a mapping leaf -> gradient (same shape as the leaf value) and also
    stores each gradient on ``leaf.grad``.  Leaves listed in ``wrt`` that the
    root does not depend on get zeros.  The graph itself is not mutated, so
    running this twice gives bit-identical results.
    """
    if root.value.size != 1:
        raise ContractViolation(f"backward needs a scalar root, got shape {root.shape}")
    if not root.requires_grad:
        return _fill_missing({}, wrt)
    order = _reachable(root)
    grads: dict[int, np.ndarray] = {id(root): np.ones_like(root.value)}
    leaves: dict[Node, np.ndarray] = {}
    for node in order:
        g = grads.pop(id(node), None)
        if node.backward_fn is None:
            if g is None:
                g = np.zeros_like(node.value)
            if not np.isfinite(g).all():
                raise NumericError(f"grad of {node.name or node.op}")
            leaves[node] = g
            continue
        if g is None:
            continue
        partials = node.backward_fn(g)
        for parent, pg in zip(node.parents, partials):
            if pg is None or not parent.requires_grad:
                continue
            pg = np.asarray(pg, dtype=parent.dtype)
            if pg.shape != parent.shape:
                pg = pg.reshape(parent.shape)
            prev = grads.get(id(parent))
            grads[id(parent)] = pg if prev is None else prev + pg
    for n, g in leaves.items():
        n.grad = g
    return _fill_missing(leaves, wrt)


def _fill_missing(grads: dict, wrt: Sequence[Node]) -> dict:
    for n in wrt:
        if n not in grads:
            grads[n] = np.zeros_like(n.value)
            n.grad = grads[n]
    return grads


# ----------------------------------------------------------------- grad check


@dataclass
class GradReport:
    max_rel_err: float
    max_abs_err: float
    worst_input_index: int
    passed: bool
    excluded: tuple[int, ...] = ()
    n_checked: int = 0


def grad_check(
    f: Callable[[Node], Node],
    x,
    h: float = 1e-5,
    tol: float = 1e-6,
    exclusion: Callable[[np.ndarray, int, float], bool] | None = None,
    abs_floor: float = 1e-9,
    fd_dtype=np.longdouble,
) -> GradReport:
    """Compare reverse-mode gradients of scalar ``f`` against finite differences.

    The reference is the fourth-order central stencil on x +- h and x +- 2h.

    ``exclusion(x, i, reach)`` marks coordinates whose stencil (reaching
    ``reach = 2h`` either side) would straddle a discontinuity such as a
    firing boundary; they are skipped and listed in the report.  The
    differences are evaluated in ``fd_dtype`` (extended precision by default)
    so that cancellation between stencil points does not swamp small
    gradient components.
    """
    if h <= 0:
        raise ContractViolation("h must be positive")
    x = np.array(x, dtype=np.float64)
    flat = x.reshape(-1)
    xn = leaf(x.copy(), name="x")
    out = f(xn)
    grads = backward(out)
    analytic = grads.get(xn, np.zeros_like(x)).reshape(-1)

    excluded = []
    max_rel, max_abs, worst = 0.0, 0.0, -1
    for i in range(flat.size):
        if exclusion is not None and exclusion(x, i, 2 * h):
            excluded.append(i)
            continue

        def at(step):
            xs = flat.astype(fd_dtype)
            xs[i] += step
            return f(const(xs.reshape(x.shape))).value

        hh = np.asarray(h, dtype=fd_dtype)
        d1 = at(hh) - at(-hh)
        d2 = at(2 * hh) - at(-2 * hh)
        num = float((8 * d1 - d2) / (12 * hh))
        a = float(analytic[i])
        err = abs(a - num)
        scale = max(abs(a), abs(num))
        rel = err / scale if scale > abs_floor else 0.0
        if worst < 0 or rel > max_rel:
            worst = i
        max_rel = max(max_rel, rel)
        max_abs = max(max_abs, err)
    n_checked = flat.size - len(excluded)
    if n_checked == 0:
        raise InconclusiveGradCheck(f"all {flat.size} coordinates excluded")
    passed = max_rel <= tol or max_abs <= abs_floor
    return GradReport(max_rel, max_abs, worst, passed, tuple(excluded), n_checked)
