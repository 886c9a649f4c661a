"""Random computation graphs over the elementary ops, for gradient checks."""
from __future__ import annotations

import numpy as np

from spikenerf import diffcore as dc

# (name, arity, builder).  Builders keep every op inside its smooth domain so
# central differences are meaningful without exclusions.
_UNARY = [
    ("neg", dc.neg),
    ("exp", lambda a: dc.exp(dc.tanh(a))),
    ("log", lambda a: dc.log(dc.add(dc.square(a), 1.0))),
    ("tanh", dc.tanh),
    ("sigmoid", dc.sigmoid),
    ("square", lambda a: dc.mul(dc.square(a), 0.5)),
    ("sqrt", lambda a: dc.sqrt(dc.add(dc.square(a), 0.5))),
    ("sin", dc.sin),
    ("cos", dc.cos),
    ("cumsum", lambda a: dc.mul(dc.exclusive_cumsum(a), 0.5)),
]
_BINARY = [
    ("add", dc.add),
    ("sub", dc.sub),
    ("mul", dc.mul),
    ("div", lambda a, b: dc.div(a, dc.add(dc.square(b), 1.0))),
]


def random_graph(rng: np.random.Generator, n_ops: int | None = None):
    """Return ``(f, x0)``: a scalar function of a (2, 3) input and a random point.

    The graph is a random DAG of elementwise ops, a matmul against a fixed
    matrix, row/column reductions and slices, finished by a sum.
    """
    n_ops = int(rng.integers(3, 9)) if n_ops is None else n_ops
    plan = []
    for _ in range(n_ops):
        if rng.random() < 0.35:
            plan.append(("bin", int(rng.integers(len(_BINARY))), int(rng.integers(1 << 30))))
        else:
            plan.append(("un", int(rng.integers(len(_UNARY))), int(rng.integers(1 << 30))))
    w = rng.normal(size=(3, 3))
    use_matmul = rng.random() < 0.5
    x0 = rng.normal(size=(2, 3))

    def f(x: dc.Node) -> dc.Node:
        pool = [x]
        for kind, idx, pick in plan:
            if kind == "un":
                a = pool[pick % len(pool)]
                pool.append(_UNARY[idx][1](a))
            else:
                a = pool[pick % len(pool)]
                b = pool[(pick // 7) % len(pool)]
                pool.append(_BINARY[idx][1](a, b))
        h = pool[-1]
        if use_matmul:
            h = dc.matmul(h, dc.const(w))
        # mix every intermediate into the output so all ops carry gradient
        total = dc.sum_(dc.mul(h, 1.0))
        for p in pool[1:-1]:
            total = dc.add(total, dc.mul(dc.sum_(dc.cols(p, 0, 2)), 0.1))
        return total

    return f, x0
