"""Tape-based reverse-mode automatic differentiation over float64 numpy arrays.

A :class:`Graph` is an append-only list of primitive nodes. Nodes are
symbolic: nothing is computed until :meth:`Graph.forward` is called with
bindings for the input placeholders. :meth:`Graph.backward` appends the
adjoint computation to the same graph using the same primitives, so the
returned gradient nodes can be differentiated again (grad-of-grad).

Tensors are plain ``numpy.ndarray`` objects of dtype float64.

Example::

    g = Graph()
    x = g.input((), name="x")
    y = x * x * x
    (dy,) = g.backward(y, [x])
    (d2y,) = g.backward(dy, [x])
    g.forward([y, dy, d2y], {x: 2.0})   # [8.0, 12.0, 12.0]
"""
from __future__ import annotations

import itertools
from typing import Callable, Iterable, Sequence

import numpy as np

__all__ = [
    "Graph",
    "Node",
    "NonFiniteError",
    "forward",
    "backward",
    "finite_diff_check",
    "numeric_grad",
]

_graph_ids = itertools.count()

# ops whose output carries no gradient back to any parent
_NONDIFF = frozenset({"input", "const", "stop_gradient", "step", "argmax_mask", "custom"})


class NonFiniteError(FloatingPointError):
    """Raised when a node evaluates to inf or nan."""

    def __init__(self, node: "Node", where: str = ""):
        self.node_id = node.id
        self.op = node.op
        super().__init__(f"non-finite value at node {node.id} (op={node.op}){where}")


def _as_array(value) -> np.ndarray:
    return np.asarray(value, dtype=np.float64)


def _normalize_axes(axis, ndim):
    if axis is None:
        return tuple(range(ndim))
    if isinstance(axis, int):
        axis = (axis,)
    return tuple(sorted(a % ndim for a in axis))


def _sum_to(x: np.ndarray, shape: tuple) -> np.ndarray:
    if x.shape == shape:
        return x
    lead = x.ndim - len(shape)
    if lead:
        x = x.sum(axis=tuple(range(lead)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and x.shape[i] != 1)
    if axes:
        x = x.sum(axis=axes, keepdims=True)
    return x


def _argmax_mask(x: np.ndarray, axis: int) -> np.ndarray:
    # first maximal index wins ties
    idx = np.expand_dims(np.argmax(x, axis=axis), axis)
    mask = np.zeros_like(x)
    np.put_along_axis(mask, idx, 1.0, axis=axis)
    return mask


def _scatter_add(g: np.ndarray, index: np.ndarray, axis: int, shape: tuple) -> np.ndarray:
    out = np.zeros(shape)
    grid = list(np.indices(index.shape, sparse=True))
    grid[axis] = index
    np.add.at(out, tuple(grid), g)
    return out


def _scatter_slice(g: np.ndarray, key, shape: tuple) -> np.ndarray:
    out = np.zeros(shape)
    out[key] = g
    return out


class Node:
    """Handle to one node of a :class:`Graph`.

    Supports the arithmetic operators and ``@``; everything else is a
    method of the owning graph.
    """

    __slots__ = ("graph", "id", "op", "parents", "shape", "attrs")
    __array_priority__ = 1000

    def __init__(self, graph, id, op, parents, shape, attrs):
        self.graph = graph
        self.id = id
        self.op = op
        self.parents = parents
        self.shape = shape
        self.attrs = attrs

    @property
    def ndim(self) -> int:
        return len(self.shape)

    def __repr__(self):
        return f"Node(id={self.id}, op={self.op!r}, shape={self.shape})"

    def _lift(self, other) -> "Node":
        if isinstance(other, Node):
            if other.graph is not self.graph:
                raise ValueError("nodes belong to different graphs")
            return other
        return self.graph.const(other)

    def __add__(self, other):
        return self.graph.add(self, self._lift(other))

    def __radd__(self, other):
        return self.graph.add(self._lift(other), self)

    def __sub__(self, other):
        return self.graph.sub(self, self._lift(other))

    def __rsub__(self, other):
        return self.graph.sub(self._lift(other), self)

    def __mul__(self, other):
        return self.graph.mul(self, self._lift(other))

    def __rmul__(self, other):
        return self.graph.mul(self._lift(other), self)

    def __truediv__(self, other):
        return self.graph.div(self, self._lift(other))

    def __rtruediv__(self, other):
        return self.graph.div(self._lift(other), self)

    def __neg__(self):
        return self.graph.neg(self)

    def __matmul__(self, other):
        return self.graph.matmul(self, self._lift(other))

    def __rmatmul__(self, other):
        return self.graph.matmul(self._lift(other), self)

    def __getitem__(self, key):
        return self.graph.getitem(self, key)

    def sum(self, axis=None, keepdims=False):
        return self.graph.sum(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return self.graph.mean(self, axis, keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = shape[0]
        return self.graph.reshape(self, tuple(shape))

    @property
    def T(self):
        return self.graph.swap_last(self)


class Graph:
    """Append-only computation tape.

    Parents always precede children, so node ids are a topological order.
    A graph has a single writer; separate graphs share no state.
    """

    def __init__(self, check_finite: bool = True):
        self.nodes: list[Node] = []
        self.check_finite = check_finite
        self.uid = next(_graph_ids)

    def __len__(self):
        return len(self.nodes)

    # ------------------------------------------------------------------ build
    def _append(self, op, parents=(), shape=(), **attrs) -> Node:
        for p in parents:
            if p.graph is not self:
                raise ValueError("parent node belongs to a different graph")
        node = Node(self, len(self.nodes), op, tuple(parents), tuple(int(s) for s in shape), attrs)
        self.nodes.append(node)
        return node

    def input(self, shape=(), name: str | None = None) -> Node:
        return self._append("input", (), tuple(shape), name=name)

    def const(self, value) -> Node:
        value = _as_array(value)
        value.setflags(write=False)
        return self._append("const", (), value.shape, value=value)

    def zeros(self, shape) -> Node:
        return self.const(np.zeros(shape))

    # elementwise binary, numpy broadcasting
    def _binary(self, op, a, b):
        a, b = self._coerce(a), self._coerce(b)
        shape = np.broadcast_shapes(a.shape, b.shape)
        return self._append(op, (a, b), shape)

    def _coerce(self, x) -> Node:
        return x if isinstance(x, Node) else self.const(x)

    def add(self, a, b):
        return self._binary("add", a, b)

    def sub(self, a, b):
        return self._binary("sub", a, b)

    def mul(self, a, b):
        return self._binary("mul", a, b)

    def div(self, a, b):
        return self._binary("div", a, b)

    def neg(self, a):
        return self._append("neg", (a,), a.shape)

    def matmul(self, a, b):
        a, b = self._coerce(a), self._coerce(b)
        if a.ndim < 2 or b.ndim < 2:
            raise ValueError(f"matmul needs operands with ndim >= 2, got {a.shape} @ {b.shape}")
        if a.shape[-1] != b.shape[-2]:
            raise ValueError(f"matmul shape mismatch: {a.shape} @ {b.shape}")
        batch = np.broadcast_shapes(a.shape[:-2], b.shape[:-2])
        return self._append("matmul", (a, b), batch + (a.shape[-2], b.shape[-1]))

    def exp(self, a):
        return self._append("exp", (a,), a.shape)

    def log(self, a):
        return self._append("log", (a,), a.shape)

    def tanh(self, a):
        return self._append("tanh", (a,), a.shape)

    def relu(self, a):
        return self._append("relu", (a,), a.shape)

    def sqrt(self, a):
        return self._append("sqrt", (a,), a.shape)

    def square(self, a):
        return self.mul(a, a)

    def sum(self, a, axis=None, keepdims=False):
        axes = _normalize_axes(axis, a.ndim)
        if keepdims:
            shape = tuple(1 if i in axes else n for i, n in enumerate(a.shape))
        else:
            shape = tuple(n for i, n in enumerate(a.shape) if i not in axes)
        return self._append("sum", (a,), shape, axes=axes, keepdims=keepdims)

    def mean(self, a, axis=None, keepdims=False):
        axes = _normalize_axes(axis, a.ndim)
        count = int(np.prod([a.shape[i] for i in axes])) if axes else 1
        return self.sum(a, axes, keepdims) / float(count)

    def max(self, a, axis=-1, keepdims=False):
        axis = axis % a.ndim
        shape = tuple(1 if i == axis else n for i, n in enumerate(a.shape))
        if not keepdims:
            shape = shape[:axis] + shape[axis + 1:]
        return self._append("max", (a,), shape, axis=axis, keepdims=keepdims)

    def broadcast_to(self, a, shape):
        shape = tuple(shape)
        if a.shape == shape:
            return a
        np.broadcast_shapes(a.shape, shape)  # validates
        return self._append("broadcast_to", (a,), shape)

    def sum_to(self, a, shape):
        shape = tuple(shape)
        if a.shape == shape:
            return a
        return self._append("sum_to", (a,), shape)

    def reshape(self, a, shape):
        shape = tuple(shape)
        if int(np.prod(shape)) != int(np.prod(a.shape)):
            raise ValueError(f"cannot reshape {a.shape} to {shape}")
        if shape == a.shape:
            return a
        return self._append("reshape", (a,), shape)

    def transpose(self, a, axes):
        axes = tuple(int(i) % a.ndim for i in axes)
        return self._append("transpose", (a,), tuple(a.shape[i] for i in axes), axes=axes)

    def swap_last(self, a):
        axes = list(range(a.ndim))
        axes[-1], axes[-2] = axes[-2], axes[-1]
        return self.transpose(a, axes)

    def getitem(self, a, key):
        """Static basic indexing (ints, slices, Ellipsis, None)."""
        shape = np.empty(a.shape, dtype=np.bool_)[key].shape
        return self._append("getitem", (a,), shape, key=key)

    def _scatter_slice(self, g, key, shape):
        return self._append("scatter_slice", (g,), shape, key=key)

    def gather(self, a, index, axis=-1):
        """``take_along_axis`` with a constant integer index array."""
        index = np.asarray(index, dtype=np.intp)
        axis = axis % a.ndim
        if index.ndim != a.ndim:
            raise ValueError("gather index must have the same ndim as its source")
        shape = np.broadcast_shapes(a.shape[:axis] + (index.shape[axis],) + a.shape[axis + 1:], index.shape)
        index = np.broadcast_to(index, shape)
        return self._append("gather", (a,), shape, index=index, axis=axis)

    def _scatter_add(self, g, index, axis, shape):
        return self._append("scatter_add", (g,), shape, index=index, axis=axis)

    def stop_gradient(self, a):
        return self._append("stop_gradient", (a,), a.shape)

    def step(self, a):
        """Heaviside indicator ``a > 0``; carries no gradient."""
        return self._append("step", (a,), a.shape)

    def argmax_mask(self, a, axis=-1):
        return self._append("argmax_mask", (a,), a.shape, axis=axis % a.ndim)

    def custom(self, fn: Callable[..., np.ndarray], parents: Sequence[Node], shape) -> Node:
        """Non-differentiable node whose value is ``fn(*parent_values)``."""
        return self._append("custom", tuple(parents), tuple(shape), fn=fn)

    # composite helpers built from primitives
    def logsumexp(self, a, axis=-1, keepdims=False):
        m = self.stop_gradient(self.max(a, axis, keepdims=True))
        out = self.log(self.sum(self.exp(a - m), axis, keepdims=True)) + m
        if not keepdims:
            out = self.reshape(out, tuple(n for i, n in enumerate(out.shape) if i != axis % a.ndim))
        return out

    def log_softmax(self, a, axis=-1):
        return a - self.logsumexp(a, axis, keepdims=True)

    # --------------------------------------------------------------- evaluate
    def forward(self, outputs: Sequence[Node], bindings: dict) -> list[np.ndarray]:
        """Evaluate ``outputs`` given values for the input placeholders."""
        outputs = list(outputs)
        needed = self._ancestors(outputs)
        bound = {}
        for node, value in bindings.items():
            if node.graph is not self:
                raise ValueError("binding for a node of another graph")
            bound[node.id] = value
        values: dict[int, np.ndarray] = {}
        with np.errstate(all="ignore" if self.check_finite else "warn"):
            self._run(sorted(needed), bound, values)
        return [values[o.id] for o in outputs]

    def _run(self, order, bound, values):
        for nid in order:
            node = self.nodes[nid]
            if node.op == "input":
                if nid not in bound:
                    label = node.attrs.get("name") or nid
                    raise KeyError(f"unbound input {label!r}")
                v = _as_array(bound[nid])
                if v.shape != node.shape:
                    raise ValueError(f"input {node.attrs.get('name') or nid}: expected shape {node.shape}, got {v.shape}")
            else:
                v = _EVAL[node.op](node, *(values[p.id] for p in node.parents))
            if self.check_finite and not np.all(np.isfinite(v)):
                raise NonFiniteError(node)
            values[nid] = v

    def _ancestors(self, outputs) -> set[int]:
        seen = set()
        stack = [o.id for o in outputs]
        while stack:
            nid = stack.pop()
            if nid in seen:
                continue
            seen.add(nid)
            stack.extend(p.id for p in self.nodes[nid].parents)
        return seen

    # --------------------------------------------------------------- backward
    def backward(self, output: Node, wrt: Sequence[Node]) -> list[Node]:
        """Append nodes computing d(output)/d(w) for every w in ``wrt``.

        ``output`` must be a scalar. Nodes that ``output`` does not depend on
        get a constant zero gradient.
        """
        if output.shape != ():
            raise ValueError(f"backward needs a scalar output, got shape {output.shape}")
        wrt = list(wrt)
        wrt_ids = {w.id for w in wrt}
        lo = min(wrt_ids) if wrt_ids else output.id + 1

        # nodes on some path from a wrt node to the output
        live = set()
        for nid in range(lo, output.id + 1):
            node = self.nodes[nid]
            if nid in wrt_ids or (node.op not in _NONDIFF and any(p.id in live for p in node.parents)):
                live.add(nid)
        ancestors = self._ancestors([output])
        live &= ancestors

        grads: dict[int, list[Node]] = {}
        if output.id in live:
            grads[output.id] = [self.const(1.0)]
        for nid in range(output.id, lo - 1, -1):
            if nid not in grads:
                continue
            node = self.nodes[nid]
            contribs = grads[nid]
            g = contribs[0]
            for c in contribs[1:]:
                g = self.add(g, c)
            grads[nid] = [g]
            if node.op in _NONDIFF:
                continue
            pgrads = _VJP[node.op](self, node, g)
            for parent, pg in zip(node.parents, pgrads):
                if pg is None or parent.id not in live:
                    continue
                grads.setdefault(parent.id, []).append(pg)

        out = []
        for w in wrt:
            if w.id in grads:
                out.append(grads[w.id][0])
            else:
                out.append(self.zeros(w.shape))
        return out


# --------------------------------------------------------------------------
# evaluation kernels
def _eval_sum(node, x):
    return np.sum(x, axis=node.attrs["axes"], keepdims=node.attrs["keepdims"])


def _eval_max(node, x):
    return np.max(x, axis=node.attrs["axis"], keepdims=node.attrs["keepdims"])


_EVAL = {
    "const": lambda node: node.attrs["value"],
    "add": lambda node, a, b: a + b,
    "sub": lambda node, a, b: a - b,
    "mul": lambda node, a, b: a * b,
    "div": lambda node, a, b: a / b,
    "neg": lambda node, a: -a,
    "matmul": lambda node, a, b: np.matmul(a, b),
    "exp": lambda node, a: np.exp(a),
    "log": lambda node, a: np.log(a),
    "tanh": lambda node, a: np.tanh(a),
    "relu": lambda node, a: np.maximum(a, 0.0),
    "sqrt": lambda node, a: np.sqrt(a),
    "sum": _eval_sum,
    "max": _eval_max,
    "broadcast_to": lambda node, a: np.broadcast_to(a, node.shape),
    "sum_to": lambda node, a: _sum_to(a, node.shape),
    "reshape": lambda node, a: np.reshape(a, node.shape),
    "transpose": lambda node, a: np.transpose(a, node.attrs["axes"]),
    "getitem": lambda node, a: a[node.attrs["key"]],
    "scatter_slice": lambda node, g: _scatter_slice(g, node.attrs["key"], node.shape),
    "gather": lambda node, a: np.take_along_axis(a, node.attrs["index"], axis=node.attrs["axis"]),
    "scatter_add": lambda node, g: _scatter_add(g, node.attrs["index"], node.attrs["axis"], node.shape),
    "stop_gradient": lambda node, a: a,
    "step": lambda node, a: (a > 0).astype(np.float64),
    "argmax_mask": lambda node, a: _argmax_mask(a, node.attrs["axis"]),
    "custom": lambda node, *xs: _as_array(node.attrs["fn"](*xs)),
}


# --------------------------------------------------------------------------
# vector-Jacobian products, emitted as new graph nodes
def _vjp_add(g: Graph, node, gy):
    a, b = node.parents
    return g.sum_to(gy, a.shape), g.sum_to(gy, b.shape)


def _vjp_sub(g: Graph, node, gy):
    a, b = node.parents
    return g.sum_to(gy, a.shape), g.sum_to(g.neg(gy), b.shape)


def _vjp_mul(g: Graph, node, gy):
    a, b = node.parents
    return g.sum_to(gy * b, a.shape), g.sum_to(gy * a, b.shape)


def _vjp_div(g: Graph, node, gy):
    a, b = node.parents
    ga = gy / b
    gb = g.neg(ga * node)  # -gy * a / b^2 == -(gy / b) * (a / b)
    return g.sum_to(ga, a.shape), g.sum_to(gb, b.shape)


def _vjp_matmul(g: Graph, node, gy):
    a, b = node.parents
    ga = g.matmul(gy, g.swap_last(b))
    gb = g.matmul(g.swap_last(a), gy)
    return g.sum_to(ga, a.shape), g.sum_to(gb, b.shape)


def _vjp_sum(g: Graph, node, gy):
    (a,) = node.parents
    if not node.attrs["keepdims"]:
        kept = tuple(1 if i in node.attrs["axes"] else n for i, n in enumerate(a.shape))
        gy = g.reshape(gy, kept)
    return (g.broadcast_to(gy, a.shape),)


def _vjp_max(g: Graph, node, gy):
    (a,) = node.parents
    axis = node.attrs["axis"]
    if not node.attrs["keepdims"]:
        gy = g.reshape(gy, tuple(1 if i == axis else n for i, n in enumerate(a.shape)))
    return (g.broadcast_to(gy, a.shape) * g.argmax_mask(a, axis),)


def _vjp_transpose(g: Graph, node, gy):
    inv = tuple(np.argsort(node.attrs["axes"]))
    return (g.transpose(gy, inv),)


_VJP = {
    "add": _vjp_add,
    "sub": _vjp_sub,
    "mul": _vjp_mul,
    "div": _vjp_div,
    "neg": lambda g, node, gy: (g.neg(gy),),
    "matmul": _vjp_matmul,
    "exp": lambda g, node, gy: (gy * node,),
    "log": lambda g, node, gy: (gy / node.parents[0],),
    "tanh": lambda g, node, gy: (gy * (1.0 - node * node),),
    # derivative at exactly 0 is taken as 0
    "relu": lambda g, node, gy: (gy * g.step(node.parents[0]),),
    "sqrt": lambda g, node, gy: (gy / (2.0 * node),),
    "sum": _vjp_sum,
    "max": _vjp_max,
    "broadcast_to": lambda g, node, gy: (g.sum_to(gy, node.parents[0].shape),),
    "sum_to": lambda g, node, gy: (g.broadcast_to(gy, node.parents[0].shape),),
    "reshape": lambda g, node, gy: (g.reshape(gy, node.parents[0].shape),),
    "transpose": _vjp_transpose,
    "getitem": lambda g, node, gy: (g._scatter_slice(gy, node.attrs["key"], node.parents[0].shape),),
    "scatter_slice": lambda g, node, gy: (g.getitem(gy, node.attrs["key"]),),
    "gather": lambda g, node, gy: (
        g._scatter_add(gy, node.attrs["index"], node.attrs["axis"], node.parents[0].shape),
    ),
    "scatter_add": lambda g, node, gy: (g.gather(gy, node.attrs["index"], node.attrs["axis"]),),
}


# --------------------------------------------------------------------------
# functional front end
def forward(graph: Graph, outputs: Sequence[Node], bindings: dict) -> list[np.ndarray]:
    return graph.forward(outputs, bindings)


def backward(graph: Graph, output: Node, wrt: Sequence[Node]) -> list[Node]:
    if output.graph is not graph:
        raise ValueError("output node belongs to a different graph")
    return graph.backward(output, wrt)


def numeric_grad(f: Callable[[np.ndarray], float], x: np.ndarray, step: float = 1e-5) -> np.ndarray:
    """Central-difference gradient of a scalar function."""
    x = _as_array(x).copy()
    grad = np.zeros_like(x)
    flat, gflat = x.reshape(-1), grad.reshape(-1)
    for k in range(flat.size):
        orig = flat[k]
        flat[k] = orig + step
        fp = float(f(x))
        flat[k] = orig - step
        fm = float(f(x))
        flat[k] = orig
        if not (np.isfinite(fp) and np.isfinite(fm)):
            raise FloatingPointError(f"function is non-finite near coordinate {k}")
        gflat[k] = (fp - fm) / (2.0 * step)
    return grad


def finite_diff_check(build: Callable[[Graph, Node], Node], x, step: float = 1e-5) -> float:
    """Max relative error between autodiff and central differences.

    ``build(graph, x_node)`` must return a scalar node. The error per
    coordinate is ``|ad - fd| / (|fd| + 1e-12)``.
    """
    if step <= 0:
        raise ValueError("step must be positive")
    x = _as_array(x)
    g = Graph()
    xn = g.input(x.shape, name="x")
    y = build(g, xn)
    (dy,) = g.backward(y, [xn])

    def f(v):
        return g.forward([y], {xn: v})[0]

    (ad,) = g.forward([dy], {xn: x})
    fd = numeric_grad(f, x, step)
    return float(np.max(np.abs(ad - fd) / (np.abs(fd) + 1e-12))) if x.size else 0.0
