"""Reverse-mode differentiation over dense float64 tensors.

A :class:`Graph` is an append-only tape of primitive ops.  Nodes are created
eagerly (shape-checked at construction) but values are only computed by
:meth:`Graph.recompute`, so a graph can be built once and re-evaluated many
times against different bound inputs.  The backward pass emits ordinary graph
nodes, which makes every gradient itself differentiable (double backprop),
as required by gradient-penalty training.

Everything is float64; there are no f32 kernels.
"""

from __future__ import annotations

from typing import Callable, Iterable, Sequence

import numpy as np

from .params import ParamVector


class GraphError(Exception):
    pass


class ShapeError(GraphError):
    pass


class UnboundInputError(GraphError):
    pass


class NonFiniteError(GraphError):
    """A node produced NaN/Inf during recompute.  Carries the node index."""

    def __init__(self, node: "Node"):
        self.node_index = node.idx
        self.op = node.op
        super().__init__(f"non-finite value at node {node.idx} (op '{node.op}')")


class Node:
    __slots__ = ("graph", "idx", "op", "parents", "shape", "value", "meta")

    def __init__(self, graph, idx, op, parents, shape, meta=None):
        self.graph = graph
        self.idx = idx
        self.op = op
        self.parents = parents
        self.shape = shape
        self.value = None
        self.meta = meta

    def __repr__(self):
        return f"Node({self.idx}, {self.op}, shape={self.shape})"

    # arithmetic sugar; scalars are wrapped as consts
    def _other(self, x):
        if isinstance(x, Node):
            return x
        return self.graph.const(np.asarray(x, dtype=np.float64))

    def __add__(self, other):
        return add(self, self._other(other))

    def __radd__(self, other):
        return add(self._other(other), self)

    def __sub__(self, other):
        return sub(self, self._other(other))

    def __rsub__(self, other):
        return sub(self._other(other), self)

    def __mul__(self, other):
        return mul(self, self._other(other))

    def __rmul__(self, other):
        return mul(self._other(other), self)

    def __neg__(self):
        return mul(self, self.graph.const(np.float64(-1.0)))

    def __matmul__(self, other):
        return matmul(self, other)


class Graph:
    """Append-only op tape.  Single writer; safe to evaluate after building."""

    def __init__(self, check_finite: bool = True):
        self.nodes: list[Node] = []
        self.inputs: dict[str, Node] = {}
        self.check_finite = check_finite
        self.hooks: list[Callable[[], None]] = []
        self._grad_cache: dict = {}

    # ------------------------------------------------------------------ leaves
    def input(self, name: str, shape: Sequence[int]) -> Node:
        if name in self.inputs:
            raise GraphError(f"duplicate input name '{name}'")
        node = self._append("input", [], tuple(int(s) for s in shape), meta=name)
        self.inputs[name] = node
        return node

    def const(self, value) -> Node:
        arr = np.asarray(value, dtype=np.float64)
        node = self._append("const", [], arr.shape)
        node.value = arr
        return node

    # ------------------------------------------------------------------ binding
    def bind(self, name: str, value) -> None:
        if name not in self.inputs:
            raise GraphError(f"no input named '{name}'")
        node = self.inputs[name]
        arr = np.asarray(value, dtype=np.float64)
        if arr.shape != node.shape:
            raise ShapeError(
                f"input '{name}' expects shape {node.shape}, got {arr.shape}"
            )
        node.value = arr

    def bind_params(self, params: ParamVector) -> None:
        """Bind every param segment that has a matching input node."""
        for name in params.segments:
            if name in self.inputs:
                self.bind(name, params.get(name))

    # ------------------------------------------------------------------ running
    def recompute(self) -> None:
        check = self.check_finite
        # overflow etc. surface as NonFiniteError, not as numpy warnings
        with np.errstate(over="ignore", divide="ignore", invalid="ignore", under="ignore"):
            for node in self.nodes:
                op = node.op
                if op == "const":
                    continue
                if op == "input":
                    if node.value is None:
                        raise UnboundInputError(f"input '{node.meta}' is unbound")
                    continue
                vals = [p.value for p in node.parents]
                node.value = _FORWARD[op](vals, node.meta)
                if check and not np.all(np.isfinite(node.value)):
                    raise NonFiniteError(node)
        for hook in self.hooks:
            hook()

    def add_hook(self, fn: Callable[[], None]) -> None:
        self.hooks.append(fn)

    # ------------------------------------------------------------------ internals
    def _append(self, op, parents, shape, meta=None) -> Node:
        for p in parents:
            if p.graph is not self:
                raise GraphError("cannot mix nodes from different graphs")
        node = Node(self, len(self.nodes), op, parents, tuple(shape), meta)
        self.nodes.append(node)
        return node


# ---------------------------------------------------------------------------
# primitive registry
# ---------------------------------------------------------------------------

_FORWARD: dict[str, Callable] = {}
_GRAD: dict[str, Callable] = {}

_HYPOT_EPS = 1e-12  # smoothing inside |.| gradients only; forward is exact


def _op(name):
    def wrap(fn):
        _FORWARD[name] = fn
        return fn

    return wrap


def _gradrule(name):
    def wrap(fn):
        _GRAD[name] = fn
        return fn

    return wrap


def _broadcast_shape(a, b):
    try:
        return np.broadcast_shapes(a, b)
    except ValueError as e:
        raise ShapeError(str(e)) from e


def _unbroadcast(g: Node, target: tuple) -> Node:
    """Reduce a broadcast gradient back to the parent's shape (as nodes)."""
    while len(g.shape) > len(target):
        g = sum_(g, axis=0)
    for ax, (gs, ts) in enumerate(zip(g.shape, target)):
        if ts == 1 and gs != 1:
            g = reshape(sum_(g, axis=ax), _keepdims(g.shape, ax))
    if g.shape != target:
        raise ShapeError(f"unbroadcast failed: {g.shape} -> {target}")
    return g


def _keepdims(shape, axis):
    s = list(shape)
    s[axis] = 1
    return tuple(s)


# -- elementwise binary ------------------------------------------------------

def add(a: Node, b: Node) -> Node:
    return a.graph._append("add", [a, b], _broadcast_shape(a.shape, b.shape))


@_op("add")
def _add_fwd(vals, meta):
    return vals[0] + vals[1]


@_gradrule("add")
def _add_grad(node, g):
    a, b = node.parents
    return [(a, _unbroadcast(g, a.shape)), (b, _unbroadcast(g, b.shape))]


def sub(a: Node, b: Node) -> Node:
    return add(a, -b)


def mul(a: Node, b: Node) -> Node:
    return a.graph._append("mul", [a, b], _broadcast_shape(a.shape, b.shape))


@_op("mul")
def _mul_fwd(vals, meta):
    return vals[0] * vals[1]


@_gradrule("mul")
def _mul_grad(node, g):
    a, b = node.parents
    return [(a, _unbroadcast(mul(g, b), a.shape)), (b, _unbroadcast(mul(g, a), b.shape))]


def hypot(a: Node, b: Node) -> Node:
    """sqrt(a^2 + b^2) with an exact forward value.

    The adjoint divides by sqrt(a^2 + b^2 + eps) so gradients stay finite at
    exact zeros (spectral magnitudes can vanish).
    """
    return a.graph._append("hypot", [a, b], _broadcast_shape(a.shape, b.shape))


@_op("hypot")
def _hypot_fwd(vals, meta):
    return np.hypot(vals[0], vals[1])


@_gradrule("hypot")
def _hypot_grad(node, g):
    a, b = node.parents
    eps = a.graph.const(np.float64(_HYPOT_EPS))
    denom = reciprocal(sqrt(add(add(square(a), square(b)), eps)))
    return [
        (a, _unbroadcast(mul(g, mul(a, denom)), a.shape)),
        (b, _unbroadcast(mul(g, mul(b, denom)), b.shape)),
    ]


# -- matmul ------------------------------------------------------------------

def matmul(a: Node, b: Node) -> Node:
    if len(a.shape) != 2 or len(b.shape) != 2:
        raise ShapeError("matmul expects 2-D operands")
    if a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul shape mismatch {a.shape} @ {b.shape}")
    return a.graph._append("matmul", [a, b], (a.shape[0], b.shape[1]))


@_op("matmul")
def _matmul_fwd(vals, meta):
    return vals[0] @ vals[1]


@_gradrule("matmul")
def _matmul_grad(node, g):
    a, b = node.parents
    return [(a, matmul(g, permute(b, (1, 0)))), (b, matmul(permute(a, (1, 0)), g))]


# -- elementwise unary -------------------------------------------------------

def _unary(name, a):
    return a.graph._append(name, [a], a.shape)


def tanh(a: Node) -> Node:
    return _unary("tanh", a)


@_op("tanh")
def _tanh_fwd(vals, meta):
    return np.tanh(vals[0])


@_gradrule("tanh")
def _tanh_grad(node, g):
    one = node.graph.const(np.float64(1.0))
    return [(node.parents[0], mul(g, sub(one, square(node))))]


def sigmoid(a: Node) -> Node:
    return _unary("sigmoid", a)


@_op("sigmoid")
def _sigmoid_fwd(vals, meta):
    x = vals[0]
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


@_gradrule("sigmoid")
def _sigmoid_grad(node, g):
    one = node.graph.const(np.float64(1.0))
    return [(node.parents[0], mul(g, mul(node, sub(one, node))))]


def leaky_relu(a: Node, slope: float = 0.2) -> Node:
    return a.graph._append("leaky_relu", [a], a.shape, meta=float(slope))


@_op("leaky_relu")
def _leaky_fwd(vals, meta):
    x = vals[0]
    return np.where(x > 0, x, meta * x)


@_gradrule("leaky_relu")
def _leaky_grad(node, g):
    x = node.parents[0]
    slope = node.meta
    s = node.graph.const(np.float64(slope))
    rest = node.graph.const(np.float64(1.0 - slope))
    return [(x, mul(g, add(s, mul(rest, step(x)))))]


def step(a: Node) -> Node:
    """Heaviside (x > 0); piecewise constant, so its own gradient is zero."""
    return _unary("step", a)


@_op("step")
def _step_fwd(vals, meta):
    return (vals[0] > 0).astype(np.float64)


@_gradrule("step")
def _step_grad(node, g):
    return []


def exp(a: Node) -> Node:
    return _unary("exp", a)


@_op("exp")
def _exp_fwd(vals, meta):
    return np.exp(vals[0])


@_gradrule("exp")
def _exp_grad(node, g):
    return [(node.parents[0], mul(g, node))]


def log(a: Node) -> Node:
    return _unary("log", a)


@_op("log")
def _log_fwd(vals, meta):
    return np.log(vals[0])


@_gradrule("log")
def _log_grad(node, g):
    return [(node.parents[0], mul(g, reciprocal(node.parents[0])))]


def reciprocal(a: Node) -> Node:
    return _unary("reciprocal", a)


@_op("reciprocal")
def _recip_fwd(vals, meta):
    return 1.0 / vals[0]


@_gradrule("reciprocal")
def _recip_grad(node, g):
    neg = node.graph.const(np.float64(-1.0))
    return [(node.parents[0], mul(neg, mul(g, square(node))))]


def sqrt(a: Node) -> Node:
    return _unary("sqrt", a)


@_op("sqrt")
def _sqrt_fwd(vals, meta):
    return np.sqrt(vals[0])


@_gradrule("sqrt")
def _sqrt_grad(node, g):
    half = node.graph.const(np.float64(0.5))
    return [(node.parents[0], mul(g, mul(half, reciprocal(node))))]


def square(a: Node) -> Node:
    return _unary("square", a)


@_op("square")
def _square_fwd(vals, meta):
    return np.square(vals[0])


@_gradrule("square")
def _square_grad(node, g):
    two = node.graph.const(np.float64(2.0))
    return [(node.parents[0], mul(g, mul(two, node.parents[0])))]


def softplus(a: Node) -> Node:
    return _unary("softplus", a)


@_op("softplus")
def _softplus_fwd(vals, meta):
    return np.logaddexp(0.0, vals[0])


@_gradrule("softplus")
def _softplus_grad(node, g):
    return [(node.parents[0], mul(g, sigmoid(node.parents[0])))]


# -- reductions --------------------------------------------------------------

def sum_(a: Node, axis: int | None = None) -> Node:
    if axis is None:
        shape = ()
    else:
        if not -len(a.shape) <= axis < len(a.shape):
            raise ShapeError(f"sum axis {axis} out of range for {a.shape}")
        axis = axis % len(a.shape)
        shape = a.shape[:axis] + a.shape[axis + 1 :]
    return a.graph._append("sum", [a], shape, meta=axis)


@_op("sum")
def _sum_fwd(vals, meta):
    return np.sum(vals[0], axis=meta)


@_gradrule("sum")
def _sum_grad(node, g):
    x = node.parents[0]
    ones = node.graph.const(np.ones(x.shape))
    if node.meta is None:
        return [(x, mul(ones, g))]
    gk = reshape(g, _keepdims(x.shape, node.meta))
    return [(x, mul(ones, gk))]


def mean(a: Node, axis: int | None = None) -> Node:
    total = a.size_of() if axis is None else a.shape[axis]
    s = sum_(a, axis=axis)
    return mul(s, a.graph.const(np.float64(1.0 / total)))


def _size_of(self):
    n = 1
    for d in self.shape:
        n *= d
    return n


Node.size_of = _size_of


def norm2(a: Node, axis: int | None = None) -> Node:
    return sqrt(sum_(square(a), axis=axis))


def dot(a: Node, b: Node) -> Node:
    return sum_(mul(a, b))


# -- structural --------------------------------------------------------------

def reshape(a: Node, shape: Sequence[int]) -> Node:
    shape = tuple(int(s) for s in shape)
    if int(np.prod(shape, dtype=np.int64)) != a.size_of():
        raise ShapeError(f"cannot reshape {a.shape} to {shape}")
    return a.graph._append("reshape", [a], shape, meta=shape)


@_op("reshape")
def _reshape_fwd(vals, meta):
    return np.reshape(vals[0], meta)


@_gradrule("reshape")
def _reshape_grad(node, g):
    return [(node.parents[0], reshape(g, node.parents[0].shape))]


def permute(a: Node, axes: Sequence[int]) -> Node:
    axes = tuple(axes)
    if sorted(axes) != list(range(len(a.shape))):
        raise ShapeError(f"bad permutation {axes} for rank {len(a.shape)}")
    shape = tuple(a.shape[i] for i in axes)
    return a.graph._append("permute", [a], shape, meta=axes)


@_op("permute")
def _permute_fwd(vals, meta):
    return np.transpose(vals[0], meta)


@_gradrule("permute")
def _permute_grad(node, g):
    inv = tuple(np.argsort(node.meta))
    return [(node.parents[0], permute(g, inv))]


def slice1d(a: Node, axis: int, start: int, stop: int) -> Node:
    if not 0 <= start < stop <= a.shape[axis]:
        raise ShapeError(f"slice [{start}:{stop}] invalid on axis {axis} of {a.shape}")
    shape = list(a.shape)
    shape[axis] = stop - start
    return a.graph._append("slice", [a], tuple(shape), meta=(axis, start, stop))


@_op("slice")
def _slice_fwd(vals, meta):
    axis, start, stop = meta
    idx = [slice(None)] * vals[0].ndim
    idx[axis] = slice(start, stop)
    return vals[0][tuple(idx)]


@_gradrule("slice")
def _slice_grad(node, g):
    x = node.parents[0]
    axis, start, stop = node.meta
    parts = []
    if start > 0:
        shape = list(x.shape)
        shape[axis] = start
        parts.append(node.graph.const(np.zeros(shape)))
    parts.append(g)
    if stop < x.shape[axis]:
        shape = list(x.shape)
        shape[axis] = x.shape[axis] - stop
        parts.append(node.graph.const(np.zeros(shape)))
    return [(x, concat(parts, axis=axis) if len(parts) > 1 else g)]


def concat(parts: Iterable[Node], axis: int) -> Node:
    parts = list(parts)
    if not parts:
        raise ShapeError("concat of nothing")
    base = list(parts[0].shape)
    total = 0
    for p in parts:
        s = list(p.shape)
        if len(s) != len(base) or s[:axis] != base[:axis] or s[axis + 1 :] != base[axis + 1 :]:
            raise ShapeError("concat shapes incompatible")
        total += s[axis]
    base[axis] = total
    return parts[0].graph._append("concat", parts, tuple(base), meta=axis)


@_op("concat")
def _concat_fwd(vals, meta):
    return np.concatenate(vals, axis=meta)


@_gradrule("concat")
def _concat_grad(node, g):
    axis = node.meta
    out = []
    offset = 0
    for p in node.parents:
        width = p.shape[axis]
        out.append((p, slice1d(g, axis, offset, offset + width)))
        offset += width
    return out


def take_cols(a: Node, idx) -> Node:
    idx = np.asarray(idx, dtype=np.int64)
    if len(a.shape) != 2:
        raise ShapeError("take_cols expects a 2-D node")
    if idx.min() < 0 or idx.max() >= a.shape[1]:
        raise ShapeError("take_cols index out of range")
    return a.graph._append("take_cols", [a], (a.shape[0], len(idx)), meta=idx)


@_op("take_cols")
def _take_fwd(vals, meta):
    return vals[0][:, meta]


@_gradrule("take_cols")
def _take_grad(node, g):
    x = node.parents[0]
    return [(x, scatter_cols(g, node.meta, x.shape[1]))]


def scatter_cols(a: Node, idx, width: int) -> Node:
    idx = np.asarray(idx, dtype=np.int64)
    if len(a.shape) != 2 or a.shape[1] != len(idx):
        raise ShapeError("scatter_cols shape mismatch")
    if len(np.unique(idx)) != len(idx):
        raise ShapeError("scatter_cols indices must be unique")
    return a.graph._append("scatter_cols", [a], (a.shape[0], int(width)), meta=(idx, int(width)))


@_op("scatter_cols")
def _scatter_fwd(vals, meta):
    idx, width = meta
    out = np.zeros((vals[0].shape[0], width))
    out[:, idx] = vals[0]
    return out


@_gradrule("scatter_cols")
def _scatter_grad(node, g):
    return [(node.parents[0], take_cols(g, node.meta[0]))]


def affine(x: Node, w: Node, b: Node) -> Node:
    """Dense layer x @ W + b with b broadcast along the batch axis."""
    y = matmul(x, w)
    return add(y, reshape(b, (1, b.shape[0])))


# ---------------------------------------------------------------------------
# backward pass (emits nodes; re-differentiable)
# ---------------------------------------------------------------------------

def grad_nodes(output: Node, wrt: Sequence[Node]) -> list[Node]:
    """Adjoint nodes d(output)/d(w) for each w in wrt.

    The output must be scalar.  Nodes not reachable from `wrt` contribute
    zero-constant gradients.  Every returned node is an ordinary graph node,
    so gradients of gradients are available by calling this again.
    """
    if output.shape != ():
        raise GraphError(f"gradient target must be scalar, got shape {output.shape}")
    graph = output.graph
    for w in wrt:
        if w.graph is not graph:
            raise GraphError("wrt node from a different graph")

    # ancestors of output, capped at its index
    needed = set()
    stack = [output]
    while stack:
        n = stack.pop()
        if n.idx in needed:
            continue
        needed.add(n.idx)
        stack.extend(n.parents)

    adjoint: dict[int, Node] = {output.idx: graph.const(np.float64(1.0))}
    for idx in sorted(needed, reverse=True):
        node = graph.nodes[idx]
        g = adjoint.get(idx)
        if g is None or node.op in ("input", "const"):
            continue
        for parent, contrib in _GRAD[node.op](node, g):
            prev = adjoint.get(parent.idx)
            adjoint[parent.idx] = contrib if prev is None else add(prev, contrib)

    out = []
    for w in wrt:
        gw = adjoint.get(w.idx)
        out.append(gw if gw is not None else graph.const(np.zeros(w.shape)))
    return out


# ---------------------------------------------------------------------------
# ParamVector-facing conveniences
# ---------------------------------------------------------------------------

def evaluate(graph: Graph, inputs: ParamVector | dict, output: Node | None = None):
    """Bind `inputs` (a ParamVector or name->array dict), run, return value."""
    if isinstance(inputs, ParamVector):
        graph.bind_params(inputs)
    else:
        for name, val in inputs.items():
            graph.bind(name, val)
    graph.recompute()
    node = output if output is not None else graph.nodes[-1]
    return node.value


def gradient(
    graph: Graph,
    inputs: ParamVector,
    wrt: Sequence[str],
    output: Node | None = None,
) -> ParamVector:
    """d(output)/d(segment) for each named segment; others are zero."""
    node = output if output is not None else graph.nodes[-1]
    for name in wrt:
        if name not in graph.inputs:
            raise GraphError(f"segment '{name}' is not an input of this graph")
    key = (node.idx, tuple(wrt))
    if key not in graph._grad_cache:
        graph._grad_cache[key] = grad_nodes(node, [graph.inputs[n] for n in wrt])
    gnodes = graph._grad_cache[key]
    evaluate(graph, inputs, output=node)
    result = inputs.zeros_like()
    for name, gn in zip(wrt, gnodes):
        result.set(name, gn.value)
    return result


def gradient_as_nodes(graph: Graph, output: Node, wrt: Node) -> Node:
    """Graph node computing d(output)/d(wrt); itself differentiable."""
    return grad_nodes(output, [wrt])[0]
