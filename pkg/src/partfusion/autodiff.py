"""Minimal reverse-mode autodiff over dense float64 matrices.

Every value is a 2-D ``numpy.float64`` array (row-major). A :class:`Graph`
records operations eagerly in construction order; :func:`backward` replays
that order in reverse exactly once, so repeated runs on identical inputs are
bit-identical. Only the operation kinds needed by the segmentation pipeline
exist: matmul, add, concat-columns, row-softmax, elementwise maps, reductions
and stop-gradient.

Nodes whose gradient can never reach a trainable leaf (constants and
stop-gradient subtrees) are skipped during accumulation, and intermediate
gradient buffers are reused once their node has been processed; neither
changes any computed value.
"""

from __future__ import annotations

from typing import Callable, Sequence

import numpy as np

# Denominator / log-argument clamp. Keeps unused semantic classes (whose
# probability mass can vanish) from producing NaN or Inf.
EPS_CLAMP = 1e-12


class GraphError(ValueError):
    """Shape or usage error raised at graph construction time."""


def as_matrix(data, name: str = "matrix") -> np.ndarray:
    """Coerce ``data`` to a 2-D float64 array, rejecting non-finite entries."""
    m = np.asarray(data, dtype=np.float64)
    if m.ndim == 1:
        m = m.reshape(1, -1)
    if m.ndim != 2:
        raise GraphError(f"{name}: expected a 2-D matrix, got ndim={m.ndim}")
    if not np.all(np.isfinite(m)):
        raise GraphError(f"{name}: contains non-finite entries")
    return np.ascontiguousarray(m)


class Node:
    """One graph node: an operation kind, its inputs, value and gradient."""

    __slots__ = ("graph", "id", "op", "inputs", "value", "grad", "meta", "needs_grad")

    def __init__(self, graph: "Graph", op: str, inputs: tuple, value, meta=None):
        self.graph = graph
        self.id = len(graph.nodes)
        self.op = op
        self.inputs = inputs
        self.value = value
        self.grad: np.ndarray | None = None
        self.meta = meta
        if op == "leaf":
            self.needs_grad = True
        elif op in ("const", "stop-gradient", "row-onehot"):
            self.needs_grad = False
        else:
            self.needs_grad = any(i.needs_grad for i in inputs)
        graph.nodes.append(self)

    @property
    def shape(self) -> tuple[int, int]:
        return self.value.shape

    def __repr__(self):
        return f"Node(id={self.id}, op={self.op}, shape={self.value.shape})"


class Graph:
    """Ordered tape of nodes; construction order is the evaluation order."""

    def __init__(self):
        self.nodes: list[Node] = []

    # -- leaves ---------------------------------------------------------

    def leaf(self, value, name: str = "leaf") -> Node:
        return Node(self, "leaf", (), as_matrix(value, name))

    def constant(self, value, name: str = "const") -> Node:
        # Same data handling as a leaf, but never receives a gradient.
        return Node(self, "const", (), as_matrix(value, name))

    # -- evaluation -----------------------------------------------------

    def forward(self, output: Node) -> np.ndarray:
        """Recompute every non-leaf value in construction order.

        Leaf/const values may be mutated in place between calls (used by the
        finite-difference oracle); this re-propagates them.
        """
        for node in self.nodes:
            if node.op not in ("leaf", "const"):
                node.value = _FORWARD[node.op](node)
        return output.value

    def zero_grad(self):
        for node in self.nodes:
            node.grad = None


def _check_same_graph(*nodes: Node) -> Graph:
    g = nodes[0].graph
    for n in nodes[1:]:
        if n.graph is not g:
            raise GraphError(f"nodes {nodes[0].id} and {n.id} belong to different graphs")
    return g


def _shape_error(op: str, a: Node, b: Node) -> GraphError:
    return GraphError(
        f"{op}: incompatible shapes {a.value.shape} (node {a.id}) "
        f"and {b.value.shape} (node {b.id})"
    )


# ---------------------------------------------------------------------------
# Operation constructors. Values are computed eagerly.
# ---------------------------------------------------------------------------


def matmul(a: Node, b: Node, transpose_a: bool = False, transpose_b: bool = False) -> Node:
    g = _check_same_graph(a, b)
    ka = a.value.shape[0] if transpose_a else a.value.shape[1]
    kb = b.value.shape[1] if transpose_b else b.value.shape[0]
    if ka != kb:
        raise _shape_error("matmul", a, b)
    node = Node(g, "matmul", (a, b), None, meta=(transpose_a, transpose_b))
    node.value = _FORWARD["matmul"](node)
    return node


def add(a: Node, b: Node, _inplace: bool = False) -> Node:
    """Elementwise add; ``b`` may be 1 x cols and broadcasts over rows (bias).

    ``_inplace`` reuses a's buffer; callers must guarantee a has no other
    consumer (recomputation stays valid because a is rebuilt first).
    """
    g = _check_same_graph(a, b)
    if a.value.shape != b.value.shape and not (
        b.value.shape == (1, a.value.shape[1])
    ):
        raise _shape_error("add", a, b)
    if _inplace and (a.op in ("leaf", "const") or a is b):
        raise GraphError(f"add: node {a.id} cannot be updated in place")
    node = Node(g, "add", (a, b), None, meta=bool(_inplace))
    node.value = _FORWARD["add"](node)
    return node


def sub(a: Node, b: Node) -> Node:
    g = _check_same_graph(a, b)
    if a.value.shape != b.value.shape:
        raise _shape_error("sub", a, b)
    node = Node(g, "sub", (a, b), None)
    node.value = _FORWARD["sub"](node)
    return node


def mul(a: Node, b: Node) -> Node:
    g = _check_same_graph(a, b)
    if a.value.shape != b.value.shape:
        raise _shape_error("mul", a, b)
    node = Node(g, "mul", (a, b), None)
    node.value = _FORWARD["mul"](node)
    return node


def div(a: Node, b: Node) -> Node:
    """Elementwise a / max(b, EPS_CLAMP)."""
    g = _check_same_graph(a, b)
    if a.value.shape != b.value.shape:
        raise _shape_error("div", a, b)
    node = Node(g, "div", (a, b), None)
    node.value = _FORWARD["div"](node)
    return node


def scale(a: Node, factor: float) -> Node:
    node = Node(a.graph, "scale", (a,), None, meta=float(factor))
    node.value = _FORWARD["scale"](node)
    return node


def relu(a: Node, _inplace: bool = False) -> Node:
    if _inplace and a.op in ("leaf", "const"):
        raise GraphError(f"relu: node {a.id} cannot be updated in place")
    node = Node(a.graph, "relu", (a,), None, meta=bool(_inplace))
    node.value = _FORWARD["relu"](node)
    return node


def log(a: Node) -> Node:
    """log(max(a, EPS_CLAMP)); zero gradient on the clamped region."""
    node = Node(a.graph, "log", (a,), None)
    node.value = _FORWARD["log"](node)
    return node


def sqrt(a: Node) -> Node:
    """sqrt(max(a, 0)); gradient is zero where the value is below EPS_CLAMP."""
    node = Node(a.graph, "sqrt", (a,), None)
    node.value = _FORWARD["sqrt"](node)
    return node


def row_softmax(a: Node) -> Node:
    node = Node(a.graph, "row-softmax", (a,), None)
    node.value = _FORWARD["row-softmax"](node)
    return node


def row_onehot(a: Node) -> Node:
    """Indicator of each row's argmax (ties to the lowest column index).

    Piecewise constant, so its gradient is zero everywhere.
    """
    node = Node(a.graph, "row-onehot", (a,), None)
    node.value = _FORWARD["row-onehot"](node)
    return node


def concat_cols(parts: Sequence[Node]) -> Node:
    if not parts:
        raise GraphError("concat-cols: needs at least one input")
    g = _check_same_graph(*parts)
    rows = parts[0].value.shape[0]
    for p in parts[1:]:
        if p.value.shape[0] != rows:
            raise _shape_error("concat-cols", parts[0], p)
    node = Node(g, "concat-cols", tuple(parts), None)
    node.value = _FORWARD["concat-cols"](node)
    return node


def sum_all(a: Node) -> Node:
    node = Node(a.graph, "sum-all", (a,), None)
    node.value = _FORWARD["sum-all"](node)
    return node


def mean_all(a: Node) -> Node:
    node = Node(a.graph, "mean-all", (a,), None)
    node.value = _FORWARD["mean-all"](node)
    return node


def row_sum(a: Node) -> Node:
    node = Node(a.graph, "row-sum", (a,), None)
    node.value = _FORWARD["row-sum"](node)
    return node


def col_sum(a: Node) -> Node:
    node = Node(a.graph, "col-sum", (a,), None)
    node.value = _FORWARD["col-sum"](node)
    return node


def col_max(a: Node) -> Node:
    """Column-wise max (1 x cols). Gradient routes to the first max per column."""
    node = Node(a.graph, "col-max", (a,), None)
    node.value = _FORWARD["col-max"](node)
    return node


def repeat_rows(a: Node, n: int) -> Node:
    """Tile a 1 x m row to n x m via an all-ones column (a plain matmul)."""
    if a.value.shape[0] != 1:
        raise GraphError(f"repeat_rows: node {a.id} must have a single row")
    ones = a.graph.constant(np.ones((n, 1)), "ones-col")
    return matmul(ones, a)


def stop_gradient(a: Node) -> Node:
    node = Node(a.graph, "stop-gradient", (a,), None)
    node.value = _FORWARD["stop-gradient"](node)
    return node


# ---------------------------------------------------------------------------
# Forward rules (recomputable from input values).
# ---------------------------------------------------------------------------


def _fwd_matmul(n: Node):
    a, b = n.inputs
    ta, tb = n.meta
    left = a.value.T if ta else a.value
    right = b.value.T if tb else b.value
    return left @ right


def _fwd_add(n: Node):
    a, b = n.inputs
    if n.meta:
        return np.add(a.value, b.value, out=a.value)
    return a.value + b.value


def _fwd_relu(n: Node):
    x = n.inputs[0].value
    if n.meta:
        return np.maximum(x, 0.0, out=x)
    return np.maximum(x, 0.0)


def _fwd_softmax(n: Node):
    x = n.inputs[0].value
    shifted = x - x.max(axis=1, keepdims=True)
    e = np.exp(shifted, out=shifted)
    e /= e.sum(axis=1, keepdims=True)
    return e


def _fwd_onehot(n: Node):
    x = n.inputs[0].value
    out = np.zeros_like(x)
    out[np.arange(x.shape[0]), x.argmax(axis=1)] = 1.0
    return out


_FORWARD: dict[str, Callable[[Node], np.ndarray]] = {
    "matmul": _fwd_matmul,
    "add": _fwd_add,
    "sub": lambda n: n.inputs[0].value - n.inputs[1].value,
    "mul": lambda n: n.inputs[0].value * n.inputs[1].value,
    "div": lambda n: n.inputs[0].value / np.maximum(n.inputs[1].value, EPS_CLAMP),
    "scale": lambda n: n.inputs[0].value * n.meta,
    "relu": _fwd_relu,
    "log": lambda n: np.log(np.maximum(n.inputs[0].value, EPS_CLAMP)),
    "sqrt": lambda n: np.sqrt(np.maximum(n.inputs[0].value, 0.0)),
    "row-softmax": _fwd_softmax,
    "row-onehot": _fwd_onehot,
    "concat-cols": lambda n: np.concatenate([p.value for p in n.inputs], axis=1),
    "sum-all": lambda n: n.inputs[0].value.sum().reshape(1, 1),
    "mean-all": lambda n: n.inputs[0].value.mean().reshape(1, 1),
    "row-sum": lambda n: n.inputs[0].value.sum(axis=1, keepdims=True),
    "col-sum": lambda n: n.inputs[0].value.sum(axis=0, keepdims=True),
    "col-max": lambda n: n.inputs[0].value.max(axis=0, keepdims=True),
    "stop-gradient": lambda n: n.inputs[0].value,
}


# ---------------------------------------------------------------------------
# Backward rules. ``own=True`` marks a freshly allocated (or donated) buffer
# that the receiving node may adopt without copying; the default copies.
# ---------------------------------------------------------------------------


def _acc(node: Node, g: np.ndarray, own: bool = False):
    if not node.needs_grad:
        return
    if node.grad is None:
        node.grad = g if own else g.copy()
    else:
        node.grad += g


def _bwd_matmul(n: Node, g):
    a, b = n.inputs
    ta, tb = n.meta
    left = a.value.T if ta else a.value
    right = b.value.T if tb else b.value
    if a.needs_grad:
        ga = g @ right.T
        _acc(a, ga.T if ta else ga, own=True)
    if b.needs_grad:
        gb = left.T @ g
        _acc(b, gb.T if tb else gb, own=True)


def _bwd_add(n: Node, g):
    a, b = n.inputs
    if b.value.shape != n.value.shape:  # bias row broadcast over rows
        _acc(b, g.sum(axis=0, keepdims=True), own=True)
        _acc(a, g, own=True)  # donated: g is dead after this node
        return
    _acc(a, g)
    _acc(b, g, own=True)


def _bwd_sub(n: Node, g):
    a, b = n.inputs
    _acc(a, g)
    if b.needs_grad:
        np.negative(g, out=g)
        _acc(b, g, own=True)


def _bwd_mul(n: Node, g):
    a, b = n.inputs
    if b.needs_grad:
        _acc(b, g * a.value, own=True)
    if a.needs_grad:
        np.multiply(g, b.value, out=g)
        _acc(a, g, own=True)


def _bwd_div(n: Node, g):
    a, b = n.inputs
    denom = np.maximum(b.value, EPS_CLAMP)
    if b.needs_grad:
        # Below the clamp the output no longer depends on b.
        live = (b.value >= EPS_CLAMP).astype(np.float64)
        _acc(b, -g * a.value / (denom * denom) * live, own=True)
    if a.needs_grad:
        np.divide(g, denom, out=g)
        _acc(a, g, own=True)


def _bwd_log(n: Node, g):
    a = n.inputs[0]
    np.divide(g, np.maximum(a.value, EPS_CLAMP), out=g)
    g[a.value < EPS_CLAMP] = 0.0
    _acc(a, g, own=True)


def _bwd_sqrt(n: Node, g):
    a = n.inputs[0]
    live = n.value >= EPS_CLAMP
    _acc(a, np.where(live, 0.5 * g / np.maximum(n.value, EPS_CLAMP), 0.0), own=True)


def _bwd_softmax(n: Node, g):
    s = n.value
    inner = (g * s).sum(axis=1, keepdims=True)
    np.subtract(g, inner, out=g)
    np.multiply(g, s, out=g)
    _acc(n.inputs[0], g, own=True)


def _bwd_relu(n: Node, g):
    np.multiply(g, n.value > 0.0, out=g)
    _acc(n.inputs[0], g, own=True)


def _bwd_scale(n: Node, g):
    g *= n.meta
    _acc(n.inputs[0], g, own=True)


def _bwd_concat(n: Node, g):
    # Column ranges are disjoint, so the slices can be adopted as views of
    # the (dead after this node) upstream buffer.
    offset = 0
    for p in n.inputs:
        w = p.value.shape[1]
        _acc(p, g[:, offset:offset + w], own=True)
        offset += w


def _bwd_colmax(n: Node, g):
    a = n.inputs[0]
    idx = a.value.argmax(axis=0)  # first max per column
    out = np.zeros_like(a.value)
    out[idx, np.arange(a.value.shape[1])] = g[0]
    _acc(a, out, own=True)


_BACKWARD: dict[str, Callable[[Node, np.ndarray], None]] = {
    "matmul": _bwd_matmul,
    "add": _bwd_add,
    "sub": _bwd_sub,
    "mul": _bwd_mul,
    "div": _bwd_div,
    "scale": _bwd_scale,
    "relu": _bwd_relu,
    "log": _bwd_log,
    "sqrt": _bwd_sqrt,
    "row-softmax": _bwd_softmax,
    "row-onehot": lambda n, g: None,  # piecewise constant
    "concat-cols": _bwd_concat,
    "sum-all": lambda n, g: _acc(
        n.inputs[0], np.full_like(n.inputs[0].value, g[0, 0]), own=True
    ),
    "mean-all": lambda n, g: _acc(
        n.inputs[0],
        np.full_like(n.inputs[0].value, g[0, 0] / n.inputs[0].value.size),
        own=True,
    ),
    "row-sum": lambda n, g: _acc(n.inputs[0], np.broadcast_to(g, n.inputs[0].value.shape)),
    "col-sum": lambda n, g: _acc(n.inputs[0], np.broadcast_to(g, n.inputs[0].value.shape)),
    "col-max": _bwd_colmax,
    "stop-gradient": lambda n, g: None,
}


def backward(output: Node) -> None:
    """Populate ``grad`` on every leaf and constant reachable from ``output``.

    ``output`` must be a 1 x 1 scalar. Nodes are visited in reverse
    construction order exactly once, so the accumulation order (and hence the
    result bit pattern) is fixed. Intermediate gradient buffers are donated
    or released as soon as their node is processed; leaves and constants keep
    theirs (zero where no gradient flows, e.g. behind stop-gradient).
    """
    if output.value.shape != (1, 1):
        raise GraphError(
            f"backward: output node {output.id} must be 1x1, got {output.value.shape}"
        )
    graph = output.graph
    graph.zero_grad()
    output.grad = np.ones((1, 1))
    for node in reversed(graph.nodes):
        if node.op in ("leaf", "const") or node.grad is None:
            continue
        _BACKWARD[node.op](node, node.grad)
        node.grad = None
    # Leaves cut off by stop-gradient (or simply unused) carry a zero grad.
    for node in graph.nodes:
        if node.op in ("leaf", "const") and node.grad is None:
            node.grad = np.zeros_like(node.value)


def finite_difference_gradient(
    f: Callable[[np.ndarray], float], x: np.ndarray, step: float = 1e-5
) -> np.ndarray:
    """Central-difference gradient of a scalar function of a matrix.

    Independent of the tape: ``f`` is evaluated 2 * x.size times at
    ``x +- step`` per entry.
    """
    if step <= 0:
        raise ValueError("finite_difference_gradient: step must be positive")
    x = np.array(x, dtype=np.float64)
    grad = np.zeros_like(x)
    it = np.nditer(x, flags=["multi_index"])
    for _ in it:
        idx = it.multi_index
        orig = x[idx]
        x[idx] = orig + step
        f_plus = float(f(x))
        x[idx] = orig - step
        f_minus = float(f(x))
        x[idx] = orig
        if not (np.isfinite(f_plus) and np.isfinite(f_minus)):
            raise ValueError(
                f"finite_difference_gradient: non-finite evaluation at index {idx}"
            )
        grad[idx] = (f_plus - f_minus) / (2.0 * step)
    return grad
