"""Tape-style reverse-mode automatic differentiation over float64 arrays.

A :class:`Graph` is an append-only list of nodes. Each node records an op tag,
the ids of its inputs (always smaller than its own id) and its cached forward
value. Graphs are cheap and meant to be rebuilt for every mini-batch.

Example::

    g = Graph()
    x = g.leaf([-1.0, 2.0, 4.0])
    y = forward_op(g, "mean", forward_op(g, "relu", x))
    grads = backward(g, y)      # grads[x] == [0, 1/3, 1/3]
"""

from __future__ import annotations

import numpy as np

from .errors import ConfigurationError, NonFiniteError, UsageError

LN_EPS = 1e-5

OPS = (
    "matmul",
    "add",
    "mul_scalar",
    "relu",
    "layer_norm",
    "softmax_rows",
    "log",
    "sum",
    "mean",
    "select_rows",
)


def tensor(data, shape=None) -> np.ndarray:
    """Validate ``data`` as a finite float64 array, optionally of ``shape``."""
    arr = np.array(data, dtype=np.float64)
    if shape is not None:
        shape = tuple(int(s) for s in shape)
        if any(s <= 0 for s in shape):
            raise ConfigurationError(f"shape {shape} has a non-positive dimension")
        if arr.size != int(np.prod(shape)):
            raise ConfigurationError(
                f"data length {arr.size} does not match shape {shape}"
            )
        arr = arr.reshape(shape)
    if not np.all(np.isfinite(arr)):
        raise NonFiniteError("tensor contains NaN or Inf")
    return arr


def softmax(z: np.ndarray) -> np.ndarray:
    """Row-wise softmax over the last axis with max subtraction."""
    e = np.exp(z - z.max(axis=-1, keepdims=True))
    return e / e.sum(axis=-1, keepdims=True)


class Graph:
    def __init__(self):
        self.ops: list[str] = []
        self.inputs: list[tuple[int, ...]] = []
        self.values: list[np.ndarray] = []
        self.cache: list[object] = []
        # model code records which leaf holds which parameter segment here
        self.param_nodes: dict[str, int] = {}

    def __len__(self):
        return len(self.values)

    def value(self, node: int) -> np.ndarray:
        return self.values[node]

    def _append(self, op, inputs, value, cache=None) -> int:
        self.ops.append(op)
        self.inputs.append(tuple(inputs))
        self.values.append(value)
        self.cache.append(cache)
        return len(self.values) - 1

    def leaf(self, data, name: str | None = None) -> int:
        node = self._append("leaf", (), tensor(data))
        if name is not None:
            self.param_nodes[name] = node
        return node

    def external(self, node: int, value: float, grad: np.ndarray) -> int:
        """Scalar node whose derivative w.r.t. ``node`` is supplied directly.

        Used to attach a loss whose value and gradient were computed outside
        the graph (the f-divergence heads).
        """
        grad = np.asarray(grad, dtype=np.float64)
        if grad.shape != self.values[node].shape:
            raise ConfigurationError(
                f"external: gradient shape {grad.shape} != input shape "
                f"{self.values[node].shape}"
            )
        val = np.array(float(value))
        _check_finite(val, "external")
        return self._append("external", (node,), val, grad)


def _check_finite(arr, what):
    if not np.all(np.isfinite(arr)):
        raise NonFiniteError(f"non-finite values produced by {what}")


def _shape_error(op, *shapes):
    desc = " x ".join(str(list(s)) for s in shapes)
    return ConfigurationError(f"{op}: incompatible shapes {desc}")


def forward_op(graph: Graph, op: str, *inputs: int, **attrs) -> int:
    """Append ``op`` applied to ``inputs`` and return the new node id.

    ``mul_scalar`` takes ``scalar=``; ``select_rows`` takes ``rows=``.
    ``layer_norm`` takes three inputs: x, gain, bias.
    """
    if op not in _ARITY:
        raise ConfigurationError(f"unknown op {op!r}")
    if len(inputs) != _ARITY[op]:
        raise ConfigurationError(f"{op} expects {_ARITY[op]} inputs, got {len(inputs)}")
    vals = [graph.values[i] for i in inputs]
    cache = None
    if op == "matmul":
        a, b = vals
        if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
            raise _shape_error(op, a.shape, b.shape)
        out = a @ b
    elif op == "add":
        a, b = vals
        if a.shape == b.shape:
            pass
        elif a.ndim == 2 and b.ndim == 1 and a.shape[1] == b.shape[0]:
            pass
        else:
            raise _shape_error(op, a.shape, b.shape)
        out = a + b
    elif op == "mul_scalar":
        (a,) = vals
        out = a * float(attrs["scalar"])
        cache = float(attrs["scalar"])
    elif op == "relu":
        (a,) = vals
        out = np.maximum(a, 0.0)
    elif op == "layer_norm":
        x, gain, bias = vals
        d = x.shape[-1]
        if gain.shape != (d,) or bias.shape != (d,):
            raise _shape_error(op, x.shape, gain.shape, bias.shape)
        mu = x.mean(axis=-1, keepdims=True)
        xc = x - mu
        inv = 1.0 / np.sqrt((xc * xc).mean(axis=-1, keepdims=True) + LN_EPS)
        xhat = xc * inv
        out = xhat * gain + bias
        cache = (xhat, inv)
    elif op == "softmax_rows":
        (a,) = vals
        if a.ndim < 1:
            raise _shape_error(op, a.shape)
        out = softmax(a)
    elif op == "log":
        (a,) = vals
        if np.any(a <= 0.0):
            raise NonFiniteError("log: non-positive input")
        out = np.log(a)
    elif op == "sum":
        (a,) = vals
        out = np.array(a.sum())
    elif op == "mean":
        (a,) = vals
        out = np.array(a.mean())
    elif op == "select_rows":
        (a,) = vals
        rows = np.asarray(attrs["rows"], dtype=np.int64)
        if a.ndim < 1 or rows.ndim != 1 or np.any(rows < 0) or np.any(rows >= a.shape[0]):
            raise ConfigurationError(f"select_rows: bad row indices for shape {list(a.shape)}")
        out = a[rows]
        cache = rows
    _check_finite(out, op)
    return graph._append(op, inputs, out, cache)


_ARITY = {
    "matmul": 2, "add": 2, "mul_scalar": 1, "relu": 1, "layer_norm": 3,
    "softmax_rows": 1, "log": 1, "sum": 1, "mean": 1, "select_rows": 1,
}


def _vjp(graph: Graph, node: int, g: np.ndarray) -> list[np.ndarray]:
    op = graph.ops[node]
    ins = graph.inputs[node]
    vals = [graph.values[i] for i in ins]
    out = graph.values[node]
    cache = graph.cache[node]
    if op == "matmul":
        a, b = vals
        return [g @ b.T, a.T @ g]
    if op == "add":
        a, b = vals
        gb = g if b.shape == a.shape else g.sum(axis=0)
        return [g, gb]
    if op == "mul_scalar":
        return [g * cache]
    if op == "relu":
        return [g * (vals[0] > 0.0)]
    if op == "layer_norm":
        _, gain, _ = vals
        xhat, inv = cache
        dxhat = g * gain
        dx = inv * (
            dxhat
            - dxhat.mean(axis=-1, keepdims=True)
            - xhat * (dxhat * xhat).mean(axis=-1, keepdims=True)
        )
        red = tuple(range(g.ndim - 1))
        return [dx, (g * xhat).sum(axis=red), g.sum(axis=red)]
    if op == "softmax_rows":
        return [out * (g - (g * out).sum(axis=-1, keepdims=True))]
    if op == "log":
        return [g / vals[0]]
    if op == "sum":
        return [np.broadcast_to(g, vals[0].shape).copy()]
    if op == "mean":
        return [np.full(vals[0].shape, float(g) / vals[0].size)]
    if op == "select_rows":
        ga = np.zeros_like(vals[0])
        np.add.at(ga, cache, g)
        return [ga]
    if op == "external":
        return [cache * float(g)]
    raise ConfigurationError(f"no gradient rule for op {op!r}")


def backward(graph: Graph, root: int) -> dict[int, np.ndarray]:
    """Gradients of scalar node ``root`` w.r.t. every node in ``graph``.

    Nodes that are not ancestors of ``root`` get all-zero gradients.
    """
    if graph.values[root].size != 1:
        raise UsageError(
            f"backward needs a scalar root, node {root} has shape "
            f"{list(graph.values[root].shape)}"
        )
    grads: dict[int, np.ndarray] = {root: np.ones_like(graph.values[root])}
    for node in range(root, -1, -1):
        g = grads.get(node)
        if g is None or not graph.inputs[node]:
            continue
        for src, gi in zip(graph.inputs[node], _vjp(graph, node, g)):
            if src in grads:
                grads[src] = grads[src] + gi
            else:
                grads[src] = gi
    table = {}
    for node, val in enumerate(graph.values):
        gnode = grads.get(node)
        if gnode is None:
            gnode = np.zeros_like(val)
        _check_finite(gnode, f"backward (node {node}, op {graph.ops[node]})")
        table[node] = gnode
    return table

