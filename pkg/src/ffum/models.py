"""MLP classifiers and their flat parameter vectors.

A network is a chain of ``linear -> layer_norm? -> relu`` blocks, one per
hidden width, followed by a linear head producing logits. All learnable
tensors live in one :class:`ParamVector` whose segment order and shapes are a
pure function of the :class:`ModelSpec`, so vectors from the same spec can be
added, averaged and compared directly.
"""

from __future__ import annotations

import io
import math
import struct
from dataclasses import dataclass, field

import numpy as np

from .autodiff import Graph, backward, forward_op
from .errors import ConfigurationError, IngestionError, UsageError

MAGIC = b"FFUM"
CHECKPOINT_VERSION = 1


@dataclass(frozen=True)
class ModelSpec:
    input_dim: int = 196
    hidden_dims: tuple[int, ...] = (128,)
    num_classes: int = 10
    use_layer_norm: bool = True

    def __post_init__(self):
        object.__setattr__(self, "hidden_dims", tuple(int(h) for h in self.hidden_dims))
        if self.input_dim < 1:
            raise ConfigurationError("model.input_dim must be positive")
        if not self.hidden_dims or any(h < 1 for h in self.hidden_dims):
            raise ConfigurationError("model.hidden_dims must be a non-empty list of positive ints")
        if self.num_classes < 2:
            raise ConfigurationError("model.num_classes must be at least 2")

    def layout(self) -> tuple[tuple[str, tuple[int, ...]], ...]:
        segs = []
        fan_in = self.input_dim
        for i, h in enumerate(self.hidden_dims):
            segs.append((f"dense{i}.weight", (fan_in, h)))
            segs.append((f"dense{i}.bias", (h,)))
            if self.use_layer_norm:
                segs.append((f"norm{i}.gain", (h,)))
                segs.append((f"norm{i}.bias", (h,)))
            fan_in = h
        segs.append(("head.weight", (fan_in, self.num_classes)))
        segs.append(("head.bias", (self.num_classes,)))
        return tuple(segs)


@dataclass(frozen=True, eq=False)
class ParamVector:
    """Every learnable parameter of a model as one flat float64 array.

    ``values`` is read-only; arithmetic always returns a new vector.
    """

    layout: tuple[tuple[str, tuple[int, ...]], ...]
    values: np.ndarray = field(repr=False)

    def __post_init__(self):
        vals = np.array(self.values, dtype=np.float64).reshape(-1)
        total = sum(math.prod(shape) for _, shape in self.layout)
        if vals.size != total:
            raise UsageError(f"ParamVector: {vals.size} values for layout of size {total}")
        vals.flags.writeable = False
        object.__setattr__(self, "values", vals)

    @classmethod
    def zeros(cls, spec: ModelSpec) -> "ParamVector":
        layout = spec.layout()
        return cls(layout, np.zeros(sum(math.prod(s) for _, s in layout)))

    @classmethod
    def from_segments(cls, layout, arrays: dict[str, np.ndarray]) -> "ParamVector":
        return cls(layout, np.concatenate([np.asarray(arrays[n], dtype=np.float64).reshape(-1) for n, _ in layout]))

    def __len__(self):
        return self.values.size

    @property
    def total_len(self) -> int:
        return self.values.size

    def _offsets(self):
        off = 0
        for name, shape in self.layout:
            size = math.prod(shape)
            yield name, shape, off, off + size
            off += size

    def segments(self):
        for name, shape, a, b in self._offsets():
            yield name, shape, self.values[a:b].reshape(shape)

    def segment(self, name: str) -> np.ndarray:
        for seg_name, shape, a, b in self._offsets():
            if seg_name == name:
                return self.values[a:b].reshape(shape)
        raise UsageError(f"no parameter segment named {name!r}")

    def replace_segment(self, name: str, array) -> "ParamVector":
        vals = self.values.copy()
        for seg_name, shape, a, b in self._offsets():
            if seg_name == name:
                arr = np.asarray(array, dtype=np.float64)
                if arr.shape != shape:
                    raise UsageError(f"segment {name!r} has shape {shape}, got {arr.shape}")
                vals[a:b] = arr.reshape(-1)
                return ParamVector(self.layout, vals)
        raise UsageError(f"no parameter segment named {name!r}")

    def bitwise_equal(self, other: "ParamVector") -> bool:
        return self.layout == other.layout and self.values.tobytes() == other.values.tobytes()

    def to_bytes(self) -> bytes:
        buf = io.BytesIO()
        buf.write(MAGIC)
        buf.write(struct.pack("<HI", CHECKPOINT_VERSION, len(self.layout)))
        for name, shape, arr in self.segments():
            raw = name.encode("utf-8")
            buf.write(struct.pack("<H", len(raw)))
            buf.write(raw)
            buf.write(struct.pack("<B", len(shape)))
            buf.write(struct.pack(f"<{len(shape)}I", *shape))
            buf.write(np.ascontiguousarray(arr, dtype="<f8").tobytes())
        return buf.getvalue()

    @classmethod
    def from_bytes(cls, blob: bytes) -> "ParamVector":
        pos = 0

        def take(n):
            nonlocal pos
            if pos + n > len(blob):
                raise IngestionError("truncated checkpoint", offset=pos)
            chunk = blob[pos:pos + n]
            pos += n
            return chunk

        if take(4) != MAGIC:
            raise IngestionError("bad checkpoint magic", offset=0)
        version, count = struct.unpack("<HI", take(6))
        if version != CHECKPOINT_VERSION:
            raise IngestionError(f"unsupported checkpoint version {version}", offset=4)
        layout, chunks = [], []
        for _ in range(count):
            (name_len,) = struct.unpack("<H", take(2))
            name = take(name_len).decode("utf-8")
            (rank,) = struct.unpack("<B", take(1))
            shape = struct.unpack(f"<{rank}I", take(4 * rank))
            size = math.prod(shape)
            chunks.append(np.frombuffer(take(8 * size), dtype="<f8").astype(np.float64))
            layout.append((name, tuple(shape)))
        if pos != len(blob):
            raise IngestionError("trailing bytes after checkpoint", offset=pos)
        values = np.concatenate(chunks) if chunks else np.zeros(0)
        return cls(tuple(layout), values)


def save_checkpoint(path, params: ParamVector) -> None:
    from .io_utils import atomic_write_bytes

    atomic_write_bytes(path, params.to_bytes())


def load_checkpoint(path) -> ParamVector:
    with open(path, "rb") as fh:
        return ParamVector.from_bytes(fh.read())


def init_params(spec: ModelSpec, seed: int) -> ParamVector:
    """Glorot-uniform weights, zero biases, unit layer-norm gains."""
    rng = np.random.default_rng(seed)
    arrays = {}
    for name, shape in spec.layout():
        if name.endswith(".weight"):
            limit = math.sqrt(6.0 / (shape[0] + shape[1]))
            arrays[name] = rng.uniform(-limit, limit, size=shape)
        elif name.endswith(".gain"):
            arrays[name] = np.ones(shape)
        else:
            arrays[name] = np.zeros(shape)
    return ParamVector.from_segments(spec.layout(), arrays)


def _check_same(x: ParamVector, y: ParamVector):
    if x.layout != y.layout:
        raise UsageError("parameter vectors come from different model specs")


def param_axpy(a: float, x: ParamVector, y: ParamVector) -> ParamVector:
    _check_same(x, y)
    return ParamVector(x.layout, a * x.values + y.values)


def param_distance(x: ParamVector, y: ParamVector) -> float:
    _check_same(x, y)
    return float(np.linalg.norm(x.values - y.values))


def forward_logits(spec: ModelSpec, params: ParamVector, batch, graph: Graph) -> int:
    """Build the forward pass on ``graph``; returns the logits node id.

    Parameter leaves are registered in ``graph.param_nodes`` by segment name.
    """
    if params.layout != spec.layout():
        raise UsageError("params do not match the model spec")
    batch = np.asarray(batch, dtype=np.float64)
    if batch.ndim != 2 or batch.shape[1] != spec.input_dim:
        raise UsageError(
            f"batch shape {list(batch.shape)} does not match input_dim {spec.input_dim}"
        )
    seg = {name: arr for name, _, arr in params.segments()}
    h = graph.leaf(batch)
    for i in range(len(spec.hidden_dims)):
        w = graph.leaf(seg[f"dense{i}.weight"], name=f"dense{i}.weight")
        b = graph.leaf(seg[f"dense{i}.bias"], name=f"dense{i}.bias")
        h = forward_op(graph, "add", forward_op(graph, "matmul", h, w), b)
        if spec.use_layer_norm:
            g = graph.leaf(seg[f"norm{i}.gain"], name=f"norm{i}.gain")
            nb = graph.leaf(seg[f"norm{i}.bias"], name=f"norm{i}.bias")
            h = forward_op(graph, "layer_norm", h, g, nb)
        h = forward_op(graph, "relu", h)
    w = graph.leaf(seg["head.weight"], name="head.weight")
    b = graph.leaf(seg["head.bias"], name="head.bias")
    return forward_op(graph, "add", forward_op(graph, "matmul", h, w), b)


def predict_logits(spec: ModelSpec, params: ParamVector, x) -> np.ndarray:
    """Forward pass without gradient bookkeeping."""
    g = Graph()
    return g.value(forward_logits(spec, params, x, g))


def param_grads(graph: Graph, grads: dict, params: ParamVector) -> ParamVector:
    arrays = {name: grads[graph.param_nodes[name]] for name, _ in params.layout}
    return ParamVector.from_segments(params.layout, arrays)


def loss_and_grad(spec: ModelSpec, params: ParamVector, x, head) -> tuple[float, ParamVector]:
    """Evaluate ``head(logits) -> (loss, dloss/dlogits)`` and backprop to params."""
    g = Graph()
    logits = forward_logits(spec, params, x, g)
    loss, dlogits = head(g.value(logits))
    root = g.external(logits, loss, dlogits)
    grads = backward(g, root)
    return float(loss), param_grads(g, grads, params)
