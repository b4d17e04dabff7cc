"""Graph IR for DNN inference models.

The graph is an immutable-by-convention DAG of operation nodes over named
tensor buffers. Activations use NHWC layout with batch fixed to 1,
convolution weights are (out_channels, kh, kw, in_channels), depthwise
weights (channels, kh, kw, 1) and dense weights (out_features, in_features).

Integer models accumulate in 32 bit: convolution-like ops consuming i8/i32
data produce i32 tensors, everything else preserves its input dtype. This
keeps tiled and untiled integer execution bit-exact.
"""

from __future__ import annotations

import base64
import json
import math
from dataclasses import dataclass, field
from enum import Enum

import numpy as np


class GraphError(Exception):
    """Base class for IR construction, validation and inference errors."""


class UnknownTensor(GraphError):
    pass


class ShapeMismatch(GraphError):
    pass


class SerializationError(GraphError):
    pass


class DataType(Enum):
    F32 = "f32"
    I8 = "i8"
    I32 = "i32"

    @property
    def byte_width(self) -> int:
        return _BYTE_WIDTH[self]

    @property
    def np_dtype(self) -> np.dtype:
        # Explicit little-endian types; base64 payloads and tensor files are LE.
        return _NP_DTYPE[self]

    @property
    def is_integer(self) -> bool:
        return self is not DataType.F32


_BYTE_WIDTH = {DataType.F32: 4, DataType.I8: 1, DataType.I32: 4}
_NP_DTYPE = {
    DataType.F32: np.dtype("<f4"),
    DataType.I8: np.dtype("i1"),
    DataType.I32: np.dtype("<i4"),
}

# Guard for the element-count overflow contract; dims are validated positive.
_MAX_ELEMENTS = 1 << 62


class TensorKind(Enum):
    MODEL_INPUT = "input"
    MODEL_OUTPUT = "output"
    WEIGHT = "weight"
    INTERMEDIATE = "intermediate"


def element_count(shape: tuple[int, ...]) -> int:
    n = math.prod(shape)
    if n > _MAX_ELEMENTS:
        raise GraphError(f"Overflow: element count {n} exceeds supported range")
    return n


@dataclass(eq=False)
class TensorDef:
    """A named buffer: shape may be None until shape inference fills it."""

    id: str
    shape: tuple[int, ...] | None
    dtype: DataType
    kind: TensorKind
    data: np.ndarray | None = None

    def __post_init__(self):
        if self.shape is not None:
            self.shape = tuple(int(d) for d in self.shape)

    @property
    def rank(self) -> int:
        if self.shape is None:
            raise GraphError(f"tensor {self.id} has no shape")
        return len(self.shape)

    def element_count(self) -> int:
        if self.shape is None:
            raise GraphError(f"tensor {self.id} has no shape")
        return element_count(self.shape)

    def size_bytes(self) -> int:
        return buffer_size(self)


def buffer_size(tensor: TensorDef) -> int:
    """Byte footprint of one buffer: element count times element width."""
    return tensor.element_count() * tensor.dtype.byte_width


class OpKind(Enum):
    CONV2D = "conv2d"
    DEPTHWISE_CONV2D = "depthwise_conv2d"
    DENSE = "dense"
    BIAS_ADD = "bias_add"
    ACTIVATION = "activation"
    MAX_POOL = "max_pool"
    AVG_POOL = "avg_pool"
    PAD = "pad"
    ADD = "add"
    GATHER = "gather"
    REDUCE_MEAN = "reduce_mean"
    SOFTMAX = "softmax"
    SLICE = "slice"
    CONCAT = "concat"
    MERGE = "merge"


# (min_inputs, max_inputs); every op produces exactly one output.
_ARITY: dict[OpKind, tuple[int, int]] = {
    OpKind.CONV2D: (2, 2),
    OpKind.DEPTHWISE_CONV2D: (2, 2),
    OpKind.DENSE: (2, 2),
    OpKind.BIAS_ADD: (2, 2),
    OpKind.ACTIVATION: (1, 1),
    OpKind.MAX_POOL: (1, 1),
    OpKind.AVG_POOL: (1, 1),
    OpKind.PAD: (1, 1),
    OpKind.ADD: (2, 2),
    OpKind.GATHER: (2, 2),
    OpKind.REDUCE_MEAN: (1, 1),
    OpKind.SOFTMAX: (1, 1),
    OpKind.SLICE: (1, 1),
    OpKind.CONCAT: (2, 64),
    OpKind.MERGE: (2, 64),
}


@dataclass(eq=False)
class Node:
    id: str
    op: OpKind
    attrs: dict
    inputs: list[str]
    outputs: list[str]

    def attr(self, name, default=None):
        return self.attrs.get(name, default)


class Graph:
    """Container of tensors and nodes plus derived producer/consumer maps.

    Graphs are treated as immutable once built; passes construct new graphs
    instead of mutating shared state. A tensor is a single shared buffer read
    by all of its consumers.
    """

    def __init__(self):
        self.tensors: dict[str, TensorDef] = {}
        self.nodes: dict[str, Node] = {}
        self.fusion_barriers: set[str] = set()
        self._producer: dict[str, str] = {}
        self._consumers: dict[str, list[str]] = {}

    def add_tensor(self, t: TensorDef) -> TensorDef:
        if t.id in self.tensors:
            raise GraphError(f"duplicate tensor id {t.id!r}")
        self.tensors[t.id] = t
        return t

    def add_node(self, n: Node) -> Node:
        if n.id in self.nodes:
            raise GraphError(f"duplicate node id {n.id!r}")
        self.nodes[n.id] = n
        for out in n.outputs:
            if out in self._producer:
                # Recorded here but reported by validate(); keep first producer.
                continue
            self._producer[out] = n.id
        for inp in n.inputs:
            self._consumers.setdefault(inp, [])
            if n.id not in self._consumers[inp]:
                self._consumers[inp].append(n.id)
        return n

    def producer(self, tensor_id: str) -> Node | None:
        nid = self._producer.get(tensor_id)
        return self.nodes[nid] if nid is not None else None

    def consumers(self, tensor_id: str) -> list[Node]:
        return [self.nodes[nid] for nid in self._consumers.get(tensor_id, [])]

    def model_inputs(self) -> list[TensorDef]:
        return [t for t in self.tensors.values() if t.kind is TensorKind.MODEL_INPUT]

    def model_outputs(self) -> list[TensorDef]:
        return [t for t in self.tensors.values() if t.kind is TensorKind.MODEL_OUTPUT]

    def topo_order(self) -> list[str]:
        """Deterministic topological order (Kahn, ready set sorted by id)."""
        indeg = {nid: 0 for nid in self.nodes}
        succs: dict[str, list[str]] = {nid: [] for nid in self.nodes}
        for n in self.nodes.values():
            for inp in n.inputs:
                p = self._producer.get(inp)
                if p is not None and p != n.id:
                    succs[p].append(n.id)
                    indeg[n.id] += 1
        ready = sorted(nid for nid, d in indeg.items() if d == 0)
        order: list[str] = []
        import heapq

        heapq.heapify(ready)
        while ready:
            nid = heapq.heappop(ready)
            order.append(nid)
            for s in succs[nid]:
                indeg[s] -= 1
                if indeg[s] == 0:
                    heapq.heappush(ready, s)
        if len(order) != len(self.nodes):
            raise GraphError("graph contains a cycle")
        return order

    def copy(self) -> Graph:
        g = Graph()
        for t in self.tensors.values():
            g.add_tensor(TensorDef(t.id, t.shape, t.dtype, t.kind, t.data))
        for n in self.nodes.values():
            g.add_node(Node(n.id, n.op, dict(n.attrs), list(n.inputs), list(n.outputs)))
        g.fusion_barriers = set(self.fusion_barriers)
        return g


@dataclass(frozen=True)
class Violation:
    kind: str
    detail: str

    def __str__(self):
        return f"{self.kind}: {self.detail}"


def validate(graph: Graph) -> list[Violation]:
    """Collect every structural invariant violation; empty list means ok."""
    out: list[Violation] = []
    produced: dict[str, list[str]] = {}
    for n in graph.nodes.values():
        lo, hi = _ARITY[n.op]
        if not (lo <= len(n.inputs) <= hi) or len(n.outputs) != 1:
            out.append(Violation("Arity", f"node {n.id} has {len(n.inputs)} inputs / {len(n.outputs)} outputs for {n.op.value}"))
        for tid in list(n.inputs) + list(n.outputs):
            if tid not in graph.tensors:
                out.append(Violation("UnknownTensor", f"node {n.id} references {tid!r}"))
        for tid in n.outputs:
            produced.setdefault(tid, []).append(n.id)

    for tid, producers in produced.items():
        if len(producers) > 1:
            out.append(Violation("MultipleProducers", f"tensor {tid} produced by {producers}"))

    for t in graph.tensors.values():
        if t.shape is not None and any(d < 1 for d in t.shape):
            out.append(Violation("BadShape", f"tensor {t.id} has non-positive dim {t.shape}"))
        n_prod = len(produced.get(t.id, []))
        if t.kind in (TensorKind.MODEL_INPUT, TensorKind.WEIGHT):
            if n_prod:
                out.append(Violation("UnexpectedProducer", f"{t.kind.value} tensor {t.id} has a producer"))
        else:
            if n_prod != 1:
                out.append(Violation("MissingProducer", f"{t.kind.value} tensor {t.id} has {n_prod} producers"))
        if t.kind is TensorKind.INTERMEDIATE and not graph.consumers(t.id):
            out.append(Violation("DeadTensor", f"intermediate {t.id} has no consumer"))
        if t.kind is TensorKind.WEIGHT:
            if t.data is None:
                out.append(Violation("MissingData", f"weight {t.id} carries no payload"))
            elif t.shape is not None and t.data.size != t.element_count():
                out.append(Violation("PayloadSize", f"weight {t.id}: {t.data.size} elements vs shape {t.shape}"))
        elif t.data is not None:
            out.append(Violation("UnexpectedData", f"{t.kind.value} tensor {t.id} carries a payload"))

    try:
        graph.topo_order()
    except GraphError:
        out.append(Violation("Cycle", "graph is not acyclic"))
    return out


# ---------------------------------------------------------------------------
# Shape and dtype inference
# ---------------------------------------------------------------------------

def _acc_dtype(dt: DataType) -> DataType:
    return DataType.I32 if dt.is_integer else DataType.F32


def _conv_extent(extent: int, k: int, stride: int, pad_lo: int, pad_hi: int, node: str) -> int:
    span = extent + pad_lo + pad_hi - k
    if span < 0:
        raise ShapeMismatch(f"{node}: kernel {k} exceeds padded extent {extent + pad_lo + pad_hi}")
    return span // stride + 1


def _infer_conv2d(node: Node, x: TensorDef, w: TensorDef):
    if x.rank != 4 or w.rank != 4:
        raise ShapeMismatch(f"{node.id}: conv2d needs rank-4 input/weight, got {x.shape}/{w.shape}")
    sh, sw = node.attr("strides", [1, 1])
    pt, pb, pl, pr = node.attr("padding", [0, 0, 0, 0])
    cout, kh, kw, cin = w.shape
    if x.shape[3] != cin:
        raise ShapeMismatch(f"{node.id}: input channels {x.shape[3]} vs weight {cin}")
    h = _conv_extent(x.shape[1], kh, sh, pt, pb, node.id)
    v = _conv_extent(x.shape[2], kw, sw, pl, pr, node.id)
    return (1, h, v, cout), _acc_dtype(x.dtype)


def _infer_depthwise(node: Node, x: TensorDef, w: TensorDef):
    if x.rank != 4 or w.rank != 4 or w.shape[3] != 1:
        raise ShapeMismatch(f"{node.id}: depthwise needs (C,kh,kw,1) weight, got {w.shape}")
    sh, sw = node.attr("strides", [1, 1])
    pt, pb, pl, pr = node.attr("padding", [0, 0, 0, 0])
    c, kh, kw, _ = w.shape
    if x.shape[3] != c:
        raise ShapeMismatch(f"{node.id}: channels {x.shape[3]} vs weight {c}")
    h = _conv_extent(x.shape[1], kh, sh, pt, pb, node.id)
    v = _conv_extent(x.shape[2], kw, sw, pl, pr, node.id)
    return (1, h, v, c), _acc_dtype(x.dtype)


def _dense_features(x: TensorDef, node: str) -> int:
    # Accepts (1, F) or a (1,1,...,F) classifier head input.
    if any(d != 1 for d in x.shape[:-1]):
        raise ShapeMismatch(f"{node}: dense input must be flat, got {x.shape}")
    return x.shape[-1]


def _infer_dense(node: Node, x: TensorDef, w: TensorDef):
    if w.rank != 2:
        raise ShapeMismatch(f"{node.id}: dense weight must be rank 2, got {w.shape}")
    fin = _dense_features(x, node.id)
    out_f, in_f = w.shape
    if fin != in_f:
        raise ShapeMismatch(f"{node.id}: input features {fin} vs weight {in_f}")
    return (1, out_f), _acc_dtype(x.dtype)


def infer_node(node: Node, in_defs: list[TensorDef]):
    """Output (shape, dtype) of a node from its input defs."""
    op = node.op
    x = in_defs[0]
    if op is OpKind.CONV2D:
        return _infer_conv2d(node, x, in_defs[1])
    if op is OpKind.DEPTHWISE_CONV2D:
        return _infer_depthwise(node, x, in_defs[1])
    if op is OpKind.DENSE:
        return _infer_dense(node, x, in_defs[1])
    if op is OpKind.BIAS_ADD:
        b = in_defs[1]
        if b.rank != 1 or b.shape[0] != x.shape[-1]:
            raise ShapeMismatch(f"{node.id}: bias {b.shape} vs channels {x.shape[-1]}")
        if b.dtype != x.dtype:
            raise ShapeMismatch(f"{node.id}: bias dtype {b.dtype.value} vs input {x.dtype.value}")
        return x.shape, x.dtype
    if op is OpKind.ACTIVATION:
        if node.attr("fn", "relu") not in ("relu", "none"):
            raise ShapeMismatch(f"{node.id}: unsupported activation {node.attr('fn')!r}")
        return x.shape, x.dtype
    if op in (OpKind.MAX_POOL, OpKind.AVG_POOL):
        if x.rank != 4:
            raise ShapeMismatch(f"{node.id}: pool needs rank-4 input")
        wh, ww = node.attr("window")
        sh, sw = node.attr("strides", [wh, ww])
        h = _conv_extent(x.shape[1], wh, sh, 0, 0, node.id)
        v = _conv_extent(x.shape[2], ww, sw, 0, 0, node.id)
        return (1, h, v, x.shape[3]), x.dtype
    if op is OpKind.PAD:
        pads = node.attr("pads")
        if len(pads) != x.rank:
            raise ShapeMismatch(f"{node.id}: pads rank {len(pads)} vs input rank {x.rank}")
        shape = tuple(d + lo + hi for d, (lo, hi) in zip(x.shape, pads))
        return shape, x.dtype
    if op is OpKind.ADD:
        y = in_defs[1]
        if x.shape != y.shape or x.dtype != y.dtype:
            raise ShapeMismatch(f"{node.id}: add operands differ: {x.shape}/{x.dtype.value} vs {y.shape}/{y.dtype.value}")
        return x.shape, x.dtype
    if op is OpKind.GATHER:
        table, idx = in_defs
        if node.attr("axis", 0) != 0:
            raise ShapeMismatch(f"{node.id}: gather only supports axis 0")
        if idx.dtype is not DataType.I32:
            raise ShapeMismatch(f"{node.id}: gather indices must be i32")
        return tuple(idx.shape) + tuple(table.shape[1:]), table.dtype
    if op is OpKind.REDUCE_MEAN:
        ax = node.attr("axis")
        if not (0 <= ax < x.rank):
            raise ShapeMismatch(f"{node.id}: reduce axis {ax} out of range for {x.shape}")
        shape = tuple(d for i, d in enumerate(x.shape) if i != ax)
        return shape, _acc_dtype(x.dtype)
    if op is OpKind.SOFTMAX:
        if x.dtype is not DataType.F32:
            raise ShapeMismatch(f"{node.id}: softmax requires f32 input")
        return x.shape, x.dtype
    if op is OpKind.SLICE:
        ax, b, e = node.attr("axis"), node.attr("begin"), node.attr("end")
        if not (0 <= ax < x.rank) or not (0 <= b < e <= x.shape[ax]):
            raise ShapeMismatch(f"{node.id}: slice [{b}:{e}] on axis {ax} invalid for {x.shape}")
        shape = tuple(e - b if i == ax else d for i, d in enumerate(x.shape))
        return shape, x.dtype
    if op is OpKind.CONCAT:
        ax = node.attr("axis")
        base = list(x.shape)
        total = 0
        for t in in_defs:
            if t.rank != x.rank or t.dtype != x.dtype:
                raise ShapeMismatch(f"{node.id}: concat operand mismatch")
            for i, d in enumerate(t.shape):
                if i != ax and d != base[i]:
                    raise ShapeMismatch(f"{node.id}: concat dims differ off-axis")
            total += t.shape[ax]
        base[ax] = total
        return tuple(base), x.dtype
    if op is OpKind.MERGE:
        for t in in_defs:
            if t.shape != x.shape or t.dtype != x.dtype:
                raise ShapeMismatch(f"{node.id}: merge inputs must be identical, got {t.shape}")
        if node.attr("activation", "none") not in ("relu", "none"):
            raise ShapeMismatch(f"{node.id}: unsupported merge activation")
        return x.shape, x.dtype
    raise GraphError(f"no inference rule for {op}")


def infer_shapes(graph: Graph) -> Graph:
    """Propagate shapes/dtypes topologically; verify any declared shapes.

    Idempotent: running it on an already-annotated graph checks consistency
    and returns an equivalent graph.
    """
    g = graph.copy()
    for t in g.tensors.values():
        if t.kind in (TensorKind.MODEL_INPUT, TensorKind.WEIGHT) and t.shape is None:
            raise ShapeMismatch(f"{t.kind.value} tensor {t.id} must have a shape")
    for nid in g.topo_order():
        n = g.nodes[nid]
        in_defs = []
        for tid in n.inputs:
            if tid not in g.tensors:
                raise UnknownTensor(f"node {nid} reads unknown tensor {tid!r}")
            d = g.tensors[tid]
            if d.shape is None:
                raise ShapeMismatch(f"node {nid}: input {tid} has no shape (bad producer order?)")
            in_defs.append(d)
        shape, dtype = infer_node(n, in_defs)
        out_id = n.outputs[0]
        if out_id not in g.tensors:
            raise UnknownTensor(f"node {nid} writes unknown tensor {out_id!r}")
        out = g.tensors[out_id]
        if out.shape is not None and out.shape != shape:
            raise ShapeMismatch(f"node {nid}: expected {shape} for {out_id}, found {out.shape}")
        if out.dtype != dtype:
            raise ShapeMismatch(f"node {nid}: expected dtype {dtype.value} for {out_id}, found {out.dtype.value}")
        out.shape = shape
    return g


# ---------------------------------------------------------------------------
# JSON interchange (.dnn.json)
# ---------------------------------------------------------------------------

def canonical_json(obj) -> str:
    return json.dumps(obj, indent=2, sort_keys=True) + "\n"


def _tensor_to_json(t: TensorDef) -> dict:
    d = {
        "id": t.id,
        "shape": list(t.shape) if t.shape is not None else None,
        "dtype": t.dtype.value,
        "kind": t.kind.value,
    }
    if t.data is not None:
        payload = np.ascontiguousarray(t.data, dtype=t.dtype.np_dtype)
        d["data"] = base64.b64encode(payload.tobytes()).decode("ascii")
    return d


def serialize(graph: Graph) -> str:
    doc = {
        "tensors": [_tensor_to_json(t) for t in graph.tensors.values()],
        "nodes": [
            {"id": n.id, "op": n.op.value, "attrs": n.attrs, "inputs": list(n.inputs), "outputs": list(n.outputs)}
            for n in graph.nodes.values()
        ],
    }
    if graph.fusion_barriers:
        doc["fusion_barriers"] = sorted(graph.fusion_barriers)
    return canonical_json(doc)


def deserialize(text: str) -> Graph:
    try:
        doc = json.loads(text)
    except json.JSONDecodeError as e:
        raise SerializationError(f"invalid JSON: {e}") from e
    g = Graph()
    try:
        for td in doc["tensors"]:
            dtype = DataType(td["dtype"])
            kind = TensorKind(td["kind"])
            shape = tuple(td["shape"]) if td.get("shape") is not None else None
            data = None
            if "data" in td:
                raw = base64.b64decode(td["data"])
                data = np.frombuffer(raw, dtype=dtype.np_dtype)
                if shape is not None:
                    data = data.reshape(shape)
            g.add_tensor(TensorDef(td["id"], shape, dtype, kind, data))
        for nd in doc["nodes"]:
            g.add_node(Node(nd["id"], OpKind(nd["op"]), dict(nd.get("attrs", {})), list(nd["inputs"]), list(nd["outputs"])))
        g.fusion_barriers = set(doc.get("fusion_barriers", []))
    except (KeyError, ValueError, TypeError) as e:
        raise SerializationError(f"malformed graph document: {e}") from e
    return g


def save(graph: Graph, path) -> None:
    with open(path, "w", encoding="utf-8") as f:
        f.write(serialize(graph))


def load(path) -> Graph:
    with open(path, "r", encoding="utf-8") as f:
        return deserialize(f.read())


def graphs_equal(a: Graph, b: Graph) -> bool:
    """Structural equality including weight payloads."""
    if set(a.tensors) != set(b.tensors) or set(a.nodes) != set(b.nodes):
        return False
    if a.fusion_barriers != b.fusion_barriers:
        return False
    for tid, ta in a.tensors.items():
        tb = b.tensors[tid]
        if (ta.shape, ta.dtype, ta.kind) != (tb.shape, tb.dtype, tb.kind):
            return False
        if (ta.data is None) != (tb.data is None):
            return False
        if ta.data is not None and not np.array_equal(ta.data, tb.data):
            return False
    for nid, na in a.nodes.items():
        nb = b.nodes[nid]
        if (na.op, na.attrs, na.inputs, na.outputs) != (nb.op, nb.attrs, nb.inputs, nb.outputs):
            return False
    return True
