"""Reference interpreter and static MAC counter.

Execution is deliberately simple: every node is evaluated fine-grained in a
topological order with numpy, independent of any fusion view. Integer models
run with 64-bit internal arithmetic and are range-checked against the
declared output dtype, so integer results are exact and order-independent.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass

import numpy as np

from .ir import DataType, Graph, Node, OpKind, TensorDef, TensorKind


class ExecutionError(Exception):
    pass


class MissingInput(ExecutionError):
    pass


class NumericOverflow(ExecutionError):
    pass


_INT_RANGE = {
    DataType.I8: (-128, 127),
    DataType.I32: (-(1 << 31), (1 << 31) - 1),
}


def _finalize(arr: np.ndarray, out: TensorDef, node_id: str) -> np.ndarray:
    if out.dtype.is_integer:
        lo, hi = _INT_RANGE[out.dtype]
        if arr.min(initial=0) < lo or arr.max(initial=0) > hi:
            raise NumericOverflow(f"node {node_id}: result exceeds {out.dtype.value} range")
        arr = arr.astype(out.dtype.np_dtype)
    else:
        arr = arr.astype(np.float32)
    if out.shape is not None and tuple(arr.shape) != out.shape:
        raise ExecutionError(f"node {node_id}: produced {arr.shape}, expected {out.shape}")
    return arr


def _work_dtype(dt: DataType):
    return np.int64 if dt.is_integer else np.float32


def _pad_spatial(x: np.ndarray, pt, pb, pl, pr):
    if pt or pb or pl or pr:
        return np.pad(x, ((0, 0), (pt, pb), (pl, pr), (0, 0)))
    return x


def _conv_patches(xp: np.ndarray, kh, kw, sh, sw, hout, wout):
    """Stack kernel-window slices into (hout, wout, kh, kw, C)."""
    c = xp.shape[3]
    col = np.empty((hout, wout, kh, kw, c), dtype=xp.dtype)
    for i in range(kh):
        for j in range(kw):
            col[:, :, i, j, :] = xp[0, i : i + (hout - 1) * sh + 1 : sh, j : j + (wout - 1) * sw + 1 : sw, :]
    return col


def _run_conv2d(node: Node, x, w, out: TensorDef):
    sh, sw = node.attr("strides", [1, 1])
    pt, pb, pl, pr = node.attr("padding", [0, 0, 0, 0])
    work = _work_dtype(out.dtype)
    xp = _pad_spatial(x.astype(work), pt, pb, pl, pr)
    _, hout, wout, _ = out.shape
    col = _conv_patches(xp, w.shape[1], w.shape[2], sh, sw, hout, wout)
    acc = np.tensordot(col, w.astype(work), axes=([2, 3, 4], [1, 2, 3]))
    return acc[None, ...]


def _run_depthwise(node: Node, x, w, out: TensorDef):
    sh, sw = node.attr("strides", [1, 1])
    pt, pb, pl, pr = node.attr("padding", [0, 0, 0, 0])
    work = _work_dtype(out.dtype)
    xp = _pad_spatial(x.astype(work), pt, pb, pl, pr)
    _, hout, wout, c = out.shape
    kh, kw = w.shape[1], w.shape[2]
    acc = np.zeros((hout, wout, c), dtype=work)
    for i in range(kh):
        for j in range(kw):
            window = xp[0, i : i + (hout - 1) * sh + 1 : sh, j : j + (wout - 1) * sw + 1 : sw, :]
            acc += window * w[:, i, j, 0].astype(work)
    return acc[None, ...]


def _pool_windows(node: Node, x, out: TensorDef):
    wh, ww = node.attr("window")
    sh, sw = node.attr("strides", [wh, ww])
    _, hout, wout, _ = out.shape
    return _conv_patches(x, wh, ww, sh, sw, hout, wout)


def _eval_node(node: Node, env: dict[str, np.ndarray], out: TensorDef) -> np.ndarray:
    op = node.op
    ins = [env[t] for t in node.inputs]
    x = ins[0]
    work = _work_dtype(out.dtype)

    if op is OpKind.CONV2D:
        return _run_conv2d(node, x, ins[1], out)
    if op is OpKind.DEPTHWISE_CONV2D:
        return _run_depthwise(node, x, ins[1], out)
    if op is OpKind.DENSE:
        flat = x.reshape(1, -1).astype(work)
        return flat @ ins[1].astype(work).T
    if op is OpKind.BIAS_ADD:
        return x.astype(work) + ins[1].astype(work)
    if op is OpKind.ACTIVATION:
        return np.maximum(x, 0) if node.attr("fn", "relu") == "relu" else x.copy()
    if op is OpKind.MAX_POOL:
        col = _pool_windows(node, x, out)
        return col.max(axis=(2, 3))[None, ...]
    if op is OpKind.AVG_POOL:
        col = _pool_windows(node, x, out)
        wh, ww = node.attr("window")
        if out.dtype.is_integer:
            return (col.astype(np.int64).sum(axis=(2, 3)) // (wh * ww))[None, ...]
        return (col.astype(np.float32).sum(axis=(2, 3)) / np.float32(wh * ww))[None, ...]
    if op is OpKind.PAD:
        pads = [tuple(p) for p in node.attr("pads")]
        value = node.attr("value", 0)
        return np.pad(x, pads, constant_values=value)
    if op is OpKind.ADD:
        return x.astype(work) + ins[1].astype(work)
    if op is OpKind.GATHER:
        table, idx = ins
        if idx.min(initial=0) < 0 or idx.max(initial=0) >= table.shape[0]:
            raise ExecutionError(f"node {node.id}: gather index out of range")
        return table[idx]
    if op is OpKind.REDUCE_MEAN:
        ax = node.attr("axis")
        if out.dtype.is_integer:
            return x.astype(np.int64).sum(axis=ax) // x.shape[ax]
        return x.astype(np.float32).sum(axis=ax) / np.float32(x.shape[ax])
    if op is OpKind.SOFTMAX:
        z = x - x.max(axis=-1, keepdims=True)
        e = np.exp(z, dtype=np.float32)
        return e / e.sum(axis=-1, keepdims=True)
    if op is OpKind.SLICE:
        ax, b, e = node.attr("axis"), node.attr("begin"), node.attr("end")
        index = [slice(None)] * x.ndim
        index[ax] = slice(b, e)
        return x[tuple(index)].copy()
    if op is OpKind.CONCAT:
        return np.concatenate(ins, axis=node.attr("axis"))
    if op is OpKind.MERGE:
        # Partial sums are reduced in input order (ascending partition index).
        acc = ins[0].astype(work)
        for part in ins[1:]:
            acc = acc + part.astype(work)
        if node.attr("activation", "none") == "relu":
            acc = np.maximum(acc, 0)
        return acc
    raise ExecutionError(f"no kernel for {op}")


def execute(
    graph: Graph,
    inputs: dict[str, np.ndarray],
    order: list[str] | None = None,
    keep_all: bool = False,
) -> dict[str, np.ndarray]:
    """Run the graph and return its model outputs (or every tensor).

    `order` may supply an alternative topological order; results must not
    depend on it.
    """
    env: dict[str, np.ndarray] = {}
    for t in graph.tensors.values():
        if t.kind is TensorKind.WEIGHT:
            env[t.id] = np.asarray(t.data, dtype=t.dtype.np_dtype).reshape(t.shape)
        elif t.kind is TensorKind.MODEL_INPUT:
            if t.id not in inputs:
                raise MissingInput(f"no value for model input {t.id!r}")
            arr = np.asarray(inputs[t.id], dtype=t.dtype.np_dtype)
            if tuple(arr.shape) != t.shape:
                raise ExecutionError(f"input {t.id}: got {arr.shape}, expected {t.shape}")
            env[t.id] = arr

    node_order = order if order is not None else graph.topo_order()
    for nid in node_order:
        node = graph.nodes[nid]
        out_def = graph.tensors[node.outputs[0]]
        env[node.outputs[0]] = _finalize(_eval_node(node, env, out_def), out_def, nid)

    if keep_all:
        return env
    return {t.id: env[t.id] for t in graph.model_outputs()}


# ---------------------------------------------------------------------------
# Static MAC counting
# ---------------------------------------------------------------------------

@dataclass
class MacCount:
    total: int
    per_node: dict[str, int]


def count_macs(graph: Graph) -> MacCount:
    """Multiply-accumulate count per node; only matmul-like ops contribute."""
    per: dict[str, int] = {}
    for nid, n in graph.nodes.items():
        if n.op is OpKind.CONV2D:
            _, hout, wout, cout = graph.tensors[n.outputs[0]].shape
            _, kh, kw, cin = graph.tensors[n.inputs[1]].shape
            per[nid] = hout * wout * cout * cin * kh * kw
        elif n.op is OpKind.DEPTHWISE_CONV2D:
            _, hout, wout, c = graph.tensors[n.outputs[0]].shape
            _, kh, kw, _ = graph.tensors[n.inputs[1]].shape
            per[nid] = hout * wout * c * kh * kw
        elif n.op is OpKind.DENSE:
            out_f, in_f = graph.tensors[n.inputs[1]].shape
            per[nid] = out_f * in_f
        else:
            per[nid] = 0
    return MacCount(total=sum(per.values()), per_node=per)


# ---------------------------------------------------------------------------
# Equivalence helpers
# ---------------------------------------------------------------------------

REL_TOLERANCE = 1e-5


def max_rel_deviation(a: np.ndarray, b: np.ndarray) -> float:
    """Element-wise |a-b| / max(|a|, 1), reduced to the maximum."""
    a64 = a.astype(np.float64)
    b64 = b.astype(np.float64)
    denom = np.maximum(np.abs(a64), 1.0)
    return float(np.max(np.abs(a64 - b64) / denom)) if a.size else 0.0


def outputs_equivalent(ref: dict[str, np.ndarray], got: dict[str, np.ndarray]) -> tuple[bool, float]:
    """Compare output maps: exact for integers, REL_TOLERANCE for f32."""
    worst = 0.0
    for tid, a in ref.items():
        b = got[tid]
        if a.dtype.kind in "iu":
            if not np.array_equal(a, b):
                return False, float("inf")
        else:
            worst = max(worst, max_rel_deviation(a, b))
    return worst <= REL_TOLERANCE, worst


def random_inputs(graph: Graph, rng: np.random.Generator) -> dict[str, np.ndarray]:
    """Draw model inputs; i32 inputs feeding a gather stay within its table."""
    out = {}
    for t in graph.model_inputs():
        if t.dtype is DataType.F32:
            out[t.id] = rng.uniform(-1.0, 1.0, size=t.shape).astype(np.float32)
        elif t.dtype is DataType.I8:
            out[t.id] = rng.integers(-127, 128, size=t.shape, dtype=np.int8)
        else:
            bound = 1 << 15
            for c in graph.consumers(t.id):
                if c.op is OpKind.GATHER and c.inputs[1] == t.id:
                    bound = min(bound, graph.tensors[c.inputs[0]].shape[0])
            out[t.id] = rng.integers(0, bound, size=t.shape, dtype=np.int32)
    return out


# ---------------------------------------------------------------------------
# Raw tensor files: 16-byte header (u32 dtype tag, u32 rank, 4xu16 dims)
# followed by the little-endian payload.
# ---------------------------------------------------------------------------

_DTYPE_TAGS = {DataType.F32: 0, DataType.I8: 1, DataType.I32: 2}
_TAG_DTYPES = {v: k for k, v in _DTYPE_TAGS.items()}


def write_tensor(path, arr: np.ndarray) -> None:
    if arr.ndim > 4:
        raise ExecutionError("tensor files support rank <= 4")
    if arr.dtype == np.float32:
        dt = DataType.F32
    elif arr.dtype == np.int8:
        dt = DataType.I8
    elif arr.dtype == np.int32:
        dt = DataType.I32
    else:
        raise ExecutionError(f"unsupported tensor file dtype {arr.dtype}")
    dims = list(arr.shape) + [0] * (4 - arr.ndim)
    if any(d > 0xFFFF for d in dims):
        raise ExecutionError("tensor file dims exceed u16")
    header = struct.pack("<II4H", _DTYPE_TAGS[dt], arr.ndim, *dims)
    with open(path, "wb") as f:
        f.write(header)
        f.write(np.ascontiguousarray(arr, dtype=dt.np_dtype).tobytes())


def read_tensor(path) -> np.ndarray:
    with open(path, "rb") as f:
        header = f.read(16)
        if len(header) != 16:
            raise ExecutionError("truncated tensor file header")
        tag, rank, *dims = struct.unpack("<II4H", header)
        if tag not in _TAG_DTYPES or rank > 4:
            raise ExecutionError("malformed tensor file header")
        shape = tuple(dims[:rank])
        dt = _TAG_DTYPES[tag]
        payload = f.read()
    arr = np.frombuffer(payload, dtype=dt.np_dtype)
    import math

    if arr.size != math.prod(shape):
        raise ExecutionError("tensor file payload does not match dims")
    return arr.reshape(shape).copy()
