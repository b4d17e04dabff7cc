"""Deterministic synthetic model generator.

Templates mirror the structural patterns the optimizer targets: a temporal
conv stack whose feature maps collapse to 1x1 (depth-only tiling territory),
an embedding lookup + mean + classifier, a plain dense pair, a 3x3 CNN chain
with room for spatial tiling, a pointwise/depthwise sandwich, and seeded
series-parallel graphs for property tests.

Weights come from numpy's PCG64 generator, so the same (kind, seed, scale,
dtype) always produces a byte-identical graph on any platform.
"""

from __future__ import annotations

from dataclasses import dataclass
from enum import Enum

import numpy as np

from .ir import (
    DataType,
    Graph,
    Node,
    OpKind,
    TensorDef,
    TensorKind,
    infer_node,
    infer_shapes,
    validate,
)


class InvalidScale(Exception):
    pass


class TemplateKind(Enum):
    KWS_LIKE = "kws"
    TXT_LIKE = "txt"
    DENSE_PAIR = "dense_pair"
    CNN_CHAIN = "cnn"
    DEPTHWISE_CHAIN = "depthwise"
    RANDOM_SP = "random_sp"


@dataclass(frozen=True)
class ModelTemplate:
    kind: TemplateKind
    seed: int = 1
    scale: int = 1
    dtype: DataType = DataType.F32


class GraphBuilder:
    """Thin construction helper: tensors and nodes with consistent dtypes."""

    def __init__(self, rng: np.random.Generator | None = None, dtype: DataType = DataType.F32):
        self.g = Graph()
        self.rng = rng if rng is not None else np.random.default_rng(0)
        self.dtype = dtype
        self._acc = DataType.I32 if dtype.is_integer else DataType.F32

    def input(self, tid: str, shape, dtype: DataType | None = None) -> str:
        self.g.add_tensor(TensorDef(tid, tuple(shape), dtype or self.dtype, TensorKind.MODEL_INPUT))
        return tid

    def weight(self, tid: str, shape, dtype: DataType | None = None, data: np.ndarray | None = None) -> str:
        dt = dtype or self.dtype
        if data is None:
            if dt is DataType.F32:
                data = self.rng.uniform(-1.0, 1.0, size=tuple(shape)).astype(np.float32)
            else:
                data = self.rng.integers(-127, 128, size=tuple(shape)).astype(dt.np_dtype)
        self.g.add_tensor(TensorDef(tid, tuple(shape), dt, TensorKind.WEIGHT, data))
        return tid

    def _out(self, tid: str, dtype: DataType, output: bool) -> str:
        kind = TensorKind.MODEL_OUTPUT if output else TensorKind.INTERMEDIATE
        self.g.add_tensor(TensorDef(tid, None, dtype, kind))
        return tid

    def op(self, nid: str, op: OpKind, inputs: list[str], attrs: dict | None = None,
           out_dtype: DataType | None = None, output: bool = False) -> str:
        if out_dtype is None:
            base = self.g.tensors[inputs[0]].dtype
            if op in (OpKind.CONV2D, OpKind.DEPTHWISE_CONV2D, OpKind.DENSE, OpKind.REDUCE_MEAN):
                out_dtype = DataType.I32 if base.is_integer else DataType.F32
            else:
                out_dtype = base
        out_id = self._out(nid + ":out", out_dtype, output)
        node = self.g.add_node(Node(nid, op, attrs or {}, list(inputs), [out_id]))
        # Infer eagerly so later layers can size their weights from shapes.
        in_defs = [self.g.tensors[t] for t in inputs]
        shape, _ = infer_node(node, in_defs)
        self.g.tensors[out_id].shape = shape
        return out_id

    def conv(self, nid: str, x: str, cout: int, kh: int, kw: int, strides=(1, 1),
             padding=(0, 0, 0, 0), bias: bool = True, relu: bool = True, output: bool = False) -> str:
        cin = self.g.tensors[x].shape[3] if self.g.tensors[x].shape else None
        w = self.weight(nid + ":w", (cout, kh, kw, cin))
        t = self.op(nid, OpKind.CONV2D, [x, w],
                    {"strides": [int(strides[0]), int(strides[1])], "padding": [int(p) for p in padding]})
        return self._head(nid, t, cout, bias, relu, output)

    def depthwise(self, nid: str, x: str, kh: int, kw: int, strides=(1, 1),
                  padding=(0, 0, 0, 0), bias: bool = True, relu: bool = True) -> str:
        c = self.g.tensors[x].shape[3]
        w = self.weight(nid + ":w", (c, kh, kw, 1))
        t = self.op(nid, OpKind.DEPTHWISE_CONV2D, [x, w],
                    {"strides": [int(strides[0]), int(strides[1])], "padding": [int(p) for p in padding]})
        return self._head(nid, t, c, bias, relu, output=False)

    def dense(self, nid: str, x: str, out_f: int, bias: bool = True, relu: bool = False,
              output: bool = False) -> str:
        in_f = self.g.tensors[x].shape[-1]
        w = self.weight(nid + ":w", (out_f, in_f))
        t = self.op(nid, OpKind.DENSE, [x, w])
        return self._head(nid, t, out_f, bias, relu, output)

    def _head(self, nid: str, t: str, channels: int, bias: bool, relu: bool, output: bool) -> str:
        acc = self.g.tensors[t].dtype
        if bias:
            b = self.weight(nid + ":b", (channels,), dtype=acc)
            t = self.op(nid + ".bias", OpKind.BIAS_ADD, [t, b], output=output and not relu)
        if relu:
            t = self.op(nid + ".relu", OpKind.ACTIVATION, [t], {"fn": "relu"}, output=output)
        elif output and not bias:
            # Caller asked for a model output directly on the matmul result.
            self.g.tensors[t].kind = TensorKind.MODEL_OUTPUT
        return t

    def mark_output(self, t: str) -> str:
        self.g.tensors[t].kind = TensorKind.MODEL_OUTPUT
        return t

    def finish(self) -> Graph:
        g = infer_shapes(self.g)
        problems = validate(g)
        if problems:
            raise AssertionError(f"generated graph invalid: {problems[:3]}")
        return g


def _check_scale(scale: int):
    if not isinstance(scale, int) or not (1 <= scale <= 8):
        raise InvalidScale(f"scale must be an integer in [1, 8], got {scale!r}")


def _kws_like(b: GraphBuilder, s: int) -> Graph:
    # Temporal convs over a (time, 1) grid; width-1 maps rule out spatial
    # tiling while the channel axis stays wide open for depth partitioning.
    x = b.input("audio", (1, 128, 1, 1))
    t = b.conv("conv1", x, 32 * s, 8, 1, strides=(2, 1))
    t = b.conv("conv2", t, 8 * s, 5, 1, strides=(4, 1))
    t = b.conv("conv3", t, 12 * s, 5, 1, strides=(2, 1))
    t = b.conv("conv4", t, 16 * s, 6, 1)
    t = b.dense("head", t, 4, bias=True)
    b.mark_output(t)
    return b.finish()


def _txt_like(b: GraphBuilder, s: int) -> Graph:
    table = b.weight("embedding", (1000, 16 * s))
    idx = b.input("tokens", (1, 256), dtype=DataType.I32)
    t = b.op("lookup", OpKind.GATHER, [table, idx], {"axis": 0})
    t = b.op("seq_mean", OpKind.REDUCE_MEAN, [t], {"axis": 1})
    t = b.dense("classifier", t, 4, bias=True)
    b.mark_output(t)
    return b.finish()


def _dense_pair(b: GraphBuilder, s: int) -> Graph:
    x = b.input("features", (1, 64 * s))
    t = b.dense("fc1", x, 128 * s, bias=True, relu=True)
    t = b.dense("fc2", t, 10, bias=True)
    b.mark_output(t)
    return b.finish()


def _cnn_chain(b: GraphBuilder, s: int) -> Graph:
    x = b.input("image", (1, 16, 16, 2 * s))
    t = b.conv("conv_a", x, 4 * s, 3, 3, padding=(1, 1, 1, 1))
    t = b.conv("conv_b", t, 4 * s, 3, 3, padding=(1, 1, 1, 1))
    t = b.conv("conv_c", t, 2 * s, 3, 3, padding=(1, 1, 1, 1))
    t = b.op("pool", OpKind.MAX_POOL, [t], {"window": [2, 2], "strides": [2, 2]})
    t = b.op("gap_h", OpKind.REDUCE_MEAN, [t], {"axis": 1})
    t = b.op("gap_w", OpKind.REDUCE_MEAN, [t], {"axis": 1})
    t = b.dense("head", t, 10, bias=True)
    b.mark_output(t)
    return b.finish()


def _depthwise_chain(b: GraphBuilder, s: int) -> Graph:
    x = b.input("image", (1, 12, 12, 4))
    t = b.conv("expand", x, 32 * s, 1, 1)
    t = b.depthwise("dw", t, 3, 3, strides=(2, 2), padding=(1, 1, 1, 1))
    t = b.conv("project", t, 4 * s, 1, 1, relu=False)
    t = b.op("gap_h", OpKind.REDUCE_MEAN, [t], {"axis": 1})
    t = b.op("gap_w", OpKind.REDUCE_MEAN, [t], {"axis": 1})
    t = b.dense("head", t, 6, bias=True)
    b.mark_output(t)
    return b.finish()


def _random_sp(b: GraphBuilder, s: int) -> Graph:
    """Seeded series-parallel graph over flat (1, F) tensors."""
    rng = b.rng
    counter = [0]

    def fresh() -> str:
        counter[0] += 1
        return f"n{counter[0]:02d}"

    def chain(t: str, depth: int) -> str:
        for _ in range(int(rng.integers(1, 3))):
            width = int(rng.integers(3, 9)) * s
            t = b.dense(fresh(), t, width, bias=bool(rng.integers(0, 2)), relu=bool(rng.integers(0, 2)))
        return t

    def sp(t: str, depth: int) -> str:
        if depth == 0 or rng.random() < 0.4:
            return chain(t, depth)
        if rng.random() < 0.5:
            return sp(sp(t, depth - 1), depth - 1)
        width = int(rng.integers(3, 9)) * s
        branches = []
        for _ in range(int(rng.integers(2, 4))):
            u = sp(t, depth - 1)
            branches.append(b.dense(fresh(), u, width, bias=False, relu=False))
        joined = branches[0]
        for other in branches[1:]:
            joined = b.op(fresh(), OpKind.ADD, [joined, other])
        return joined

    x = b.input("x", (1, int(rng.integers(4, 9)) * s))
    t = sp(x, 2)
    t = b.dense(fresh(), t, 3, bias=False)
    b.mark_output(t)
    return b.finish()


_BUILDERS = {
    TemplateKind.KWS_LIKE: _kws_like,
    TemplateKind.TXT_LIKE: _txt_like,
    TemplateKind.DENSE_PAIR: _dense_pair,
    TemplateKind.CNN_CHAIN: _cnn_chain,
    TemplateKind.DEPTHWISE_CHAIN: _depthwise_chain,
    TemplateKind.RANDOM_SP: _random_sp,
}


def generate(template: ModelTemplate) -> Graph:
    _check_scale(template.scale)
    rng = np.random.Generator(np.random.PCG64(template.seed))
    b = GraphBuilder(rng, template.dtype)
    return _BUILDERS[template.kind](b, template.scale)
