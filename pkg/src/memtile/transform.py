"""Applies a tiling config to a graph, producing an equivalent tiled graph.

Depth partitions replicate each path op once per partition with its
parameters cut to the partition's channel range: fan-out ops slice the
output axis of their weights, fan-in ops the input axis (their replicas
yield full-shaped partial sums recombined by one merge), bias constants and
depthwise filters are sliced when they ride the partitioned axis, and
explicit split/concat slices bound paths that do not start or end in a
weighted op.

Feature-map partitions keep weights whole and instead crop space: each
partition's region is back-propagated from a disjoint grid on the path
output through every conv/pool (growing by the kernel halo, clipped at true
tensor borders where the original padding survives; interior borders get
zero padding).

The last replica of every partition carries a fusion barrier so its output
is never folded into the merge/concat that follows.
"""

from __future__ import annotations

import numpy as np

from .discovery import BlockKind, PartitionKind, TilingConfig
from .ir import (
    DataType,
    Graph,
    GraphError,
    Node,
    OpKind,
    TensorDef,
    TensorKind,
    infer_node,
    validate,
)


class InvalidConfig(GraphError):
    pass


class NonDivisibleExtent(InvalidConfig):
    pass


def chunks(extent: int, n: int) -> list[tuple[int, int]]:
    """Split extent into n contiguous ranges; earlier ranges get the remainder."""
    if n < 1 or extent < n:
        raise NonDivisibleExtent(f"cannot split extent {extent} into {n} partitions")
    base, extra = divmod(extent, n)
    out = []
    begin = 0
    for i in range(n):
        end = begin + base + (1 if i < extra else 0)
        out.append((begin, end))
        begin = end
    return out


def _chain_input(node: Node) -> str:
    return node.inputs[1] if node.op is OpKind.GATHER else node.inputs[0]


def _check_config(graph: Graph, config: TilingConfig) -> None:
    path = config.path
    if len(path) < 2:
        raise InvalidConfig("path must contain at least one op on each side of the critical buffer")
    for nid in path:
        if nid not in graph.nodes:
            raise InvalidConfig(f"path node {nid!r} not in graph")
        if nid not in config.blocks:
            raise InvalidConfig(f"path node {nid!r} has no block assignment")
    for a, b in zip(path, path[1:]):
        if graph.nodes[a].outputs[0] not in graph.nodes[b].inputs:
            raise InvalidConfig(f"path nodes {a!r} -> {b!r} are not connected")
    chain_outs = [graph.nodes[nid].outputs[0] for nid in path[:-1]]
    if config.critical_buffer not in chain_outs:
        raise InvalidConfig("critical buffer does not lie inside the path")
    fan_outs = sum(1 for b in config.blocks.values() if b is BlockKind.FDT_FAN_OUT)
    fan_ins = sum(1 for b in config.blocks.values() if b is BlockKind.FDT_FAN_IN)
    if fan_outs > 1 or fan_ins > 1:
        raise InvalidConfig("at most one fan-out and one fan-in per path")
    if config.start_split:
        if config.blocks[path[0]] is BlockKind.FDT_FAN_OUT:
            raise InvalidConfig("split start combined with fan-out block")
    elif config.blocks[path[0]] is not BlockKind.FDT_FAN_OUT:
        raise InvalidConfig("implicit start requires a fan-out block")
    if config.end_concat:
        if config.blocks[path[-1]] is BlockKind.FDT_FAN_IN:
            raise InvalidConfig("concat end combined with fan-in block")
    elif config.blocks[path[-1]] is not BlockKind.FDT_FAN_IN:
        raise InvalidConfig("merge end requires a fan-in block")
    if config.kind is PartitionKind.DEPTH:
        producer = graph.producer(config.critical_buffer)
        if producer.id not in config.axes:
            raise InvalidConfig("depth config lacks a partition axis for the critical producer")
        crit = graph.tensors[config.critical_buffer]
        if crit.shape[config.axes[producer.id]] < config.n_partitions:
            raise NonDivisibleExtent(
                f"{config.n_partitions} partitions exceed extent of {config.critical_buffer}"
            )
    else:
        if config.grid is None:
            raise InvalidConfig("feature-map config requires a grid")


class _Assembler:
    """Accumulates the transformed graph with collision-free fresh names."""

    def __init__(self, graph: Graph, removed_tensors: set[str], removed_nodes: set[str]):
        self.src = graph
        self.g = Graph()
        for t in graph.tensors.values():
            if t.id not in removed_tensors:
                self.g.add_tensor(TensorDef(t.id, t.shape, t.dtype, t.kind, t.data))
        self._pending_nodes = [n for n in graph.nodes.values() if n.id not in removed_nodes]
        self.barriers = set(b for b in graph.fusion_barriers if b not in removed_nodes)

    def fresh_tensor(self, base: str) -> str:
        name = base
        while name in self.g.tensors:
            name += "_"
        return name

    def fresh_node(self, base: str) -> str:
        name = base
        while name in self.g.nodes or any(n.id == name for n in self._pending_nodes):
            name += "_"
        return name

    def tensor(self, base: str, dtype: DataType, shape=None, kind=TensorKind.INTERMEDIATE, data=None) -> str:
        tid = self.fresh_tensor(base)
        self.g.add_tensor(TensorDef(tid, shape, dtype, kind, data))
        return tid

    def weight(self, base: str, data: np.ndarray, dtype: DataType) -> str:
        arr = np.ascontiguousarray(data)
        return self.tensor(base, dtype, tuple(arr.shape), TensorKind.WEIGHT, arr)

    def node(self, base: str, op: OpKind, inputs: list[str], attrs: dict, out: str) -> str:
        nid = self.fresh_node(base)
        node = self.g.add_node(Node(nid, op, attrs, inputs, [out]))
        # Eager inference keeps replica shapes verified as we build.
        in_defs = [self.g.tensors[t] for t in inputs]
        shape, dtype = infer_node(node, in_defs)
        tdef = self.g.tensors[out]
        if tdef.shape is None:
            tdef.shape = shape
        elif tdef.shape != shape:
            raise InvalidConfig(f"replica {nid} produces {shape}, expected {tdef.shape}")
        if tdef.dtype != dtype:
            raise InvalidConfig(f"replica {nid} dtype {dtype.value} != declared {tdef.dtype.value}")
        return nid

    def finish(self) -> Graph:
        for n in self._pending_nodes:
            self.g.add_node(Node(n.id, n.op, dict(n.attrs), list(n.inputs), list(n.outputs)))
        self.g.fusion_barriers = self.barriers
        return self.g


def _sliced_weights(graph: Graph, config: TilingConfig) -> set[str]:
    """Original weight tensors that will be replaced by per-partition slices."""
    out = set()
    for nid in config.path:
        node = graph.nodes[nid]
        block = config.blocks[nid]
        if block in (BlockKind.FDT_FAN_OUT, BlockKind.FDT_FAN_IN):
            out.add(node.inputs[0] if node.op is OpKind.GATHER else node.inputs[1])
        elif block is BlockKind.PART and node.op is OpKind.DEPTHWISE_CONV2D:
            out.add(node.inputs[1])
        elif block is BlockKind.PART and node.op is OpKind.BIAS_ADD:
            in_rank = graph.tensors[node.inputs[0]].rank
            if config.axes.get(nid) == in_rank - 1:
                out.add(node.inputs[1])
    # Keep a weight if anything outside the path still reads it.
    path_set = set(config.path)
    return {w for w in out if all(c.id in path_set for c in graph.consumers(w))}


def apply_tiling(graph: Graph, config: TilingConfig) -> Graph:
    _check_config(graph, config)
    if config.kind is PartitionKind.DEPTH:
        return _apply_depth(graph, config)
    return _apply_fm(graph, config)


def _apply_depth(graph: Graph, config: TilingConfig) -> Graph:
    path = list(config.path)
    end_id = path[-1]
    end_out = graph.nodes[end_id].outputs[0]
    chain_in = _chain_input(graph.nodes[path[0]])
    crit_axis_node = graph.producer(config.critical_buffer).id
    extent = graph.tensors[config.critical_buffer].shape[config.axes[crit_axis_node]]
    ranges = chunks(extent, config.n_partitions)

    removed_tensors = {graph.nodes[nid].outputs[0] for nid in path[:-1]}
    removed_tensors |= _sliced_weights(graph, config)
    asm = _Assembler(graph, removed_tensors, set(path))

    partials: list[str] = []
    per_p_outputs: list[str] = []
    ext_slices: dict[tuple[str, int, int, int], str] = {}

    for p, (b, e) in enumerate(ranges):
        cur = chain_in
        if config.start_split:
            sliced = asm.tensor(f"{chain_in}.p{p}", graph.tensors[chain_in].dtype)
            asm.node(
                f"{path[0]}.split{p}",
                OpKind.SLICE,
                [chain_in],
                {"axis": config.input_axis, "begin": b, "end": e},
                sliced,
            )
            cur = sliced
        for nid in path:
            node = graph.nodes[nid]
            block = config.blocks[nid]
            out_orig = node.outputs[0]
            is_end = nid == end_id
            if is_end and not config.end_concat:
                out_t = asm.tensor(f"{end_out}.part{p}", graph.tensors[end_out].dtype,
                                   graph.tensors[end_out].shape)
            else:
                out_t = asm.tensor(f"{out_orig}.p{p}", graph.tensors[out_orig].dtype)
            inputs, attrs = _depth_replica_io(graph, asm, config, node, block, cur, b, e, p, ext_slices)
            rep = asm.node(f"{nid}.p{p}", node.op, inputs, attrs, out_t)
            if is_end:
                asm.barriers.add(rep)
                if config.end_concat:
                    per_p_outputs.append(out_t)
                else:
                    partials.append(out_t)
            cur = out_t

    if config.end_concat:
        axis = config.axes[end_id]
        asm.node(f"{end_id}.concat", OpKind.CONCAT, per_p_outputs, {"axis": axis}, end_out)
    else:
        asm.node(f"{end_id}.merge", OpKind.MERGE, partials, {"activation": "none"}, end_out)
    return _finalize(asm)


def _depth_replica_io(graph, asm, config, node, block, cur, b, e, p, ext_slices):
    op = node.op
    attrs = dict(node.attrs)
    axis = config.axes.get(node.id)
    if block is BlockKind.FDT_FAN_OUT:
        if op is OpKind.GATHER:
            table = graph.tensors[node.inputs[0]]
            w_p = asm.weight(f"{table.id}.p{p}", np.asarray(table.data)[..., b:e], table.dtype)
            return [w_p, node.inputs[1]], attrs
        w = graph.tensors[node.inputs[1]]
        data = np.asarray(w.data)[b:e]
        w_p = asm.weight(f"{w.id}.p{p}", data, w.dtype)
        return [cur, w_p], attrs
    if block is BlockKind.FDT_FAN_IN:
        w = graph.tensors[node.inputs[1]]
        arr = np.asarray(w.data)
        data = arr[:, :, :, b:e] if op is OpKind.CONV2D else arr[:, b:e]
        w_p = asm.weight(f"{w.id}.p{p}", data, w.dtype)
        return [cur, w_p], attrs
    # PART replicas
    if op is OpKind.BIAS_ADD:
        bias = graph.tensors[node.inputs[1]]
        in_rank = graph.tensors[node.inputs[0]].rank
        if axis == in_rank - 1:
            b_p = asm.weight(f"{bias.id}.p{p}", np.asarray(bias.data)[b:e], bias.dtype)
            return [cur, b_p], attrs
        return [cur, bias.id], attrs
    if op is OpKind.DEPTHWISE_CONV2D:
        w = graph.tensors[node.inputs[1]]
        w_p = asm.weight(f"{w.id}.p{p}", np.asarray(w.data)[b:e], w.dtype)
        return [cur, w_p], attrs
    if op is OpKind.ADD:
        # Identify which operand rides the chain by matching the walk linkage.
        prev_ids = set(config.path)
        chain_pos = None
        for i, tid in enumerate(node.inputs):
            prod = graph.producer(tid)
            if prod is not None and prod.id in prev_ids:
                chain_pos = i
                break
        if chain_pos is None:
            raise InvalidConfig(f"add {node.id} is not linked to the path")
        other = node.inputs[1 - chain_pos]
        if other == node.inputs[chain_pos]:
            other_p = cur
        else:
            key = (other, axis, b, e)
            if key not in ext_slices:
                sliced = asm.tensor(f"{other}.x{p}", graph.tensors[other].dtype)
                asm.node(f"{node.id}.ext{p}", OpKind.SLICE, [other],
                         {"axis": axis, "begin": b, "end": e}, sliced)
                ext_slices[key] = sliced
            other_p = ext_slices[key]
        inputs = [cur, other_p] if chain_pos == 0 else [other_p, cur]
        return inputs, attrs
    return [cur], attrs


# ---------------------------------------------------------------------------
# Feature-map partitioning
# ---------------------------------------------------------------------------

def _region_back(node: Node, graph: Graph, region):
    """Input region + replica attr overrides for one output region."""
    rh0, rh1, rw0, rw1 = region
    op = node.op
    x = graph.tensors[node.inputs[0]]
    if op in (OpKind.CONV2D, OpKind.DEPTHWISE_CONV2D, OpKind.MAX_POOL, OpKind.AVG_POOL):
        if op in (OpKind.MAX_POOL, OpKind.AVG_POOL):
            kh, kw = node.attr("window")
            sh, sw = node.attr("strides", [kh, kw])
            pt = pb = pl = pr = 0
        else:
            w = graph.tensors[node.inputs[1]].shape
            kh, kw = w[1], w[2]
            sh, sw = node.attr("strides", [1, 1])
            pt, pb, pl, pr = node.attr("padding", [0, 0, 0, 0])
        h_in, w_in = x.shape[1], x.shape[2]
        nh0, nh1 = rh0 * sh - pt, (rh1 - 1) * sh + kh - pt
        nw0, nw1 = rw0 * sw - pl, (rw1 - 1) * sw + kw - pl
        in_region = (max(0, nh0), min(h_in, nh1), max(0, nw0), min(w_in, nw1))
        over = None
        if op in (OpKind.CONV2D, OpKind.DEPTHWISE_CONV2D):
            over = {"padding": [max(0, -nh0), max(0, nh1 - h_in), max(0, -nw0), max(0, nw1 - w_in)]}
        return in_region, over
    if op is OpKind.PAD:
        pads = node.attr("pads")
        pt, pl = pads[1][0], pads[2][0]
        h_in, w_in = x.shape[1], x.shape[2]
        in_region = (
            max(0, rh0 - pt), min(h_in, rh1 - pt),
            max(0, rw0 - pl), min(w_in, rw1 - pl),
        )
        over = {"pads": [
            [0, 0],
            [max(0, pt - rh0), max(0, (rh1 - pt) - h_in)],
            [max(0, pl - rw0), max(0, (rw1 - pl) - w_in)],
            [0, 0],
        ]}
        return in_region, over
    # Elementwise: same region, no attr change.
    return (rh0, rh1, rw0, rw1), None


def _apply_fm(graph: Graph, config: TilingConfig) -> Graph:
    path = list(config.path)
    end_id = path[-1]
    end_out = graph.nodes[end_id].outputs[0]
    end_shape = graph.tensors[end_out].shape
    g_rows, g_cols = config.grid
    row_chunks = chunks(end_shape[1], g_rows)
    col_chunks = chunks(end_shape[2], g_cols)
    chain_in = _chain_input(graph.nodes[path[0]])

    # Back-propagate each partition's required region through the path.
    part_regions = []  # per partition: {node_id: (out_region, in_region, attr_over)}
    for (rh0, rh1) in row_chunks:
        for (rw0, rw1) in col_chunks:
            regions = {}
            region = (rh0, rh1, rw0, rw1)
            for nid in reversed(path):
                node = graph.nodes[nid]
                in_region, over = _region_back(node, graph, region)
                regions[nid] = (region, in_region, over)
                region = in_region
            part_regions.append(regions)

    removed_tensors = {graph.nodes[nid].outputs[0] for nid in path[:-1]}
    asm = _Assembler(graph, removed_tensors, set(path))

    def crop(src: str, region, base: str, tag: str) -> str:
        """Slice rows then columns of src down to region; skips full spans."""
        h0, h1, w0, w1 = region
        cur = src
        if (h0, h1) != (0, asm.g.tensors[cur].shape[1]):
            t = asm.tensor(f"{src}.h{tag}", asm.g.tensors[cur].dtype)
            asm.node(f"{base}.rows{tag}", OpKind.SLICE, [cur], {"axis": 1, "begin": h0, "end": h1}, t)
            cur = t
        if (w0, w1) != (0, asm.g.tensors[cur].shape[2]):
            t = asm.tensor(f"{src}.w{tag}", asm.g.tensors[cur].dtype)
            asm.node(f"{base}.cols{tag}", OpKind.SLICE, [cur], {"axis": 2, "begin": w0, "end": w1}, t)
            cur = t
        return cur

    grid_outputs: list[str] = []
    for p, regions in enumerate(part_regions):
        start_in_region = regions[path[0]][1]
        cur = crop(chain_in, start_in_region, path[0], str(p))
        for nid in path:
            node = graph.nodes[nid]
            out_region, in_region, over = regions[nid]
            attrs = dict(node.attrs)
            if over:
                attrs.update(over)
            inputs = [cur]
            if node.op in (OpKind.CONV2D, OpKind.DEPTHWISE_CONV2D, OpKind.BIAS_ADD):
                inputs.append(node.inputs[1])  # weights stay whole in space
            elif node.op is OpKind.ADD:
                chain_pos = 0 if _on_chain(graph, config, node, 0) else 1
                other = node.inputs[1 - chain_pos]
                if other == node.inputs[chain_pos]:
                    other_t = cur
                else:
                    other_t = crop(other, out_region, f"{nid}.ext", str(p))
                inputs = [cur, other_t] if chain_pos == 0 else [other_t, cur]
            out_t = asm.tensor(f"{node.outputs[0]}.p{p}", graph.tensors[node.outputs[0]].dtype)
            rep = asm.node(f"{nid}.p{p}", node.op, inputs, attrs, out_t)
            if nid == end_id:
                asm.barriers.add(rep)
            cur = out_t
        grid_outputs.append(cur)

    row_tensors = []
    for r in range(g_rows):
        row_parts = grid_outputs[r * g_cols : (r + 1) * g_cols]
        if g_cols == 1:
            row_tensors.append(row_parts[0])
            continue
        row_t = asm.tensor(f"{end_out}.row{r}", graph.tensors[end_out].dtype)
        asm.node(f"{end_id}.rowcat{r}", OpKind.CONCAT, row_parts, {"axis": 2}, row_t)
        row_tensors.append(row_t)
    if g_rows == 1:
        raise InvalidConfig("feature-map grid must split both dimensions")
    asm.node(f"{end_id}.concat", OpKind.CONCAT, row_tensors, {"axis": 1}, end_out)
    return _finalize(asm)


def _on_chain(graph: Graph, config: TilingConfig, node: Node, pos: int) -> bool:
    prod = graph.producer(node.inputs[pos])
    return prod is not None and prod.id in config.blocks


def _finalize(asm: _Assembler) -> Graph:
    g = asm.finish()
    problems = validate(g)
    if problems:
        raise InvalidConfig(f"transformed graph invalid: {problems[:3]}")
    return g


def peak_after(graph: Graph, config: TilingConfig | None, *, pipeline_opts=None) -> int:
    """Peak layout bytes of the graph after applying config (None = as-is)."""
    from .pipeline import PipelineOptions, evaluate_graph

    tiled = apply_tiling(graph, config) if config is not None else graph
    return evaluate_graph(tiled, pipeline_opts or PipelineOptions()).layout.peak
