"""Block-based discovery of candidate tiling paths.

Starting from a critical buffer the graph is walked up and down through
compatible ops. Depth partitioning tracks the partitioned axis through each
op: producers of full partitions (conv/dense/gather) can open a path as an
implicit fan-out, ops consuming a partitioned axis as a reduction dimension
(conv/dense over channels or features) can close it as a fan-in whose
partial sums a merge recombines. Everything in between must compute its
slice of the partitioned axis independently (PART). Feature-map
partitioning walks spatially local ops (convs and pools, which add halo
overlap, plus cheap elementwise ops) and always terminates with explicit
split/concat.

Each walk yields the maximal path; early-stop variants are kept wherever
continuing may cost memory (before every overlapping spatial op, and the
version that concatenates instead of carrying fan-in partial sums). For
every variant the start terminal is the op with the smallest incoming
buffer and the end terminal the op with the smallest outgoing buffer.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from enum import Enum

from .ir import Graph, OpKind, TensorDef, TensorKind, buffer_size
from .layout import MemoryLayout, plan
from .scheduling import LifetimeTable


class DiscoveryFailed(Exception):
    pass


class PartitionKind(Enum):
    DEPTH = "depth"
    FEATURE_MAP = "feature_map"


class BlockKind(Enum):
    SPLIT = "split"
    FDT_FAN_OUT = "fdt_fan_out"
    PART = "part"
    FFMT = "ffmt"
    FDT_FAN_IN = "fdt_fan_in"
    CONCAT = "concat"


FAN_OUT_OPS = {OpKind.CONV2D, OpKind.DENSE, OpKind.GATHER}
FAN_IN_OPS = {OpKind.CONV2D, OpKind.DENSE}
FFMT_OPS = {OpKind.CONV2D, OpKind.DEPTHWISE_CONV2D, OpKind.MAX_POOL, OpKind.AVG_POOL}


@dataclass(frozen=True)
class CriticalBuffer:
    tensor_id: str
    size: int
    est_saving: int


@dataclass
class TilingConfig:
    """One candidate rewrite of a linear path around a critical buffer."""

    critical_buffer: str
    kind: PartitionKind
    n_partitions: int
    path: tuple[str, ...]
    blocks: dict[str, BlockKind]
    start_split: bool
    end_concat: bool
    grid: tuple[int, int] | None = None
    axes: dict[str, int] = field(default_factory=dict)  # depth: partition axis per node output
    input_axis: int | None = None  # depth: axis of the path input when split

    def key(self):
        return (
            self.critical_buffer,
            self.kind.value,
            self.n_partitions,
            self.grid,
            self.path,
            tuple(sorted((k, v.value) for k, v in self.blocks.items())),
            self.start_split,
            self.end_concat,
        )

    def summary(self) -> dict:
        return {
            "critical_buffer": self.critical_buffer,
            "kind": self.kind.value,
            "n_partitions": self.n_partitions,
            "grid": list(self.grid) if self.grid else None,
            "path": list(self.path),
            "blocks": {k: v.value for k, v in self.blocks.items()},
            "start": "split" if self.start_split else "fan_out",
            "end": "concat" if self.end_concat else "fan_in",
        }


def find_critical_buffers(
    graph: Graph,
    layout: MemoryLayout,
    lifetimes: LifetimeTable,
    *,
    plan_kwargs: dict | None = None,
) -> list[CriticalBuffer]:
    """Intermediates whose shrinking alone shrinks the layout peak.

    Each candidate is re-planned with its size halved; buffers that fail to
    move the peak are not worth tiling. Model I/O is never proposed.
    """
    from .layout import derive_conflicts
    from .scheduling import schedule_cost

    kwargs = plan_kwargs or {}
    conflicts = derive_conflicts(lifetimes)
    out: list[CriticalBuffer] = []
    for tid in sorted(layout.sizes, key=lambda t: (-layout.sizes[t], t)):
        tdef = graph.tensors[tid]
        if tdef.kind is not TensorKind.INTERMEDIATE:
            continue
        probe = dict(layout.sizes)
        probe[tid] = max(1, probe[tid] // 2)
        probe_bound = schedule_cost(
            LifetimeTable(lifetimes.intervals, probe, lifetimes.n_steps)
        ).peak_live
        replanned, _ = plan(probe, conflicts, lower_bound=probe_bound, **kwargs)
        if replanned.peak < layout.peak:
            out.append(CriticalBuffer(tid, layout.sizes[tid], layout.peak - replanned.peak))
    return out


# ---------------------------------------------------------------------------
# Walks
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class _UpEntry:
    node_id: str
    block: BlockKind
    in_axis: int | None  # partition axis on the chain input (PART only)
    out_axis: int
    chain_in: str  # tensor feeding this op along the walk
    has_overlap: bool = False


@dataclass(frozen=True)
class _DownEntry:
    node_id: str
    block: BlockKind
    in_axis: int
    out_axis: int | None
    has_overlap: bool = False


def _pads_zero(node, axis: int) -> bool:
    pads = node.attr("pads")
    return tuple(pads[axis]) == (0, 0)


def _overlapping(graph: Graph, node) -> bool:
    if node.op in (OpKind.MAX_POOL, OpKind.AVG_POOL):
        kh, kw = node.attr("window")
        sh, sw = node.attr("strides", [kh, kw])
    else:
        w = graph.tensors[node.inputs[1]].shape
        kh, kw = w[1], w[2]
        sh, sw = node.attr("strides", [1, 1])
    return kh > sh or kw > sw


def _classify_up_depth(graph: Graph, node, out: TensorDef, out_axis: int):
    op = node.op
    last = out.rank - 1
    if op in FAN_OUT_OPS:
        if out_axis != last:
            return None
        chain_in = node.inputs[1] if op is OpKind.GATHER else node.inputs[0]
        return BlockKind.FDT_FAN_OUT, None, chain_in
    if op in (OpKind.BIAS_ADD, OpKind.ACTIVATION, OpKind.ADD):
        return BlockKind.PART, out_axis, node.inputs[0]
    if op in (OpKind.MAX_POOL, OpKind.AVG_POOL, OpKind.DEPTHWISE_CONV2D):
        if out_axis != 3:
            return None
        return BlockKind.PART, 3, node.inputs[0]
    if op is OpKind.PAD:
        if not _pads_zero(node, out_axis):
            return None
        return BlockKind.PART, out_axis, node.inputs[0]
    if op is OpKind.REDUCE_MEAN:
        r = node.attr("axis")
        in_axis = out_axis + 1 if r <= out_axis else out_axis
        return BlockKind.PART, in_axis, node.inputs[0]
    return None


def _classify_down_depth(graph: Graph, node, tid: str, in_axis: int):
    op = node.op
    t = graph.tensors[tid]
    if op in FAN_IN_OPS and node.inputs[0] == tid:
        if op is OpKind.CONV2D and in_axis == 3:
            return BlockKind.FDT_FAN_IN, None
        if op is OpKind.DENSE and in_axis == t.rank - 1:
            return BlockKind.FDT_FAN_IN, None
    if op in (OpKind.BIAS_ADD, OpKind.ACTIVATION, OpKind.ADD):
        if op is OpKind.BIAS_ADD and node.inputs[0] != tid:
            return None
        return BlockKind.PART, in_axis
    if op in (OpKind.MAX_POOL, OpKind.AVG_POOL, OpKind.DEPTHWISE_CONV2D):
        if in_axis != 3 or node.inputs[0] != tid:
            return None
        return BlockKind.PART, 3
    if op is OpKind.PAD:
        if not _pads_zero(node, in_axis):
            return None
        return BlockKind.PART, in_axis
    if op is OpKind.REDUCE_MEAN:
        r = node.attr("axis")
        if r == in_axis:
            # Partial means cannot be recombined by a plain sum; stop here.
            return None
        return BlockKind.PART, in_axis - 1 if r < in_axis else in_axis
    return None


def _walk_depth_up(graph: Graph, crit_id: str) -> list[_UpEntry]:
    entries: list[_UpEntry] = []
    tid = crit_id
    axis = graph.tensors[crit_id].rank - 1
    while True:
        p = graph.producer(tid)
        if p is None:
            break
        cls = _classify_up_depth(graph, p, graph.tensors[tid], axis)
        if cls is None:
            break
        block, in_axis, chain_in = cls
        entries.append(_UpEntry(p.id, block, in_axis, axis, chain_in))
        if block is BlockKind.FDT_FAN_OUT:
            break
        tid, axis = chain_in, in_axis
        tdef = graph.tensors[tid]
        if tdef.kind is not TensorKind.INTERMEDIATE or len(graph.consumers(tid)) != 1:
            break
    return entries


def _walk_depth_down(graph: Graph, crit_id: str) -> list[_DownEntry]:
    entries: list[_DownEntry] = []
    tid = crit_id
    axis = graph.tensors[crit_id].rank - 1
    while True:
        consumers = graph.consumers(tid)
        if len(consumers) != 1:
            break
        c = consumers[0]
        cls = _classify_down_depth(graph, c, tid, axis)
        if cls is None:
            break
        block, out_axis = cls
        entries.append(_DownEntry(c.id, block, axis, out_axis))
        if block is BlockKind.FDT_FAN_IN:
            break
        tid, axis = c.outputs[0], out_axis
        if graph.tensors[tid].kind is not TensorKind.INTERMEDIATE:
            break
    return entries


def _classify_fm(graph: Graph, node, tid: str, going_up: bool):
    op = node.op
    if op in FFMT_OPS:
        if node.inputs[0] != tid and not going_up:
            return None
        return BlockKind.FFMT, _overlapping(graph, node)
    if op in (OpKind.BIAS_ADD, OpKind.ACTIVATION, OpKind.ADD):
        if op is OpKind.BIAS_ADD and not going_up and node.inputs[0] != tid:
            return None
        return BlockKind.PART, False
    if op is OpKind.PAD:
        pads = node.attr("pads")
        if len(pads) == 4 and tuple(pads[0]) == (0, 0) and tuple(pads[3]) == (0, 0):
            return BlockKind.PART, False
        return None
    return None


def _rank4(graph: Graph, tid: str) -> bool:
    return graph.tensors[tid].rank == 4


def _walk_fm_up(graph: Graph, crit_id: str) -> list[_UpEntry]:
    entries: list[_UpEntry] = []
    tid = crit_id
    while True:
        p = graph.producer(tid)
        if p is None or not _rank4(graph, tid):
            break
        cls = _classify_fm(graph, p, tid, going_up=True)
        if cls is None:
            break
        block, overlap = cls
        chain_in = p.inputs[0]
        if not _rank4(graph, chain_in):
            break
        entries.append(_UpEntry(p.id, block, None, 0, chain_in, has_overlap=overlap))
        tid = chain_in
        tdef = graph.tensors[tid]
        if tdef.kind is not TensorKind.INTERMEDIATE or len(graph.consumers(tid)) != 1:
            break
    return entries


def _walk_fm_down(graph: Graph, crit_id: str) -> list[_DownEntry]:
    entries: list[_DownEntry] = []
    tid = crit_id
    while True:
        consumers = graph.consumers(tid)
        if len(consumers) != 1 or not _rank4(graph, tid):
            break
        c = consumers[0]
        cls = _classify_fm(graph, c, tid, going_up=False)
        if cls is None:
            break
        block, overlap = cls
        if not _rank4(graph, c.outputs[0]):
            break
        entries.append(_DownEntry(c.id, block, 0, 0, has_overlap=overlap))
        tid = c.outputs[0]
        if graph.tensors[tid].kind is not TensorKind.INTERMEDIATE:
            break
    return entries


# ---------------------------------------------------------------------------
# Terminal selection and enumeration
# ---------------------------------------------------------------------------

def _pick_start(graph: Graph, ups: list[_UpEntry]) -> int:
    return min(
        range(len(ups)),
        key=lambda i: (buffer_size(graph.tensors[ups[i].chain_in]), i, ups[i].node_id),
    )


def _pick_end(graph: Graph, downs: list[_DownEntry]) -> int:
    def out_size(e: _DownEntry) -> int:
        return buffer_size(graph.tensors[graph.nodes[e.node_id].outputs[0]])

    return min(range(len(downs)), key=lambda j: (out_size(downs[j]), j, downs[j].node_id))


def _depth_config(graph: Graph, crit_id: str, ups, downs, n: int) -> TilingConfig:
    si = _pick_start(graph, ups)
    ej = _pick_end(graph, downs)
    kept_up = ups[: si + 1]
    kept_down = downs[: ej + 1]
    start = kept_up[-1]
    end = kept_down[-1]
    path = tuple(e.node_id for e in reversed(kept_up)) + tuple(e.node_id for e in kept_down)
    blocks = {e.node_id: e.block for e in kept_up}
    blocks.update({e.node_id: e.block for e in kept_down})
    axes = {e.node_id: e.out_axis for e in kept_up}
    for e in kept_down:
        if e.out_axis is not None:
            axes[e.node_id] = e.out_axis
    return TilingConfig(
        critical_buffer=crit_id,
        kind=PartitionKind.DEPTH,
        n_partitions=n,
        path=path,
        blocks=blocks,
        start_split=start.block is not BlockKind.FDT_FAN_OUT,
        end_concat=end.block is not BlockKind.FDT_FAN_IN,
        axes=axes,
        input_axis=start.in_axis,
    )


def _fm_config(graph: Graph, crit_id: str, ups, downs, g: int) -> TilingConfig:
    si = _pick_start(graph, ups)
    ej = _pick_end(graph, downs)
    kept_up = ups[: si + 1]
    kept_down = downs[: ej + 1]
    path = tuple(e.node_id for e in reversed(kept_up)) + tuple(e.node_id for e in kept_down)
    blocks = {e.node_id: e.block for e in kept_up}
    blocks.update({e.node_id: e.block for e in kept_down})
    return TilingConfig(
        critical_buffer=crit_id,
        kind=PartitionKind.FEATURE_MAP,
        n_partitions=g * g,
        grid=(g, g),
        path=path,
        blocks=blocks,
        start_split=True,
        end_concat=True,
    )


FM_GRIDS = (2, 3, 4, 5)


def enumerate_configs(
    graph: Graph,
    crit_id: str,
    *,
    max_partitions: int = 25,
    kinds: tuple[PartitionKind, ...] = (PartitionKind.DEPTH, PartitionKind.FEATURE_MAP),
) -> list[TilingConfig]:
    """All candidate configs for one critical buffer, deterministic order.

    Raises DiscoveryFailed when no valid path remains.
    """
    crit = graph.tensors[crit_id]
    if crit.kind is not TensorKind.INTERMEDIATE:
        raise DiscoveryFailed(f"{crit_id} is model I/O and cannot be tiled")
    configs: list[TilingConfig] = []
    seen = set()

    def emit(cfg: TilingConfig):
        k = cfg.key()
        if k not in seen:
            seen.add(k)
            configs.append(cfg)

    if PartitionKind.DEPTH in kinds and crit.rank >= 2:
        ups = _walk_depth_up(graph, crit_id)
        downs = _walk_depth_down(graph, crit_id)
        if ups and downs:
            down_variants = [downs]
            if downs[-1].block is BlockKind.FDT_FAN_IN and len(downs) > 1:
                down_variants.append(downs[:-1])
            extent = crit.shape[-1]
            for dv in down_variants:
                for n in range(2, min(max_partitions, extent) + 1):
                    emit(_depth_config(graph, crit_id, ups, dv, n))

    if PartitionKind.FEATURE_MAP in kinds and crit.rank == 4:
        ups = _walk_fm_up(graph, crit_id)
        downs = _walk_fm_down(graph, crit_id)
        if ups and downs:
            up_variants = [ups] + [ups[:i] for i, e in enumerate(ups) if e.block is BlockKind.FFMT and e.has_overlap and i > 0]
            down_variants = [downs] + [downs[:j] for j, e in enumerate(downs) if e.block is BlockKind.FFMT and e.has_overlap and j > 0]
            for uv in up_variants:
                for dv in down_variants:
                    for g in FM_GRIDS:
                        if g * g > max_partitions:
                            continue
                        if crit.shape[1] < g or crit.shape[2] < g:
                            continue
                        end_node = graph.nodes[dv[_pick_end(graph, dv)].node_id]
                        end_shape = graph.tensors[end_node.outputs[0]].shape
                        if end_shape[1] < g or end_shape[2] < g:
                            continue
                        emit(_fm_config(graph, crit_id, uv, dv, g))

    if not configs:
        raise DiscoveryFailed(f"no valid tiling path around {crit_id}")
    return configs
