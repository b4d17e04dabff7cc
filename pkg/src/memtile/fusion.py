"""Operator fusion modeled as an analysis view.

A fused group is a chain anchored at a compute-heavy op that absorbs an
immediately following run of cheap elementwise ops, as long as each link
tensor has exactly one consumer. Tensors internal to a group never
materialize, so they are excluded from lifetime and layout analysis. The
underlying graph is never rewritten; the executor always runs fine-grained.

Barrier nodes never fuse forward: the transform places barriers on the last
op of every partition path so its output stays a real buffer.
"""

from __future__ import annotations

from dataclasses import dataclass

from .ir import Graph, OpKind, TensorKind

ANCHOR_OPS = {OpKind.CONV2D, OpKind.DEPTHWISE_CONV2D, OpKind.DENSE, OpKind.MERGE}
ABSORB_OPS = {OpKind.BIAS_ADD, OpKind.ACTIVATION, OpKind.ADD}


@dataclass(frozen=True)
class FusedGroup:
    members: tuple[str, ...]
    anchor: str
    internal_tensors: frozenset[str]


@dataclass(frozen=True)
class FusedView:
    graph: Graph
    groups: tuple[FusedGroup, ...]
    barriers: frozenset[str]

    @property
    def internal_tensor_ids(self) -> frozenset[str]:
        ids: set[str] = set()
        for g in self.groups:
            ids |= g.internal_tensors
        return frozenset(ids)

    def units(self) -> list[tuple[str, ...]]:
        """Schedulable units: each group is one unit, everything else solo."""
        grouped: set[str] = set()
        for g in self.groups:
            grouped |= set(g.members)
        units = [g.members for g in self.groups]
        units += [(nid,) for nid in self.graph.nodes if nid not in grouped]
        units.sort(key=lambda m: m[0])
        return units


def fuse(graph: Graph, barriers: set[str] | None = None) -> FusedView:
    """Greedy forward-maximal grouping under the single-consumer rule."""
    if barriers is None:
        barriers = set(graph.fusion_barriers)
    claimed: set[str] = set()
    groups: list[FusedGroup] = []
    for nid in graph.topo_order():
        node = graph.nodes[nid]
        if nid in claimed or node.op not in ANCHOR_OPS:
            continue
        chain = [nid]
        internal: list[str] = []
        cur = node
        while True:
            if cur.id in barriers:
                break
            t = cur.outputs[0]
            tdef = graph.tensors[t]
            if tdef.kind is not TensorKind.INTERMEDIATE:
                break
            consumers = graph.consumers(t)
            if len(consumers) != 1:
                break
            nxt = consumers[0]
            if nxt.op not in ABSORB_OPS or nxt.id in claimed:
                break
            internal.append(t)
            chain.append(nxt.id)
            cur = nxt
        if len(chain) > 1:
            claimed.update(chain)
            groups.append(FusedGroup(tuple(chain), anchor=nid, internal_tensors=frozenset(internal)))
    return FusedView(graph=graph, groups=tuple(groups), barriers=frozenset(barriers))


def unfuse(view: FusedView) -> Graph:
    """The fine-grained graph under the view (fusion is only an overlay)."""
    return view.graph


def empty_view(graph: Graph) -> FusedView:
    return FusedView(graph=graph, groups=(), barriers=frozenset())


def planned_tensor_ids(view: FusedView) -> list[str]:
    """Tensors the scheduler and layout planner see: everything that
    occupies RAM — model I/O and intermediates — minus fused internals."""
    internal = view.internal_tensor_ids
    return [
        t.id
        for t in view.graph.tensors.values()
        if t.kind is not TensorKind.WEIGHT and t.id not in internal
    ]
