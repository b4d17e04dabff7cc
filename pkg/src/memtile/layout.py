"""Buffer layout planning in one linear memory space.

Every planned buffer i gets an end offset e_i with e_i >= s_i, and for every
pair of buffers whose lifetimes overlap either one ends at or below the
other's start. The peak is the largest end offset; `plan_exact` minimizes it
by branch-and-bound over the pairwise above/below orderings: once every
conflicting pair is oriented, the minimal feasible offsets are the longest
paths in the resulting constraint graph, so partial longest paths give sound
lower bounds for pruning. The search order is fixed, making the returned
optimal layout deterministic.

Exactness has a price on large instances (tiled graphs produce cliques of
equal-sized partial buffers with factorially many equivalent orderings), so
the solver carries deterministic budgets — a conflict-pair cap and a node
budget — and `plan` falls back to the heuristic when they trip.

`plan_heuristic` is the comparison baseline: place buffers in decreasing
size order at the lowest feasible offset.
"""

from __future__ import annotations

import time
from dataclasses import dataclass

from .scheduling import LifetimeTable


class PlannerTimeout(Exception):
    pass


DEFAULT_TIMEOUT_S = 30.0
DEFAULT_NODE_BUDGET = 200_000
DEFAULT_PAIR_CAP = 150


@dataclass(frozen=True)
class MemoryLayout:
    offsets: dict[str, int]  # start offsets (e_i - s_i)
    sizes: dict[str, int]
    peak: int

    def end(self, tid: str) -> int:
        return self.offsets[tid] + self.sizes[tid]

    def rows(self) -> list[dict]:
        return [
            {"tensor": tid, "offset": self.offsets[tid], "size": self.sizes[tid]}
            for tid in sorted(self.offsets, key=lambda t: (self.offsets[t], t))
        ]


def derive_conflicts(lifetimes: LifetimeTable) -> set[tuple[str, str]]:
    """Pairs of buffers whose closed live intervals intersect."""
    ids = sorted(lifetimes.intervals)
    out: set[tuple[str, str]] = set()
    for i, u in enumerate(ids):
        a1, b1 = lifetimes.intervals[u]
        for v in ids[i + 1 :]:
            a2, b2 = lifetimes.intervals[v]
            if a1 <= b2 and a2 <= b1:
                out.add((u, v))
    return out


def validate_layout(layout: MemoryLayout, conflicts: set[tuple[str, str]]) -> list[str]:
    problems = []
    for tid, off in layout.offsets.items():
        if off < 0:
            problems.append(f"{tid} starts below zero")
    for u, v in conflicts:
        if not (layout.end(u) <= layout.offsets[v] or layout.end(v) <= layout.offsets[u]):
            problems.append(f"conflicting buffers {u} and {v} overlap in memory")
    peak = max((layout.end(t) for t in layout.offsets), default=0)
    if peak != layout.peak:
        problems.append(f"peak {layout.peak} != max end offset {peak}")
    return problems


def plan_heuristic(sizes: dict[str, int], conflicts: set[tuple[str, str]]) -> MemoryLayout:
    """Decreasing-size placement at the lowest feasible offset."""
    neighbors: dict[str, list[str]] = {t: [] for t in sizes}
    for u, v in conflicts:
        neighbors[u].append(v)
        neighbors[v].append(u)
    offsets: dict[str, int] = {}
    for tid in sorted(sizes, key=lambda t: (-sizes[t], t)):
        s = sizes[tid]
        blocked = sorted(
            (offsets[o], offsets[o] + sizes[o]) for o in neighbors[tid] if o in offsets
        )
        candidate = 0
        for lo, hi in blocked:
            if candidate + s <= lo:
                break
            candidate = max(candidate, hi)
        offsets[tid] = candidate
    peak = max((offsets[t] + sizes[t] for t in offsets), default=0)
    return MemoryLayout(offsets=offsets, sizes=dict(sizes), peak=peak)


def plan_exact(
    sizes: dict[str, int],
    conflicts: set[tuple[str, str]],
    *,
    timeout_s: float = DEFAULT_TIMEOUT_S,
    node_budget: int = DEFAULT_NODE_BUDGET,
    pair_cap: int | None = DEFAULT_PAIR_CAP,
    lower_bound: int = 0,
) -> MemoryLayout:
    """Layout with provably minimal peak, or PlannerTimeout past the budgets.

    `lower_bound` may carry an externally known bound (e.g. the schedule's
    max co-live sum, a clique in the conflict graph); when the heuristic
    incumbent meets any bound it is returned as optimal without searching.
    """
    ids = sorted(sizes)
    index = {t: i for i, t in enumerate(ids)}
    size = [sizes[t] for t in ids]
    n = len(ids)
    pairs = sorted(
        ((index[u], index[v]) for u, v in conflicts),
        key=lambda p: (-(size[p[0]] + size[p[1]]), p),
    )
    incumbent = plan_heuristic(sizes, conflicts)
    bound = max([lower_bound] + size + [size[u] + size[v] for u, v in pairs]) if size else 0
    if incumbent.peak <= bound:
        return incumbent
    if pair_cap is not None and len(pairs) > pair_cap:
        raise PlannerTimeout(f"{len(pairs)} conflict pairs exceed exact-solve cap {pair_cap}")
    total = sum(size)

    best_peak = incumbent.peak
    best_ends: list[int] | None = None

    # dist[i] = current lower bound for e_i (longest constraint path).
    dist = size[:]
    below: list[list[int]] = [[] for _ in range(n)]  # oriented edges u -> v (u below v)
    deadline = time.monotonic() + timeout_s
    visited = 0

    def relax(u: int, undo: list[tuple[int, int]]) -> int:
        """Propagate from u; returns the new local peak or -1 when the branch
        is infeasible or cannot beat the incumbent."""
        stack = [u]
        peak = dist[u]
        while stack:
            a = stack.pop()
            da = dist[a]
            for b in below[a]:
                nd = da + size[b]
                if nd > dist[b]:
                    if nd > total or nd >= best_peak:
                        return -1
                    undo.append((b, dist[b]))
                    dist[b] = nd
                    if nd > peak:
                        peak = nd
                    stack.append(b)
        return peak

    def dfs(k: int, cur_peak: int):
        nonlocal best_peak, best_ends, visited
        visited += 1
        if visited > node_budget:
            raise PlannerTimeout(f"node budget {node_budget} exhausted")
        if visited % 4096 == 0 and time.monotonic() > deadline:
            raise PlannerTimeout("wall-clock deadline exceeded")
        if best_peak <= bound or cur_peak >= best_peak:
            return
        if k == len(pairs):
            best_peak = cur_peak
            best_ends = dist[:]
            return
        u, v = pairs[k]
        for lo, hi in ((u, v), (v, u)):
            below[lo].append(hi)
            undo: list[tuple[int, int]] = []
            branch_peak = cur_peak
            ok = True
            nd = dist[lo] + size[hi]
            if nd > dist[hi]:
                if nd > total or nd >= best_peak:
                    ok = False
                else:
                    undo.append((hi, dist[hi]))
                    dist[hi] = nd
                    reached = relax(hi, undo)
                    if reached < 0:
                        ok = False
                    else:
                        branch_peak = max(branch_peak, reached)
            if ok:
                dfs(k + 1, branch_peak)
            for node, old in reversed(undo):
                dist[node] = old
            below[lo].pop()

    dfs(0, max(dist) if dist else 0)
    if best_ends is None:  # the heuristic incumbent was already optimal
        return incumbent
    offsets = {t: best_ends[i] - size[i] for i, t in enumerate(ids)}
    return MemoryLayout(offsets=offsets, sizes=dict(sizes), peak=best_peak)


def plan(
    sizes: dict[str, int],
    conflicts: set[tuple[str, str]],
    *,
    timeout_s: float = DEFAULT_TIMEOUT_S,
    node_budget: int = DEFAULT_NODE_BUDGET,
    pair_cap: int | None = DEFAULT_PAIR_CAP,
    lower_bound: int = 0,
) -> tuple[MemoryLayout, bool]:
    """Exact layout with heuristic fallback; returns (layout, was_exact)."""
    try:
        layout = plan_exact(
            sizes,
            conflicts,
            timeout_s=timeout_s,
            node_budget=node_budget,
            pair_cap=pair_cap,
            lower_bound=lower_bound,
        )
        return layout, True
    except PlannerTimeout:
        return plan_heuristic(sizes, conflicts), False


def align_sizes(sizes: dict[str, int], alignment: int = 4) -> dict[str, int]:
    return {t: (s + alignment - 1) // alignment * alignment for t, s in sizes.items()}
