"""Memory-aware operator scheduling.

The cost of a schedule is the peak of the instantaneous live-byte profile:
at every step the executing op's inputs and outputs are live together with
every earlier result that still has a pending reader. Model inputs are live
from step zero, model outputs until the end, weights never count (they live
in ROM) and fused-internal tensors never materialize.

`schedule_exact` minimizes that peak over all topological orders of the
fused units with a memoized search over downsets: the live set, and hence
all future costs, depend only on *which* units have run, so each subset is
solved once. The search carries both a wall-clock deadline and a
deterministic state budget so that exact-vs-heuristic fallback decisions
are reproducible run to run.

`schedule_hill_valley` is the cheap fallback: maximal branch-free chains
are emitted whole, ordered by how far their live profile falls after its
peak (descending hill-to-valley difference).
"""

from __future__ import annotations

import time
from dataclasses import dataclass

from .fusion import FusedView
from .ir import Graph, TensorKind, buffer_size


class SchedulerTimeout(Exception):
    pass


@dataclass(frozen=True)
class Schedule:
    order: tuple[str, ...]


@dataclass(frozen=True)
class LifetimeTable:
    intervals: dict[str, tuple[int, int]]
    sizes: dict[str, int]
    n_steps: int


@dataclass(frozen=True)
class ScheduleCost:
    peak_live: int
    profile: tuple[int, ...]


DEFAULT_TIMEOUT_S = 30.0
DEFAULT_STATE_BUDGET = 150_000
DEFAULT_UNIT_CAP = 22


class _LiveSim:
    """Reversible live-set simulation over scheduling units."""

    def __init__(self, graph: Graph, view: FusedView):
        internal = view.internal_tensor_ids
        self.sizes: dict[str, int] = {}
        self.remaining: dict[str, int] = {}
        self.pinned: set[str] = set()
        self.node_outs: dict[str, list[str]] = {}
        self.node_ins: dict[str, list[str]] = {}
        visible = set()
        for t in graph.tensors.values():
            if t.kind is TensorKind.WEIGHT or t.id in internal:
                continue
            visible.add(t.id)
            self.sizes[t.id] = buffer_size(t)
            self.remaining[t.id] = len(graph.consumers(t.id))
            if t.kind is TensorKind.MODEL_OUTPUT:
                self.pinned.add(t.id)
        for nid, n in graph.nodes.items():
            self.node_outs[nid] = [t for t in n.outputs if t in visible]
            seen: list[str] = []
            for t in n.inputs:
                if t in visible and t not in seen:
                    seen.append(t)
            self.node_ins[nid] = seen
        self.live: set[str] = {t.id for t in graph.model_inputs()}
        self.live_size = sum(self.sizes[t] for t in self.live)

    def run_unit(self, members: tuple[str, ...]):
        """Execute one unit as a single step; return (step live sum, undo log).

        A fused unit behaves like one kernel: every visible input stays live
        while every visible output is being written, so they all count at the
        unit's step.
        """
        undo: list[tuple[str, str]] = []
        step = self.live_size
        for m in members:
            for o in self.node_outs[m]:
                if o not in self.live:
                    step += self.sizes[o]
                    self.live.add(o)
                    self.live_size += self.sizes[o]
                    undo.append(("add", o))
        for m in members:
            for t in self.node_ins[m]:
                self.remaining[t] -= 1
                undo.append(("dec", t))
                if self.remaining[t] == 0 and t not in self.pinned and t in self.live:
                    self.live.remove(t)
                    self.live_size -= self.sizes[t]
                    undo.append(("rm", t))
        return step, undo

    def rollback(self, undo):
        for action, t in reversed(undo):
            if action == "add":
                self.live.remove(t)
                self.live_size -= self.sizes[t]
            elif action == "dec":
                self.remaining[t] += 1
            else:
                self.live.add(t)
                self.live_size += self.sizes[t]


def _unit_dag(graph: Graph, view: FusedView):
    """Units sorted by first member id, plus pred/succ index sets."""
    units = view.units()
    owner: dict[str, int] = {}
    for i, members in enumerate(units):
        for m in members:
            owner[m] = i
    preds: list[set[int]] = [set() for _ in units]
    succs: list[set[int]] = [set() for _ in units]
    for i, members in enumerate(units):
        for m in members:
            for t in graph.nodes[m].inputs:
                p = graph.producer(t)
                if p is None:
                    continue
                j = owner[p.id]
                if j != i:
                    preds[i].add(j)
                    succs[j].add(i)
    return units, preds, succs


def schedule_exact(
    graph: Graph,
    view: FusedView,
    *,
    timeout_s: float = DEFAULT_TIMEOUT_S,
    max_states: int = DEFAULT_STATE_BUDGET,
    max_units: int | None = DEFAULT_UNIT_CAP,
) -> Schedule:
    """Peak-live-optimal topological order, or SchedulerTimeout.

    Among optimal orders the lexicographically smallest node-id sequence is
    returned, which keeps downstream goldens stable.
    """
    units, preds, _ = _unit_dag(graph, view)
    n = len(units)
    if n == 0:
        return Schedule(())
    if max_units is not None and n > max_units:
        raise SchedulerTimeout(f"{n} units exceeds exact-search cap {max_units}")

    pred_mask = [0] * n
    for i, ps in enumerate(preds):
        for j in ps:
            pred_mask[i] |= 1 << j
    full = (1 << n) - 1
    sim = _LiveSim(graph, view)
    memo: dict[int, int] = {}
    deadline = time.monotonic() + timeout_s
    INF = float("inf")

    def ready(mask: int):
        return [i for i in range(n) if not (mask >> i) & 1 and (pred_mask[i] & mask) == pred_mask[i]]

    def solve(mask: int) -> float:
        if mask == full:
            return 0
        hit = memo.get(mask)
        if hit is not None:
            return hit
        if len(memo) >= max_states:
            raise SchedulerTimeout(f"state budget {max_states} exhausted")
        if len(memo) % 2048 == 0 and time.monotonic() > deadline:
            raise SchedulerTimeout("wall-clock deadline exceeded")
        best = INF
        for i in ready(mask):
            peak_u, undo = sim.run_unit(units[i])
            sub = solve(mask | (1 << i))
            sim.rollback(undo)
            cost = max(peak_u, sub)
            if cost < best:
                best = cost
        memo[mask] = best
        return best

    optimum = solve(0)
    # Reconstruct; unit indices are already ordered by first-member id, so the
    # first optimal choice at every state yields the lex-smallest sequence.
    order: list[str] = []
    mask = 0
    while mask != full:
        for i in ready(mask):
            peak_u, undo = sim.run_unit(units[i])
            rest = 0 if mask | (1 << i) == full else memo[mask | (1 << i)]
            if max(peak_u, rest) == (optimum if mask == 0 else memo[mask]):
                order.extend(units[i])
                mask |= 1 << i
                break
            sim.rollback(undo)
        else:  # pragma: no cover - search invariant
            raise AssertionError("schedule reconstruction failed")
    return Schedule(tuple(order))


def schedule_hill_valley(graph: Graph, view: FusedView) -> Schedule:
    """Chain-priority list scheduling; always a valid topological order."""
    units, preds, succs = _unit_dag(graph, view)
    n = len(units)
    if n == 0:
        return Schedule(())

    # Maximal branch-free chains over the unit DAG.
    chain_of = [-1] * n
    chains: list[list[int]] = []
    for i in range(n):
        if chain_of[i] >= 0:
            continue
        is_head = True
        if len(preds[i]) == 1:
            p = next(iter(preds[i]))
            if len(succs[p]) == 1:
                is_head = False
        if not is_head:
            continue
        chain = [i]
        chain_of[i] = len(chains)
        cur = i
        while len(succs[cur]) == 1:
            nxt = next(iter(succs[cur]))
            if len(preds[nxt]) != 1 or chain_of[nxt] >= 0:
                break
            chain.append(nxt)
            chain_of[nxt] = len(chains)
            cur = nxt
        chains.append(chain)
    for i in range(n):  # cycle-free remainder (shouldn't occur in a DAG)
        if chain_of[i] < 0:
            chain_of[i] = len(chains)
            chains.append([i])

    diffs = [_chain_diff(graph, view, [units[u] for u in chain]) for chain in chains]

    pos_in_chain = {}
    for chain in chains:
        for k, u in enumerate(chain):
            pos_in_chain[u] = k

    indeg = [len(p) for p in preds]
    ready = {i for i in range(n) if indeg[i] == 0}
    emitted: list[str] = []
    done = 0
    last = -1
    while done < n:
        nxt = -1
        if last >= 0:
            chain = chains[chain_of[last]]
            k = pos_in_chain[last]
            if k + 1 < len(chain) and chain[k + 1] in ready:
                nxt = chain[k + 1]
        if nxt < 0:
            nxt = min(ready, key=lambda u: (-diffs[chain_of[u]], units[u][0]))
        ready.remove(nxt)
        emitted.extend(units[nxt])
        done += 1
        last = nxt
        for s in succs[nxt]:
            indeg[s] -= 1
            if indeg[s] == 0:
                ready.add(s)
    return Schedule(tuple(emitted))


def _chain_diff(graph: Graph, view: FusedView, chain_units: list[tuple[str, ...]]) -> int:
    """Hill-to-valley drop of a chain simulated standalone.

    External inputs are counted once and live for the whole simulation when
    they also have readers outside the chain.
    """
    internal = view.internal_tensor_ids
    members = [m for unit in chain_units for m in unit]
    member_set = set(members)

    def visible(tid: str) -> bool:
        t = view.graph.tensors[tid]
        return t.kind is not TensorKind.WEIGHT and tid not in internal

    produced_in = {graph.nodes[m].outputs[0] for m in members if visible(graph.nodes[m].outputs[0])}
    remaining: dict[str, int] = {}
    outside: dict[str, int] = {}
    live: set[str] = set()
    live_size = 0
    # remaining per tensor: distinct in-chain consumers; outside: the rest.
    touched: set[str] = set()
    for m in members:
        for t in set(graph.nodes[m].inputs):
            if visible(t):
                touched.add(t)
    for t in touched | produced_in:
        consumers = view.graph.consumers(t)
        inside = {c.id for c in consumers} & member_set
        remaining[t] = len(inside)
        outside[t] = len(consumers) - len(inside)
    for t in touched - produced_in:
        live.add(t)
        live_size += buffer_size(view.graph.tensors[t])

    during: list[int] = []
    for unit in chain_units:
        step = live_size
        for m in unit:
            for t in graph.nodes[m].outputs:
                if visible(t) and t not in live:
                    step += buffer_size(view.graph.tensors[t])
                    live.add(t)
                    live_size += buffer_size(view.graph.tensors[t])
        during.append(step)
        for m in unit:
            for t in set(graph.nodes[m].inputs):
                if t not in remaining:
                    continue
                remaining[t] -= 1
                pinned = view.graph.tensors[t].kind is TensorKind.MODEL_OUTPUT
                if remaining[t] == 0 and outside.get(t, 0) == 0 and not pinned and t in live:
                    live.remove(t)
                    live_size -= buffer_size(view.graph.tensors[t])
    if not during:
        return 0
    hill = max(during)
    k = during.index(hill)
    valley = min(during[k:])
    return hill - valley


def unit_steps(view: FusedView, schedule: Schedule) -> dict[str, int]:
    """Map each node to its scheduling step; a fused group is one step."""
    owner: dict[str, int] = {}
    for i, g in enumerate(view.groups):
        for m in g.members:
            owner[m] = i
    pos: dict[str, int] = {}
    step = -1
    last_group = None
    for nid in schedule.order:
        grp = owner.get(nid)
        if grp is None or grp != last_group:
            step += 1
        last_group = grp
        pos[nid] = step
    return pos


def compute_lifetimes(graph: Graph, view: FusedView, schedule: Schedule) -> LifetimeTable:
    """Closed live intervals in unit steps for every planned buffer.

    A fused group spans one step, so its inputs and its output conflict (a
    fused kernel reads the former while writing the latter); only the
    group-internal tensors vanish.
    """
    pos = unit_steps(view, schedule)
    internal = view.internal_tensor_ids
    intervals: dict[str, tuple[int, int]] = {}
    sizes: dict[str, int] = {}
    n_steps = (max(pos.values()) + 1) if pos else 0
    for t in graph.tensors.values():
        if t.kind is TensorKind.WEIGHT or t.id in internal:
            continue
        if t.kind is TensorKind.MODEL_INPUT:
            first = 0
        else:
            first = pos[graph.producer(t.id).id]
        consumer_pos = [pos[c.id] for c in graph.consumers(t.id)]
        last = max(consumer_pos) if consumer_pos else first
        if t.kind is TensorKind.MODEL_OUTPUT:
            last = max(last, n_steps - 1)
        intervals[t.id] = (first, last)
        sizes[t.id] = buffer_size(t)
    return LifetimeTable(intervals=intervals, sizes=sizes, n_steps=n_steps)


def schedule_cost(table: LifetimeTable) -> ScheduleCost:
    deltas = [0] * (table.n_steps + 1)
    for tid, (a, b) in table.intervals.items():
        deltas[a] += table.sizes[tid]
        deltas[b + 1] -= table.sizes[tid]
    profile = []
    acc = 0
    for step in range(table.n_steps):
        acc += deltas[step]
        profile.append(acc)
    return ScheduleCost(peak_live=max(profile) if profile else 0, profile=tuple(profile))


def is_topological(graph: Graph, order: tuple[str, ...]) -> bool:
    if set(order) != set(graph.nodes) or len(order) != len(graph.nodes):
        return False
    pos = {nid: i for i, nid in enumerate(order)}
    for n in graph.nodes.values():
        for t in n.inputs:
            p = graph.producer(t)
            if p is not None and pos[p.id] >= pos[n.id]:
                return False
    return True


def best_schedule(
    graph: Graph,
    view: FusedView,
    *,
    timeout_s: float = DEFAULT_TIMEOUT_S,
    max_states: int = DEFAULT_STATE_BUDGET,
    max_units: int | None = DEFAULT_UNIT_CAP,
) -> tuple[Schedule, bool]:
    """Exact schedule when the search fits its budgets, heuristic otherwise."""
    try:
        return schedule_exact(graph, view, timeout_s=timeout_s, max_states=max_states, max_units=max_units), True
    except SchedulerTimeout:
        return schedule_hill_valley(graph, view), False
