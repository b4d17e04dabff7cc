"""The evaluation pipeline shared by the explorer, peak_after and the CLI:
fuse, schedule, derive lifetimes and conflicts, plan the layout.

Exact solvers run under deterministic budgets and fall back to their
heuristics, so a graph always evaluates to the same layout on every run.
"""

from __future__ import annotations

from dataclasses import dataclass, field

from . import layout as layout_mod
from . import scheduling
from .executor import MacCount, count_macs
from .fusion import FusedView, fuse
from .ir import Graph
from .layout import MemoryLayout, derive_conflicts
from .scheduling import LifetimeTable, Schedule, ScheduleCost


@dataclass(frozen=True)
class PipelineOptions:
    sched_timeout_s: float = scheduling.DEFAULT_TIMEOUT_S
    sched_state_budget: int = scheduling.DEFAULT_STATE_BUDGET
    sched_unit_cap: int | None = scheduling.DEFAULT_UNIT_CAP
    plan_timeout_s: float = layout_mod.DEFAULT_TIMEOUT_S
    plan_node_budget: int = layout_mod.DEFAULT_NODE_BUDGET
    align4: bool = False

    def plan_kwargs(self) -> dict:
        return {"timeout_s": self.plan_timeout_s, "node_budget": self.plan_node_budget}


@dataclass(frozen=True)
class PipelineResult:
    view: FusedView
    schedule: Schedule
    schedule_exact: bool
    lifetimes: LifetimeTable
    cost: ScheduleCost
    layout: MemoryLayout
    layout_exact: bool
    macs: MacCount


def evaluate_graph(graph: Graph, opts: PipelineOptions = PipelineOptions()) -> PipelineResult:
    view = fuse(graph)
    schedule, sched_exact = scheduling.best_schedule(
        graph,
        view,
        timeout_s=opts.sched_timeout_s,
        max_states=opts.sched_state_budget,
        max_units=opts.sched_unit_cap,
    )
    lifetimes = scheduling.compute_lifetimes(graph, view, schedule)
    cost = scheduling.schedule_cost(lifetimes)
    if opts.align4:
        sizes = layout_mod.align_sizes(lifetimes.sizes)
        planned_lt = LifetimeTable(lifetimes.intervals, sizes, lifetimes.n_steps)
        live_bound = scheduling.schedule_cost(planned_lt).peak_live
    else:
        sizes = lifetimes.sizes
        live_bound = cost.peak_live
    conflicts = derive_conflicts(lifetimes)
    planned, plan_exact = layout_mod.plan(
        sizes, conflicts, lower_bound=live_bound, **opts.plan_kwargs()
    )
    return PipelineResult(
        view=view,
        schedule=schedule,
        schedule_exact=sched_exact,
        lifetimes=lifetimes,
        cost=cost,
        layout=planned,
        layout_exact=plan_exact,
        macs=count_macs(graph),
    )
