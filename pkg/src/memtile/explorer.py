"""The end-to-end exploration loop.

Each round evaluates every candidate config of the largest critical buffer
by actually scheduling and laying out the transformed graph; the config
with the smallest peak is accepted when it strictly beats the current
layout, otherwise the next critical buffer is tried. After an accepted
rewrite the loop restarts from a fresh layout, since tiling changes which
buffers are critical. The loop ends when no candidate improves anything.

Candidates never cross merge/concat points introduced by earlier rounds,
terminating the iteration; accepted peaks decrease strictly over integers.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from .discovery import (
    DiscoveryFailed,
    PartitionKind,
    TilingConfig,
    enumerate_configs,
    find_critical_buffers,
)
from .executor import execute, outputs_equivalent, random_inputs
from .ir import Graph, GraphError, infer_shapes
from .pipeline import PipelineOptions, PipelineResult, evaluate_graph
from .transform import InvalidConfig, apply_tiling


class VerificationError(Exception):
    pass


_METHOD_KINDS = {
    "fdt": (PartitionKind.DEPTH,),
    "ffmt": (PartitionKind.FEATURE_MAP,),
    "both": (PartitionKind.DEPTH, PartitionKind.FEATURE_MAP),
}


@dataclass(frozen=True)
class ExplorerOptions:
    method: str = "both"  # fdt | ffmt | both | none
    max_partitions: int = 25
    pipeline: PipelineOptions = field(default_factory=PipelineOptions)
    verify: bool = False
    verify_runs: int = 20
    seed: int = 0
    collect_timings: bool = False
    on_evaluate: Callable[[Graph, TilingConfig, int | None, int | None, str | None], None] | None = None


@dataclass
class IterationRecord:
    critical_buffer: str
    configs_evaluated: int
    accepted: bool
    config: dict | None
    peak_before: int
    peak_after: int

    def to_json(self) -> dict:
        return {
            "critical_buffer": self.critical_buffer,
            "configs_evaluated": self.configs_evaluated,
            "accepted": self.accepted,
            "config": self.config,
            "peak_before": self.peak_before,
            "peak_after": self.peak_after,
        }


@dataclass
class ExplorationReport:
    baseline_peak: int
    final_peak: int
    baseline_macs: int
    final_macs: int
    iterations: list[IterationRecord]
    schedule: list[str]
    layout_rows: list[dict]
    fused_groups: list[list[str]]
    timings: dict | None = None
    max_verify_deviation: float | None = None

    @property
    def savings_pct(self) -> float:
        if self.baseline_peak == 0:
            return 0.0
        return (self.baseline_peak - self.final_peak) / self.baseline_peak * 100.0

    @property
    def mac_overhead_pct(self) -> float:
        if self.baseline_macs == 0:
            return 0.0
        return (self.final_macs - self.baseline_macs) / self.baseline_macs * 100.0

    def to_json(self) -> dict:
        doc = {
            "baseline": {"peak_bytes": self.baseline_peak, "macs": self.baseline_macs},
            "optimized": {"peak_bytes": self.final_peak, "macs": self.final_macs},
            "savings_pct": round(self.savings_pct, 4),
            "mac_overhead_pct": round(self.mac_overhead_pct, 4),
            "iterations": [r.to_json() for r in self.iterations],
            "schedule": list(self.schedule),
            "layout": self.layout_rows,
            "fused_groups": self.fused_groups,
        }
        if self.max_verify_deviation is not None:
            doc["max_verify_deviation"] = self.max_verify_deviation
        if self.timings is not None:
            doc["timings"] = self.timings
        return doc


def evaluate_config(graph: Graph, config: TilingConfig | None, opts: ExplorerOptions) -> tuple[int, int]:
    """(layout peak bytes, total MACs) of graph with config applied."""
    tiled = apply_tiling(graph, config) if config is not None else graph
    res = evaluate_graph(tiled, opts.pipeline)
    return res.layout.peak, res.macs.total


def _report_from(res: PipelineResult) -> tuple[list[str], list[dict], list[list[str]]]:
    return (
        list(res.schedule.order),
        res.layout.rows(),
        [list(g.members) for g in res.view.groups],
    )


def optimize(graph: Graph, opts: ExplorerOptions = ExplorerOptions()) -> tuple[Graph, ExplorationReport]:
    t0 = time.monotonic()
    annotated = infer_shapes(graph)
    base = evaluate_graph(annotated, opts.pipeline)
    baseline_peak = base.layout.peak
    baseline_macs = base.macs.total
    iterations: list[IterationRecord] = []
    iter_times: list[float] = []

    if opts.method == "none":
        schedule, rows, groups = _report_from(base)
        report = ExplorationReport(
            baseline_peak, baseline_peak, baseline_macs, baseline_macs,
            iterations, schedule, rows, groups,
        )
        if opts.collect_timings:
            report.timings = {"total_s": round(time.monotonic() - t0, 6)}
        return graph, report

    if opts.method not in _METHOD_KINDS:
        raise ValueError(f"unknown method {opts.method!r}")
    kinds = _METHOD_KINDS[opts.method]

    current = annotated
    current_res = base
    current_peak = baseline_peak
    while True:
        t_iter = time.monotonic()
        crits = find_critical_buffers(
            current, current_res.layout, current_res.lifetimes,
            plan_kwargs=opts.pipeline.plan_kwargs(),
        )
        accepted = False
        for crit in crits:
            try:
                configs = enumerate_configs(
                    current, crit.tensor_id,
                    max_partitions=opts.max_partitions, kinds=kinds,
                )
            except DiscoveryFailed:
                iterations.append(IterationRecord(crit.tensor_id, 0, False, None, current_peak, current_peak))
                continue
            best = None  # (peak, macs, n_partitions, index, config, result)
            for idx, cfg in enumerate(configs):
                try:
                    tiled = apply_tiling(current, cfg)
                    res = evaluate_graph(tiled, opts.pipeline)
                    peak, macs = res.layout.peak, res.macs.total
                    err = None
                except (InvalidConfig, GraphError) as e:
                    tiled, res, peak, macs, err = None, None, None, None, str(e)
                if opts.on_evaluate is not None:
                    opts.on_evaluate(current, cfg, peak, macs, err)
                if peak is None:
                    continue
                key = (peak, macs, cfg.n_partitions, idx)
                if best is None or key < best[:4]:
                    best = (peak, macs, cfg.n_partitions, idx, cfg, tiled, res)
            if best is not None and best[0] < current_peak:
                peak, _, _, _, cfg, tiled, res = best
                iterations.append(IterationRecord(crit.tensor_id, len(configs), True, cfg.summary(), current_peak, peak))
                current, current_res, current_peak = tiled, res, peak
                accepted = True
                break
            iterations.append(IterationRecord(crit.tensor_id, len(configs), False, None, current_peak, current_peak))
        iter_times.append(round(time.monotonic() - t_iter, 6))
        if not accepted:
            break

    schedule, rows, groups = _report_from(current_res)
    report = ExplorationReport(
        baseline_peak, current_peak, baseline_macs, current_res.macs.total,
        iterations, schedule, rows, groups,
    )
    if opts.verify:
        report.max_verify_deviation = _verify(annotated, current, opts)
    if opts.collect_timings:
        report.timings = {"iterations_s": iter_times, "total_s": round(time.monotonic() - t0, 6)}
    return current, report


def _verify(reference: Graph, optimized: Graph, opts: ExplorerOptions) -> float:
    rng = np.random.Generator(np.random.PCG64(opts.seed))
    worst = 0.0
    for _ in range(opts.verify_runs):
        inputs = random_inputs(reference, rng)
        ref = execute(reference, inputs)
        got = execute(optimized, inputs)
        ok, dev = _bounded(ref, got)
        worst = max(worst, dev)
        if not ok:
            raise VerificationError(f"tiled execution deviates by {dev}")
    return worst


def _bounded(ref, got):
    ok, dev = outputs_equivalent(ref, got)
    return ok, (dev if dev != float("inf") else 1.0)
