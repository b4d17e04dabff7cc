"""Command-line front end.

Exit codes: 0 success, 1 parse/validation failure, 2 optimization found no
improvement (the report is still written), 3 verification failure.
"""

from __future__ import annotations

import argparse
import sys

import numpy as np

from . import models
from .executor import REL_TOLERANCE, execute, outputs_equivalent, random_inputs
from .explorer import ExplorerOptions, VerificationError, optimize
from .ir import DataType, GraphError, canonical_json, infer_shapes, load, save, serialize, validate
from .pipeline import PipelineOptions, evaluate_graph


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise _UsageError(message)


class _UsageError(Exception):
    pass


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="memtile", description="DNN peak-memory optimizer via fused tiling")
    sub = p.add_subparsers(dest="command", required=True)

    opt = sub.add_parser("optimize", help="tile a model to reduce peak memory")
    opt.add_argument("input")
    opt.add_argument("--out", help="path for the tiled graph (default: <input>.tiled.dnn.json)")
    opt.add_argument("--method", choices=["fdt", "ffmt", "both", "none"], default="both")
    opt.add_argument("--max-partitions", type=int, default=25)
    opt.add_argument("--exact-timeout-secs", type=float, default=30.0)
    opt.add_argument("--align4", action="store_true")
    opt.add_argument("--verify", action="store_true")
    opt.add_argument("--seed", type=int, default=0)
    opt.add_argument("--json-out", help="report path (default: stdout)")
    opt.add_argument("--timings", action="store_true", help="include wall times in the report")
    opt.add_argument("--dump-configs", help="write every evaluated config to this JSON file")

    gen = sub.add_parser("gen", help="generate a synthetic model")
    gen.add_argument("--template", choices=[k.value for k in models.TemplateKind], required=True)
    gen.add_argument("--seed", type=int, default=1)
    gen.add_argument("--scale", type=int, default=1)
    gen.add_argument("--dtype", choices=["f32", "i8"], default="f32")
    gen.add_argument("--out", required=True)

    chk = sub.add_parser("check", help="compare two graphs on random inputs")
    chk.add_argument("graph")
    chk.add_argument("--against", required=True)
    chk.add_argument("--seed", type=int, default=7)
    chk.add_argument("--runs", type=int, default=20)

    rep = sub.add_parser("report", help="baseline schedule/layout/MAC report")
    rep.add_argument("input")
    rep.add_argument("--align4", action="store_true")
    rep.add_argument("--exact-timeout-secs", type=float, default=30.0)
    rep.add_argument("--json-out")
    return p


def _load_valid(path):
    graph = load(path)
    problems = validate(graph)
    if problems:
        raise GraphError("; ".join(str(v) for v in problems[:5]))
    return infer_shapes(graph)


def _emit(doc: dict, path: str | None):
    text = canonical_json(doc)
    if path:
        with open(path, "w", encoding="utf-8") as f:
            f.write(text)
    else:
        sys.stdout.write(text)


def _cmd_optimize(args) -> int:
    graph = _load_valid(args.input)
    pipeline = PipelineOptions(
        sched_timeout_s=args.exact_timeout_secs,
        plan_timeout_s=args.exact_timeout_secs,
        align4=args.align4,
    )
    dumped: list[dict] = []

    def on_evaluate(_g, cfg, peak, macs, err):
        entry = cfg.summary()
        entry.update({"peak_bytes": peak, "macs": macs, "error": err})
        dumped.append(entry)

    opts = ExplorerOptions(
        method=args.method,
        max_partitions=args.max_partitions,
        pipeline=pipeline,
        verify=args.verify,
        seed=args.seed,
        collect_timings=args.timings,
        on_evaluate=on_evaluate if args.dump_configs else None,
    )
    try:
        tiled, report = optimize(graph, opts)
    except VerificationError as e:
        print(f"verification failed: {e}", file=sys.stderr)
        return 3
    out_path = args.out or (args.input.removesuffix(".dnn.json") + ".tiled.dnn.json")
    save(tiled, out_path)
    _emit(report.to_json(), args.json_out)
    if args.dump_configs:
        _emit({"configs": dumped}, args.dump_configs)
    return 0 if report.final_peak < report.baseline_peak else 2


def _cmd_gen(args) -> int:
    template = models.ModelTemplate(
        kind=models.TemplateKind(args.template),
        seed=args.seed,
        scale=args.scale,
        dtype=DataType(args.dtype),
    )
    save(models.generate(template), args.out)
    return 0


def _cmd_check(args) -> int:
    graph = _load_valid(args.graph)
    reference = _load_valid(args.against)
    rng = np.random.Generator(np.random.PCG64(args.seed))
    worst = 0.0
    exact_fail = False
    for _ in range(args.runs):
        inputs = random_inputs(reference, rng)
        ref = execute(reference, inputs)
        got = execute(graph, inputs)
        ok, dev = outputs_equivalent(ref, got)
        if dev == float("inf"):
            exact_fail = True
        else:
            worst = max(worst, dev)
        if not ok:
            exact_fail = exact_fail or dev > REL_TOLERANCE
    doc = {"runs": args.runs, "max_relative_deviation": worst, "tolerance": REL_TOLERANCE}
    _emit(doc, None)
    return 3 if exact_fail or worst > REL_TOLERANCE else 0


def _cmd_report(args) -> int:
    graph = _load_valid(args.input)
    pipeline = PipelineOptions(
        sched_timeout_s=args.exact_timeout_secs,
        plan_timeout_s=args.exact_timeout_secs,
        align4=args.align4,
    )
    res = evaluate_graph(graph, pipeline)
    doc = {
        "peak_bytes": res.layout.peak,
        "macs": res.macs.total,
        "schedule": list(res.schedule.order),
        "schedule_exact": res.schedule_exact,
        "layout": res.layout.rows(),
        "layout_exact": res.layout_exact,
        "fused_groups": [list(g.members) for g in res.view.groups],
        "peak_live_lower_bound": res.cost.peak_live,
    }
    _emit(doc, args.json_out)
    return 0


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except _UsageError as e:
        print(f"error: {e}", file=sys.stderr)
        return 1
    handlers = {
        "optimize": _cmd_optimize,
        "gen": _cmd_gen,
        "check": _cmd_check,
        "report": _cmd_report,
    }
    try:
        return handlers[args.command](args)
    except (GraphError, models.InvalidScale, OSError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
