#!/usr/bin/env python3
"""Leader-election simulator CLI.

Runs scenario files against the Bully variants and the Election Commission
protocol, compares message counts across n, and sweeps random fault schedules.

Usage:
    python electiontool.py run golden_scenarios/ec_crash.scn [--seed N] [--trace-out DIR] [--table plain|csv]
    python electiontool.py compare --n-range 4..16 --kind worst-detect [--seeds 0..4]
    python electiontool.py sweep --algorithm ec --n 6 --seeds 0..999

Exit codes: 0 success, 1 a scenario assertion failed, 2 configuration error.
"""

import argparse
import csv
import io
import logging
import os
import sys
from pathlib import Path

from metrics import (
    AGGREGATED_METRICS,
    ALGORITHMS,
    SCENARIO_KINDS,
    MetricsReport,
    TraceError,
    aggregate,
    fit_quadratic,
    ordering_counterexamples,
)
from scenarios import (
    EXTRA_SCHEDULE_KINDS,
    ScenarioError,
    compare,
    parse_range,
    parse_seeds,
    run_scenario,
    sweep,
)
from simnet import ConfigError, SimConfig, SimulationError

EXIT_OK = 0
EXIT_ASSERTION = 1
EXIT_CONFIG = 2

RUN_COLUMNS = [
    "algorithm",
    "seed",
    "total_messages",
    "elections",
    "redundant",
    "multi_coord",
    "violations",
    "coordinator",
    "correct",
    "liveness",
]


def default_max_events() -> int | None:
    raw = os.getenv("ELECTIONSIM_MAX_EVENTS")
    if not raw:
        return None
    try:
        return int(raw)
    except ValueError:
        print(f"Warning: ignoring non-integer ELECTIONSIM_MAX_EVENTS={raw!r}", file=sys.stderr)
        return None


# ---------------------------------------------------------------------------
# Table helpers
# ---------------------------------------------------------------------------

def format_table(header: list[str], rows: list[list[str]], style: str = "plain") -> str:
    if style == "csv":
        buffer = io.StringIO()
        writer = csv.writer(buffer, lineterminator="\n")
        writer.writerow(header)
        writer.writerows(rows)
        return buffer.getvalue()
    widths = [max(len(str(r[i])) for r in [header, *rows]) for i in range(len(header))]
    lines = [
        "  ".join(str(cell).ljust(width) for cell, width in zip(r, widths)).rstrip()
        for r in [header, *rows]
    ]
    lines.insert(1, "  ".join("-" * width for width in widths))
    return "\n".join(lines) + "\n"


def report_row(algorithm: str, seed: int, report: MetricsReport) -> list[str]:
    return [
        algorithm,
        str(seed),
        str(report.total_messages),
        str(report.elections_started),
        str(report.redundant_elections),
        str(len(report.multi_coordinator_intervals)),
        str(report.violations),
        ",".join(map(str, report.final_coordinators)) or "-",
        "yes" if report.final_view_correct else "no",
        "STALLED " + ",".join(map(str, report.stalled)) if report.liveness_failure else "ok",
    ]


def print_aggregate(label: str, reports: list[MetricsReport], style: str) -> None:
    summary = aggregate(reports)
    rows = [
        [name, f"{summary[name].mean:.3f}", f"{summary[name].min:g}", f"{summary[name].max:g}"]
        for name in AGGREGATED_METRICS
    ]
    print(f"\n{label} ({len(reports)} run(s)):")
    print(format_table(["metric", "mean", "min", "max"], rows, style), end="", flush=True)


# ---------------------------------------------------------------------------
# Commands
# ---------------------------------------------------------------------------

def cmd_run(args: argparse.Namespace) -> int:
    outcome = run_scenario(
        Path(args.scenario),
        seed=args.seed,
        trace_out=Path(args.trace_out) if args.trace_out else None,
        max_events=args.max_events,
        workers=args.workers,
    )
    scenario = outcome.scenario
    print(f"Scenario {scenario.name}: n={scenario.n}, {len(outcome.results)} run(s)")
    rows = [report_row(r.algorithm, r.seed, r.report) for r in outcome.results]
    print(format_table(RUN_COLUMNS, rows, args.table), end="", flush=True)

    if len({r.seed for r in outcome.results}) > 1:
        for algorithm in scenario.algorithms:
            reports = [r.report for r in outcome.results if r.algorithm == algorithm]
            print_aggregate(algorithm, reports, args.table)

    if args.trace_out:
        print(f"\nTraces written to {args.trace_out}")
    if outcome.failures:
        print(f"\n{len(outcome.failures)} assertion(s) failed:")
        for failure in outcome.failures:
            print(f"  FAIL {failure}")
        return EXIT_ASSERTION
    if scenario.assertions:
        print(f"\nAll {len(scenario.assertions)} assertion(s) passed.")
    return EXIT_OK


def cmd_compare(args: argparse.Namespace) -> int:
    ns = parse_range(args.n_range)
    if min(ns) < 2:
        raise ConfigError(f"n-range must start at 2 or more, got {min(ns)}")
    seeds = parse_seeds(args.seeds)
    algorithms = args.algorithms.split(",") if args.algorithms else list(ALGORITHMS)
    unknown = [a for a in algorithms if a not in ALGORITHMS]
    if unknown:
        raise ConfigError(f"unknown algorithm(s): {', '.join(unknown)}")

    print(f"Comparing {', '.join(algorithms)} on {args.kind} for n in {ns[0]}..{ns[-1]}")
    table = compare(
        ns,
        args.kind,
        seeds=seeds,
        p=args.p,
        algorithms=algorithms,
        config=SimConfig().with_overrides(max_events=args.max_events),
        workers=args.workers,
    )
    print(table.to_csv() if args.table == "csv" else table.to_plain(), end="", flush=True)

    if "bully" in algorithms and len(ns) >= 3:
        fit = fit_quadratic(table.ns(), table.column("bully"))
        a, b, c = fit.coefficients
        print(f"\nbully quadratic fit: {a:.4f} n^2 + {b:.4f} n + {c:.4f} (R^2 = {fit.r_squared:.4f})")
    if set(ALGORITHMS) <= set(algorithms):
        problems = ordering_counterexamples(table.totals())
        if problems:
            print("\nOrdering counterexamples:")
            for problem in problems:
                print(f"  {problem}")
        else:
            print("\nOrdering ec < mamun <= kordafshari < bully holds for every n.")
    return EXIT_OK


def cmd_sweep(args: argparse.Namespace) -> int:
    seeds = parse_seeds(args.seeds)
    print(
        f"Sweeping {args.algorithm} on n={args.n}: {len(seeds)} random schedule(s) "
        f"of {args.length} fault(s)"
    )
    reports = sweep(
        args.algorithm,
        args.n,
        seeds,
        length=args.length,
        config=SimConfig().with_overrides(max_events=args.max_events),
        workers=args.workers,
    )
    print_aggregate(args.algorithm, reports, args.table)
    intervals = sum(len(r.multi_coordinator_intervals) for r in reports)
    redundant = sum(r.redundant_elections for r in reports)
    stalled = sum(r.liveness_failure for r in reports)
    print(
        f"\nTotals: {intervals} multi-coordinator interval(s), "
        f"{redundant} redundant election(s), {stalled} stalled run(s)."
    )
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="electiontool",
        description="Simulate and compare Bully-style leader election protocols.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("-v", "--verbose", action="store_true", help="Debug logging")
    common.add_argument("--table", choices=["plain", "csv"], default="plain",
                        help="Table format (default: plain)")
    common.add_argument("--max-events", type=int, default=default_max_events(),
                        help="Livelock guard: max events per run (or ELECTIONSIM_MAX_EVENTS env)")
    common.add_argument("--workers", type=int, default=1,
                        help="Parallel worker processes for independent runs (default: 1)")

    # -- run --
    p_run = sub.add_parser("run", parents=[common], help="Run a scenario file and check its assertions")
    p_run.add_argument("scenario", help="Path to a .scn scenario file")
    p_run.add_argument("--seed", type=int, help="Run only this seed instead of the file's seeds")
    p_run.add_argument("--trace-out", help="Write one trace file per (algorithm, seed) here")
    p_run.set_defaults(func=cmd_run)

    # -- compare --
    p_cmp = sub.add_parser("compare", parents=[common],
                           help="Message counts per algorithm across a range of n")
    p_cmp.add_argument("--n-range", default="4..16", help="n values, e.g. 4..16 or 4,8,16 (default: 4..16)")
    p_cmp.add_argument("--kind", choices=[*SCENARIO_KINDS, *EXTRA_SCHEDULE_KINDS], default="worst-detect",
                       help="Canonical fault schedule (default: worst-detect)")
    p_cmp.add_argument("--p", type=int, help="Detector / recovering id (default: 1)")
    p_cmp.add_argument("--seeds", default="0", help="Seeds, e.g. 0..4 (default: 0)")
    p_cmp.add_argument("--algorithms", help="Comma-separated subset (default: all)")
    p_cmp.set_defaults(func=cmd_compare)

    # -- sweep --
    p_sweep = sub.add_parser("sweep", parents=[common], help="Random fault schedules, one per seed")
    p_sweep.add_argument("--algorithm", choices=list(ALGORITHMS), default="ec")
    p_sweep.add_argument("--n", type=int, default=6, help="Process count (default: 6)")
    p_sweep.add_argument("--seeds", default="0..999", help="Seeds (default: 0..999)")
    p_sweep.add_argument("--length", type=int, default=8, help="Faults per schedule (default: 8)")
    p_sweep.set_defaults(func=cmd_sweep)

    return parser


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(
        level=logging.DEBUG if args.verbose else logging.WARNING,
        format="%(levelname)s %(name)s: %(message)s",
    )
    try:
        return args.func(args)
    except (ScenarioError, ConfigError, SimulationError, TraceError, ValueError) as exc:
        print(f"Error: {exc}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
