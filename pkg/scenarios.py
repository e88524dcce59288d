"""Scenario files, canonical fault schedules and run orchestration.

Scenario file format (line oriented, ``#`` starts a comment)::

    electionsim-scenario 1
    name: ec_crash
    n: 6
    algorithm: ec            # bully | kordafshari | mamun | ec | all
    t_msg: 10
    t_pos: 4
    d: 24
    drop_probability: 0
    max_sim_time: 10000
    max_events: 1000000
    seeds: 0..4              # "1,2,3", "1..10" or a mix
    fault: 0 crash 6
    fault: 1 detect 2
    expect: final_coordinator == 5
    expect.ec: total_messages == 11

Fault kinds are those of ``simnet.FaultKind``. ``expect`` lines apply to every
algorithm run, ``expect.<algorithm>`` lines to that algorithm only.
"""

from __future__ import annotations

import csv
import io
import logging
import operator
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Callable, Iterable, Sequence

import numpy as np

from algo_bully import BullyAlgorithm
from algo_ec import ElectionCommissionAlgorithm
from algo_kordafshari import KordafshariAlgorithm
from algo_mamun import MamunAlgorithm
from core import SystemView
from metrics import (
    ALGORITHMS,
    Interval,
    MetricsReport,
    Trace,
    analyze,
    expected_messages,
)
from simnet import Algorithm, ConfigError, Fault, FaultSchedule, SimConfig, run

logger = logging.getLogger(__name__)

HEADER = "electionsim-scenario 1"
SIM_KEYS = ("t_msg", "t_pos", "d", "drop_probability", "max_sim_time", "max_events")
OPERATORS: dict[str, Callable[[float, float], bool]] = {
    "==": operator.eq,
    "!=": operator.ne,
    "<": operator.lt,
    "<=": operator.le,
    ">": operator.gt,
    ">=": operator.ge,
}
EXTRA_SCHEDULE_KINDS = ("false-alarm",)

ALGORITHM_CLASSES: dict[str, type[Algorithm]] = {
    "bully": BullyAlgorithm,
    "kordafshari": KordafshariAlgorithm,
    "mamun": MamunAlgorithm,
    "ec": ElectionCommissionAlgorithm,
}


class ScenarioError(ValueError):
    """Scenario file could not be parsed or does not fit the schema."""


def make_algorithm(name: str) -> Algorithm:
    try:
        return ALGORITHM_CLASSES[name]()
    except KeyError:
        raise ScenarioError(
            f"unknown algorithm {name!r} (choose from {', '.join(ALGORITHMS)})"
        ) from None


# ---------------------------------------------------------------------------
# Scenario file
# ---------------------------------------------------------------------------

def parse_seeds(text: str) -> tuple[int, ...]:
    seeds: list[int] = []
    for part in text.split(","):
        part = part.strip()
        if not part:
            continue
        try:
            if ".." in part:
                low, high = (int(x) for x in part.split("..", 1))
                if high < low:
                    raise ValueError
                seeds.extend(range(low, high + 1))
            else:
                seeds.append(int(part))
        except ValueError:
            raise ScenarioError(f"invalid seed list: {text!r}") from None
    if not seeds:
        raise ScenarioError("empty seed list")
    return tuple(seeds)


def parse_range(text: str) -> list[int]:
    """``4..16`` or ``4,6,8`` as a list of ints."""
    return list(parse_seeds(text))


def _format_number(value: float) -> str:
    return str(int(value)) if float(value).is_integer() else repr(float(value))


@dataclass(frozen=True)
class Assertion:
    metric: str
    op: str
    value: float
    algorithm: str | None = None

    def applies_to(self, algorithm: str) -> bool:
        return self.algorithm is None or self.algorithm == algorithm

    def check(self, report: MetricsReport) -> bool:
        return OPERATORS[self.op](report.metric(self.metric), self.value)

    def to_line(self) -> str:
        key = "expect" if self.algorithm is None else f"expect.{self.algorithm}"
        return f"{key}: {self.metric} {self.op} {_format_number(self.value)}"


@dataclass(frozen=True)
class ScenarioFile:
    name: str
    n: int
    algorithm: str
    sim: SimConfig = field(default_factory=SimConfig)
    faults: FaultSchedule = field(default_factory=FaultSchedule)
    seeds: tuple[int, ...] = (0,)
    assertions: tuple[Assertion, ...] = ()

    @property
    def algorithms(self) -> tuple[str, ...]:
        return ALGORITHMS if self.algorithm == "all" else (self.algorithm,)

    @classmethod
    def load(cls, path: Path) -> ScenarioFile:
        try:
            text = Path(path).read_text(encoding="utf-8")
        except OSError as exc:
            raise ScenarioError(f"cannot read scenario {path}: {exc.strerror}") from None
        return cls.parse(text)

    @classmethod
    def parse(cls, text: str) -> ScenarioFile:
        values: dict[str, str] = {}
        sim = SimConfig()
        faults: list[Fault] = []
        assertions: list[Assertion] = []
        seen_header = False

        for lineno, raw in enumerate(text.splitlines(), start=1):
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            if not seen_header:
                if line != HEADER:
                    raise ScenarioError(f"line {lineno}: expected header {HEADER!r}, got {line!r}")
                seen_header = True
                continue
            key, sep, value = line.partition(":")
            key, value = key.strip(), value.strip()
            if not sep or not value:
                raise ScenarioError(f"line {lineno}: expected 'key: value', got {line!r}")

            if key == "fault":
                time, _, rest = value.partition(" ")
                try:
                    faults.append(Fault.parse(float(time), rest))
                except (ValueError, ConfigError) as exc:
                    raise ScenarioError(f"line {lineno}: {exc}") from None
            elif key == "expect" or key.startswith("expect."):
                assertions.append(_parse_assertion(lineno, key, value))
            elif key in SIM_KEYS:
                if key in values:
                    raise ScenarioError(f"line {lineno}: duplicate key {key!r}")
                values[key] = value
                try:
                    number = int(value) if key == "max_events" else float(value)
                    sim = replace(sim, **{key: number})
                except (ValueError, ConfigError) as exc:
                    raise ScenarioError(f"line {lineno}: {exc}") from None
            elif key in ("name", "n", "algorithm", "seeds"):
                if key in values:
                    raise ScenarioError(f"line {lineno}: duplicate key {key!r}")
                values[key] = value
            else:
                raise ScenarioError(f"line {lineno}: unknown key {key!r}")

        if not seen_header:
            raise ScenarioError(f"line 1: missing header {HEADER!r}")
        for required in ("name", "n", "algorithm"):
            if required not in values:
                raise ScenarioError(f"missing required key {required!r}")
        try:
            n = int(values["n"])
        except ValueError:
            raise ScenarioError(f"n must be an integer, got {values['n']!r}") from None
        if n < 1:
            raise ScenarioError(f"n must be at least 1, got {n}")
        algorithm = values["algorithm"].lower()
        if algorithm != "all" and algorithm not in ALGORITHMS:
            raise ScenarioError(f"unknown algorithm {algorithm!r}")
        for assertion in assertions:
            if assertion.algorithm is not None and assertion.algorithm not in ALGORITHMS:
                raise ScenarioError(f"assertion for unknown algorithm {assertion.algorithm!r}")

        schedule = FaultSchedule(tuple(faults))
        try:
            schedule.validate(range(1, n + 1))
        except ConfigError as exc:
            raise ScenarioError(f"fault schedule: {exc}") from None

        return cls(
            name=values["name"],
            n=n,
            algorithm=algorithm,
            sim=sim,
            faults=schedule,
            seeds=parse_seeds(values.get("seeds", "0")),
            assertions=tuple(assertions),
        )

    def serialize(self) -> str:
        lines = [
            HEADER,
            f"name: {self.name}",
            f"n: {self.n}",
            f"algorithm: {self.algorithm}",
        ]
        for key in SIM_KEYS:
            lines.append(f"{key}: {_format_number(getattr(self.sim, key))}")
        lines.append(f"seeds: {','.join(str(s) for s in self.seeds)}")
        for fault in self.faults:
            lines.append(f"fault: {_format_number(fault.time)} {fault.to_text()}")
        lines.extend(assertion.to_line() for assertion in self.assertions)
        return "\n".join(lines) + "\n"


def _parse_assertion(lineno: int, key: str, value: str) -> Assertion:
    algorithm = key.split(".", 1)[1].lower() if "." in key else None
    parts = value.split()
    if len(parts) != 3 or parts[1] not in OPERATORS:
        raise ScenarioError(
            f"line {lineno}: expected '<metric> <op> <value>' with op in "
            f"{' '.join(OPERATORS)}, got {value!r}"
        )
    metric, op, raw = parts
    try:
        number = float(raw)
    except ValueError:
        raise ScenarioError(f"line {lineno}: assertion value must be a number, got {raw!r}") from None
    probe = MetricsReport({}, 0, 0, 0, [], True)
    try:
        probe.metric(metric)
    except (KeyError, ValueError):
        raise ScenarioError(f"line {lineno}: unknown metric {metric!r}") from None
    return Assertion(metric, op, number, algorithm)


# ---------------------------------------------------------------------------
# Canonical and random schedules
# ---------------------------------------------------------------------------

def canonical_schedule(kind: str, n: int, p: int | None = None) -> FaultSchedule:
    """Fault schedule behind each closed-form message count.

    The coordinator is always id n at the start. Crashes happen at t=0 and
    the detector (or recovering process) acts at t=1.
    """
    if n < 2:
        raise ValueError(f"n must be at least 2, got {n}")
    detector = 1 if p is None else p
    if not 1 <= detector <= n:
        raise ValueError(f"p must be in 1..{n}, got {detector}")

    if kind in ("worst-detect", "ec-best-winner-is-n-1"):
        if detector == n:
            raise ValueError(f"{kind}: the detector cannot be the crashed coordinator {n}")
        return FaultSchedule.of((0, f"crash {n}"), (1, f"detect {detector}"))
    if kind == "best-detect":
        crashes = [(0, f"crash {pid}") for pid in range(n, detector, -1)]
        return FaultSchedule.of(*crashes, (1, f"detect {detector}"))
    if kind == "recovery-query":
        return FaultSchedule.of((0, f"crash {detector}"), (1, f"recover {detector}"))
    if kind == "ec-reporter-is-highest":
        return FaultSchedule.of((0, f"crash {n}"), (1, f"detect {n - 1}"))
    if kind == "false-alarm":
        return FaultSchedule.of((1, f"detect {detector}"))
    raise ValueError(f"unknown scenario kind: {kind}")


def random_schedule(rng: np.random.Generator, n: int, length: int) -> FaultSchedule:
    """Seeded mix of every process fault kind; at least one process stays Up.

    Crashes, recoveries, slow spells, link breaks and detections. Links to the
    commission are never broken.
    """
    ids = list(range(1, n + 1))
    crashed: set[int] = set()
    slow: set[int] = set()
    broken: set[tuple[int, int]] = set()
    time = 0.0
    faults = []

    def pick(pool):
        pool = sorted(pool)
        return pool[int(rng.integers(len(pool)))]

    for _ in range(length):
        time += float(rng.uniform(1.0, 80.0))
        up = [pid for pid in ids if pid not in crashed and pid not in slow]
        choices = ["detect"]
        if len(up) > 1:
            choices += ["crash", "slow"]
        if crashed:
            choices.append("recover")
        if slow:
            choices.append("normal")
        if n > 1:
            choices.append("break")
        if broken:
            choices.append("heal")
        action = choices[int(rng.integers(len(choices)))]

        if action in ("break", "heal"):
            if action == "break":
                a, b = sorted(int(x) + 1 for x in rng.choice(n, size=2, replace=False))
                broken.add((a, b))
            else:
                a, b = pick(broken)
                broken.discard((a, b))
            faults.append(Fault.parse(round(time, 3), f"{action} {a} {b}"))
            continue

        if action == "recover":
            pid = pick(crashed)
            crashed.discard(pid)
        elif action == "normal":
            pid = pick(slow)
            slow.discard(pid)
        else:
            pid = pick(up)
            if action == "crash":
                crashed.add(pid)
            elif action == "slow":
                slow.add(pid)
        faults.append(Fault.parse(round(time, 3), f"{action} {pid}"))
    return FaultSchedule(tuple(faults))


# ---------------------------------------------------------------------------
# Running
# ---------------------------------------------------------------------------

@dataclass
class RunResult:
    name: str
    n: int
    algorithm: str
    seed: int
    report: MetricsReport
    trace_text: str


def run_once(
    name: str,
    n: int,
    algorithm: str,
    schedule: FaultSchedule,
    config: SimConfig,
) -> RunResult:
    """One (algorithm, seed) run; module level so a process pool can pickle it."""
    view = SystemView.build(range(1, n + 1))
    trace: Trace = run(view, make_algorithm(algorithm), schedule, config)
    return RunResult(name, n, algorithm, config.seed, analyze(trace, view), trace.to_text())


def _star_run(task: tuple) -> RunResult:
    return run_once(*task)


def run_tasks(tasks: Sequence[tuple], workers: int = 1) -> list[RunResult]:
    """Run independent tasks, in a process pool when ``workers > 1``; order is kept."""
    if workers <= 1 or len(tasks) <= 1:
        return [_star_run(task) for task in tasks]
    with ProcessPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(_star_run, tasks))


@dataclass
class AssertionFailure:
    algorithm: str
    seed: int
    assertion: Assertion
    observed: int

    def __str__(self) -> str:
        a = self.assertion
        return (
            f"{self.algorithm} seed {self.seed}: expected {a.metric} {a.op} "
            f"{_format_number(a.value)}, observed {self.observed}"
        )


@dataclass
class ScenarioOutcome:
    scenario: ScenarioFile
    results: list[RunResult]
    failures: list[AssertionFailure]

    @property
    def exit_code(self) -> int:
        return 1 if self.failures else 0


def run_scenario(
    scenario: ScenarioFile | Path | str,
    seed: int | None = None,
    trace_out: Path | None = None,
    max_events: int | None = None,
    workers: int = 1,
) -> ScenarioOutcome:
    if not isinstance(scenario, ScenarioFile):
        scenario = ScenarioFile.load(Path(scenario))
    seeds = scenario.seeds if seed is None else (seed,)
    base = scenario.sim.with_overrides(max_events=max_events)
    tasks = [
        (scenario.name, scenario.n, algorithm, scenario.faults, replace(base, seed=s))
        for algorithm in scenario.algorithms
        for s in seeds
    ]
    logger.info("scenario %s: %d run(s)", scenario.name, len(tasks))
    results = run_tasks(tasks, workers)

    failures = []
    for result in results:
        for assertion in scenario.assertions:
            if assertion.applies_to(result.algorithm) and not assertion.check(result.report):
                observed = result.report.metric(assertion.metric)
                failures.append(AssertionFailure(result.algorithm, result.seed, assertion, observed))
        if trace_out is not None:
            target = Path(trace_out) / f"{scenario.name}.{result.algorithm}.{result.seed}.trace"
            target.parent.mkdir(parents=True, exist_ok=True)
            target.write_text(result.trace_text, encoding="utf-8")
    return ScenarioOutcome(scenario, results, failures)


# ---------------------------------------------------------------------------
# Comparison and sweeps
# ---------------------------------------------------------------------------

@dataclass
class CompareRow:
    n: int
    algorithm: str
    total_messages: float
    elections: float
    redundant: float
    violations: float
    expected: int | Interval | None

    @property
    def expected_text(self) -> str:
        if self.expected is None:
            return "-"
        if isinstance(self.expected, Interval):
            return f"{self.expected.low}..{self.expected.high}"
        return str(self.expected)


@dataclass
class CompareTable:
    kind: str
    rows: list[CompareRow]

    def totals(self) -> dict[int, dict[str, int]]:
        table: dict[int, dict[str, int]] = {}
        for row in self.rows:
            table.setdefault(row.n, {})[row.algorithm] = row.total_messages
        return table

    def column(self, algorithm: str) -> list[float]:
        return [row.total_messages for row in self.rows if row.algorithm == algorithm]

    def ns(self) -> list[int]:
        return sorted({row.n for row in self.rows})

    def to_plain(self) -> str:
        """One row per n; cells are messages/elections/redundant/violations [expected]."""
        algorithms = [a for a in ALGORITHMS if any(r.algorithm == a for r in self.rows)]
        cells = {(r.n, r.algorithm): r for r in self.rows}
        header = ["n", *algorithms]
        body = []
        for n in self.ns():
            line = [str(n)]
            for algorithm in algorithms:
                row = cells.get((n, algorithm))
                if row is None:
                    line.append("-")
                    continue
                line.append(
                    f"{_format_number(row.total_messages)}/{_format_number(row.elections)}/"
                    f"{_format_number(row.redundant)}/{_format_number(row.violations)}"
                    f" [{row.expected_text}]"
                )
            body.append(line)
        widths = [max(len(r[i]) for r in [header, *body]) for i in range(len(header))]
        out = [
            "  ".join(cell.ljust(width) for cell, width in zip(r, widths)).rstrip()
            for r in [header, *body]
        ]
        return "\n".join(out) + "\n"

    def to_csv(self) -> str:
        buffer = io.StringIO()
        writer = csv.writer(buffer, lineterminator="\n")
        writer.writerow(
            ["n", "algorithm", "total_messages", "elections", "redundant", "violations", "expected"]
        )
        for row in self.rows:
            writer.writerow(
                [
                    row.n,
                    row.algorithm,
                    _format_number(row.total_messages),
                    _format_number(row.elections),
                    _format_number(row.redundant),
                    _format_number(row.violations),
                    row.expected_text,
                ]
            )
        return buffer.getvalue()


def _oracle(algorithm: str, n: int, p: int | None, kind: str) -> int | Interval | None:
    try:
        return expected_messages(algorithm, n, p, kind)
    except ValueError:
        return None


def compare(
    ns: Iterable[int],
    kind: str,
    seeds: Sequence[int] = (0,),
    p: int | None = None,
    algorithms: Sequence[str] = ALGORITHMS,
    config: SimConfig | None = None,
    workers: int = 1,
) -> CompareTable:
    """Run every algorithm on the canonical schedule of *kind* for each n."""
    base = config or SimConfig()
    ns = list(ns)
    tasks = []
    for n in ns:
        schedule = canonical_schedule(kind, n, p)
        for algorithm in algorithms:
            for seed in seeds:
                tasks.append((kind, n, algorithm, schedule, replace(base, seed=seed)))
    results = run_tasks(tasks, workers)

    grouped: dict[tuple[int, str], list[MetricsReport]] = {}
    for result in results:
        grouped.setdefault((result.n, result.algorithm), []).append(result.report)

    rows = []
    for n in ns:
        for algorithm in algorithms:
            reports = grouped[(n, algorithm)]
            rows.append(
                CompareRow(
                    n=n,
                    algorithm=algorithm,
                    total_messages=float(np.mean([r.total_messages for r in reports])),
                    elections=float(np.mean([r.elections_started for r in reports])),
                    redundant=float(np.mean([r.redundant_elections for r in reports])),
                    violations=float(np.mean([r.violations for r in reports])),
                    expected=_oracle(algorithm, n, 1 if p is None else p, kind),
                )
            )
    return CompareTable(kind, rows)


def sweep(
    algorithm: str,
    n: int,
    seeds: Sequence[int],
    length: int = 8,
    config: SimConfig | None = None,
    workers: int = 1,
) -> list[MetricsReport]:
    """Random fault schedules, one per seed; the seed drives both schedule and delays."""
    base = config or SimConfig()
    tasks = [
        (
            "sweep",
            n,
            algorithm,
            random_schedule(np.random.default_rng(seed), n, length),
            replace(base, seed=seed),
        )
        for seed in seeds
    ]
    return [result.report for result in run_tasks(tasks, workers)]
