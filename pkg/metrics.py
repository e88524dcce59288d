"""Trace records and trace analysis.

The simulator appends ``TraceRecord`` rows to a ``Trace``; ``analyze`` turns a
finished trace plus the final system view into a ``MetricsReport``: message
accounting, redundant elections, multi-coordinator intervals and liveness.
``expected_messages`` holds the closed-form message counts the protocols are
compared against.

Trace files hold one record per line, tab-separated::

    time  kind  from  to  message-kind  payload

``time`` has six decimals, absent fields are ``-`` and the payload is
``key=value`` pairs sorted by key and joined with ``;``. Example, with
``<TAB>`` standing for the tab character::

    27.418262<TAB>TimerFired<TAB>EC<TAB>-<TAB>-<TAB>charge=VerifyReply;timer=verify
"""

from __future__ import annotations

from dataclasses import dataclass, field
from enum import Enum
from pathlib import Path
from typing import Any, Iterable, Sequence

import numpy as np

from core import (
    Endpoint,
    MessageKind,
    ProcessId,
    Status,
    SystemView,
    correctness_predicate,
)

ALGORITHMS = ("bully", "kordafshari", "mamun", "ec")
SCENARIO_KINDS = (
    "worst-detect",
    "best-detect",
    "recovery-query",
    "ec-best-winner-is-n-1",
    "ec-reporter-is-highest",
)


class TraceError(ValueError):
    """The trace violates its own structural invariants."""


class RecordKind(str, Enum):
    SENT = "Sent"
    DELIVERED = "Delivered"
    DROPPED = "Dropped"
    LOST_TO_CRASH = "LostToCrash"
    TIMER_FIRED = "TimerFired"
    STATE_CHANGE = "StateChange"
    ELECTION_STARTED = "ElectionStarted"
    ELECTION_ENDED = "ElectionEnded"
    COORDINATOR_ADOPTED = "CoordinatorAdopted"
    VIOLATION_FLAG = "ViolationFlag"
    ANNOTATION = "Annotation"


MESSAGE_RECORDS = frozenset(
    {RecordKind.DELIVERED, RecordKind.DROPPED, RecordKind.LOST_TO_CRASH}
)


@dataclass(frozen=True)
class TraceRecord:
    time: float
    kind: RecordKind
    sender: Endpoint | None = None
    to: Endpoint | None = None
    message_kind: MessageKind | None = None
    payload: dict[str, Any] = field(default_factory=dict)

    def to_line(self) -> str:
        """Tab-separated: time, kind, from, to, message-kind, payload."""
        fields = [
            f"{self.time:.6f}",
            self.kind.value,
            "-" if self.sender is None else str(self.sender),
            "-" if self.to is None else str(self.to),
            "-" if self.message_kind is None else self.message_kind.value,
            ";".join(f"{key}={self.payload[key]}" for key in sorted(self.payload)) or "-",
        ]
        return "\t".join(fields)


class Trace:
    """Append-only, time-ordered event log of one simulation run."""

    def __init__(self) -> None:
        self.records: list[TraceRecord] = []

    def append(self, record: TraceRecord) -> None:
        if self.records and record.time < self.records[-1].time:
            raise TraceError(
                f"trace time went backwards: {record.time} after {self.records[-1].time}"
            )
        self.records.append(record)

    def __iter__(self):
        return iter(self.records)

    def __len__(self) -> int:
        return len(self.records)

    def of_kind(self, kind: RecordKind) -> list[TraceRecord]:
        return [record for record in self.records if record.kind is kind]

    def sent(self, message_kind: MessageKind | None = None) -> list[TraceRecord]:
        return [
            record
            for record in self.records
            if record.kind is RecordKind.SENT
            and (message_kind is None or record.message_kind is message_kind)
        ]

    def to_text(self) -> str:
        return "".join(record.to_line() + "\n" for record in self.records)

    def write(self, path: Path) -> None:
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(self.to_text(), encoding="utf-8")


# ---------------------------------------------------------------------------
# Analysis
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class CoordinatorInterval:
    start: float
    end: float
    coordinators: frozenset[ProcessId]


@dataclass
class MetricsReport:
    messages_sent_by_kind: dict[MessageKind, int]
    total_messages: int
    elections_started: int
    redundant_elections: int
    multi_coordinator_intervals: list[CoordinatorInterval]
    final_view_correct: bool
    delivered: int = 0
    dropped: int = 0
    lost_to_crash: int = 0
    charged_replies: int = 0
    violations: int = 0
    final_coordinators: tuple[ProcessId, ...] = ()
    liveness_failure: bool = False
    stalled: tuple[ProcessId, ...] = ()

    def metric(self, name: str) -> int:
        """Look up a metric by the name used in scenario assertions."""
        if name.startswith("messages."):
            kind = MessageKind.parse(name.split(".", 1)[1])
            return self.messages_sent_by_kind.get(kind, 0)
        if name == "multi_coordinator_intervals":
            return len(self.multi_coordinator_intervals)
        if name == "final_coordinator":
            return self.final_coordinators[0] if len(self.final_coordinators) == 1 else -1
        if name in (
            "total_messages",
            "elections_started",
            "redundant_elections",
            "delivered",
            "dropped",
            "lost_to_crash",
            "charged_replies",
            "violations",
        ):
            return getattr(self, name)
        if name in ("final_view_correct", "liveness_failure"):
            return int(getattr(self, name))
        raise KeyError(f"unknown metric: {name}")

    def to_text(self) -> str:
        lines = [
            f"total_messages: {self.total_messages}",
            *(
                f"messages.{kind.value}: {self.messages_sent_by_kind.get(kind, 0)}"
                for kind in MessageKind
            ),
            f"charged_replies: {self.charged_replies}",
            f"delivered: {self.delivered}",
            f"dropped: {self.dropped}",
            f"lost_to_crash: {self.lost_to_crash}",
            f"elections_started: {self.elections_started}",
            f"redundant_elections: {self.redundant_elections}",
            f"multi_coordinator_intervals: {len(self.multi_coordinator_intervals)}",
            *(
                f"  interval: {iv.start:.6f}..{iv.end:.6f} "
                f"{{{', '.join(str(c) for c in sorted(iv.coordinators))}}}"
                for iv in self.multi_coordinator_intervals
            ),
            f"violations: {self.violations}",
            f"final_coordinators: {', '.join(map(str, self.final_coordinators)) or '-'}",
            f"final_view_correct: {self.final_view_correct}",
            f"liveness_failure: {self.liveness_failure}",
        ]
        if self.stalled:
            lines.append(f"stalled: {', '.join(map(str, self.stalled))}")
        return "\n".join(lines) + "\n"


@dataclass
class _OpenElection:
    incumbent: ProcessId | None
    redundant: bool


class _ClaimTracker:
    """Tracks who currently claims coordinatorship and records overlaps."""

    def __init__(self, statuses: dict[ProcessId, Status]) -> None:
        self.statuses = statuses
        self.beliefs: dict[ProcessId, tuple[ProcessId | None, Endpoint | None]] = {}
        self.latest_named: dict[Endpoint, ProcessId] = {}
        # Coordinator messages sent but not yet delivered, dropped or lost: id -> (from, to)
        self.in_flight: dict[int, tuple[Endpoint, Endpoint]] = {}
        self.intervals: list[CoordinatorInterval] = []
        self._open_start: float | None = None
        self._open_set: set[ProcessId] = set()

    def _superseded(self, pid: ProcessId, source: Endpoint) -> bool:
        """The announcer has since named someone else and pid has yet to hear it.

        A process that announced another coordinator itself has withdrawn its
        claim. A claim learned from someone else stays live once the newer
        announcement reached pid (or failed to) without changing its belief.
        """
        if self.latest_named.get(source, pid) == pid:
            return False
        if source == pid:
            return True
        return (source, pid) in self.in_flight.values()

    def claims(self) -> set[ProcessId]:
        claimants = set()
        for pid, (coordinator, source) in self.beliefs.items():
            if coordinator != pid or self.statuses.get(pid) is not Status.UP:
                continue
            if source is not None and self._superseded(pid, source):
                continue
            claimants.add(pid)
        return claimants

    def update(self, time: float) -> None:
        current = self.claims()
        if len(current) >= 2:
            if self._open_start is None:
                self._open_start = time
                self._open_set = set()
            self._open_set |= current
        elif self._open_start is not None:
            self.close(time)

    def close(self, time: float) -> None:
        if self._open_start is None:
            return
        self.intervals.append(
            CoordinatorInterval(self._open_start, time, frozenset(self._open_set))
        )
        self._open_start = None
        self._open_set = set()


def analyze(trace: Trace, final_view: SystemView) -> MetricsReport:
    """Derive a MetricsReport from a finished run."""
    counts = {kind: 0 for kind in MessageKind}
    sent_ids: set[int] = set()
    statuses = {pid: Status.UP for pid in final_view.ids}
    tracker = _ClaimTracker(statuses)
    delivered = dropped = lost = charged = violations = 0
    elections_started = 0
    redundant = 0
    incumbent: ProcessId | None = None
    open_elections: list[_OpenElection] = []
    last_time = 0.0

    for record in trace:
        # claims are compared once per instant, after everything at that time applied
        if record.time != last_time:
            tracker.update(last_time)
        last_time = record.time
        kind = record.kind
        if kind is RecordKind.SENT:
            sent_ids.add(record.payload["id"])
            counts[record.message_kind] += 1
            if record.message_kind is MessageKind.COORDINATOR:
                tracker.latest_named[record.sender] = record.payload["coordinator"]
                tracker.in_flight[record.payload["id"]] = (record.sender, record.to)
        elif kind in MESSAGE_RECORDS:
            if record.payload.get("id") not in sent_ids:
                raise TraceError(
                    f"{kind.value} at {record.time:.6f} has no matching Sent "
                    f"(id={record.payload.get('id')})"
                )
            if kind is RecordKind.DELIVERED:
                delivered += 1
            elif kind is RecordKind.DROPPED:
                dropped += 1
            else:
                lost += 1
            tracker.in_flight.pop(record.payload["id"], None)
        elif kind is RecordKind.TIMER_FIRED:
            charge = record.payload.get("charge")
            if charge:
                counts[MessageKind.parse(charge)] += 1
                charged += 1
        elif kind is RecordKind.STATE_CHANGE:
            if "status" in record.payload:
                pid = record.sender
                statuses[pid] = Status(record.payload["status"])
                if record.payload.get("recovered") or record.payload.get("resync"):
                    tracker.beliefs[pid] = (None, None)
        elif kind is RecordKind.ELECTION_STARTED:
            elections_started += 1
            verified = bool(record.payload.get("verified"))
            incumbent_up = (
                incumbent is not None and statuses.get(incumbent) is not Status.CRASHED
            )
            is_redundant = not verified and incumbent_up
            redundant += int(is_redundant)
            open_elections.append(_OpenElection(incumbent, is_redundant))
        elif kind is RecordKind.ELECTION_ENDED:
            winner = record.payload["winner"]
            for election in open_elections:
                if not election.redundant and election.incumbent == winner:
                    redundant += 1
            open_elections.clear()
            incumbent = winner
            tracker.latest_named[record.sender] = winner
        elif kind is RecordKind.COORDINATOR_ADOPTED:
            tracker.beliefs[record.to] = (record.payload["coordinator"], record.sender)
        elif kind is RecordKind.VIOLATION_FLAG:
            violations += 1
        elif kind is RecordKind.ANNOTATION and record.payload.get("verdict") == "system-dead":
            incumbent = None
            open_elections.clear()

    tracker.update(last_time)
    tracker.close(last_time)

    up = final_view.up_ids()
    final_coordinators = tuple(
        sorted({final_view.processes[pid].believed_coordinator for pid in up} - {None})
    )
    stalled = tuple(
        pid
        for pid in up
        if (believed := final_view.processes[pid].believed_coordinator) is None
        or believed not in final_view.processes
        or not final_view.processes[believed].is_up
    )

    return MetricsReport(
        messages_sent_by_kind=counts,
        total_messages=sum(counts.values()),
        elections_started=elections_started,
        redundant_elections=redundant,
        multi_coordinator_intervals=tracker.intervals,
        final_view_correct=correctness_predicate(final_view),
        delivered=delivered,
        dropped=dropped,
        lost_to_crash=lost,
        charged_replies=charged,
        violations=violations,
        final_coordinators=final_coordinators,
        liveness_failure=bool(stalled),
        stalled=stalled,
    )


# ---------------------------------------------------------------------------
# Closed-form oracles
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class Interval:
    low: int
    high: int

    def __contains__(self, value: int) -> bool:
        return self.low <= value <= self.high


def bully_derived_messages(n: int, p: int) -> int:
    """Original Bully, coordinator n crashed, p detects, no losses.

    Every process from p to n-1 holds an election: sum of (n-k) Elections,
    Answers from every live higher process, then one broadcast of n.
    """
    m = n - p
    return m * m + n


def expected_messages(algorithm: str, n: int, p: int | None, kind: str) -> int | Interval:
    """Closed-form message count for *algorithm* under scenario *kind*."""
    if algorithm not in ALGORITHMS:
        raise ValueError(f"unknown algorithm: {algorithm}")
    if kind not in SCENARIO_KINDS:
        raise ValueError(f"unknown scenario kind: {kind}")
    if n < 2:
        raise ValueError(f"n must be at least 2, got {n}")
    if p is not None and not 1 <= p <= n:
        raise ValueError(f"p must be in 1..{n}, got {p}")

    def need_p() -> int:
        if p is None:
            raise ValueError(f"scenario kind {kind} needs a detector/recovering id p")
        return p

    if algorithm == "bully":
        if kind in ("worst-detect", "best-detect"):
            return Interval(bully_derived_messages(n, n - 1), bully_derived_messages(n, 1))
        raise ValueError(f"no closed form for bully under {kind}")

    if algorithm in ("kordafshari", "mamun"):
        if kind == "worst-detect":
            return 3 * n - 1
        if kind == "best-detect":
            return (n - need_p()) + n
        if kind == "recovery-query" and algorithm == "mamun":
            return 2 * (n - need_p())
        raise ValueError(f"no closed form for {algorithm} under {kind}")

    # ec
    if kind == "recovery-query":
        return 2
    if kind == "ec-reporter-is-highest":
        return 1 + 2 + n
    if kind == "ec-best-winner-is-n-1":
        return 1 + 2 + 2 + n
    if kind == "best-detect":
        # every id above p is down, so HP probes n-1 .. p+1 before p wins
        return 1 + 2 + 2 * max(n - 1 - need_p(), 0) + n
    # worst-detect: the detector's rank does not matter, only whether n-1 is it
    if need_p() >= n - 1:
        return 1 + 2 + n
    return 1 + 2 + 2 + n


# ---------------------------------------------------------------------------
# Cross-run helpers
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class QuadraticFit:
    coefficients: tuple[float, float, float]
    r_squared: float

    @property
    def leading(self) -> float:
        return self.coefficients[0]


def fit_quadratic(ns: Sequence[int], counts: Sequence[int]) -> QuadraticFit:
    x = np.asarray(ns, dtype=float)
    y = np.asarray(counts, dtype=float)
    if len(x) < 3:
        raise ValueError("a quadratic fit needs at least three points")
    coefficients = np.polyfit(x, y, 2)
    predicted = np.polyval(coefficients, x)
    residual = float(np.sum((y - predicted) ** 2))
    total = float(np.sum((y - y.mean()) ** 2))
    r_squared = 1.0 if total == 0 else 1.0 - residual / total
    a, b, c = (float(v) for v in coefficients)
    return QuadraticFit((a, b, c), r_squared)


@dataclass(frozen=True)
class Summary:
    mean: float
    min: float
    max: float


AGGREGATED_METRICS = (
    "total_messages",
    "elections_started",
    "redundant_elections",
    "multi_coordinator_intervals",
    "violations",
    "final_view_correct",
)


def aggregate(reports: Iterable[MetricsReport]) -> dict[str, Summary]:
    """Per-metric mean/min/max across seeds."""
    reports = list(reports)
    if not reports:
        return {}
    summary = {}
    for name in AGGREGATED_METRICS:
        values = np.array([report.metric(name) for report in reports], dtype=float)
        summary[name] = Summary(float(values.mean()), float(values.min()), float(values.max()))
    return summary


def ordering_counterexamples(totals: dict[int, dict[str, int]]) -> list[str]:
    """Check ec < mamun <= kordafshari < bully for each n; return the failures."""
    problems = []
    for n in sorted(totals):
        row = totals[n]
        checks = (
            ("ec", "<", "mamun", row["ec"] < row["mamun"]),
            ("mamun", "<=", "kordafshari", row["mamun"] <= row["kordafshari"]),
            ("kordafshari", "<", "bully", row["kordafshari"] < row["bully"]),
        )
        for left, op, right, ok in checks:
            if not ok:
                problems.append(
                    f"n={n}: expected {left} {op} {right}, got {row[left]} vs {row[right]}"
                )
    return problems
