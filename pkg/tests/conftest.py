"""Shared fixtures: run a protocol on ids 1..n and analyze the result."""

from dataclasses import dataclass

import pytest

from core import SystemView
from metrics import MetricsReport, Trace, analyze
from scenarios import make_algorithm
from simnet import FaultSchedule, SimConfig, run


@dataclass
class Outcome:
    trace: Trace
    view: SystemView
    report: MetricsReport

    def beliefs(self) -> dict[int, int | None]:
        return {pid: self.view.processes[pid].believed_coordinator for pid in self.view.up_ids()}


def simulate_run(algorithm, n, schedule=(), ids=None, **config) -> Outcome:
    if not isinstance(schedule, FaultSchedule):
        schedule = FaultSchedule.of(*schedule)
    view = SystemView.build(ids if ids is not None else range(1, n + 1))
    trace = run(view, make_algorithm(algorithm), schedule, SimConfig(**config))
    return Outcome(trace, view, analyze(trace, view))


@pytest.fixture
def simulate():
    return simulate_run
