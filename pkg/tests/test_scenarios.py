"""Tests for scenario files, canonical schedules and run orchestration."""

from pathlib import Path

import numpy as np
import pytest

from metrics import ALGORITHMS, ordering_counterexamples
from scenarios import (
    HEADER,
    Assertion,
    ScenarioError,
    ScenarioFile,
    canonical_schedule,
    compare,
    parse_seeds,
    random_schedule,
    run_scenario,
    sweep,
)
from simnet import FaultKind, FaultSchedule, SimConfig

GOLDEN = sorted((Path(__file__).parent.parent / "golden_scenarios").glob("*.scn"))

MINIMAL = f"""{HEADER}
name: tiny
n: 4
algorithm: bully
fault: 0 crash 4
fault: 1 detect 1
"""


class TestParse:
    def test_minimal(self):
        scenario = ScenarioFile.parse(MINIMAL)
        assert (scenario.name, scenario.n, scenario.algorithm) == ("tiny", 4, "bully")
        assert scenario.seeds == (0,)
        assert scenario.sim == SimConfig()
        assert [f.kind for f in scenario.faults] == [FaultKind.CRASH, FaultKind.DETECT]

    def test_comments_and_overrides(self):
        text = MINIMAL + "t_msg: 5   # faster links\nseeds: 1..3,7\nexpect.bully: total_messages >= 3\n"
        scenario = ScenarioFile.parse(text)
        assert scenario.sim.t_msg == 5.0
        assert scenario.seeds == (1, 2, 3, 7)
        assert scenario.assertions == (Assertion("total_messages", ">=", 3.0, "bully"),)

    def test_unknown_key_names_the_line(self):
        with pytest.raises(ScenarioError, match="line 6: unknown key 'colour'"):
            ScenarioFile.parse(MINIMAL.replace("fault: 1 detect 1", "colour: red"))

    def test_missing_header(self):
        with pytest.raises(ScenarioError, match="line 1: expected header"):
            ScenarioFile.parse("name: tiny\nn: 4\nalgorithm: bully\n")

    def test_bad_fault_line(self):
        with pytest.raises(ScenarioError, match="line 6"):
            ScenarioFile.parse(MINIMAL.replace("detect 1", "detonate 1"))

    def test_schedule_is_validated(self):
        with pytest.raises(ScenarioError, match="without a prior crash"):
            ScenarioFile.parse(MINIMAL + "fault: 5 recover 2\n")

    @pytest.mark.parametrize(
        "line",
        ["expect: total_messages ~ 3", "expect: latency == 3", "expect: total_messages == many"],
    )
    def test_bad_assertion(self, line):
        with pytest.raises(ScenarioError):
            ScenarioFile.parse(MINIMAL + line + "\n")

    def test_unknown_algorithm(self):
        with pytest.raises(ScenarioError, match="unknown algorithm"):
            ScenarioFile.parse(MINIMAL.replace("algorithm: bully", "algorithm: paxos"))

    def test_all_expands_to_every_algorithm(self):
        scenario = ScenarioFile.parse(MINIMAL.replace("algorithm: bully", "algorithm: all"))
        assert scenario.algorithms == ALGORITHMS

    @pytest.mark.parametrize("text", ["", "3..1", "a,b"])
    def test_bad_seed_lists(self, text):
        with pytest.raises(ScenarioError):
            parse_seeds(text)


@pytest.mark.parametrize("path", GOLDEN, ids=lambda p: p.stem)
class TestGoldenScenarios:
    def test_serialize_parses_back(self, path):
        scenario = ScenarioFile.load(path)
        assert ScenarioFile.parse(scenario.serialize()) == scenario

    def test_assertions_hold(self, path):
        outcome = run_scenario(path)
        assert [str(f) for f in outcome.failures] == []
        assert outcome.exit_code == 0


class TestRunScenario:
    def test_failed_assertion_sets_exit_code(self):
        scenario = ScenarioFile.parse(MINIMAL + "expect: total_messages == 1\n")
        outcome = run_scenario(scenario)
        assert outcome.exit_code == 1
        [failure] = outcome.failures
        assert failure.observed == 13
        assert "observed 13" in str(failure)

    def test_seed_override(self):
        scenario = ScenarioFile.parse(MINIMAL.replace("algorithm: bully", "algorithm: all"))
        outcome = run_scenario(scenario, seed=9)
        assert [(r.algorithm, r.seed) for r in outcome.results] == [(a, 9) for a in ALGORITHMS]

    def test_trace_files_are_byte_identical_across_runs(self, tmp_path):
        ec_crash = Path(__file__).parent.parent / "golden_scenarios" / "ec_crash.scn"
        run_scenario(ec_crash, seed=3, trace_out=tmp_path / "a")
        run_scenario(ec_crash, seed=3, trace_out=tmp_path / "b")
        first = (tmp_path / "a" / "ec_crash.ec.3.trace").read_bytes()
        assert first == (tmp_path / "b" / "ec_crash.ec.3.trace").read_bytes()
        assert first.startswith(b"0.000000\tElectionEnded\tEC\t-\t-\tinitial=1;winner=6\n")

    def test_workers_do_not_change_results(self):
        scenario = ScenarioFile.parse(MINIMAL.replace("algorithm: bully", "algorithm: all"))
        serial = run_scenario(scenario)
        pooled = run_scenario(scenario, workers=2)
        assert [r.trace_text for r in serial.results] == [r.trace_text for r in pooled.results]


class TestSchedules:
    def test_worst_detect(self):
        assert canonical_schedule("worst-detect", 6) == FaultSchedule.of((0, "crash 6"), (1, "detect 1"))

    def test_best_detect_crashes_everything_above(self):
        schedule = canonical_schedule("best-detect", 6, 3)
        assert [f.to_text() for f in schedule] == ["crash 6", "crash 5", "crash 4", "detect 3"]

    def test_reporter_is_highest(self):
        schedule = canonical_schedule("ec-reporter-is-highest", 5)
        assert [f.to_text() for f in schedule] == ["crash 5", "detect 4"]

    def test_false_alarm_has_no_crash(self):
        assert [f.to_text() for f in canonical_schedule("false-alarm", 5, 2)] == ["detect 2"]

    @pytest.mark.parametrize(
        "args", [("worst-detect", 1), ("worst-detect", 5, 5), ("best-detect", 5, 7), ("sideways", 5)]
    )
    def test_rejects(self, args):
        with pytest.raises(ValueError):
            canonical_schedule(*args)

    def test_random_schedule_is_valid_and_seeded(self):
        first = random_schedule(np.random.default_rng(4), 6, 20)
        second = random_schedule(np.random.default_rng(4), 6, 20)
        assert first == second
        assert len(first) == 20
        first.validate(range(1, 7))

    def test_random_schedules_cover_every_process_fault(self):
        kinds = set()
        for seed in range(20):
            schedule = random_schedule(np.random.default_rng(seed), 5, 20)
            down: set[int] = set()
            for fault in schedule:
                kinds.add(fault.kind)
                pid = fault.targets[0]
                if fault.kind in (FaultKind.CRASH, FaultKind.SLOW):
                    down.add(pid)
                elif fault.kind in (FaultKind.RECOVER, FaultKind.NORMAL):
                    down.discard(pid)
                assert len(down) < 5
        assert kinds == {
            FaultKind.CRASH,
            FaultKind.RECOVER,
            FaultKind.SLOW,
            FaultKind.NORMAL,
            FaultKind.BREAK,
            FaultKind.HEAL,
            FaultKind.DETECT,
        }


class TestCompare:
    def test_two_processes(self):
        table = compare([2], "worst-detect")
        assert table.totals() == {2: {"bully": 3, "kordafshari": 3, "mamun": 3, "ec": 5}}

    def test_best_detect_matches_closed_forms(self):
        table = compare(range(4, 9), "best-detect", p=2, algorithms=("kordafshari", "mamun", "ec"))
        for row in table.rows:
            assert row.total_messages == row.expected, (row.n, row.algorithm)

    def test_kordafshari_crash_is_one_below_closed_form(self):
        table = compare(range(4, 9), "worst-detect", algorithms=("kordafshari",))
        assert table.column("kordafshari") == [3 * n - 2 for n in range(4, 9)]
        assert [row.expected for row in table.rows] == [3 * n - 1 for n in range(4, 9)]

    def test_ordering_breaks_only_at_four(self):
        table = compare(range(4, 9), "worst-detect")
        assert ordering_counterexamples(table.totals()) == [
            "n=4: expected ec < mamun, got 9.0 vs 9.0"
        ]

    def test_renderings(self):
        table = compare([4], "worst-detect", seeds=(0, 1))
        csv_lines = table.to_csv().splitlines()
        assert csv_lines[0] == "n,algorithm,total_messages,elections,redundant,violations,expected"
        assert csv_lines[1].startswith("4,bully,13,")
        plain = table.to_plain().splitlines()
        assert plain[0].split() == ["n", *ALGORITHMS]
        assert "[9]" in plain[1]


def test_sweep_returns_one_report_per_seed():
    reports = sweep("mamun", 5, range(5), length=6)
    again = sweep("mamun", 5, range(5), length=6)
    assert len(reports) == 5
    assert [r.total_messages for r in reports] == [r.total_messages for r in again]
