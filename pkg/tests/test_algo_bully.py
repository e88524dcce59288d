"""Tests for the original Bully election."""

import pytest

from algo_bully import BullyAlgorithm, BullyPhase, BullyState, bully_handle_message, bully_on_failure_detect
from core import Message, MessageKind, SystemView
from metrics import RecordKind, bully_derived_messages, fit_quadratic
from simnet import Network, SimConfig


def _network(ids):
    view = SystemView.build(ids)
    net = Network(view, BullyAlgorithm(), SimConfig())
    for node in view.processes.values():
        node.algo_state = BullyState()
    return net


class TestFailureDetect:
    def test_elections_go_to_higher_ids_only(self):
        net = _network(range(0, 7))
        bully_on_failure_detect(net, 4)
        assert sorted(r.to for r in net.trace.sent(MessageKind.ELECTION)) == [5, 6]
        assert net.view.node(4).algo_state.phase is BullyPhase.AWAITING_ANSWERS
        assert net.has_timer(4, "answer")

    def test_max_id_broadcasts_immediately(self):
        net = _network(range(0, 7))
        bully_on_failure_detect(net, 6)
        assert not net.trace.sent(MessageKind.ELECTION)
        assert len(net.trace.sent(MessageKind.COORDINATOR)) == 7
        assert net.view.node(6).believed_coordinator == 6

    def test_lowest_id_has_widest_fan_out(self):
        net = _network(range(0, 7))
        bully_on_failure_detect(net, 0)
        assert len(net.trace.sent(MessageKind.ELECTION)) == 6

    def test_no_second_election_while_running(self):
        net = _network(range(1, 5))
        bully_on_failure_detect(net, 1)
        bully_on_failure_detect(net, 1)
        assert len(net.trace.of_kind(RecordKind.ELECTION_STARTED)) == 1


class TestHandleMessage:
    def test_election_from_lower_is_answered_and_relayed(self):
        net = _network(range(0, 7))
        bully_handle_message(net, 5, Message(MessageKind.ELECTION, 4, 5, 0.0))
        sent = [(r.message_kind, r.to) for r in net.trace.sent()]
        assert sent == [(MessageKind.ANSWER, 4), (MessageKind.ELECTION, 6)]

    def test_duplicate_election_is_answered_without_new_run(self):
        net = _network(range(0, 7))
        bully_handle_message(net, 5, Message(MessageKind.ELECTION, 4, 5, 0.0))
        bully_handle_message(net, 5, Message(MessageKind.ELECTION, 4, 5, 0.0))
        assert len(net.trace.sent(MessageKind.ANSWER)) == 2
        assert len(net.trace.sent(MessageKind.ELECTION)) == 1

    def test_answer_moves_to_awaiting_coordinator(self):
        net = _network(range(0, 7))
        bully_on_failure_detect(net, 4)
        bully_handle_message(net, 4, Message(MessageKind.ANSWER, 5, 4, 1.0))
        state = net.view.node(4).algo_state
        assert state.phase is BullyPhase.AWAITING_COORDINATOR and state.answers_received
        assert not net.has_timer(4, "answer")
        assert net.has_timer(4, "coordinator")

    def test_coordinator_is_adopted(self):
        net = _network(range(1, 7))
        bully_handle_message(net, 1, Message(MessageKind.COORDINATOR, 6, 1, 0.0, coordinator=6))
        assert net.view.node(1).believed_coordinator == 6
        assert net.view.node(1).algo_state.phase is BullyPhase.IDLE

    def test_election_from_higher_is_flagged(self):
        net = _network(range(1, 7))
        bully_handle_message(net, 2, Message(MessageKind.ELECTION, 5, 2, 0.0))
        assert len(net.trace.of_kind(RecordKind.VIOLATION_FLAG)) == 1
        assert not net.trace.sent()


class TestElections:
    def test_single_crash_mid_detector(self, simulate):
        outcome = simulate("bully", 7, [(0, "crash 7"), (1, "detect 4")])
        assert set(outcome.beliefs().values()) == {6}
        assert len(outcome.trace.sent(MessageKind.ELECTION)) == 6
        assert outcome.report.total_messages == bully_derived_messages(7, 4)

    @pytest.mark.parametrize("n", [3, 5, 8, 12])
    @pytest.mark.parametrize("seed", [0, 1])
    def test_minimum_detector_matches_derived_count(self, simulate, n, seed):
        outcome = simulate("bully", n, [(0, f"crash {n}"), (1, "detect 1")], seed=seed)
        assert outcome.report.total_messages == (n - 1) ** 2 + n
        assert outcome.report.final_view_correct

    def test_quadratic_growth(self, simulate):
        ns = list(range(4, 33, 4))
        counts = [
            simulate("bully", n, [(0, f"crash {n}"), (1, "detect 1")]).report.total_messages
            for n in ns
        ]
        fit = fit_quadratic(ns, counts)
        assert fit.r_squared > 0.99
        assert fit.leading > 0

    def test_recovered_max_broadcasts(self, simulate):
        outcome = simulate("bully", 6, [(0, "crash 6"), (1, "detect 2"), (200, "recover 6")])
        assert set(outcome.beliefs().values()) == {6}
        assert outcome.report.final_view_correct

    def test_low_recovery_reelects_current_coordinator(self, simulate):
        outcome = simulate("bully", 6, [(0, "crash 1"), (1, "recover 1")])
        assert set(outcome.beliefs().values()) == {6}
        assert outcome.report.redundant_elections >= 1

    def test_recovered_with_all_higher_crashed_wins(self, simulate):
        outcome = simulate(
            "bully", 3, [(0, "crash 3"), (0, "crash 2"), (0, "crash 1"), (5, "recover 1")]
        )
        assert outcome.beliefs() == {1: 1}

    def test_lost_answer_gives_two_coordinators(self, simulate):
        outcome = simulate(
            "bully", 6, [(0, "crash 6"), (0, "drop Answer 5 4"), (1, "detect 4")]
        )
        intervals = outcome.report.multi_coordinator_intervals
        assert intervals
        assert intervals[0].coordinators == frozenset({4, 5})

    def test_random_loss_can_leave_a_wrong_view(self, simulate):
        schedule = [(0, "crash 6"), (1, "detect 1")]
        reports = [
            simulate("bully", 6, schedule, seed=seed, drop_probability=0.2).report
            for seed in range(40)
        ]
        assert any(report.dropped for report in reports)
        assert not all(report.final_view_correct for report in reports)

    def test_slow_coordinator_is_redundant(self, simulate):
        outcome = simulate("bully", 6, [(0, "slow 6"), (1, "detect 2")])
        assert outcome.report.redundant_elections >= 1
        assert set(outcome.beliefs().values()) == {5}
