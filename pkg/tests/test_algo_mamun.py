"""Tests for the initiator-arbitrated Bully variant."""

import pytest

from algo_mamun import (
    MamunAlgorithm,
    MamunPhase,
    MamunState,
    mamun_handle_message,
    mamun_handle_timeout,
    mamun_on_failure_detect,
    mamun_on_recovery,
)
from core import Message, MessageKind, SystemView
from metrics import RecordKind, expected_messages
from simnet import Network, SimConfig


def _network(ids):
    view = SystemView.build(ids)
    net = Network(view, MamunAlgorithm(), SimConfig())
    for node in view.processes.values():
        node.algo_state = MamunState()
    return net


class TestHandlers:
    def test_initiator_names_highest_responder(self):
        net = _network(range(1, 7))
        mamun_on_failure_detect(net, 2)
        for responder in (4, 3):
            mamun_handle_message(net, 2, Message(MessageKind.ANSWER, responder, 2, 1.0))
        mamun_handle_timeout(net, 2, "window")
        coordinators = net.trace.sent(MessageKind.COORDINATOR)
        assert len(coordinators) == 6
        assert {r.sender for r in coordinators} == {2}
        assert {r.payload["coordinator"] for r in coordinators} == {4}
        ended = net.trace.of_kind(RecordKind.ELECTION_ENDED)
        assert ended[-1].payload["winner"] == 4

    def test_silent_window_self_coordinates(self):
        net = _network(range(1, 4))
        mamun_on_failure_detect(net, 1)
        mamun_handle_timeout(net, 1, "window")
        assert net.view.node(1).believed_coordinator == 1

    def test_responder_only_answers(self):
        net = _network(range(1, 7))
        mamun_handle_message(net, 5, Message(MessageKind.ELECTION, 2, 5, 0.0))
        assert [(r.message_kind, r.to) for r in net.trace.sent()] == [(MessageKind.ANSWER, 2)]
        assert net.view.node(5).algo_state.phase is MamunPhase.AWAITING_NOTHING
        assert not net.view.node(5).pending_timers

    def test_query_answer_carries_belief(self):
        net = _network(range(1, 7))
        mamun_handle_message(net, 5, Message(MessageKind.QUERY, 2, 5, 0.0))
        answer = net.trace.sent(MessageKind.QUERY_ANSWER)[0]
        assert answer.to == 2 and answer.payload["coordinator"] == 6

    def test_first_query_answer_wins(self):
        net = _network(range(1, 7))
        net.view.node(3).believed_coordinator = None
        mamun_on_recovery(net, 3)
        assert len(net.trace.sent(MessageKind.QUERY)) == 3
        mamun_handle_message(net, 3, Message(MessageKind.QUERY_ANSWER, 5, 3, 2.0, coordinator=6))
        mamun_handle_message(net, 3, Message(MessageKind.QUERY_ANSWER, 4, 3, 3.0, coordinator=4))
        assert net.view.node(3).believed_coordinator == 6
        assert not net.has_timer(3, "query")

    def test_election_from_higher_is_flagged(self):
        net = _network(range(1, 4))
        mamun_handle_message(net, 1, Message(MessageKind.ELECTION, 3, 1, 0.0))
        assert len(net.trace.of_kind(RecordKind.VIOLATION_FLAG)) == 1


class TestElections:
    @pytest.mark.parametrize("n", [4, 6, 10, 16])
    def test_single_crash_minimum_detector(self, simulate, n):
        outcome = simulate("mamun", n, [(0, f"crash {n}"), (1, "detect 1")])
        assert outcome.report.total_messages == 3 * n - 3
        assert set(outcome.beliefs().values()) == {n - 1}

    @pytest.mark.parametrize("n", [4, 6, 10])
    def test_false_alarm_minimum_detector(self, simulate, n):
        outcome = simulate("mamun", n, [(1, "detect 1")])
        assert outcome.report.total_messages == 3 * n - 2
        assert outcome.report.redundant_elections == 1

    @pytest.mark.parametrize("n,p", [(6, 2), (8, 7), (10, 1)])
    def test_best_case(self, simulate, n, p):
        crashes = [(0, f"crash {pid}") for pid in range(n, p, -1)]
        outcome = simulate("mamun", n, [*crashes, (1, f"detect {p}")])
        assert outcome.report.total_messages == expected_messages("mamun", n, p, "best-detect")

    @pytest.mark.parametrize("n", [4, 6, 10])
    def test_recovery_costs_two_per_higher_id(self, simulate, n):
        p = 2
        outcome = simulate("mamun", n, [(0, f"crash {p}"), (1, f"recover {p}")])
        assert outcome.report.total_messages == expected_messages("mamun", n, p, "recovery-query")
        assert outcome.report.total_messages == 2 * (n - p)
        assert outcome.report.elections_started == 0
        assert set(outcome.beliefs().values()) == {n}

    def test_recovered_max_id_announces_without_query(self, simulate):
        outcome = simulate("mamun", 5, [(0, "crash 5"), (1, "recover 5")])
        assert not outcome.trace.sent(MessageKind.QUERY)
        assert outcome.report.total_messages == 5
        assert set(outcome.beliefs().values()) == {5}

    def test_unanswered_query_self_coordinates(self, simulate):
        outcome = simulate(
            "mamun", 3, [(0, "crash 3"), (0, "crash 2"), (0, "crash 1"), (5, "recover 1")]
        )
        assert outcome.beliefs() == {1: 1}
        assert outcome.report.messages_sent_by_kind[MessageKind.QUERY] == 2
        assert outcome.report.messages_sent_by_kind[MessageKind.COORDINATOR] == 3

    def test_initiator_crash_stalls(self, simulate):
        outcome = simulate(
            "mamun", 5, [(0, "crash 5"), (0, "crash_after_send 1 Election"), (1, "detect 1")]
        )
        assert outcome.report.liveness_failure
        assert outcome.report.stalled == (2, 3, 4)
        assert not outcome.trace.sent(MessageKind.COORDINATOR)

    def test_concurrent_initiators_cost_more(self, simulate):
        single = simulate("mamun", 6, [(0, "crash 6"), (1, "detect 1")])
        double = simulate("mamun", 6, [(0, "crash 6"), (1, "detect 1"), (1, "detect 2")])
        by_kind = double.report.messages_sent_by_kind
        single_kind = single.report.messages_sent_by_kind
        assert by_kind[MessageKind.ELECTION] > single_kind[MessageKind.ELECTION]
        assert by_kind[MessageKind.ANSWER] > single_kind[MessageKind.ANSWER]
        assert set(double.beliefs().values()) == {5}

    def test_responder_crash_after_answer_elects_a_dead_process(self, simulate):
        outcome = simulate(
            "mamun", 6, [(0, "crash 6"), (0, "crash_after_send 5 Answer"), (1, "detect 1")]
        )
        assert set(outcome.beliefs().values()) == {5}
        assert not outcome.report.final_view_correct
        assert outcome.report.liveness_failure
