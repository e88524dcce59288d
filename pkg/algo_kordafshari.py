"""Modified Bully with answer collection and a Grant handoff.

The detector sends Election upward and collects the ids of everyone who
answers. When the window closes it sends Grant to the highest responder,
which alone broadcasts Coordinator. Responders do not start elections of
their own. If no Coordinator shows up within 3*d, each of them re-runs the
algorithm, which is the redundant-election pathology this protocol is known
for.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from enum import Enum

from core import Message, MessageKind, ProcessId
from simnet import Algorithm, Network

WINDOW_TIMER = "window"
GRANT_TIMER = "grant"
BROADCAST_WAIT_TIMER = "broadcast-wait"
SUPPRESS_TIMER = "suppress"
ELECTION_TIMERS = (WINDOW_TIMER, GRANT_TIMER, BROADCAST_WAIT_TIMER)


class KordPhase(str, Enum):
    IDLE = "Idle"
    COLLECTING = "Collecting"
    AWAITING_COORDINATOR_BROADCAST = "AwaitingCoordinatorBroadcast"


@dataclass
class KordState:
    phase: KordPhase = KordPhase.IDLE
    responders: set[ProcessId] = field(default_factory=set)
    grant_target: ProcessId | None = None
    answered_to: set[ProcessId] = field(default_factory=set)
    # lower initiators heard while this process was running its own election
    lower_initiators: set[ProcessId] = field(default_factory=set)


def _state(net: Network, pid: ProcessId) -> KordState:
    return net.view.node(pid).algo_state


def _cancel_election_timers(net: Network, pid: ProcessId) -> None:
    for timer_id in ELECTION_TIMERS:
        net.cancel_timer(pid, timer_id)


def _self_coordinate(net: Network, pid: ProcessId) -> None:
    state = _state(net, pid)
    _cancel_election_timers(net, pid)
    state.phase = KordPhase.IDLE
    state.responders.clear()
    state.grant_target = None
    net.broadcast(pid, MessageKind.COORDINATOR, pid)
    net.adopt(pid, pid, pid)
    net.election_ended(pid, pid)


def kord_on_failure_detect(net: Network, pid: ProcessId) -> None:
    state = _state(net, pid)
    if state.phase is KordPhase.COLLECTING:
        return
    net.election_started(pid)
    state.responders.clear()
    state.grant_target = None
    higher = net.view.higher_ids(pid)
    if not higher:
        _self_coordinate(net, pid)
        return
    _cancel_election_timers(net, pid)
    for other in higher:
        net.send(pid, other, MessageKind.ELECTION)
    state.phase = KordPhase.COLLECTING
    net.set_timer(pid, WINDOW_TIMER, net.config.fd_timeout)


def kord_on_recovery(net: Network, pid: ProcessId) -> None:
    kord_on_failure_detect(net, pid)


def _on_election(net: Network, pid: ProcessId, initiator: ProcessId) -> None:
    state = _state(net, pid)
    net.send(pid, initiator, MessageKind.ANSWER)
    state.answered_to.add(initiator)
    if state.phase is KordPhase.COLLECTING:
        # concurrent initiation: defer to the lowest initiator after a short wait
        state.lower_initiators.add(initiator)
        net.cancel_timer(pid, WINDOW_TIMER)
        state.responders.clear()
        if not net.has_timer(pid, SUPPRESS_TIMER):
            net.set_timer(pid, SUPPRESS_TIMER, net.config.d)
    elif state.lower_initiators and net.has_timer(pid, SUPPRESS_TIMER):
        state.lower_initiators.add(initiator)
    state.phase = KordPhase.AWAITING_COORDINATOR_BROADCAST
    net.set_timer(pid, BROADCAST_WAIT_TIMER, 3 * net.config.d)


def kord_handle_message(net: Network, pid: ProcessId, msg: Message) -> None:
    state = _state(net, pid)
    kind = msg.kind
    if kind is MessageKind.ELECTION:
        if msg.sender > pid:
            net.flag_violation(pid, f"election from higher id {msg.sender}")
            return
        _on_election(net, pid, msg.sender)
    elif kind is MessageKind.ANSWER:
        if state.phase is KordPhase.COLLECTING:
            state.responders.add(msg.sender)
    elif kind is MessageKind.GRANT:
        if msg.sender not in state.answered_to:
            net.flag_violation(pid, f"grant from {msg.sender} without a prior answer")
            return
        node = net.view.node(pid)
        if node.believed_coordinator == pid and state.phase is KordPhase.IDLE:
            return  # already announced for an earlier grant
        _self_coordinate(net, pid)
    elif kind is MessageKind.COORDINATOR:
        net.adopt(pid, msg.coordinator, msg.sender)
        if msg.coordinator == pid:
            return
        _cancel_election_timers(net, pid)
        state.phase = KordPhase.IDLE
        state.responders.clear()
        state.grant_target = None
        state.answered_to.clear()
    elif kind is MessageKind.STOP:
        if state.phase is KordPhase.COLLECTING:
            return
        # drops a pending Grant retry as well; only the Answer duty remains
        _cancel_election_timers(net, pid)
        state.phase = KordPhase.IDLE
        state.responders.clear()
        state.grant_target = None
    else:
        net.flag_violation(pid, f"unexpected {kind.value} from {msg.sender}")


def kord_timeouts(net: Network, pid: ProcessId, timer_id: str) -> None:
    state = _state(net, pid)
    if timer_id == WINDOW_TIMER:
        if state.phase is not KordPhase.COLLECTING:
            return
        if not state.responders:
            _self_coordinate(net, pid)
            return
        state.grant_target = max(state.responders)
        net.send(pid, state.grant_target, MessageKind.GRANT)
        state.phase = KordPhase.AWAITING_COORDINATOR_BROADCAST
        net.set_timer(pid, GRANT_TIMER, net.config.d)
    elif timer_id in (GRANT_TIMER, BROADCAST_WAIT_TIMER):
        state.phase = KordPhase.IDLE
        kord_on_failure_detect(net, pid)
    elif timer_id == SUPPRESS_TIMER:
        if not state.lower_initiators:
            return
        lowest = min(state.lower_initiators)
        state.lower_initiators.clear()
        net.send(pid, lowest, MessageKind.STOP)
        net.annotate(pid, stop_to=lowest, **{"stop-fanout": "once-per-suppression"})


class KordafshariAlgorithm(Algorithm):
    name = "kordafshari"

    def init_state(self, pid: ProcessId) -> KordState:
        return KordState()

    def on_failure_detect(self, net: Network, pid: ProcessId) -> None:
        kord_on_failure_detect(net, pid)

    def on_recovery(self, net: Network, pid: ProcessId) -> None:
        kord_on_recovery(net, pid)

    def handle_message(self, net: Network, pid: ProcessId, msg: Message) -> None:
        kord_handle_message(net, pid, msg)

    def handle_timeout(self, net: Network, pid: ProcessId, timer_id: str) -> None:
        kord_timeouts(net, pid, timer_id)
