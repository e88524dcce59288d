"""Modified Bully where the initiator arbitrates and announces.

The detector sends Election upward, collects ok answers for one window and
broadcasts Coordinator naming the highest responder itself. Responders do
nothing beyond answering, so an initiator that crashes mid-election leaves the
system stalled. A recovering process asks the higher ids who the coordinator
is instead of holding an election.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from enum import Enum

from core import Message, MessageKind, ProcessId
from simnet import Algorithm, Network

WINDOW_TIMER = "window"
QUERY_TIMER = "query"


class MamunPhase(str, Enum):
    IDLE = "Idle"
    COLLECTING = "Collecting"
    QUERYING = "Querying"
    AWAITING_NOTHING = "AwaitingNothing"


@dataclass
class MamunState:
    phase: MamunPhase = MamunPhase.IDLE
    ok_responders: set[ProcessId] = field(default_factory=set)


def _state(net: Network, pid: ProcessId) -> MamunState:
    return net.view.node(pid).algo_state


def _announce(net: Network, pid: ProcessId, winner: ProcessId) -> None:
    state = _state(net, pid)
    net.cancel_all_timers(pid)
    state.phase = MamunPhase.IDLE
    state.ok_responders.clear()
    net.broadcast(pid, MessageKind.COORDINATOR, winner)
    if winner == pid:
        net.adopt(pid, pid, pid)
    net.election_ended(pid, winner)


def mamun_on_failure_detect(net: Network, pid: ProcessId) -> None:
    state = _state(net, pid)
    if state.phase is MamunPhase.COLLECTING:
        return
    net.election_started(pid)
    higher = net.view.higher_ids(pid)
    if not higher:
        _announce(net, pid, pid)
        return
    net.cancel_all_timers(pid)
    state.ok_responders.clear()
    for other in higher:
        net.send(pid, other, MessageKind.ELECTION)
    state.phase = MamunPhase.COLLECTING
    net.set_timer(pid, WINDOW_TIMER, net.config.fd_timeout)


def mamun_on_recovery(net: Network, pid: ProcessId) -> None:
    state = _state(net, pid)
    higher = net.view.higher_ids(pid)
    if not higher:
        net.election_started(pid)
        _announce(net, pid, pid)
        return
    for other in higher:
        net.send(pid, other, MessageKind.QUERY)
    state.phase = MamunPhase.QUERYING
    net.set_timer(pid, QUERY_TIMER, net.config.fd_timeout)


def mamun_handle_message(net: Network, pid: ProcessId, msg: Message) -> None:
    state = _state(net, pid)
    kind = msg.kind
    if kind is MessageKind.ELECTION:
        if msg.sender > pid:
            net.flag_violation(pid, f"election from higher id {msg.sender}")
            return
        net.send(pid, msg.sender, MessageKind.ANSWER)
        if state.phase is MamunPhase.IDLE:
            state.phase = MamunPhase.AWAITING_NOTHING
    elif kind is MessageKind.ANSWER:
        if state.phase is MamunPhase.COLLECTING:
            state.ok_responders.add(msg.sender)
    elif kind is MessageKind.COORDINATOR:
        net.adopt(pid, msg.coordinator, msg.sender)
        if state.phase is not MamunPhase.COLLECTING:
            net.cancel_all_timers(pid)
            state.phase = MamunPhase.IDLE
    elif kind is MessageKind.QUERY:
        believed = net.view.node(pid).believed_coordinator
        if believed is not None:
            net.send(pid, msg.sender, MessageKind.QUERY_ANSWER, believed)
    elif kind is MessageKind.QUERY_ANSWER:
        if state.phase is MamunPhase.QUERYING:
            net.cancel_timer(pid, QUERY_TIMER)
            state.phase = MamunPhase.IDLE
            net.adopt(pid, msg.coordinator, msg.sender)
    else:
        net.flag_violation(pid, f"unexpected {kind.value} from {msg.sender}")


def mamun_handle_timeout(net: Network, pid: ProcessId, timer_id: str) -> None:
    state = _state(net, pid)
    if timer_id == WINDOW_TIMER and state.phase is MamunPhase.COLLECTING:
        winner = max(state.ok_responders) if state.ok_responders else pid
        _announce(net, pid, winner)
    elif timer_id == QUERY_TIMER and state.phase is MamunPhase.QUERYING:
        net.election_started(pid)
        _announce(net, pid, pid)


class MamunAlgorithm(Algorithm):
    name = "mamun"

    def init_state(self, pid: ProcessId) -> MamunState:
        return MamunState()

    def on_failure_detect(self, net: Network, pid: ProcessId) -> None:
        mamun_on_failure_detect(net, pid)

    def on_recovery(self, net: Network, pid: ProcessId) -> None:
        mamun_on_recovery(net, pid)

    def handle_message(self, net: Network, pid: ProcessId, msg: Message) -> None:
        mamun_handle_message(net, pid, msg)

    def handle_timeout(self, net: Network, pid: ProcessId, timer_id: str) -> None:
        mamun_handle_timeout(net, pid, timer_id)
