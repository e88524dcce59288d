"""Original Bully election.

A process that suspects the coordinator sends Election to every higher id.
Any higher process that is alive answers and runs its own election, so the
highest live process ends up broadcasting Coordinator. Its known defects are
kept on purpose: every live process above the detector holds an election,
and a lost Answer lets two processes declare themselves coordinator.
"""

from __future__ import annotations

from dataclasses import dataclass
from enum import Enum

from core import Message, MessageKind, ProcessId
from simnet import Algorithm, Network

ANSWER_TIMER = "answer"
COORDINATOR_TIMER = "coordinator"


class BullyPhase(str, Enum):
    IDLE = "Idle"
    AWAITING_ANSWERS = "AwaitingAnswers"
    AWAITING_COORDINATOR = "AwaitingCoordinator"


@dataclass
class BullyState:
    phase: BullyPhase = BullyPhase.IDLE
    answers_received: bool = False


def _state(net: Network, pid: ProcessId) -> BullyState:
    return net.view.node(pid).algo_state


def _declare(net: Network, pid: ProcessId) -> None:
    state = _state(net, pid)
    net.cancel_all_timers(pid)
    state.phase = BullyPhase.IDLE
    state.answers_received = False
    net.broadcast(pid, MessageKind.COORDINATOR, pid)
    net.adopt(pid, pid, pid)
    net.election_ended(pid, pid)


def bully_on_failure_detect(net: Network, pid: ProcessId) -> None:
    state = _state(net, pid)
    if state.phase is not BullyPhase.IDLE:
        return
    net.election_started(pid)
    higher = net.view.higher_ids(pid)
    if not higher:
        _declare(net, pid)
        return
    for other in higher:
        net.send(pid, other, MessageKind.ELECTION)
    state.phase = BullyPhase.AWAITING_ANSWERS
    state.answers_received = False
    net.set_timer(pid, ANSWER_TIMER, net.config.fd_timeout)


def bully_on_recovery(net: Network, pid: ProcessId) -> None:
    bully_on_failure_detect(net, pid)


def bully_handle_message(net: Network, pid: ProcessId, msg: Message) -> None:
    state = _state(net, pid)
    if msg.kind is MessageKind.ELECTION:
        if msg.sender > pid:
            net.flag_violation(pid, f"election from higher id {msg.sender}")
            return
        net.send(pid, msg.sender, MessageKind.ANSWER)
        if state.phase is BullyPhase.IDLE:
            bully_on_failure_detect(net, pid)
    elif msg.kind is MessageKind.ANSWER:
        if state.phase is not BullyPhase.AWAITING_ANSWERS:
            return
        net.cancel_timer(pid, ANSWER_TIMER)
        state.phase = BullyPhase.AWAITING_COORDINATOR
        state.answers_received = True
        net.set_timer(pid, COORDINATOR_TIMER, 2 * net.config.fd_timeout)
    elif msg.kind is MessageKind.COORDINATOR:
        net.adopt(pid, msg.coordinator, msg.sender)
        if msg.coordinator == pid:
            return
        # a lower claimant does not stop an election that is still waiting on higher ids
        if state.phase is BullyPhase.AWAITING_ANSWERS and msg.coordinator < pid:
            return
        net.cancel_all_timers(pid)
        state.phase = BullyPhase.IDLE
        state.answers_received = False
    else:
        net.flag_violation(pid, f"unexpected {msg.kind.value} from {msg.sender}")


def bully_handle_timeout(net: Network, pid: ProcessId, timer_id: str) -> None:
    state = _state(net, pid)
    if timer_id == ANSWER_TIMER and state.phase is BullyPhase.AWAITING_ANSWERS:
        _declare(net, pid)
    elif timer_id == COORDINATOR_TIMER and state.phase is BullyPhase.AWAITING_COORDINATOR:
        state.phase = BullyPhase.IDLE
        bully_on_failure_detect(net, pid)


class BullyAlgorithm(Algorithm):
    name = "bully"

    def init_state(self, pid: ProcessId) -> BullyState:
        return BullyState()

    def on_failure_detect(self, net: Network, pid: ProcessId) -> None:
        bully_on_failure_detect(net, pid)

    def on_recovery(self, net: Network, pid: ProcessId) -> None:
        bully_on_recovery(net, pid)

    def handle_message(self, net: Network, pid: ProcessId, msg: Message) -> None:
        bully_handle_message(net, pid, msg)

    def handle_timeout(self, net: Network, pid: ProcessId, timer_id: str) -> None:
        bully_handle_timeout(net, pid, timer_id)
