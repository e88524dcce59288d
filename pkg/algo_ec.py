"""Bully election run by an Election Commission.

Processes never elect among themselves. A process that suspects the
coordinator reports to the commission (group id ``EC``), which verifies the
report with its failure detector (FD), finds the highest live process with
its helper (HP) and announces the result. A recovering process queries the
commission instead of starting an election, and so does a process coming back
from a slow spell, since it may have ignored an announcement.

The commission is one logical, always-available endpoint. It acts only on
incoming requests.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Iterable

from core import (
    COMMISSION_SIZE,
    EC_GROUP_ID,
    Message,
    MessageKind,
    ProcessId,
    SystemView,
)
from simnet import Algorithm, Network, SimConfig

VERIFY_TIMER = "verify"
ALIVE_TIMER_PREFIX = "alive:"


@dataclass(frozen=True)
class FDProbe:
    target: ProcessId
    sent_at: float
    deadline: float
    kind: MessageKind = MessageKind.VERIFY

    @property
    def timer_id(self) -> str:
        if self.kind is MessageKind.VERIFY:
            return VERIFY_TIMER
        return f"{ALIVE_TIMER_PREFIX}{self.target}"


@dataclass
class ECState:
    current_coordinator: ProcessId | None
    fd_timeout: float
    group_id: str = EC_GROUP_ID
    commission_size: int = COMMISSION_SIZE
    busy: bool = False
    pending_requests: set[ProcessId] = field(default_factory=set)
    pending_queries: list[ProcessId] = field(default_factory=list)
    probe: FDProbe | None = None
    # HP scan in progress: remaining candidates and the initiator that wins if all fail
    candidates: list[ProcessId] = field(default_factory=list)
    chosen_initiator: ProcessId | None = None


@dataclass
class ECProcessState:
    reporting: bool = False
    # id of the newest commission Coordinator applied; the EC numbers its sends in order
    latest_announcement: int = 0


def _probe(net: Network, ec: ECState, target: ProcessId, kind: MessageKind) -> None:
    probe = FDProbe(target, net.now, net.now + ec.fd_timeout, kind)
    ec.probe = probe
    net.send(EC_GROUP_ID, target, kind)
    reply = MessageKind.VERIFY_REPLY if kind is MessageKind.VERIFY else MessageKind.ALIVE_REPLY
    net.set_timer(EC_GROUP_ID, probe.timer_id, ec.fd_timeout, charge=reply)


def _finish(net: Network, ec: ECState) -> None:
    ec.busy = False
    ec.probe = None
    ec.pending_requests.clear()
    ec.candidates = []
    ec.chosen_initiator = None
    queued, ec.pending_queries = ec.pending_queries, []
    for pid in queued:
        ec_handle_query(net, ec, pid)


def _announce(net: Network, ec: ECState, winner: ProcessId) -> None:
    net.broadcast(EC_GROUP_ID, MessageKind.COORDINATOR, winner)
    net.election_ended(EC_GROUP_ID, winner)
    ec.current_coordinator = winner
    _finish(net, ec)


def ec_handle_election(net: Network, ec: ECState, initiator: ProcessId) -> None:
    if ec.busy:
        ec.pending_requests.add(initiator)
        return
    ec.busy = True
    ec.pending_requests = {initiator}
    if ec.current_coordinator is None:
        _coordinator_down(net, ec)
        return
    _probe(net, ec, ec.current_coordinator, MessageKind.VERIFY)


def ec_coalesce(ec: ECState, pending_requests: Iterable[ProcessId]) -> ProcessId | None:
    """The highest initiator drives the election; the others get the broadcast."""
    requests = set(pending_requests)
    if ec.current_coordinator is not None:
        requests.discard(ec.current_coordinator)
    return max(requests) if requests else None


def hp_scan_order(
    ids: Iterable[ProcessId],
    initiator: ProcessId | None,
    down: ProcessId | None,
) -> list[ProcessId]:
    """Ids HP probes, highest first: everything above the initiator except the dead coordinator."""
    floor = -1 if initiator is None else initiator
    return sorted((pid for pid in ids if pid > floor and pid != down), reverse=True)


def hp_find_highest_alive(net: Network, ec: ECState) -> None:
    """Probe the next HP candidate or settle on the initiator when none are left.

    Runs one Alive exchange per candidate; the first AliveReply wins.
    """
    if ec.candidates:
        _probe(net, ec, ec.candidates.pop(0), MessageKind.ALIVE)
        return
    if ec.chosen_initiator is not None:
        _announce(net, ec, ec.chosen_initiator)
        return
    net.annotate(EC_GROUP_ID, verdict="system-dead")
    ec.current_coordinator = None
    _finish(net, ec)


def _coordinator_down(net: Network, ec: ECState) -> None:
    down = ec.current_coordinator
    ec.chosen_initiator = ec_coalesce(ec, ec.pending_requests)
    net.election_started(
        EC_GROUP_ID if ec.chosen_initiator is None else ec.chosen_initiator, verified=True
    )
    ec.candidates = hp_scan_order(net.view.ids, ec.chosen_initiator, down)
    hp_find_highest_alive(net, ec)


def ec_handle_query(net: Network, ec: ECState, pid: ProcessId) -> None:
    if ec.busy:
        ec.pending_queries.append(pid)
        return
    current = ec.current_coordinator
    if current is None or pid > current:
        net.election_started(pid, verified=True)
        net.broadcast(EC_GROUP_ID, MessageKind.COORDINATOR, pid)
        net.election_ended(EC_GROUP_ID, pid)
        ec.current_coordinator = pid
        return
    net.send(EC_GROUP_ID, pid, MessageKind.COORDINATOR, current)


def ec_handle_reply(net: Network, ec: ECState, msg: Message) -> None:
    probe = ec.probe
    if probe is None or probe.target != msg.sender:
        return
    if msg.kind is MessageKind.VERIFY_REPLY and probe.kind is MessageKind.VERIFY:
        net.cancel_timer(EC_GROUP_ID, probe.timer_id)
        # false alarm: every requester in this window hears the current coordinator
        for pid in sorted(ec.pending_requests):
            net.send(EC_GROUP_ID, pid, MessageKind.COORDINATOR, ec.current_coordinator)
        _finish(net, ec)
    elif msg.kind is MessageKind.ALIVE_REPLY and probe.kind is MessageKind.ALIVE:
        net.cancel_timer(EC_GROUP_ID, probe.timer_id)
        _announce(net, ec, msg.sender)


def ec_handle_timeout(net: Network, ec: ECState, timer_id: str) -> None:
    probe = ec.probe
    if probe is None or probe.timer_id != timer_id:
        return
    ec.probe = None
    if probe.kind is MessageKind.VERIFY:
        _coordinator_down(net, ec)
    else:
        hp_find_highest_alive(net, ec)


def _process_state(net: Network, pid: ProcessId) -> ECProcessState:
    return net.view.node(pid).algo_state


class ElectionCommissionAlgorithm(Algorithm):
    name = "ec"
    resync_after_slow = True

    def init_state(self, pid: ProcessId) -> ECProcessState:
        return ECProcessState()

    def init_ec(self, view: SystemView, config: SimConfig) -> ECState:
        return ECState(current_coordinator=max(view.ids), fd_timeout=config.fd_timeout)

    def initial_announcer(self, view: SystemView) -> str:
        return EC_GROUP_ID

    def on_failure_detect(self, net: Network, pid: ProcessId) -> None:
        state = _process_state(net, pid)
        if state.reporting:
            return
        state.reporting = True
        net.send(pid, EC_GROUP_ID, MessageKind.ELECTION)

    def on_recovery(self, net: Network, pid: ProcessId) -> None:
        _process_state(net, pid).reporting = True
        net.send(pid, EC_GROUP_ID, MessageKind.QUERY)

    def on_resume(self, net: Network, pid: ProcessId) -> None:
        # announcements that arrived while Slow were ignored; ask again
        self.on_recovery(net, pid)

    def handle_message(self, net: Network, pid: ProcessId, msg: Message) -> None:
        kind = msg.kind
        if kind is MessageKind.VERIFY:
            net.send(pid, EC_GROUP_ID, MessageKind.VERIFY_REPLY)
        elif kind is MessageKind.ALIVE:
            net.send(pid, EC_GROUP_ID, MessageKind.ALIVE_REPLY)
        elif kind is MessageKind.COORDINATOR and msg.sender == EC_GROUP_ID:
            state = _process_state(net, pid)
            if msg.msg_id < state.latest_announcement:
                net.annotate(pid, stale_coordinator=msg.coordinator)
                return
            state.latest_announcement = msg.msg_id
            state.reporting = False
            net.adopt(pid, msg.coordinator, EC_GROUP_ID)
        else:
            net.flag_violation(pid, f"unexpected {kind.value} from {msg.sender}")

    def handle_timeout(self, net: Network, pid: ProcessId, timer_id: str) -> None:
        net.flag_violation(pid, f"process timer {timer_id} under the commission protocol")

    def handle_ec_message(self, net: Network, msg: Message) -> None:
        ec: ECState = net.view.ec
        if msg.kind is MessageKind.ELECTION:
            ec_handle_election(net, ec, msg.sender)
        elif msg.kind is MessageKind.QUERY:
            ec_handle_query(net, ec, msg.sender)
        elif msg.kind in (MessageKind.VERIFY_REPLY, MessageKind.ALIVE_REPLY):
            ec_handle_reply(net, ec, msg)
        else:
            net.flag_violation(EC_GROUP_ID, f"unexpected {msg.kind.value} from {msg.sender}")

    def handle_ec_timeout(self, net: Network, timer_id: str) -> None:
        ec_handle_timeout(net, net.view.ec, timer_id)
