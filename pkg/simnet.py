"""Deterministic discrete-event engine for the election protocols.

Events are kept in a heap ordered by ``(at, seq)``. Message delays and random
drops come from one seeded numpy generator, so a (config, schedule, seed)
triple always produces the same trace. Protocols talk to the engine through
the ``Network`` object handed to every handler.
"""

from __future__ import annotations

import heapq
import itertools
import logging
from dataclasses import dataclass, field, replace
from enum import Enum
from typing import Any, Iterable

import numpy as np

from core import (
    EC_GROUP_ID,
    Endpoint,
    Message,
    MessageKind,
    ProcessId,
    ProtocolError,
    Status,
    SystemView,
)
from metrics import RecordKind, Trace, TraceRecord

logger = logging.getLogger(__name__)


class ConfigError(ValueError):
    """Invalid simulation configuration or fault schedule."""


class SimulationError(RuntimeError):
    """The run exceeded its event budget (livelock guard)."""


@dataclass(frozen=True)
class SimConfig:
    t_msg: float = 10.0
    t_pos: float = 4.0
    d: float = 24.0
    drop_probability: float = 0.0
    seed: int = 0
    max_sim_time: float = 10_000.0
    max_events: int = 1_000_000

    def __post_init__(self) -> None:
        if not self.t_msg > 0:
            raise ConfigError(f"t_msg must be positive, got {self.t_msg}")
        if self.t_pos < 0:
            raise ConfigError(f"t_pos must be non-negative, got {self.t_pos}")
        if not self.d > 0:
            raise ConfigError(f"d must be positive, got {self.d}")
        if not 0.0 <= self.drop_probability <= 1.0:
            raise ConfigError(
                f"drop_probability must be in [0, 1], got {self.drop_probability}"
            )
        if not self.max_sim_time > 0:
            raise ConfigError(f"max_sim_time must be positive, got {self.max_sim_time}")
        if self.max_events < 1:
            raise ConfigError(f"max_events must be at least 1, got {self.max_events}")
        if not 0 <= self.seed < 2**64:
            raise ConfigError(f"seed must be a 64-bit unsigned integer, got {self.seed}")

    @property
    def fd_timeout(self) -> float:
        """Maximum time to get a reply: T = 2*t_msg + t_pos."""
        return 2 * self.t_msg + self.t_pos

    def with_overrides(self, **changes: Any) -> SimConfig:
        return replace(self, **{k: v for k, v in changes.items() if v is not None})


# ---------------------------------------------------------------------------
# Fault schedules
# ---------------------------------------------------------------------------

class FaultKind(str, Enum):
    CRASH = "crash"
    RECOVER = "recover"
    SLOW = "slow"
    NORMAL = "normal"
    BREAK = "break"
    HEAL = "heal"
    DETECT = "detect"
    DROP = "drop"
    CRASH_AFTER_SEND = "crash_after_send"


_TARGET_COUNT = {
    FaultKind.CRASH: 1,
    FaultKind.RECOVER: 1,
    FaultKind.SLOW: 1,
    FaultKind.NORMAL: 1,
    FaultKind.DETECT: 1,
    FaultKind.CRASH_AFTER_SEND: 1,
    FaultKind.BREAK: 2,
    FaultKind.HEAL: 2,
    FaultKind.DROP: 2,
}
_NEEDS_MESSAGE_KIND = {FaultKind.DROP, FaultKind.CRASH_AFTER_SEND}


def _parse_endpoint(token: str) -> Endpoint:
    if token.upper() == EC_GROUP_ID:
        return EC_GROUP_ID
    try:
        return int(token)
    except ValueError:
        raise ConfigError(f"invalid process id: {token!r}") from None


@dataclass(frozen=True)
class Fault:
    time: float
    kind: FaultKind
    targets: tuple[Endpoint, ...]
    message_kind: MessageKind | None = None

    @classmethod
    def parse(cls, time: float, text: str) -> Fault:
        """Parse ``crash 6``, ``break 2 6``, ``drop Answer 6 2``, ``crash_after_send 1 Grant``."""
        words = text.split()
        if not words:
            raise ConfigError("empty fault")
        try:
            kind = FaultKind(words[0].lower())
        except ValueError:
            raise ConfigError(f"unknown fault kind: {words[0]!r}") from None
        rest = words[1:]
        message_kind = None
        try:
            if kind is FaultKind.DROP and rest:
                message_kind, rest = MessageKind.parse(rest[0]), rest[1:]
            elif kind is FaultKind.CRASH_AFTER_SEND and len(rest) == 2:
                message_kind, rest = MessageKind.parse(rest[1]), rest[:1]
        except ValueError as exc:
            raise ConfigError(str(exc)) from None
        if kind in _NEEDS_MESSAGE_KIND and message_kind is None:
            raise ConfigError(f"{kind.value} needs a message kind")
        if len(rest) != _TARGET_COUNT[kind]:
            raise ConfigError(
                f"{kind.value} takes {_TARGET_COUNT[kind]} target(s), got {len(rest)}"
            )
        return cls(float(time), kind, tuple(_parse_endpoint(w) for w in rest), message_kind)

    def to_text(self) -> str:
        targets = [str(t) for t in self.targets]
        if self.kind is FaultKind.DROP:
            return " ".join([self.kind.value, self.message_kind.value, *targets])
        if self.kind is FaultKind.CRASH_AFTER_SEND:
            return " ".join([self.kind.value, *targets, self.message_kind.value])
        return " ".join([self.kind.value, *targets])


@dataclass(frozen=True)
class FaultSchedule:
    faults: tuple[Fault, ...] = ()

    @classmethod
    def of(cls, *entries: tuple[float, str]) -> FaultSchedule:
        """Build from ``(time, "crash 6")`` pairs."""
        return cls(tuple(Fault.parse(time, text) for time, text in entries))

    def __iter__(self):
        return iter(self.faults)

    def __len__(self) -> int:
        return len(self.faults)

    def validate(self, ids: Iterable[ProcessId]) -> None:
        members = set(ids)
        crashed: set[Endpoint] = set()
        last = 0.0
        for fault in self.faults:
            if fault.time < 0:
                raise ConfigError(f"fault time must be non-negative: {fault.to_text()}")
            if fault.time < last:
                raise ConfigError(
                    f"fault times must be non-decreasing: {fault.time} after {last}"
                )
            last = fault.time
            for target in fault.targets:
                allowed_ec = fault.kind is FaultKind.DROP and target == EC_GROUP_ID
                if target not in members and not allowed_ec:
                    raise ConfigError(f"{fault.kind.value}: unknown process id {target}")
            if fault.kind is FaultKind.BREAK or fault.kind is FaultKind.HEAL:
                if fault.targets[0] == fault.targets[1]:
                    raise ConfigError(f"{fault.kind.value}: a link needs two distinct ends")
            pid = fault.targets[0]
            if fault.kind in (FaultKind.CRASH, FaultKind.CRASH_AFTER_SEND):
                crashed.add(pid)
            elif fault.kind is FaultKind.RECOVER:
                if pid not in crashed:
                    raise ConfigError(f"recover {pid} at {fault.time} without a prior crash")
                crashed.discard(pid)


# ---------------------------------------------------------------------------
# Engine
# ---------------------------------------------------------------------------

class EventKind(str, Enum):
    DELIVER = "Deliver"
    TIMER_FIRE = "TimerFire"
    FAULT = "Fault"


@dataclass(frozen=True, order=True)
class SimEvent:
    at: float
    seq: int
    kind: EventKind = field(compare=False)
    message: Message | None = field(default=None, compare=False)
    owner: Endpoint | None = field(default=None, compare=False)
    timer_id: str | None = field(default=None, compare=False)
    token: int = field(default=0, compare=False)
    charge: MessageKind | None = field(default=None, compare=False)
    fault: Fault | None = field(default=None, compare=False)
    incarnation: int = field(default=0, compare=False)


class Algorithm:
    """Handler set a protocol binds to the engine.

    Per-process handlers run only for Up processes. The EC handlers are used
    by the commission-based protocol only.
    """

    name = "abstract"
    # drop the believed coordinator when a Slow process resumes, then call on_resume
    resync_after_slow = False

    def init_state(self, pid: ProcessId) -> Any:
        return None

    def init_ec(self, view: SystemView, config: SimConfig) -> Any:
        return None

    def initial_announcer(self, view: SystemView) -> Endpoint:
        return max(view.ids)

    def on_failure_detect(self, net: Network, pid: ProcessId) -> None:
        raise NotImplementedError

    def on_recovery(self, net: Network, pid: ProcessId) -> None:
        raise NotImplementedError

    def on_resume(self, net: Network, pid: ProcessId) -> None:
        """A Slow process is back to normal; most protocols carry on unchanged."""

    def handle_message(self, net: Network, pid: ProcessId, msg: Message) -> None:
        raise NotImplementedError

    def handle_timeout(self, net: Network, pid: ProcessId, timer_id: str) -> None:
        raise NotImplementedError

    def handle_ec_message(self, net: Network, msg: Message) -> None:
        raise ProtocolError(f"{self.name}: message {msg.kind.value} sent to the EC endpoint")

    def handle_ec_timeout(self, net: Network, timer_id: str) -> None:
        raise ProtocolError(f"{self.name}: EC timer {timer_id} without an EC")


class Network:
    """Event queue, links and timers of one run; the context handlers act on."""

    def __init__(self, view: SystemView, algorithm: Algorithm, config: SimConfig) -> None:
        self.view = view
        self.algorithm = algorithm
        self.config = config
        self.trace = Trace()
        self.rng = np.random.default_rng(config.seed)
        self._queue: list[SimEvent] = []
        self._seq = itertools.count()
        self._msg_ids = itertools.count(1)
        self._tokens = itertools.count(1)
        self._broken: set[frozenset[Endpoint]] = set()
        self._drop_rules: list[tuple[MessageKind, Endpoint, Endpoint]] = []
        self._crash_rules: list[tuple[ProcessId, MessageKind]] = []
        self._pending_crashes: list[ProcessId] = []
        self._ec_timers: dict[str, int] = {}
        # bumped on every crash; deliveries stamped with an older value are lost
        self._incarnations: dict[ProcessId, int] = dict.fromkeys(view.ids, 0)
        self.events_processed = 0

    @property
    def now(self) -> float:
        return self.view.now

    # -- recording ---------------------------------------------------------

    def _record(self, kind: RecordKind, sender=None, to=None, message_kind=None, **payload):
        self.trace.append(TraceRecord(self.now, kind, sender, to, message_kind, payload))

    def adopt(self, pid: ProcessId, coordinator: ProcessId | None, source: Endpoint) -> None:
        self.view.node(pid).believed_coordinator = coordinator
        self._record(RecordKind.COORDINATOR_ADOPTED, source, pid, coordinator=coordinator)

    def election_started(self, initiator: Endpoint, verified: bool = False) -> None:
        self._record(RecordKind.ELECTION_STARTED, initiator, verified=int(verified))

    def election_ended(self, announcer: Endpoint, winner: ProcessId) -> None:
        self._record(RecordKind.ELECTION_ENDED, announcer, winner=winner)

    def flag_violation(self, pid: Endpoint, reason: str) -> None:
        logger.warning("violation at %.6f by %s: %s", self.now, pid, reason)
        self._record(RecordKind.VIOLATION_FLAG, pid, reason=reason)

    def annotate(self, endpoint: Endpoint, **notes: Any) -> None:
        self._record(RecordKind.ANNOTATION, endpoint, **notes)

    # -- messaging ---------------------------------------------------------

    def _push(self, at: float, kind: EventKind, **fields: Any) -> None:
        heapq.heappush(self._queue, SimEvent(at, next(self._seq), kind, **fields))
        if len(self._queue) > self.config.max_events:
            raise SimulationError(
                f"event queue exceeded {self.config.max_events} entries at t={self.now:.6f}"
            )

    def send(
        self,
        sender: Endpoint,
        to: Endpoint,
        kind: MessageKind,
        coordinator: ProcessId | None = None,
    ) -> Message:
        if sender != EC_GROUP_ID and self.view.node(sender).status is Status.CRASHED:
            raise ProtocolError(f"crashed process {sender} tried to send {kind.value}")
        if to != EC_GROUP_ID and to not in self.view.processes:
            raise ProtocolError(f"{kind.value} from {sender} to unknown process {to}")
        msg = Message(kind, sender, to, self.now, coordinator, next(self._msg_ids))
        extra = {} if coordinator is None else {"coordinator": coordinator}
        self._record(RecordKind.SENT, sender, to, kind, id=msg.msg_id, **extra)

        reason = self._drop_reason(msg)
        if reason:
            self._record(RecordKind.DROPPED, sender, to, kind, id=msg.msg_id, reason=reason)
        else:
            delay = self.config.t_msg * (1.0 - self.rng.random())
            incarnation = 0 if to == EC_GROUP_ID else self._incarnations[to]
            self._push(self.now + delay, EventKind.DELIVER, message=msg, incarnation=incarnation)

        if (sender, kind) in self._crash_rules:
            self._crash_rules.remove((sender, kind))
            self._pending_crashes.append(sender)
        return msg

    def broadcast(self, sender: Endpoint, kind: MessageKind, coordinator: ProcessId) -> list[Message]:
        """Send to every member id, the sender and crashed processes included."""
        return [self.send(sender, pid, kind, coordinator) for pid in self.view.ids]

    def _drop_reason(self, msg: Message) -> str | None:
        if frozenset((msg.sender, msg.to)) in self._broken:
            return "link"
        rule = (msg.kind, msg.sender, msg.to)
        if rule in self._drop_rules:
            self._drop_rules.remove(rule)
            return "targeted"
        involves_ec = EC_GROUP_ID in (msg.sender, msg.to)
        if self.config.drop_probability > 0 and not involves_ec:
            if self.rng.random() < self.config.drop_probability:
                return "random"
        return None

    # -- timers ------------------------------------------------------------

    def set_timer(
        self,
        owner: Endpoint,
        timer_id: str,
        duration: float,
        charge: MessageKind | None = None,
    ) -> None:
        """Arm (or re-arm) a timer; ``charge`` bills an absent probe reply when it fires."""
        token = next(self._tokens)
        deadline = self.now + duration
        if owner == EC_GROUP_ID:
            self._ec_timers[timer_id] = token
        else:
            node = self.view.node(owner)
            if not node.is_up:
                raise ProtocolError(f"process {owner} is {node.status.value}, cannot arm {timer_id}")
            node.pending_timers[timer_id] = (deadline, token)
        self._push(
            deadline, EventKind.TIMER_FIRE, owner=owner, timer_id=timer_id, token=token, charge=charge
        )

    def cancel_timer(self, owner: Endpoint, timer_id: str) -> None:
        if owner == EC_GROUP_ID:
            self._ec_timers.pop(timer_id, None)
        else:
            self.view.node(owner).pending_timers.pop(timer_id, None)

    def cancel_all_timers(self, owner: Endpoint) -> None:
        if owner == EC_GROUP_ID:
            self._ec_timers.clear()
        else:
            self.view.node(owner).pending_timers.clear()

    def has_timer(self, owner: Endpoint, timer_id: str) -> bool:
        if owner == EC_GROUP_ID:
            return timer_id in self._ec_timers
        return timer_id in self.view.node(owner).pending_timers

    def _timer_is_live(self, event: SimEvent) -> bool:
        if event.owner == EC_GROUP_ID:
            if self._ec_timers.get(event.timer_id) != event.token:
                return False
            del self._ec_timers[event.timer_id]
            return True
        timers = self.view.node(event.owner).pending_timers
        entry = timers.get(event.timer_id)
        if entry is None or entry[1] != event.token:
            return False
        del timers[event.timer_id]
        return True

    # -- faults ------------------------------------------------------------

    def _set_status(self, pid: ProcessId, status: Status, **extra: Any) -> None:
        self.view.node(pid).status = status
        self._record(RecordKind.STATE_CHANGE, pid, status=status.value, **extra)

    def crash(self, pid: ProcessId) -> None:
        node = self.view.node(pid)
        if node.status is Status.CRASHED:
            logger.debug("crash %s ignored: already crashed", pid)
            return
        node.pending_timers.clear()
        self._incarnations[pid] += 1
        self._set_status(pid, Status.CRASHED)

    def recover(self, pid: ProcessId) -> None:
        node = self.view.node(pid)
        if node.status is not Status.CRASHED:
            logger.debug("recover %s ignored: not crashed", pid)
            return
        node.believed_coordinator = None
        node.algo_state = self.algorithm.init_state(pid)
        node.pending_timers.clear()
        self._set_status(pid, Status.UP, recovered=1)
        self._dispatch(self.algorithm.on_recovery, pid)

    def resume(self, pid: ProcessId) -> None:
        node = self.view.node(pid)
        if node.status is not Status.SLOW:
            logger.debug("normal %s ignored: %s", pid, node.status.value)
            return
        if not self.algorithm.resync_after_slow:
            self._set_status(pid, Status.UP)
            return
        node.believed_coordinator = None
        self._set_status(pid, Status.UP, resync=1)
        self._dispatch(self.algorithm.on_resume, pid)

    def _apply_fault(self, fault: Fault) -> None:
        kind = fault.kind
        target = fault.targets[0]
        if kind is FaultKind.CRASH:
            self.crash(target)
        elif kind is FaultKind.RECOVER:
            self.recover(target)
        elif kind is FaultKind.SLOW:
            if self.view.node(target).status is Status.CRASHED:
                logger.debug("slow %s ignored: crashed", target)
                return
            self._set_status(target, Status.SLOW)
        elif kind is FaultKind.NORMAL:
            self.resume(target)
        elif kind is FaultKind.BREAK:
            self._broken.add(frozenset(fault.targets))
            self._record(RecordKind.STATE_CHANGE, target, fault.targets[1], link="broken")
        elif kind is FaultKind.HEAL:
            self._broken.discard(frozenset(fault.targets))
            self._record(RecordKind.STATE_CHANGE, target, fault.targets[1], link="healed")
        elif kind is FaultKind.DETECT:
            if not self.view.node(target).is_up:
                logger.debug("detect %s ignored: not up", target)
                return
            self._dispatch(self.algorithm.on_failure_detect, target)
        elif kind is FaultKind.DROP:
            self._drop_rules.append((fault.message_kind, target, fault.targets[1]))
        elif kind is FaultKind.CRASH_AFTER_SEND:
            self._crash_rules.append((target, fault.message_kind))

    # -- loop --------------------------------------------------------------

    def _dispatch(self, handler, *args: Any) -> None:
        handler(self, *args)
        while self._pending_crashes:
            self.crash(self._pending_crashes.pop(0))

    def _deliver(self, msg: Message, incarnation: int) -> None:
        if msg.to == EC_GROUP_ID:
            self._record(RecordKind.DELIVERED, msg.sender, msg.to, msg.kind, id=msg.msg_id)
            self._dispatch(self.algorithm.handle_ec_message, msg)
            return
        node = self.view.node(msg.to)
        if node.status is Status.CRASHED or incarnation != self._incarnations[msg.to]:
            self._record(RecordKind.LOST_TO_CRASH, msg.sender, msg.to, msg.kind, id=msg.msg_id)
        elif node.status is Status.SLOW:
            self._record(
                RecordKind.DELIVERED, msg.sender, msg.to, msg.kind, id=msg.msg_id, ignored="slow"
            )
        else:
            self._record(RecordKind.DELIVERED, msg.sender, msg.to, msg.kind, id=msg.msg_id)
            self._dispatch(self.algorithm.handle_message, msg.to, msg)

    def _fire(self, event: SimEvent) -> None:
        if not self._timer_is_live(event):
            return
        extra = {} if event.charge is None else {"charge": event.charge.value}
        if event.owner == EC_GROUP_ID:
            self._record(RecordKind.TIMER_FIRED, event.owner, timer=event.timer_id, **extra)
            self._dispatch(self.algorithm.handle_ec_timeout, event.timer_id)
            return
        node = self.view.node(event.owner)
        if node.status is Status.SLOW:
            self._record(
                RecordKind.TIMER_FIRED, event.owner, timer=event.timer_id, ignored="slow", **extra
            )
            return
        self._record(RecordKind.TIMER_FIRED, event.owner, timer=event.timer_id, **extra)
        self._dispatch(self.algorithm.handle_timeout, event.owner, event.timer_id)

    def _announce_initial(self) -> None:
        top = max(self.view.ids)
        announcer = self.algorithm.initial_announcer(self.view)
        self._record(RecordKind.ELECTION_ENDED, announcer, winner=top, initial=1)
        for pid in self.view.ids:
            self.adopt(pid, top, announcer)

    def run(self, schedule: FaultSchedule) -> Trace:
        schedule.validate(self.view.ids)
        self.view.now = 0.0
        for node in self.view.processes.values():
            node.algo_state = self.algorithm.init_state(node.pid)
        self.view.ec = self.algorithm.init_ec(self.view, self.config)
        self._announce_initial()
        for fault in schedule:
            self._push(fault.time, EventKind.FAULT, fault=fault)

        logger.info(
            "running %s on %d processes, %d fault(s), seed %d",
            self.algorithm.name,
            len(self.view.processes),
            len(schedule),
            self.config.seed,
        )
        while self._queue:
            event = heapq.heappop(self._queue)
            if event.at > self.config.max_sim_time:
                logger.info("stopping at max_sim_time %s", self.config.max_sim_time)
                break
            self.events_processed += 1
            if self.events_processed > self.config.max_events:
                logger.error("livelock guard tripped after %d events", self.config.max_events)
                raise SimulationError(
                    f"{self.algorithm.name}: more than {self.config.max_events} events "
                    f"processed by t={event.at:.6f} (livelock?)"
                )
            self.view.now = event.at
            logger.debug("t=%.6f %s", event.at, event.kind.value)
            if event.kind is EventKind.DELIVER:
                self._deliver(event.message, event.incarnation)
            elif event.kind is EventKind.TIMER_FIRE:
                self._fire(event)
            else:
                self._apply_fault(event.fault)
        logger.info(
            "%s finished at t=%.6f after %d events, %d trace records",
            self.algorithm.name,
            self.view.now,
            self.events_processed,
            len(self.trace),
        )
        return self.trace


def run(
    view: SystemView,
    algorithm: Algorithm,
    schedule: FaultSchedule,
    config: SimConfig,
) -> Trace:
    """Run *algorithm* on *view* under *schedule*; *view* is left in its final state."""
    return Network(view, algorithm, config).run(schedule)
