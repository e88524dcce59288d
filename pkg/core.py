"""Algorithm-agnostic domain types for the leader-election simulator.

Process identity doubles as election priority: a higher id wins. The Election
Commission (EC) endpoint is addressed by the group id ``EC_GROUP_ID`` and is
never a candidate.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from enum import Enum
from typing import Any, Iterable, Union

ProcessId = int
Endpoint = Union[int, str]

EC_GROUP_ID = "EC"
COMMISSION_SIZE = 5  # chief commissioner + four commissioners, externally one endpoint


class ProtocolError(RuntimeError):
    """A protocol implementation did something the system model forbids."""


class MessageKind(str, Enum):
    ELECTION = "Election"
    ANSWER = "Answer"
    COORDINATOR = "Coordinator"
    GRANT = "Grant"
    QUERY = "Query"
    QUERY_ANSWER = "QueryAnswer"
    ALIVE = "Alive"
    ALIVE_REPLY = "AliveReply"
    VERIFY = "Verify"
    VERIFY_REPLY = "VerifyReply"
    STOP = "Stop"

    @classmethod
    def parse(cls, text: str) -> MessageKind:
        for kind in cls:
            if kind.value.lower() == text.strip().lower():
                return kind
        raise ValueError(f"unknown message kind: {text!r}")


CARRIES_COORDINATOR = frozenset({MessageKind.COORDINATOR, MessageKind.QUERY_ANSWER})


class Status(str, Enum):
    UP = "Up"
    CRASHED = "Crashed"
    SLOW = "Slow"


@dataclass(frozen=True)
class Message:
    kind: MessageKind
    sender: Endpoint
    to: Endpoint
    send_time: float
    coordinator: ProcessId | None = None
    msg_id: int = 0

    def __post_init__(self) -> None:
        has_payload = self.coordinator is not None
        if has_payload != (self.kind in CARRIES_COORDINATOR):
            raise ProtocolError(
                f"{self.kind.value} message from {self.sender} to {self.to} "
                f"{'must' if not has_payload else 'must not'} carry a coordinator id"
            )


@dataclass
class NodeState:
    pid: ProcessId
    status: Status = Status.UP
    believed_coordinator: ProcessId | None = None
    algo_state: Any = None
    # timer-id -> (deadline, token); the token invalidates cancelled timers
    pending_timers: dict[str, tuple[float, int]] = field(default_factory=dict)

    @property
    def is_up(self) -> bool:
        return self.status is Status.UP


@dataclass
class SystemView:
    processes: dict[ProcessId, NodeState]
    ec: Any = None
    now: float = 0.0

    @classmethod
    def build(cls, ids: Iterable[ProcessId]) -> SystemView:
        ordered = sorted(set(ids))
        if any(pid < 0 for pid in ordered):
            raise ValueError("process ids must be non-negative")
        if not ordered:
            raise ValueError("a system needs at least one process")
        top = ordered[-1]
        return cls(
            processes={pid: NodeState(pid=pid, believed_coordinator=top) for pid in ordered}
        )

    @property
    def ids(self) -> list[ProcessId]:
        return list(self.processes)

    def node(self, pid: ProcessId) -> NodeState:
        try:
            return self.processes[pid]
        except KeyError:
            raise ValueError(f"unknown process id: {pid}") from None

    def higher_ids(self, pid: ProcessId) -> list[ProcessId]:
        return [other for other in self.processes if other > pid]

    def up_ids(self) -> list[ProcessId]:
        return [pid for pid, node in self.processes.items() if node.is_up]


def highest_alive(view: SystemView, exclude: Iterable[ProcessId] = ()) -> ProcessId | None:
    """Return the highest Up process id not in *exclude*, or None."""
    skip = set(exclude)
    candidates = [pid for pid in view.up_ids() if pid not in skip]
    return max(candidates) if candidates else None


def correctness_predicate(view: SystemView) -> bool:
    """True iff every Up process believes the highest alive process."""
    expected = highest_alive(view)
    beliefs = {view.processes[pid].believed_coordinator for pid in view.up_ids()}
    if expected is None:
        return not beliefs
    return beliefs == {expected}
