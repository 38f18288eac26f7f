"""Domain types shared by every layer: CSNs, records, requests, decisions."""

from __future__ import annotations

import time
from dataclasses import dataclass, field, replace
from enum import IntEnum
from typing import NamedTuple, Optional

from .errors import ClockRegression, MalformedRequest


class Csn(NamedTuple):
    """Commit sequence number: (local_time, node_id)."""

    local_time: int
    node_id: int

    def __repr__(self):
        return f"Csn({self.local_time},{self.node_id})"


# Pre-history version of a key. Never issued by a tagger (counters start at 1).
INITIAL = Csn(0, 0)


def csn_precedes(a: Csn, b: Csn) -> bool:
    """Deterministic win order: smaller local time first, node id breaks ties."""
    if a.local_time < b.local_time:
        return True
    if a.local_time == b.local_time:
        return a.node_id < b.node_id
    return False


class OpType(IntEnum):
    INSERT = 1
    UPDATE = 2
    DELETE = 3


class Verdict(IntEnum):
    COMMITTED = 1
    ABORTED = 2


class AbortReason(IntEnum):
    # Lower value wins when several replicas report different reasons.
    READ_VALIDATION = 1
    WRITE_EXISTS = 2
    ROW_MISSING = 3
    LOST_COMPARE = 4
    CROSS_MODEL_PEER_ABORTED = 5
    EPOCH_REEXECUTION_DROPPED = 6


class WriteRecord(NamedTuple):
    key: bytes
    op_type: OpType
    value: bytes = b""


class ReadRecord(NamedTuple):
    key: bytes
    read_version: Csn = INITIAL


class GroupRef(NamedTuple):
    """Cross-model group membership carried by each member request."""

    group_id: str
    expected: int


@dataclass(frozen=True)
class TxnRequest:
    txn_id: str
    read_set: tuple = ()
    write_set: tuple = ()
    group: Optional[GroupRef] = None
    begin_epoch: int = 0
    engine: str = "kv"

    @property
    def read_only(self) -> bool:
        return not self.write_set


def check_request(req: TxnRequest, allow_empty_values: bool = True) -> None:
    """Raise MalformedRequest unless *req* satisfies the record invariants."""
    if not req.txn_id:
        raise MalformedRequest("empty txn_id")
    seen = set()
    for w in req.write_set:
        if not w.key:
            raise MalformedRequest("empty write key")
        if w.key in seen:
            raise MalformedRequest(f"duplicate write key {w.key!r}")
        seen.add(w.key)
        if w.op_type == OpType.DELETE and w.value:
            raise MalformedRequest("delete carries a value")
        if w.op_type != OpType.DELETE and not w.value and not allow_empty_values:
            raise MalformedRequest("empty payload not permitted by schema")
    seen = set()
    for r in req.read_set:
        if not r.key:
            raise MalformedRequest("empty read key")
        if r.key in seen:
            raise MalformedRequest(f"duplicate read key {r.key!r}")
        seen.add(r.key)
    if req.group is not None and req.group.expected < 1:
        raise MalformedRequest("group needs at least one member")


@dataclass(frozen=True)
class TaggedTxn:
    request: TxnRequest
    csn: Csn
    cen: int
    origin: int

    def __post_init__(self):
        if self.csn.node_id != self.origin:
            raise ValueError("csn.node_id must equal origin")

    def with_sets(self, read_set, write_set) -> "TaggedTxn":
        return TaggedTxn(replace(self.request, read_set=read_set, write_set=write_set),
                         self.csn, self.cen, self.origin)

    def with_cen(self, cen: int) -> "TaggedTxn":
        return TaggedTxn(self.request, self.csn, cen, self.origin)


@dataclass(frozen=True)
class Decision:
    csn: Csn
    verdict: Verdict
    reason: Optional[AbortReason] = None

    @property
    def committed(self) -> bool:
        return self.verdict == Verdict.COMMITTED


class DeterministicClock:
    """Monotonic counter standing in for wall time under test."""

    def __init__(self, start: int = 0):
        self.value = start

    def __call__(self) -> int:
        self.value += 1
        return self.value


class LiveClock:
    """Microsecond wall clock."""

    def __call__(self) -> int:
        return time.time_ns() // 1000


@dataclass
class Tagger:
    """Issues CSNs for one CC node."""

    node_id: int
    clock: object = field(default_factory=DeterministicClock)
    last: int = 0

    def tag(self, req: TxnRequest, cen: int) -> TaggedTxn:
        t = self.clock()
        if t <= self.last:
            raise ClockRegression(f"node {self.node_id}: clock {t} <= {self.last}")
        self.last = t
        return TaggedTxn(req, Csn(t, self.node_id), cen, self.node_id)

    def advance_to(self, floor: int) -> None:
        """Never issue a local_time <= *floor* (used after recovery)."""
        if floor > self.last:
            self.last = floor
            if isinstance(self.clock, DeterministicClock) and self.clock.value < floor:
                self.clock.value = floor
