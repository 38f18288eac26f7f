"""Message kinds, typed bodies and their canonical encodings."""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from enum import IntEnum
from typing import Optional

from .codec import (
    Reader, Writer, get_decision, get_request, get_tagged, put_decision,
    put_request, put_tagged,
)
from .core import AbortReason, Csn, Decision, TaggedTxn, TxnRequest
from .durability import get_entry, get_seal, put_entry, put_seal


class Kind(IntEnum):
    SUBMIT_TXN = 1
    DECISION_REPLY = 2
    SUB_TXN_ROUTE = 3
    WRITE_SET_PAYLOAD = 4
    ABORT_SET_PAYLOAD = 5
    TXN_BACKUP = 6
    MEMBERSHIP_BEAT = 7
    LEADER_CLAIM = 8
    LOG_PUSH_FRAME = 9
    LOG_PULL_REQUEST = 10
    LOG_PULL_REPLY = 11
    ADMIN_FRAME = 12
    GET_DATA = 13
    DATA_REPLY = 14


WIRE_VERSION = 1


def _txn_bytes(t: TaggedTxn) -> int:
    n = 40
    for r in t.request.read_set:
        n += len(r[0]) + 16
    for w in t.request.write_set:
        n += len(w[0]) + len(w[2]) + 9
    return n


@dataclass
class SubmitTxn:
    client: int
    request: TxnRequest
    resubmit: bool = False

    def put(self, w):
        w.u32(self.client)
        put_request(w, self.request)
        w.u8(self.resubmit)

    @classmethod
    def get(cls, r):
        return cls(r.u32(), get_request(r), bool(r.u8()))


class ReplyStatus(IntEnum):
    OK = 0
    OVERLOADED = 1
    MALFORMED = 2
    UNKNOWN = 3


@dataclass
class DecisionReply:
    txn_id: str
    decision: Optional[Decision]
    cen: int = 0
    status: ReplyStatus = ReplyStatus.OK

    def put(self, w):
        w.str_(self.txn_id)
        w.u8(self.status)
        w.u64(self.cen)
        if self.decision is None:
            w.u8(0)
        else:
            w.u8(1)
            put_decision(w, self.decision)

    @classmethod
    def get(cls, r):
        txn_id = r.str_()
        status = ReplyStatus(r.u8())
        cen = r.u64()
        d = get_decision(r) if r.u8() else None
        return cls(txn_id, d, cen, status)


@dataclass
class TxnBatch:
    """Sub-transaction routes and write-set payloads: a list of tagged txns."""

    view: int
    txns: list = field(default_factory=list)

    def put(self, w):
        w.u32(self.view)
        w.u32(len(self.txns))
        for t in self.txns:
            put_tagged(w, t)

    @classmethod
    def get(cls, r):
        view = r.u32()
        return cls(view, [get_tagged(r) for _ in range(r.u32())])

    def approx_size(self):
        return 8 + sum(_txn_bytes(t) for t in self.txns)


@dataclass
class AbortSetPayload:
    view: int
    aborts: dict = field(default_factory=dict)          # csn -> AbortReason
    # csns of the transactions the sender brought into this epoch
    inventory: list = field(default_factory=list)
    # (group_id, expected, csn) for the sender's group members this epoch
    groups: list = field(default_factory=list)

    def put(self, w):
        w.u32(self.view)
        w.u32(len(self.aborts))
        for csn in sorted(self.aborts):
            w.csn(csn)
            w.u8(self.aborts[csn])
        w.u32(len(self.inventory))
        for csn in self.inventory:
            w.csn(csn)
        w.u32(len(self.groups))
        for gid, expected, csn in self.groups:
            w.str_(gid)
            w.u32(expected)
            w.csn(csn)

    @classmethod
    def get(cls, r):
        view = r.u32()
        aborts = {}
        for _ in range(r.u32()):
            csn = r.csn()
            aborts[csn] = AbortReason(r.u8())
        inventory = [r.csn() for _ in range(r.u32())]
        groups = [(r.str_(), r.u32(), r.csn()) for _ in range(r.u32())]
        return cls(view, aborts, inventory, groups)

    def approx_size(self):
        return 12 + 13 * len(self.aborts) + 12 * len(self.inventory) + 24 * len(self.groups)


@dataclass
class TxnBackup:
    """ack=False carries the transaction; ack=True acknowledges its csn."""

    ack: bool
    client: int = 0
    txn: Optional[TaggedTxn] = None
    csn: Csn = Csn(0, 0)

    def put(self, w):
        w.u8(self.ack)
        if self.ack:
            w.csn(self.csn)
        else:
            w.u32(self.client)
            put_tagged(w, self.txn)

    @classmethod
    def get(cls, r):
        if r.u8():
            return cls(True, csn=r.csn())
        client = r.u32()
        t = get_tagged(r)
        return cls(False, client, t, t.csn)


@dataclass
class MembershipBeat:
    view: int
    open_cen: int
    pushed_upto: int
    join: bool = False

    def put(self, w):
        w.u32(self.view)
        w.u64(self.open_cen)
        w.u64(self.pushed_upto)
        w.u8(self.join)

    @classmethod
    def get(cls, r):
        return cls(r.u32(), r.u64(), r.u64(), bool(r.u8()))


class ClaimOp(IntEnum):
    REMOVE = 1
    ADD = 2


@dataclass
class LeaderClaim:
    """One membership change, proposed by the lowest live node.

    REMOVE drops *node* from every epoch >= effective_cen; ADD admits it
    from effective_cen on.
    """

    view: int
    op: ClaimOp
    node: int
    effective_cen: int

    def put(self, w):
        w.u32(self.view)
        w.u8(self.op)
        w.u32(self.node)
        w.u64(self.effective_cen)

    @classmethod
    def get(cls, r):
        return cls(r.u32(), ClaimOp(r.u8()), r.u32(), r.u64())


class PushKind(IntEnum):
    FRAME = 0
    ACK = 1
    ANNOUNCE = 2


@dataclass
class LogPushFrame:
    sub: PushKind
    stream: str
    entries: list = field(default_factory=list)
    seals: list = field(default_factory=list)
    cen: int = 0                # FRAME/ACK: epoch; ACK: received epoch
    watermark: int = 0          # ACK: storage applied watermark
    tail_lsn: int = 0           # ANNOUNCE: stream tail

    def put(self, w):
        w.u8(self.sub)
        w.str_(self.stream)
        w.u64(self.cen)
        w.u64(self.watermark)
        w.u64(self.tail_lsn)
        w.u32(len(self.entries))
        for e in self.entries:
            put_entry(w, e)
        w.u32(len(self.seals))
        for s in self.seals:
            put_seal(w, s)

    @classmethod
    def get(cls, r):
        sub = PushKind(r.u8())
        stream = r.str_()
        cen, wm, tail = r.u64(), r.u64(), r.u64()
        entries = [get_entry(r) for _ in range(r.u32())]
        seals = [get_seal(r) for _ in range(r.u32())]
        return cls(sub, stream, entries, seals, cen, wm, tail)

    def approx_size(self):
        n = 32
        for e in self.entries:
            n += 40 + sum(len(x[0]) + len(x[2]) + 9 for x in e.writes)
        return n + 32 * len(self.seals)


@dataclass
class LogPullRequest:
    stream: str          # "" = every stream the node holds
    from_lsn: int = 0
    from_cen: int = 0

    def put(self, w):
        w.str_(self.stream)
        w.u64(self.from_lsn)
        w.u64(self.from_cen)

    @classmethod
    def get(cls, r):
        return cls(r.str_(), r.u64(), r.u64())


@dataclass
class LogPullReply:
    stream: str
    entries: list = field(default_factory=list)
    seals: list = field(default_factory=list)
    more: bool = False
    error: str = ""
    # entries at or below base_lsn belong to epochs <= the requested from_cen
    base_lsn: int = 0

    def put(self, w):
        w.str_(self.stream)
        w.u8(self.more)
        w.str_(self.error)
        w.u64(self.base_lsn)
        w.u32(len(self.entries))
        for e in self.entries:
            put_entry(w, e)
        w.u32(len(self.seals))
        for s in self.seals:
            put_seal(w, s)

    @classmethod
    def get(cls, r):
        stream = r.str_()
        more = bool(r.u8())
        error = r.str_()
        base = r.u64()
        entries = [get_entry(r) for _ in range(r.u32())]
        seals = [get_seal(r) for _ in range(r.u32())]
        return cls(stream, entries, seals, more, error, base)

    approx_size = LogPushFrame.approx_size


class AdminKind(IntEnum):
    GET_EPOCH_STATUS = 1
    EPOCH_STATUS = 2
    TRIGGER_RESHARD = 3
    GET_METRICS = 4
    METRICS = 5
    CATCH_UP = 6
    SHARD_TRANSFER = 7
    STATUS_QUERY = 8
    GET_META = 9
    META = 10
    RESHARD_PLAN = 11
    STATUS = 12
    CATCH_UP_SHARD = 13


_BINARY_ADMIN = (AdminKind.CATCH_UP, AdminKind.SHARD_TRANSFER, AdminKind.CATCH_UP_SHARD)


@dataclass
class AdminFrame:
    """Typed admin frames. ``body`` is canonical bytes for CATCH_UP,
    CATCH_UP_SHARD and SHARD_TRANSFER, and a JSON object for everything else."""

    sub: AdminKind
    body: object = None

    def put(self, w):
        w.u8(self.sub)
        if self.sub in _BINARY_ADMIN:
            w.bytes_(self.body)
        else:
            w.bytes_(json.dumps(self.body, sort_keys=True).encode())

    @classmethod
    def get(cls, r):
        sub = AdminKind(r.u8())
        raw = r.bytes_()
        if sub in _BINARY_ADMIN:
            return cls(sub, raw)
        return cls(sub, json.loads(raw))

    def approx_size(self):
        return len(self.body) if isinstance(self.body, (bytes, bytearray)) else 64


@dataclass
class GetData:
    req_id: int
    engine: str
    keys: list

    def put(self, w):
        w.u32(self.req_id)
        w.str_(self.engine)
        w.u32(len(self.keys))
        for k in self.keys:
            w.bytes_(k)

    @classmethod
    def get(cls, r):
        req_id = r.u32()
        engine = r.str_()
        return cls(req_id, engine, [r.bytes_() for _ in range(r.u32())])


@dataclass
class DataReply:
    req_id: int
    # key -> StoredValue-like tuple (key, value, writer_csn, deleted) or None
    items: list = field(default_factory=list)

    def put(self, w):
        w.u32(self.req_id)
        w.u32(len(self.items))
        for key, sv in self.items:
            w.bytes_(key)
            if sv is None:
                w.u8(0)
            else:
                w.u8(1)
                w.bytes_(sv[1])
                w.csn(sv[2])
                w.u8(sv[3])

    @classmethod
    def get(cls, r):
        from .storage import StoredValue
        req_id = r.u32()
        items = []
        for _ in range(r.u32()):
            key = r.bytes_()
            if r.u8():
                value = r.bytes_()
                items.append((key, StoredValue(key, value, r.csn(), bool(r.u8()))))
            else:
                items.append((key, None))
        return cls(req_id, items)

    def approx_size(self):
        return 8 + sum(len(k) + (len(sv[1]) + 17 if sv else 1) for k, sv in self.items)


BODY_TYPES = {
    Kind.SUBMIT_TXN: SubmitTxn,
    Kind.DECISION_REPLY: DecisionReply,
    Kind.SUB_TXN_ROUTE: TxnBatch,
    Kind.WRITE_SET_PAYLOAD: TxnBatch,
    Kind.ABORT_SET_PAYLOAD: AbortSetPayload,
    Kind.TXN_BACKUP: TxnBackup,
    Kind.MEMBERSHIP_BEAT: MembershipBeat,
    Kind.LEADER_CLAIM: LeaderClaim,
    Kind.LOG_PUSH_FRAME: LogPushFrame,
    Kind.LOG_PULL_REQUEST: LogPullRequest,
    Kind.LOG_PULL_REPLY: LogPullReply,
    Kind.ADMIN_FRAME: AdminFrame,
    Kind.GET_DATA: GetData,
    Kind.DATA_REPLY: DataReply,
}


@dataclass
class Message:
    kind: Kind
    src: int
    dst: int
    body: object
    cen: int = 0
    shard: int = 0
    deliver_tick: int = 0
    seq: int = 0


def encode_body(kind: Kind, body) -> bytes:
    w = Writer()
    body.put(w)
    return w.getvalue()


def decode_body(kind: Kind, data) -> object:
    r = Reader(data)
    body = BODY_TYPES[kind].get(r)
    r.expect_end()
    return body


def body_size(body) -> int:
    f = getattr(body, "approx_size", None)
    return f() if f is not None else 16
