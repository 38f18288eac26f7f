"""Canonical binary encoding shared by the wire and the commit log.

Little-endian fixed-width integers, byte strings prefixed by a u32 length,
enums as u8, optional values behind a u8 presence flag. Byte layouts are
listed in docs/formats.md.
"""

from __future__ import annotations

import struct

from .core import (
    AbortReason, Csn, Decision, GroupRef, OpType, ReadRecord, TaggedTxn,
    TxnRequest, Verdict, WriteRecord,
)
from .errors import CodecError

_U8 = struct.Struct("<B")
_U16 = struct.Struct("<H")
_U32 = struct.Struct("<I")
_U64 = struct.Struct("<Q")
_CSN = struct.Struct("<QI")


class Writer:
    __slots__ = ("buf",)

    def __init__(self):
        self.buf = bytearray()

    def u8(self, v):
        self.buf += _U8.pack(v)

    def u16(self, v):
        self.buf += _U16.pack(v)

    def u32(self, v):
        self.buf += _U32.pack(v)

    def u64(self, v):
        self.buf += _U64.pack(v)

    def bytes_(self, b):
        self.buf += _U32.pack(len(b))
        self.buf += b

    def str_(self, s):
        self.bytes_(s.encode())

    def csn(self, c):
        self.buf += _CSN.pack(c[0], c[1])

    def getvalue(self) -> bytes:
        return bytes(self.buf)


class Reader:
    __slots__ = ("data", "pos")

    def __init__(self, data, pos=0):
        self.data = memoryview(data)
        self.pos = pos

    def _take(self, s):
        end = self.pos + s.size
        if end > len(self.data):
            raise CodecError("truncated input")
        v = s.unpack_from(self.data, self.pos)
        self.pos = end
        return v

    def u8(self):
        return self._take(_U8)[0]

    def u16(self):
        return self._take(_U16)[0]

    def u32(self):
        return self._take(_U32)[0]

    def u64(self):
        return self._take(_U64)[0]

    def bytes_(self):
        n = self.u32()
        end = self.pos + n
        if end > len(self.data):
            raise CodecError("truncated byte string")
        b = bytes(self.data[self.pos:end])
        self.pos = end
        return b

    def str_(self):
        return self.bytes_().decode()

    def csn(self):
        return Csn(*self._take(_CSN))

    def done(self):
        return self.pos >= len(self.data)

    def expect_end(self):
        if self.pos != len(self.data):
            raise CodecError(f"{len(self.data) - self.pos} trailing bytes")


def _enum(cls, v):
    try:
        return cls(v)
    except ValueError:
        raise CodecError(f"bad {cls.__name__} value {v}") from None


def put_write(w: Writer, rec: WriteRecord):
    w.bytes_(rec.key)
    w.u8(rec.op_type)
    w.bytes_(rec.value)


def get_write(r: Reader) -> WriteRecord:
    key = r.bytes_()
    op = _enum(OpType, r.u8())
    return WriteRecord(key, op, r.bytes_())


def put_writes(w: Writer, recs):
    w.u32(len(recs))
    for rec in recs:
        put_write(w, rec)


def get_writes(r: Reader) -> tuple:
    return tuple(get_write(r) for _ in range(r.u32()))


def put_read(w: Writer, rec: ReadRecord):
    w.bytes_(rec.key)
    w.csn(rec.read_version)


def get_read(r: Reader) -> ReadRecord:
    return ReadRecord(r.bytes_(), r.csn())


def put_request(w: Writer, req: TxnRequest):
    w.str_(req.txn_id)
    w.u32(len(req.read_set))
    for rec in req.read_set:
        put_read(w, rec)
    put_writes(w, req.write_set)
    if req.group is None:
        w.u8(0)
    else:
        w.u8(1)
        w.str_(req.group.group_id)
        w.u32(req.group.expected)
    w.u64(req.begin_epoch)
    w.str_(req.engine)


def get_request(r: Reader) -> TxnRequest:
    txn_id = r.str_()
    reads = tuple(get_read(r) for _ in range(r.u32()))
    writes = get_writes(r)
    group = None
    if r.u8():
        group = GroupRef(r.str_(), r.u32())
    begin = r.u64()
    return TxnRequest(txn_id, reads, writes, group, begin, r.str_())


def put_tagged(w: Writer, t: TaggedTxn):
    put_request(w, t.request)
    w.csn(t.csn)
    w.u64(t.cen)
    w.u32(t.origin)


def get_tagged(r: Reader) -> TaggedTxn:
    req = get_request(r)
    csn = r.csn()
    cen = r.u64()
    return TaggedTxn(req, csn, cen, r.u32())


def put_decision(w: Writer, d: Decision):
    w.csn(d.csn)
    w.u8(d.verdict)
    w.u8(0 if d.reason is None else d.reason)


def get_decision(r: Reader) -> Decision:
    csn = r.csn()
    verdict = _enum(Verdict, r.u8())
    reason = r.u8()
    return Decision(csn, verdict, None if reason == 0 else _enum(AbortReason, reason))


def _one(put, get):
    def encode(obj) -> bytes:
        w = Writer()
        put(w, obj)
        return w.getvalue()

    def decode(data):
        r = Reader(data)
        obj = get(r)
        r.expect_end()
        return obj
    return encode, decode


encode_write, decode_write = _one(put_write, get_write)
encode_read, decode_read = _one(put_read, get_read)
encode_request, decode_request = _one(put_request, get_request)
encode_tagged, decode_tagged = _one(put_tagged, get_tagged)
encode_decision, decode_decision = _one(put_decision, get_decision)
encode_csn, decode_csn = _one(Writer.csn, Reader.csn)
