"""Epoch-ordered commit log with CRC-checked segment files.

A node owns one or more *streams* (its own, plus one per failed peer it
covers). Each stream is a directory of segment files::

    segment := header record*
    header  := magic "ECCL" | u16 version | u32 node_id | u64 first_lsn | str stream
    record  := u32 body_len | u8 type | body | u32 crc32(type | body)

``type`` 1 is a LogEntry, ``type`` 2 an epoch seal. A torn or CRC-failing
tail is truncated when the stream is reopened.
"""

from __future__ import annotations

import os
import struct
import zlib
from dataclasses import dataclass, field
from typing import Iterable, Optional

from .codec import Reader, Writer, get_writes, put_writes
from .core import OpType
from .errors import CodecError, LsnAhead

MAGIC = b"ECCL"
FORMAT_VERSION = 1
REC_ENTRY = 1
REC_SEAL = 2
SEGMENT_BYTES = 1 << 20

_HDR = struct.Struct("<IB")
_CRC = struct.Struct("<I")


@dataclass(frozen=True)
class LogEntry:
    lsn: int
    cen: int
    csn: tuple
    writes: tuple
    engine_tag: str = "kv"
    stream: str = ""
    crc: int = 0

    def body(self) -> bytes:
        w = Writer()
        w.str_(self.stream)
        w.u64(self.lsn)
        w.u64(self.cen)
        w.csn(self.csn)
        put_writes(w, self.writes)
        w.str_(self.engine_tag)
        return w.getvalue()

    @classmethod
    def make(cls, lsn, cen, csn, writes, engine_tag="kv", stream=""):
        e = cls(lsn, cen, csn, tuple(writes), engine_tag, stream)
        return cls(lsn, cen, csn, e.writes, engine_tag, stream, zlib.crc32(e.body()))

    def verify(self) -> bool:
        return zlib.crc32(self.body()) == self.crc


@dataclass(frozen=True)
class SealRecord:
    """Marks the end of one epoch in a stream.

    *covers* lists the origin nodes whose committed transactions of *cen* are
    complete in this stream; *members* is the epoch's expected origin set.
    """

    stream: str
    cen: int
    last_lsn: int
    covers: tuple
    members: tuple


def put_entry(w: Writer, e: LogEntry):
    w.buf += e.body()
    w.u32(e.crc)


def get_entry(r: Reader) -> LogEntry:
    stream = r.str_()
    lsn = r.u64()
    cen = r.u64()
    csn = r.csn()
    writes = get_writes(r)
    tag = r.str_()
    e = LogEntry(lsn, cen, csn, writes, tag, stream, r.u32())
    if not e.verify():
        raise CodecError(f"log entry {lsn} crc mismatch")
    return e


def put_seal(w: Writer, s: SealRecord):
    w.str_(s.stream)
    w.u64(s.cen)
    w.u64(s.last_lsn)
    w.u32(len(s.covers))
    for n in s.covers:
        w.u32(n)
    w.u32(len(s.members))
    for n in s.members:
        w.u32(n)


def get_seal(r: Reader) -> SealRecord:
    stream = r.str_()
    cen = r.u64()
    last = r.u64()
    covers = tuple(r.u32() for _ in range(r.u32()))
    members = tuple(r.u32() for _ in range(r.u32()))
    return SealRecord(stream, cen, last, covers, members)


def _frame(rtype: int, body: bytes) -> bytes:
    head = _HDR.pack(len(body), rtype)
    return head + body + _CRC.pack(zlib.crc32(head[4:] + body))


class LogStream:
    """One append-only stream of entries and seals.

    All records are also kept in memory; LogPull is served from there.
    """

    def __init__(self, directory: str, stream: str, node_id: int, fsync: bool = True,
                 segment_bytes: int = SEGMENT_BYTES):
        self.dir = directory
        self.stream = stream
        self.node_id = node_id
        self.fsync = fsync
        self.segment_bytes = segment_bytes
        self.entries: list = []
        self.seals: list = []
        self._fh = None
        self._seg_size = 0
        os.makedirs(directory, exist_ok=True)
        self._recover()

    @property
    def tail_lsn(self) -> int:
        return self.entries[-1].lsn if self.entries else 0

    @property
    def sealed_cen(self) -> int:
        return self.seals[-1].cen if self.seals else 0

    def _segments(self):
        return sorted(f for f in os.listdir(self.dir) if f.endswith(".seg"))

    def _recover(self):
        for name in self._segments():
            path = os.path.join(self.dir, name)
            with open(path, "rb") as fh:
                data = fh.read()
            good = self._scan(data)
            if good < len(data):
                with open(path, "r+b") as fh:
                    fh.truncate(good)

    def _scan(self, data: bytes) -> int:
        """Load records from one segment; return the length of the valid prefix."""
        r = Reader(data)
        try:
            if r._take(struct.Struct("<4s"))[0] != MAGIC:
                return 0
            if r.u16() != FORMAT_VERSION:
                raise CodecError("unsupported log format version")
            r.u32()
            r.u64()
            r.str_()
        except CodecError:
            return 0
        pos = r.pos
        while pos + _HDR.size <= len(data):
            n, rtype = _HDR.unpack_from(data, pos)
            end = pos + _HDR.size + n + _CRC.size
            if end > len(data):
                break
            body = data[pos + _HDR.size:pos + _HDR.size + n]
            (crc,) = _CRC.unpack_from(data, end - _CRC.size)
            if crc != zlib.crc32(bytes([rtype]) + body):
                break
            try:
                if rtype == REC_ENTRY:
                    self.entries.append(get_entry(Reader(body)))
                elif rtype == REC_SEAL:
                    self.seals.append(get_seal(Reader(body)))
                else:
                    break
            except CodecError:
                break
            pos = end
        return pos

    def _open_segment(self, first_lsn: int):
        if self._fh is not None:
            self._fh.close()
        path = os.path.join(self.dir, f"{first_lsn:020d}-{len(self._segments()):06d}.seg")
        self._fh = open(path, "ab")
        w = Writer()
        w.buf += MAGIC
        w.u16(FORMAT_VERSION)
        w.u32(self.node_id)
        w.u64(first_lsn)
        w.str_(self.stream)
        self._fh.write(w.getvalue())
        self._seg_size = len(w.buf)

    def _write(self, blobs):
        if self._fh is None or self._seg_size >= self.segment_bytes:
            self._open_segment(self.tail_lsn + 1)
        for b in blobs:
            self._fh.write(b)
            self._seg_size += len(b)
        self._fh.flush()
        if self.fsync:
            os.fsync(self._fh.fileno())

    def append_epoch(self, cen: int, committed: Iterable, covers, members) -> tuple:
        """Append one epoch's committed transactions and its seal, durably.

        *committed* yields (csn, writes, engine_tag) in CSN order. Returns the
        (first, last) LSN range written (first > last when nothing was).
        """
        first = self.tail_lsn + 1
        lsn = self.tail_lsn
        blobs = []
        for csn, writes, tag in committed:
            lsn += 1
            e = LogEntry.make(lsn, cen, csn, writes, tag, self.stream)
            self.entries.append(e)
            w = Writer()
            put_entry(w, e)
            blobs.append(_frame(REC_ENTRY, w.getvalue()))
        seal = SealRecord(self.stream, cen, lsn, tuple(sorted(covers)), tuple(sorted(members)))
        self.seals.append(seal)
        w = Writer()
        put_seal(w, seal)
        blobs.append(_frame(REC_SEAL, w.getvalue()))
        self._write(blobs)
        return first, lsn

    def epoch_records(self, cen: int):
        """Entries and seal for one epoch (seal None if not sealed here)."""
        entries = [e for e in self.entries if e.cen == cen]
        seal = next((s for s in reversed(self.seals) if s.cen == cen), None)
        return entries, seal

    def pull(self, from_lsn: int, from_cen: int = 0, limit: Optional[int] = None):
        """Entries with lsn > from_lsn and seals with cen > from_cen."""
        if from_lsn > self.tail_lsn:
            raise LsnAhead(f"{self.stream}: requested {from_lsn}, tail {self.tail_lsn}")
        entries = self.entries[from_lsn:] if _dense(self.entries) else [
            e for e in self.entries if e.lsn > from_lsn]
        seals = [s for s in self.seals if s.cen > from_cen]
        if limit is not None and len(seals) > limit:
            seals = seals[:limit]
            top = seals[-1].last_lsn
            entries = [e for e in entries if e.lsn <= top]
        return entries, seals

    def close(self):
        if self._fh is not None:
            self._fh.close()
            self._fh = None


def _dense(entries) -> bool:
    return not entries or entries[-1].lsn == len(entries)


@dataclass
class CommitLog:
    """All streams owned by one CC node, under one directory."""

    directory: str
    node_id: int
    fsync: bool = True
    streams: dict = field(default_factory=dict)

    def __post_init__(self):
        os.makedirs(self.directory, exist_ok=True)
        for name in sorted(os.listdir(self.directory)):
            if os.path.isdir(os.path.join(self.directory, name)):
                self.stream(name)

    def stream(self, name: str) -> LogStream:
        s = self.streams.get(name)
        if s is None:
            s = LogStream(os.path.join(self.directory, name), name, self.node_id, self.fsync)
            self.streams[name] = s
        return s

    def close(self):
        for s in self.streams.values():
            s.close()


class LogAdaptor:
    """Turns log entries into engine-native mutations.

    Subclasses override ``convert``; ``apply`` must stay deterministic and
    idempotent per csn so that replaying a suffix is harmless.
    """

    engine_id = "kv"

    def convert(self, entry: LogEntry) -> list:
        return [(w.key, None if w.op_type == OpType.DELETE else w.value) for w in entry.writes]
