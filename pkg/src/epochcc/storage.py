"""Version-stamped in-memory storage engines with an epoch-ordered log applier."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import NamedTuple, Optional

from .codec import Writer
from .core import INITIAL, Csn, OpType
from .durability import LogAdaptor, LogEntry, SealRecord
from .errors import EpochGateViolation, LsnGap


class StoredValue(NamedTuple):
    key: bytes
    value: bytes
    writer_csn: Csn
    deleted: bool = False


class KVEngine:
    """Plain key -> value engine."""

    engine_id = "kv"

    def __init__(self, base=None):
        self.data: dict = {}
        self.adaptor = LogAdaptor()
        for k, v in (base or {}).items():
            self.data[k] = StoredValue(k, v, INITIAL)

    def get(self, key) -> Optional[StoredValue]:
        return self.data.get(key)

    def put(self, key, value, csn):
        if value is None:
            self.data[key] = StoredValue(key, b"", csn, True)
        else:
            self.data[key] = StoredValue(key, value, csn)

    def items(self):
        return ((k, self.data[k]) for k in sorted(self.data))


class TableAdaptor(LogAdaptor):
    engine_id = "table"

    def convert(self, entry: LogEntry) -> list:
        out = []
        for w in entry.writes:
            table, _, pk = w.key.partition(b":")
            out.append(((table, pk), None if w.op_type == OpType.DELETE else w.value))
        return out


class TableEngine(KVEngine):
    """Rows addressed by ``table:pk`` keys, stored under (table, pk)."""

    engine_id = "table"

    def __init__(self, base=None):
        self.data = {}
        self.adaptor = TableAdaptor()
        for k, v in (base or {}).items():
            self.data[self._row(k)] = StoredValue(k, v, INITIAL)

    @staticmethod
    def _row(key):
        table, _, pk = key.partition(b":")
        return (table, pk)

    def get(self, key):
        return self.data.get(self._row(key))

    def put(self, row, value, csn):
        key = b":".join(row)
        if value is None:
            self.data[row] = StoredValue(key, b"", csn, True)
        else:
            self.data[row] = StoredValue(key, value, csn)


ENGINES = {"kv": KVEngine, "table": TableEngine}


@dataclass
class _EpochBuffer:
    entries: dict = field(default_factory=dict)   # csn -> LogEntry
    seals: dict = field(default_factory=dict)     # stream -> SealRecord


class _StreamState:
    __slots__ = ("contiguous", "ahead", "last_seal")

    def __init__(self):
        self.contiguous = 0
        self.ahead: set = set()
        self.last_seal = 0

    def saw(self, lsn):
        if lsn <= self.contiguous:
            return
        self.ahead.add(lsn)
        while self.contiguous + 1 in self.ahead:
            self.contiguous += 1
            self.ahead.discard(self.contiguous)


class MemStorage:
    """One storage node: engines plus the epoch gate.

    Entries arrive from many streams in any order. An epoch is applied only
    after every member origin of that epoch is covered by a seal whose LSN
    prefix has fully arrived; epochs apply strictly in CEN order and, within
    an epoch, in CSN order.
    """

    def __init__(self, base=None, engines=("kv",), epoch_atomic: bool = False):
        base = base or {}
        self.engines = {tag: ENGINES[tag](base.get(tag)) for tag in engines}
        self.watermark = 0
        self.epoch_atomic = epoch_atomic
        self.streams: dict = {}
        self.applied_lsn: dict = {}
        self.pending: dict = {}
        self.last_members: tuple = ()

    # -- reads -------------------------------------------------------------

    def get_data(self, key, engine: str = "kv") -> Optional[StoredValue]:
        """Latest applied version; a deleted key returns a tombstone stamp."""
        return self.engines[engine].get(key)

    def get_meta(self) -> dict:
        return {
            "engines": sorted(self.engines),
            "watermark": self.watermark,
            "applied_lsn": dict(sorted(self.applied_lsn.items())),
        }

    # -- strict single-entry application -------------------------------------

    def apply_log(self, entry: LogEntry) -> bool:
        """Apply one entry immediately; returns False for an already-applied LSN."""
        if entry.cen > self.watermark + 1:
            raise EpochGateViolation(f"entry cen {entry.cen} beyond watermark {self.watermark}")
        last = self.applied_lsn.get(entry.stream, 0)
        if entry.lsn <= last:
            return False
        if entry.lsn != last + 1:
            raise LsnGap(f"{entry.stream}: expected lsn {last + 1}, got {entry.lsn}")
        self._apply_entry(entry)
        self.applied_lsn[entry.stream] = entry.lsn
        return True

    def _apply_entry(self, entry: LogEntry):
        engine = self.engines[entry.engine_tag]
        for key, value in engine.adaptor.convert(entry):
            engine.put(key, value, entry.csn)

    def writes_of(self, entry: LogEntry):
        """Per-record mutations, for row-granularity stepping."""
        engine = self.engines[entry.engine_tag]
        return [(engine, key, value, entry.csn) for key, value in engine.adaptor.convert(entry)]

    # -- buffered, gated application ----------------------------------------

    def _stream(self, name) -> _StreamState:
        s = self.streams.get(name)
        if s is None:
            s = self.streams[name] = _StreamState()
        return s

    def offer(self, entry: LogEntry) -> None:
        self._stream(entry.stream).saw(entry.lsn)
        if entry.cen <= self.watermark:
            return
        buf = self.pending.setdefault(entry.cen, _EpochBuffer())
        buf.entries.setdefault(entry.csn, entry)

    def offer_seal(self, seal: SealRecord) -> None:
        st = self._stream(seal.stream)
        st.last_seal = max(st.last_seal, seal.cen)
        if seal.cen <= self.watermark:
            return
        self.pending.setdefault(seal.cen, _EpochBuffer()).seals[seal.stream] = seal

    def missing(self, cen: int) -> tuple:
        """(uncovered member ids, streams with LSN gaps) blocking epoch *cen*."""
        buf = self.pending.get(cen)
        if buf is None or not buf.seals:
            return tuple(self.last_members), ()
        members = set()
        covered = set()
        gaps = []
        for seal in buf.seals.values():
            members.update(seal.members)
            if self._stream(seal.stream).contiguous >= seal.last_lsn:
                covered.update(seal.covers)
            else:
                gaps.append(seal.stream)
        return tuple(sorted(members - covered)), tuple(sorted(gaps))

    def ready(self) -> Optional[int]:
        cen = self.watermark + 1
        buf = self.pending.get(cen)
        if buf is None or not buf.seals:
            return None
        uncovered, _ = self.missing(cen)
        return None if uncovered else cen

    def take_epoch(self, cen: int) -> list:
        """Remove a ready epoch's entries from the buffer, in CSN order."""
        buf = self.pending.pop(cen)
        members = set()
        for seal in buf.seals.values():
            members.update(seal.members)
        self.last_members = tuple(sorted(members))
        return [buf.entries[c] for c in sorted(buf.entries)]

    def finish_epoch(self, cen: int, entries) -> None:
        for e in entries:
            if e.lsn > self.applied_lsn.get(e.stream, 0):
                self.applied_lsn[e.stream] = e.lsn
        self.watermark = cen

    def drain(self) -> list:
        """Apply every ready epoch at once; returns the CENs applied."""
        done = []
        while (cen := self.ready()) is not None:
            entries = self.take_epoch(cen)
            for e in entries:
                self._apply_entry(e)
            self.finish_epoch(cen, entries)
            done.append(cen)
        return done

    # -- comparison ----------------------------------------------------------

    def state_bytes(self) -> bytes:
        w = Writer()
        for tag in sorted(self.engines):
            eng = self.engines[tag]
            w.str_(tag)
            w.u32(len(eng.data))
            for _, sv in eng.items():
                w.bytes_(sv.key)
                w.bytes_(sv.value)
                w.csn(sv.writer_csn)
                w.u8(sv.deleted)
        return w.getvalue()

    def snapshot(self) -> dict:
        """{(engine, key): StoredValue} for oracle comparison."""
        out = {}
        for tag, eng in self.engines.items():
            for sv in eng.data.values():
                out[(tag, sv.key)] = sv
        return out
