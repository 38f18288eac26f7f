"""Transactional proxy over a non-transactional KV store.

Reads go straight to storage and are cached with the version they saw;
writes are buffered. ``commit`` turns both caches into a ``TxnRequest``
and hands it to the CC service. Stale reads are allowed here and caught by
read validation.

Insert versus update: a key first observed absent becomes an INSERT, a key
observed present becomes an UPDATE, and ``put_new`` forces INSERT on a key
never read. A plain ``put`` on an unobserved key is an UPDATE.
"""

from __future__ import annotations

import itertools
import socketserver
import threading
from enum import Enum
from typing import Optional, Protocol

from .core import INITIAL, Decision, OpType, ReadRecord, TxnRequest, WriteRecord
from .errors import EpochCCError


class Backend(Protocol):
    def open_epoch(self) -> int: ...
    def get_data(self, key: bytes, engine: str): ...      # StoredValue | None
    def submit(self, request: TxnRequest) -> Decision: ...


class TxnState(Enum):
    ACTIVE = "active"
    SUBMITTED = "submitted"
    DONE = "done"


class TxnContext:
    def __init__(self, txn_id: str, begin_epoch: int, engine: str = "kv"):
        self.txn_id = txn_id
        self.begin_epoch = begin_epoch
        self.engine = engine
        self.reads: dict = {}        # key -> (value | None, version)
        self.writes: dict = {}       # key -> WriteRecord
        self.state = TxnState.ACTIVE
        self.decision: Optional[Decision] = None

    def _check(self):
        if self.state is not TxnState.ACTIVE:
            raise EpochCCError(f"transaction {self.txn_id} is {self.state.value}")

    def cached(self, key):
        """(hit, value) from the write cache, then the read cache."""
        w = self.writes.get(key)
        if w is not None:
            return True, None if w.op_type == OpType.DELETE else w.value
        if key in self.reads:
            return True, self.reads[key][0]
        return False, None

    def observe(self, key, stored) -> Optional[bytes]:
        """Record a storage read; tombstones read as absent with their stamp."""
        if stored is None:
            self.reads[key] = (None, INITIAL)
            return None
        value = None if stored.deleted else stored.value
        self.reads[key] = (value, stored.writer_csn)
        return value

    def _present(self, key) -> Optional[bool]:
        if key in self.reads:
            return self.reads[key][0] is not None
        return None

    def put(self, key: bytes, value: bytes):
        self._check()
        prev = self.writes.get(key)
        if prev is not None and prev.op_type == OpType.INSERT:
            op = OpType.INSERT
        elif prev is not None and prev.op_type == OpType.DELETE:
            op = OpType.UPDATE
        else:
            op = OpType.INSERT if self._present(key) is False else OpType.UPDATE
        self.writes[key] = WriteRecord(key, op, value)

    def put_new(self, key: bytes, value: bytes):
        self._check()
        self.writes[key] = WriteRecord(key, OpType.INSERT, value)

    def delete(self, key: bytes):
        self._check()
        prev = self.writes.get(key)
        if prev is not None and prev.op_type == OpType.INSERT:
            # insert then delete inside one txn: nothing to write
            del self.writes[key]
            return
        self.writes[key] = WriteRecord(key, OpType.DELETE)

    def rollback(self):
        self.reads.clear()
        self.writes.clear()
        self.state = TxnState.DONE

    def to_request(self, group=None) -> TxnRequest:
        reads = tuple(ReadRecord(k, v) for k, (_, v) in sorted(self.reads.items()))
        writes = tuple(self.writes[k] for k in sorted(self.writes))
        return TxnRequest(self.txn_id, reads, writes, group, self.begin_epoch, self.engine)


class KVProxy:
    """Embeddable Start/Get/Put/Rollback/Commit API over a ``Backend``."""

    def __init__(self, backend: Backend, name: str = "proxy"):
        self.backend = backend
        self.name = name
        self._ids = itertools.count(1)

    def begin(self, engine: str = "kv") -> TxnContext:
        return TxnContext(f"{self.name}-{next(self._ids)}", self.backend.open_epoch(), engine)

    def get(self, ctx: TxnContext, key: bytes) -> Optional[bytes]:
        ctx._check()
        hit, value = ctx.cached(key)
        if hit:
            return value
        return ctx.observe(key, self.backend.get_data(key, ctx.engine))

    def put(self, ctx: TxnContext, key: bytes, value: bytes):
        ctx.put(key, value)

    def put_new(self, ctx: TxnContext, key: bytes, value: bytes):
        ctx.put_new(key, value)

    def delete(self, ctx: TxnContext, key: bytes):
        ctx.delete(key)

    def rollback(self, ctx: TxnContext):
        ctx.rollback()

    def commit(self, ctx: TxnContext, group=None) -> Decision:
        ctx._check()
        ctx.state = TxnState.SUBMITTED
        decision = self.backend.submit(ctx.to_request(group))
        ctx.decision = decision
        ctx.state = TxnState.DONE
        return decision


# -- line protocol ----------------------------------------------------------------
#
#   BEGIN [engine]          -> OK <txn> <epoch>
#   GET <txn> <key>         -> VALUE <value> | NONE
#   PUT <txn> <key> <value> -> OK
#   PUTNEW <txn> <key> <v>  -> OK
#   DEL <txn> <key>         -> OK
#   COMMIT <txn>            -> COMMITTED | ABORTED <reason>
#   ROLLBACK <txn>          -> OK
#
# Keys and values are single whitespace-free tokens, UTF-8 encoded.


class LineSession:
    def __init__(self, proxy: KVProxy, lock: threading.Lock):
        self.proxy = proxy
        self.lock = lock
        self.txns: dict = {}

    def handle(self, line: str) -> str:
        tok = line.split()
        if not tok:
            return "ERR empty"
        cmd, args = tok[0].upper(), tok[1:]
        try:
            if cmd == "BEGIN":
                with self.lock:
                    ctx = self.proxy.begin(args[0] if args else "kv")
                self.txns[ctx.txn_id] = ctx
                return f"OK {ctx.txn_id} {ctx.begin_epoch}"
            ctx = self.txns.get(args[0]) if args else None
            if ctx is None:
                return "ERR unknown txn"
            if cmd == "GET":
                with self.lock:
                    v = self.proxy.get(ctx, args[1].encode())
                return "NONE" if v is None else f"VALUE {v.decode()}"
            if cmd in ("PUT", "PUTNEW"):
                fn = self.proxy.put if cmd == "PUT" else self.proxy.put_new
                fn(ctx, args[1].encode(), args[2].encode())
                return "OK"
            if cmd == "DEL":
                self.proxy.delete(ctx, args[1].encode())
                return "OK"
            if cmd == "ROLLBACK":
                self.proxy.rollback(ctx)
                del self.txns[args[0]]
                return "OK"
            if cmd == "COMMIT":
                with self.lock:
                    d = self.proxy.commit(ctx)
                del self.txns[args[0]]
                return "COMMITTED" if d.committed else f"ABORTED {d.reason.name}"
        except IndexError:
            return "ERR missing argument"
        except EpochCCError as exc:
            return f"ERR {type(exc).__name__} {exc}"
        return f"ERR unknown command {cmd}"


def serve_lines(proxy: KVProxy, host: str = "127.0.0.1", port: int = 0):
    """Start a threaded line-protocol server; returns it (``server_address`` has the port)."""
    lock = threading.Lock()

    class Handler(socketserver.StreamRequestHandler):
        def handle(self):
            session = LineSession(proxy, lock)
            for raw in self.rfile:
                line = raw.decode("utf-8", "replace").strip()
                if line.upper() == "QUIT":
                    break
                self.wfile.write((session.handle(line) + "\n").encode())
                self.wfile.flush()

    server = socketserver.ThreadingTCPServer((host, port), Handler)
    server.daemon_threads = True
    threading.Thread(target=server.serve_forever, daemon=True).start()
    return server
