"""Storage, client and probe actors driven by the simulation loop.

Each actor exposes ``step(now, msgs)`` and ``next_wakeup()``; the loop wakes
an actor when a message is due or its wakeup tick arrives.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Optional

from .core import GroupRef
from .errors import Unreachable
from .messages import (
    AdminFrame, AdminKind, DataReply, GetData, Kind, LogPullRequest, LogPushFrame, PushKind,
    ReplyStatus, SubmitTxn,
)
from .oracle import HistTxn
from .proxy import TxnContext
from .storage import MemStorage


@dataclass
class StorageConfig:
    rows_per_tick: int = 0       # rows applied per apply step; 0 = whole epochs
    apply_every: int = 1         # ticks between apply steps
    epoch_atomic: bool = False
    stall_ticks: int = 40        # no progress for this long with a gap -> LogPull


class StorageActor:
    """A MemStorage node with stepped, row-granularity application."""

    def __init__(self, sid: int, cc_nodes, base: dict, engines, net,
                 cfg: Optional[StorageConfig] = None, recovering: bool = False):
        self.id = sid
        self.cc_nodes = tuple(cc_nodes)
        self.net = net
        self.cfg = cfg or StorageConfig()
        self.store = MemStorage(base, engines, self.cfg.epoch_atomic)
        self.now = 0
        self.rows: list = []             # pending (engine, key, value, csn) of the current epoch
        self.current = None              # (cen, entries)
        self.next_apply = 0
        self.first_apply: dict = {}      # csn -> tick
        self.announced: dict = {}        # stream -> tail lsn
        self.progress_tick = 0
        self.last_pull = -10**9
        self.recovering = recovering
        self.pulls = 0

    def _send(self, dst, kind, body, cen=0):
        try:
            self.net.send(self.id, dst, kind, body, cen)
        except Unreachable:
            pass

    # -- messages ---------------------------------------------------------------

    def step(self, now, msgs):
        self.now = now
        if self.recovering:
            self.recovering = False
            self._pull(0)
        for m in msgs:
            k = m.kind
            if k == Kind.LOG_PUSH_FRAME:
                self._on_push(m)
            elif k == Kind.LOG_PULL_REPLY:
                self._on_pull_reply(m)
        self._apply()
        for m in msgs:
            if m.kind == Kind.GET_DATA:
                self._on_get(m)
            elif m.kind == Kind.ADMIN_FRAME and m.body.sub == AdminKind.GET_META:
                self._send(m.src, Kind.ADMIN_FRAME, AdminFrame(AdminKind.META,
                                                               self.store.get_meta()))
        self._check_stall()

    def _on_push(self, m):
        b = m.body
        if b.sub == PushKind.ANNOUNCE:
            self.announced[b.stream] = max(self.announced.get(b.stream, 0), b.tail_lsn)
            return
        if b.sub != PushKind.FRAME:
            return
        for e in b.entries:
            self.store.offer(e)
        for s in b.seals:
            if s is not None:
                self.store.offer_seal(s)
        self._send(m.src, Kind.LOG_PUSH_FRAME,
                   LogPushFrame(PushKind.ACK, b.stream, cen=b.cen,
                                watermark=self.store.watermark), b.cen)

    def _on_pull_reply(self, m):
        b = m.body
        if b.error:
            return
        st = self.store._stream(b.stream)
        if b.base_lsn > st.contiguous:
            st.contiguous = b.base_lsn
            st.ahead = {x for x in st.ahead if x > b.base_lsn}
            st.saw(b.base_lsn)
        for e in b.entries:
            self.store.offer(e)
        for s in b.seals:
            self.store.offer_seal(s)
        if b.more:
            last_lsn = b.entries[-1].lsn if b.entries else b.base_lsn
            top = b.seals[-1].cen if b.seals else 0
            self._send(m.src, Kind.LOG_PULL_REQUEST, LogPullRequest(b.stream, last_lsn, top))

    def _on_get(self, m):
        b = m.body
        items = [(k, self.store.get_data(k, b.engine)) for k in b.keys]
        self._send(m.src, Kind.DATA_REPLY, DataReply(b.req_id, items))

    # -- application ----------------------------------------------------------------

    def _apply(self):
        if self.now < self.next_apply:
            return
        budget = self.cfg.rows_per_tick or math.inf
        applied_any = False
        while True:
            if self.current is None:
                cen = self.store.ready()
                if cen is None:
                    break
                entries = self.store.take_epoch(cen)
                self.current = (cen, entries)
                self.rows = [w for e in entries for w in self.store.writes_of(e)]
                self.rows.reverse()
            if self.cfg.epoch_atomic:
                n = len(self.rows)
            else:
                n = int(min(budget, len(self.rows)))
            for _ in range(n):
                engine, key, value, csn = self.rows.pop()
                engine.put(key, value, csn)
                self.first_apply.setdefault(csn, self.now)
            budget -= n
            applied_any = applied_any or n > 0
            if self.rows:
                break
            cen, entries = self.current
            for e in entries:
                self.first_apply.setdefault(e.csn, self.now)
            self.store.finish_epoch(cen, entries)
            self.current = None
            self.progress_tick = self.now
            applied_any = True
            for n_id in self.cc_nodes:
                self._send(n_id, Kind.LOG_PUSH_FRAME,
                           LogPushFrame(PushKind.ACK, "", cen=cen, watermark=cen), cen)
            if budget <= 0:
                break
        if applied_any:
            self.next_apply = self.now + self.cfg.apply_every

    def busy(self) -> bool:
        return self.current is not None or self.store.ready() is not None

    # -- gap repair ------------------------------------------------------------------

    def _stalled(self) -> bool:
        wm = self.store.watermark
        if any(c > wm + 1 for c in self.store.pending):
            return True
        for name, tail in self.announced.items():
            if tail > self.store._stream(name).contiguous:
                return True
        return False

    def _check_stall(self):
        if self.busy():
            self.progress_tick = self.now
            return
        if self.now - self.progress_tick < self.cfg.stall_ticks:
            return
        if self.now - self.last_pull < self.cfg.stall_ticks:
            return
        if self._stalled():
            self._pull(self.store.watermark)

    def _pull(self, from_cen):
        self.last_pull = self.now
        self.pulls += 1
        for n in self.cc_nodes:
            self._send(n, Kind.LOG_PULL_REQUEST, LogPullRequest("*", 0, from_cen))

    def next_wakeup(self):
        t = [self.now + self.cfg.stall_ticks]
        if self.busy():
            t.append(max(self.next_apply, self.now + 1))
        return min(t)


@dataclass
class ClientConfig:
    exec_per_op: float = 0.5     # ticks of local execution per operation
    timeout: int = 150           # ticks before resubmitting elsewhere
    overload_backoff: int = 5
    read_retry: int = 20


class _Pending:
    __slots__ = ("plan", "members", "start", "cc", "sent_at", "decisions", "phase",
                 "read_reqs", "ready_at", "attempts")

    def __init__(self, plan, start):
        self.plan = plan
        self.members = []            # (ctx, request)
        self.start = start
        self.cc = None
        self.sent_at = 0
        self.decisions = {}
        self.phase = "read"
        self.read_reqs = {}
        self.ready_at = 0
        self.attempts = 0


class ClientActor:
    """Closed-loop executor: read batch, execute locally, submit, wait."""

    def __init__(self, cid: int, cc_nodes, home_cc: int, storage_nodes, home_storage: int,
                 source, net, cfg: Optional[ClientConfig] = None):
        self.id = cid
        self.cc_nodes = tuple(cc_nodes)
        self.cc = home_cc
        self.storage_nodes = tuple(storage_nodes)
        self.storage = home_storage
        self.source = source          # callable -> TxnPlan | None
        self.net = net
        self.cfg = cfg or ClientConfig()
        self.now = 0
        self.cur: Optional[_Pending] = None
        self.seq = 0
        self.req_ids = 0
        self.history: list = []       # HistTxn
        self.latencies: list = []     # (decision tick, latency, committed)
        self.received: dict = {}      # txn_id -> [Decision]
        self.done = False

    def _send(self, dst, kind, body) -> bool:
        try:
            self.net.send(self.id, dst, kind, body)
            return True
        except Unreachable:
            return False

    def _next_cc(self):
        i = self.cc_nodes.index(self.cc)
        self.cc = self.cc_nodes[(i + 1) % len(self.cc_nodes)]

    def step(self, now, msgs):
        self.now = now
        for m in msgs:
            if m.kind == Kind.DATA_REPLY:
                self._on_data(m.body)
            elif m.kind == Kind.DECISION_REPLY:
                self._on_decision(m.body)
        p = self.cur
        if p is None:
            if not self.done:
                self._begin()
            return
        if p.phase == "read" and now >= p.ready_at and now - p.sent_at >= self.cfg.read_retry:
            self._send_reads(p)
        elif p.phase == "exec" and now >= p.ready_at:
            self._submit(p)
        elif p.phase == "backoff" and now >= p.ready_at:
            self._next_cc()
            self._submit(p, resubmit=True)
        elif p.phase == "wait" and now - p.sent_at >= self.cfg.timeout:
            self._next_cc()
            self._submit(p, resubmit=True)

    def _begin(self):
        plan = self.source()
        if plan is None:
            self.done = True
            return
        self.seq += 1
        p = self.cur = _Pending(plan, self.now)
        engines = sorted({op.engine for op in plan.ops})
        base = f"c{self.id}-{self.seq}"
        for eng in engines:
            tid = base if len(engines) == 1 else f"{base}:{eng}"
            p.members.append(TxnContext(tid, 0, eng))
        self._send_reads(p)

    def _ctx(self, p, engine):
        for c in p.members:
            if c.engine == engine:
                return c
        raise KeyError(engine)

    def _send_reads(self, p):
        p.sent_at = self.now
        p.read_reqs = {}
        keys: dict = {}
        for op in p.plan.ops:
            if op.kind in ("read", "rmw", "new_order"):
                keys.setdefault(op.engine, [])
                if op.key not in keys[op.engine]:
                    keys[op.engine].append(op.key)
        if not keys:
            self._exec(p)
            return
        for eng in sorted(keys):
            self.req_ids += 1
            p.read_reqs[self.req_ids] = eng
            if not self._send(self.storage, Kind.GET_DATA, GetData(self.req_ids, eng, keys[eng])):
                i = self.storage_nodes.index(self.storage)
                self.storage = self.storage_nodes[(i + 1) % len(self.storage_nodes)]

    def _on_data(self, body):
        p = self.cur
        if p is None or p.phase != "read" or body.req_id not in p.read_reqs:
            return
        ctx = self._ctx(p, p.read_reqs.pop(body.req_id))
        for key, sv in body.items:
            if key not in ctx.reads:
                ctx.observe(key, sv)
        if not p.read_reqs:
            self._exec(p)

    def _exec(self, p):
        for i, op in enumerate(p.plan.ops):
            ctx = self._ctx(p, op.engine)
            val = f"{ctx.txn_id}/{i}".encode()
            if op.kind == "update":
                ctx.put(op.key, val)
            elif op.kind == "insert":
                ctx.put_new(op.key, val)
            elif op.kind == "delete":
                ctx.delete(op.key)
            elif op.kind == "rmw":
                _, cur = ctx.cached(op.key)
                ctx.put(op.key, b"%d" % (_int(cur) + 1))
            elif op.kind == "new_order":
                _, cur = ctx.cached(op.key)
                n = _int(cur)
                ctx.put(op.key, b"%d" % (n + 1))
                ctx.put_new(op.arg + b":%08d" % n, val)
        p.phase = "exec"
        p.ready_at = self.now + max(1, math.ceil(len(p.plan.ops) * self.cfg.exec_per_op))

    def _submit(self, p, resubmit=False):
        group = None
        if len(p.members) > 1:
            group_id = p.members[0].txn_id.rsplit(":", 1)[0]
            group = GroupRef(group_id, len(p.members))
        p.phase = "wait"
        p.sent_at = self.now
        p.attempts += 1
        for ctx in p.members:
            if ctx.txn_id in p.decisions:
                continue
            req = ctx.to_request(group)
            if not self._send(self.cc, Kind.SUBMIT_TXN, SubmitTxn(self.id, req, resubmit)):
                p.phase = "backoff"
                p.ready_at = self.now + self.cfg.overload_backoff
                return

    def _on_decision(self, body):
        if body.decision is not None:
            self.received.setdefault(body.txn_id, []).append(body.decision)
        p = self.cur
        if p is None or p.phase not in ("wait", "backoff"):
            return
        ctxs = {c.txn_id: c for c in p.members}
        if body.txn_id not in ctxs or body.txn_id in p.decisions:
            return
        if body.status == ReplyStatus.OVERLOADED:
            if p.phase == "wait":
                p.phase = "backoff"
                p.ready_at = self.now + self.cfg.overload_backoff
            return
        if body.decision is None:
            return
        p.decisions[body.txn_id] = (body.decision, body.cen)
        if len(p.decisions) < len(p.members):
            return
        committed = True
        for ctx in p.members:
            d, cen = p.decisions[ctx.txn_id]
            committed = committed and d.committed
            req = ctx.to_request()
            self.history.append(HistTxn(
                ctx.txn_id, ctx.engine, req.read_set, req.write_set,
                ctx.txn_id.rsplit(":", 1)[0] if len(p.members) > 1 else None,
                d.csn, cen, d.verdict, d.reason))
        self.latencies.append((self.now, self.now - p.start, committed,
                               any(c.writes for c in p.members)))
        self.cur = None
        self._begin()

    def next_wakeup(self):
        p = self.cur
        if p is None:
            return None if self.done else self.now + 1
        if p.phase == "read":
            return max(p.sent_at + self.cfg.read_retry, self.now + 1)
        if p.phase in ("exec", "backoff"):
            return max(p.ready_at, self.now + 1)
        return max(p.sent_at + self.cfg.timeout, self.now + 1)


def _int(v) -> int:
    try:
        return int(v) if v else 0
    except ValueError:
        return 0


class ProbeActor:
    """Mailbox used by scripted scenarios and the synchronous proxy backend."""

    def __init__(self, pid: int, net):
        self.id = pid
        self.net = net
        self.inbox: list = []
        self.now = 0

    def step(self, now, msgs):
        self.now = now
        self.inbox.extend(msgs)

    def next_wakeup(self):
        return None

    def send(self, dst, kind, body, cen=0):
        self.net.send(self.id, dst, kind, body, cen)

    def take(self, kind, pred=None):
        for i, m in enumerate(self.inbox):
            if m.kind == kind and (pred is None or pred(m.body)):
                return self.inbox.pop(i)
        return None

