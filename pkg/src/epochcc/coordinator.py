"""The CC node: epoch pipeline, failover, rejoin, cross-model groups, resharding.

Each closed epoch ``e`` moves through four phases on every member:

A. shard local transactions; route sub-transactions for shards this node
   does not replicate (one batch per peer, possibly empty);
B. validate reads against snapshot ``e - 1`` and resolve locally, then send
   the surviving write sets to the other replicas of each shard;
C. resolve the remote write sets and broadcast this node's abort set, with
   the inventory of transactions it brought into ``e``;
D. merge every abort set, gate cross-model groups, fold the winners into the
   snapshots, log the node's own commits, reply, and push logs to storage.

Phase A may run ahead; B to D run only for the epoch right after the last
finalized one. Payloads carry the sender's view stamp for the epoch, and
nodes only combine payloads with equal stamps, so a view change that
removes a failed member cleanly restarts every epoch it affects.
"""

from __future__ import annotations

import json
import logging
from bisect import bisect_right
from collections import OrderedDict
from dataclasses import dataclass, field
from typing import Optional

from .codec import Reader, Writer, get_tagged, put_tagged
from .conflict import EpochAbortSet, GlobalWriteVersionMap, ShardEpoch, VersionMapEntry
from .core import (
    AbortReason, Decision, DeterministicClock, Tagger, Verdict, check_request,
)
from .durability import CommitLog
from .errors import CutoverTooSoon, MalformedRequest, Unreachable
from .membership import BackupLog, FailureDetector, ViewHistory, majority
from .messages import (
    AbortSetPayload, AdminFrame, AdminKind, ClaimOp, DecisionReply, Kind, LeaderClaim,
    LogPullReply, LogPushFrame, MembershipBeat, PushKind, ReplyStatus, TxnBackup, TxnBatch,
)
from .shardmap import ShardMap, shard_txn

log = logging.getLogger(__name__)

OPEN, ROUTED, SENT, MERGING, DONE = range(5)


@dataclass
class CCConfig:
    node_id: int
    cluster: tuple
    storage: tuple
    log_dir: str
    epoch_ticks: int = 10
    shards: int = 1
    replicas: int = 0               # per shard; 0 = every CC node
    log_mode: str = "async"         # or "sync"
    local_first: bool = True
    fsync: bool = True
    beat_every: int = 5
    suspect_after: int = 30         # ticks; must exceed beat_every + max latency
    group_horizon: int = 4          # epochs
    join_delay: int = 3             # epochs between a join claim and its effect
    reshard_lead: int = 3           # minimum epochs between plan and cutover
    max_open_txns: int = 0          # admission limit per epoch; 0 = none
    max_unpushed_epochs: int = 0    # push backpressure; 0 = none
    push_rto: int = 24
    push_backoff_max: int = 192
    retry_every: int = 4
    pull_page: int = 64


class _Epoch:
    __slots__ = ("cen", "phase", "stamp", "members", "smap", "routes_in", "ws_in",
                 "aborts_in", "mine", "shard_epochs", "my_aborts", "inventory", "groups",
                 "routed", "exchanged")

    def __init__(self, cen):
        self.cen = cen
        self.reset()

    def reset(self):
        self.phase = OPEN
        self.stamp = 0
        self.members = ()
        self.smap = None
        self.routes_in: dict = {}
        self.ws_in: dict = {}
        self.aborts_in: dict = {}
        self.mine: dict = {}
        self.shard_epochs: dict = {}
        self.my_aborts = EpochAbortSet()
        self.inventory: list = []
        self.groups: list = []
        self.routed = False
        self.exchanged = False


@dataclass
class _Group:
    expected: int
    first_cen: int
    state: str = "open"         # open | done | aborted


@dataclass
class _Takeover:
    failed: int
    stream: str
    start: int
    end: int


@dataclass
class _Push:
    frames: dict = field(default_factory=OrderedDict)    # (stream, cen) -> frame
    next_retry: int = 0
    backoff: int = 1


class CCNode:
    """One concurrency-control node, driven by ``step(now, msgs)``."""

    def __init__(self, cfg: CCConfig, net, clock=None, joining: bool = False):
        self.cfg = cfg
        self.id = cfg.node_id
        self.net = net
        self.tagger = Tagger(self.id, clock or DeterministicClock())
        self.log = CommitLog(cfg.log_dir, self.id, cfg.fsync)
        self.stats: dict = {"reexecuted_epochs": 0, "view_changes": 0, "finalized": 0,
                            "dropped_stale": 0, "overloaded": 0, "takeovers": 0}
        self.epoch_records: list = []
        self.reshard_records: list = []
        self.emitted: dict = {}                    # csn -> first tick a decision left
        self.now = 0
        self._reset(joining)

    # -- state ---------------------------------------------------------------

    def _reset(self, joining: bool):
        cfg = self.cfg
        self.joining = joining
        self.history = ViewHistory(cfg.cluster)
        self.claims: dict = {}                     # view number -> LeaderClaim
        self.future_claims: dict = {}
        first = ShardMap.build(1, cfg.shards, cfg.cluster, cfg.replicas)
        self.maps: list = [(1, first)]             # (first cen, map)
        self.snapshots: dict = {s: GlobalWriteVersionMap() for s in first.shards_of(self.id)}
        self.finalized = 0
        self.states: dict = {}
        self.collect: dict = {}                    # cen -> [TaggedTxn]
        self.in_collect: set = set()
        self.own: dict = {}                        # csn -> client (own or proxied)
        self.own_acks: dict = {}                   # csn -> set of acking nodes
        self.needs_ack: set = set()
        self.early: set = set()
        self.backups = BackupLog()
        self.txn_index: dict = {}                  # txn_id -> csn
        self.verdicts: dict = {}                   # csn -> (Verdict, reason, cen)
        self.deferred: set = set()
        self.orphans: dict = {}                    # csn -> cen of a foreign backup to check
        self.subs: dict = {}                       # csn -> set(client)
        self.wait_storage: list = []               # (cen, client, DecisionReply)
        self.groups: dict = {}
        self.future_msgs: list = []
        self.retry_out: list = []
        self.detector = FailureDetector(cfg.suspect_after)
        self.peer_pushed: dict = {}
        self.takeovers: list = []
        self.pending_catchup: dict = {}            # joiner -> J
        self.catchup_main: Optional[dict] = None   # joiner side: leader's catch-up
        self.catchup_parts: dict = {}              # joiner side: shard -> (epoch, map)
        self.catchup_sent: dict = {}
        self.transfers: dict = {}                  # map version -> {new shard: {old shard: map}}
        self.installed_layouts: set = set()
        self.pushes: dict = {s: _Push() for s in cfg.storage}
        self.storage_wm: dict = {s: 0 for s in cfg.storage}
        self.next_beat = 0
        self.halted = False
        self.lost_shards: set = set()              # shards left with no replica; sticky
        self.last_pushed_cen = 0
        self.started = False

    @property
    def open_cen(self) -> int:
        return self.now // self.cfg.epoch_ticks + 1

    def map_for(self, cen: int) -> ShardMap:
        i = bisect_right([c for c, _ in self.maps], cen) - 1
        return self.maps[max(i, 0)][1]

    def _state(self, cen: int) -> _Epoch:
        st = self.states.get(cen)
        if st is None:
            st = self.states[cen] = _Epoch(cen)
        return st

    def stream_name(self) -> str:
        return f"n{self.id}"

    # -- actor protocol ------------------------------------------------------

    def next_wakeup(self) -> Optional[int]:
        t = [self.open_cen * self.cfg.epoch_ticks, self.next_beat]
        if self.retry_out:
            t.append(self.now + self.cfg.retry_every)
        for p in self.pushes.values():
            if p.frames:
                t.append(max(p.next_retry, self.now + 1))
        return min(t)

    def step(self, now: int, msgs) -> None:
        self.now = now
        if not self.started:
            self._start()
        for m in msgs:
            self._dispatch(m)
        if self.retry_out:
            self._flush_retries()
        if now >= self.next_beat:
            self._beat()
        if not self.joining:
            self._check_failures()
            self._advance()
        self._push_retries()

    def _start(self):
        self.started = True
        self.detector.reset([m for m in self.cfg.cluster if m != self.id], self.now)
        for name, stream in sorted(self.log.streams.items()):
            body = LogPushFrame(PushKind.ANNOUNCE, name, tail_lsn=stream.tail_lsn,
                                cen=stream.sealed_cen)
            for s in self.cfg.storage:
                self._send(s, Kind.LOG_PUSH_FRAME, body)
            if name == self.stream_name():
                self.last_pushed_cen = stream.sealed_cen
                for st in stream.entries[-1:]:
                    self.tagger.advance_to(st.csn[0])

    def _send(self, dst, kind, body, cen=0, shard=0) -> bool:
        if kind == Kind.DECISION_REPLY and body.decision is not None:
            self.emitted.setdefault(body.decision.csn, self.now)
        try:
            self.net.send(self.id, dst, kind, body, cen, shard)
            return True
        except Unreachable:
            return False

    def _send_peer(self, dst, kind, body, cen=0, shard=0):
        """Epoch payloads: retried while the peer stays a member."""
        if not self._send(dst, kind, body, cen, shard):
            self.retry_out.append((dst, kind, body, cen, shard))

    def _flush_retries(self):
        pending, self.retry_out = self.retry_out, []
        for dst, kind, body, cen, shard in pending:
            stamp = getattr(body, "view", None)
            if kind in (Kind.SUB_TXN_ROUTE, Kind.WRITE_SET_PAYLOAD, Kind.ABORT_SET_PAYLOAD):
                if cen <= self.finalized and kind != Kind.ABORT_SET_PAYLOAD:
                    continue
                if stamp != self.history.stamp(cen) or dst not in self.history.members_at(cen):
                    continue
            elif dst not in self.history.latest_members() and kind != Kind.LEADER_CLAIM:
                continue
            self._send_peer(dst, kind, body, cen, shard)

    # -- dispatch --------------------------------------------------------------

    def _dispatch(self, m):
        k = m.kind
        if k == Kind.SUBMIT_TXN:
            self._on_submit(m)
        elif k in (Kind.SUB_TXN_ROUTE, Kind.WRITE_SET_PAYLOAD, Kind.ABORT_SET_PAYLOAD):
            self._on_epoch_msg(m)
        elif k == Kind.TXN_BACKUP:
            self._on_backup(m)
        elif k == Kind.MEMBERSHIP_BEAT:
            self._on_beat(m)
        elif k == Kind.LEADER_CLAIM:
            self._on_claim(m.body)
        elif k == Kind.LOG_PUSH_FRAME:
            self._on_push_ack(m)
        elif k == Kind.LOG_PULL_REQUEST:
            self._on_pull(m)
        elif k == Kind.ADMIN_FRAME:
            self._on_admin(m)

    # -- admission -------------------------------------------------------------

    def _reply(self, client, txn_id, decision, cen, status=ReplyStatus.OK):
        self._send(client, Kind.DECISION_REPLY, DecisionReply(txn_id, decision, cen, status))

    def _on_submit(self, m):
        body = m.body
        req = body.request
        try:
            check_request(req)
        except MalformedRequest:
            self._reply(m.src, req.txn_id, None, 0, ReplyStatus.MALFORMED)
            return
        known = self.txn_index.get(req.txn_id)
        if known is None:
            known = self.backups.by_txn_id.get(req.txn_id)
        if known is not None:
            self._subscribe(known, m.src, req.txn_id)
            return
        cen = self.open_cen
        if self.joining or self.id not in self.history.members_at(cen) or self._overloaded(cen):
            self.stats["overloaded"] += 1
            self._reply(m.src, req.txn_id, None, 0, ReplyStatus.OVERLOADED)
            return
        txn = self.tagger.tag(req, cen)
        self.txn_index[req.txn_id] = txn.csn
        self.own[txn.csn] = m.src
        self._collect(txn)
        if req.write_set or req.group is not None:
            self.needs_ack.add(txn.csn)
            self.own_acks[txn.csn] = set()
            self._backup(txn, m.src)

    def _overloaded(self, cen) -> bool:
        cfg = self.cfg
        if cfg.max_open_txns and len(self.collect.get(cen, ())) >= cfg.max_open_txns:
            return True
        if cfg.max_unpushed_epochs:
            own = self.stream_name()
            for p in self.pushes.values():
                if sum(1 for (s, _) in p.frames if s == own) > cfg.max_unpushed_epochs:
                    return True
        return False

    def _collect(self, txn):
        if txn.csn in self.in_collect:
            return
        self.in_collect.add(txn.csn)
        self.collect.setdefault(txn.cen, []).append(txn)

    def _backup(self, txn, client):
        body = TxnBackup(False, client, txn, txn.csn)
        for peer in self.history.members_at(txn.cen):
            if peer != self.id:
                self._send_peer(peer, Kind.TXN_BACKUP, body, txn.cen)

    def _on_backup(self, m):
        b = m.body
        if b.ack:
            acks = self.own_acks.get(b.csn)
            if acks is not None:
                acks.add(m.src)
            return
        self.backups.add(b.txn, b.client)
        self._send(m.src, Kind.TXN_BACKUP, TxnBackup(True, csn=b.txn.csn), b.txn.cen)

    def _subscribe(self, csn, client, txn_id):
        v = self.verdicts.get(csn)
        if v is None:
            self.subs.setdefault(csn, set()).add((client, txn_id))
            return
        self._release_foreign(csn, client, txn_id, v)

    def _release_foreign(self, csn, client, txn_id, v):
        verdict, reason, cen = v
        reply = DecisionReply(txn_id, Decision(csn, verdict, reason), cen)
        if verdict == Verdict.ABORTED or (csn in self.own and self.cfg.log_mode == "async"
                                          and cen <= self.finalized):
            self._send(client, Kind.DECISION_REPLY, reply)
        else:
            self.wait_storage.append((cen, client, reply))
            self._release_waiting()

    # -- epoch messages ----------------------------------------------------------

    def _on_epoch_msg(self, m):
        if self.joining:
            self.future_msgs.append(m)
            return
        e = m.cen
        if e <= self.finalized:
            self.stats["dropped_stale"] += 1
            return
        stamp = self.history.stamp(e)
        if m.body.view < stamp:
            self.stats["dropped_stale"] += 1
            return
        if m.body.view > stamp:
            self.future_msgs.append(m)
            return
        st = self._state(e)
        if m.kind == Kind.SUB_TXN_ROUTE:
            st.routes_in[m.src] = m.body.txns
        elif m.kind == Kind.WRITE_SET_PAYLOAD:
            st.ws_in.setdefault(m.shard, {})[m.src] = m.body.txns
        else:
            st.aborts_in[m.src] = m.body

    def _replay_future(self):
        pending, self.future_msgs = self.future_msgs, []
        for m in pending:
            self._on_epoch_msg(m)

    # -- pipeline ----------------------------------------------------------------

    def _advance(self):
        for e in range(self.finalized + 1, self.open_cen):
            st = self._state(e)
            if st.phase == OPEN and not self._phase_a(st):
                break
        while True:
            e = self.finalized + 1
            if e >= self.open_cen:
                return
            st = self._state(e)
            if st.phase == ROUTED:
                self._phase_b(st)
            if st.phase == SENT:
                self._phase_c(st)
            if st.phase == MERGING:
                self._phase_d(st)
            if st.phase != DONE:
                return
            nxt = self.states.get(e + 1)
            if e + 1 < self.open_cen and (nxt is None or nxt.phase == OPEN):
                self._phase_a(self._state(e + 1))

    def _phase_a(self, st: _Epoch) -> bool:
        e = st.cen
        members = self.history.members_at(e)
        if self.id not in members:
            return False
        txns = self.collect.get(e, ())
        for t in txns:
            if t.csn in self.needs_ack:
                if not self.backups_acked(t.csn, members):
                    return False
        smap = self.map_for(e)
        st.members = members
        st.stamp = self.history.stamp(e)
        st.smap = smap
        mine = {s: [] for s in smap.shards_of(self.id)}
        routed = {}
        for t in txns:
            for s, sub in shard_txn(t, smap).items():
                if s in mine:
                    mine[s].append(sub)
                else:
                    target = smap.route_target(s, members)
                    if target is None:
                        self.halted = True
                        return False
                    routed.setdefault(target, []).append(sub)
        st.mine = mine
        st.inventory = [t.csn for t in txns]
        st.groups = [(t.request.group.group_id, t.request.group.expected, t.csn)
                     for t in txns if t.request.group is not None]
        if smap.needs_routing(members):
            st.routed = True
            for peer in members:
                if peer != self.id:
                    self._send_peer(peer, Kind.SUB_TXN_ROUTE,
                                    TxnBatch(st.stamp, routed.get(peer, [])), e)
        st.phase = ROUTED
        return True

    def backups_acked(self, csn, members) -> bool:
        acks = self.own_acks.get(csn, ())
        held = 1 + sum(1 for a in acks if a in members)
        return held >= majority(len(members))

    def _snapshots_ready(self, e: int) -> bool:
        for cut, smap in self.maps:
            if cut == e and e > 1 and smap.version not in self.installed_layouts:
                prev = self.map_for(e - 1)
                if not smap.same_layout(prev) and not self._install_transfers(smap, e):
                    return False
        return True

    def _phase_b(self, st: _Epoch):
        e = st.cen
        others = [m for m in st.members if m != self.id]
        if st.routed and any(m not in st.routes_in for m in others):
            return
        if not self._snapshots_ready(e):
            return
        for src in sorted(st.routes_in):
            for sub in st.routes_in[src]:
                s = st.smap.shard_of(_first_key(sub))
                st.mine.setdefault(s, []).append(sub)
        for s in sorted(st.mine):
            se = ShardEpoch(self.snapshots[s], e)
            passed = se.validate(st.mine[s])
            se.resolve(passed)
            st.shard_epochs[s] = se
            peers = [n for n in st.smap.live_replicas(s, st.members) if n != self.id]
            if peers:
                st.exchanged = True
                if self.cfg.local_first:
                    out = se.winners(passed)
                else:
                    out = [t for t in passed if t.request.write_set]
                body = TxnBatch(st.stamp, out)
                for p in peers:
                    self._send_peer(p, Kind.WRITE_SET_PAYLOAD, body, e, s)
        self._decide_early(st)
        st.phase = SENT

    def _decide_early(self, st: _Epoch):
        """Read-only, ungrouped transactions whose shards are all local."""
        if st.routed and not _covers_all(st.smap, self.id):
            local_shards = set(st.smap.shards_of(self.id))
        else:
            local_shards = None
        for t in self.collect.get(st.cen, ()):
            r = t.request
            if r.write_set or r.group is not None or t.csn in self.early:
                continue
            if local_shards is not None and any(
                    st.smap.shard_of(x.key) not in local_shards for x in r.read_set):
                continue
            reason = None
            for se in st.shard_epochs.values():
                got = se.aborts.get(t.csn)
                if got is not None and (reason is None or got < reason):
                    reason = got
            self.early.add(t.csn)
            verdict = Verdict.COMMITTED if reason is None else Verdict.ABORTED
            self._record_verdict(t.csn, verdict, reason, st.cen)
            client = self.own.get(t.csn)
            if client is not None:
                self._reply(client, r.txn_id, Decision(t.csn, verdict, reason), st.cen)

    def _phase_c(self, st: _Epoch):
        for s, se in st.shard_epochs.items():
            peers = [n for n in st.smap.live_replicas(s, st.members) if n != self.id]
            got = st.ws_in.get(s, {})
            if any(p not in got for p in peers):
                return
        for s in sorted(st.shard_epochs):
            se = st.shard_epochs[s]
            got = st.ws_in.get(s, {})
            for src in sorted(got):
                se.resolve(got[src])
            st.my_aborts.update(se.aborts)
        if len(st.members) > 1:
            body = AbortSetPayload(st.stamp, dict(st.my_aborts.reasons), list(st.inventory),
                                   list(st.groups))
            for p in st.members:
                if p != self.id:
                    self._send_peer(p, Kind.ABORT_SET_PAYLOAD, body, st.cen)
        st.phase = MERGING

    def _phase_d(self, st: _Epoch):
        e = st.cen
        others = [m for m in st.members if m != self.id]
        if any(m not in st.aborts_in for m in others):
            return
        glob = EpochAbortSet(st.my_aborts.reasons)
        inventory = list(st.inventory)
        groups = list(st.groups)
        for m in others:
            p = st.aborts_in[m]
            glob.update(p.aborts)
            inventory.extend(p.inventory)
            groups.extend(p.groups)
        exclude = self._gate_groups(e, groups, glob)
        for s in sorted(st.shard_epochs):
            st.shard_epochs[s].finalize(glob, exclude)
        for s, snap in self.snapshots.items():
            if s not in st.shard_epochs:
                snap.snapshot_epoch = e
        self.finalized = e
        self.stats["finalized"] += 1
        counts = {"committed": 0, "aborted": 0, "deferred": 0}
        for c in inventory:
            if c in exclude:
                self.deferred.add(c)
                counts["deferred"] += 1
                continue
            reason = glob.get(c)
            verdict = Verdict.COMMITTED if reason is None else Verdict.ABORTED
            self.deferred.discard(c)
            self._record_verdict(c, verdict, reason, e)
            counts["committed" if reason is None else "aborted"] += 1
        self._log_and_reply(st, glob, exclude)
        for c, cen in list(self.orphans.items()):
            if cen <= e and c not in self.verdicts and c not in self.deferred:
                self._drop_orphan(c)
        self._reshard_after(e)
        self._catchups_after(e)
        self.epoch_records.append({
            "cen": e, "tick": self.now, "members": list(st.members), "view": st.stamp,
            "exchanged": st.exchanged, "routed": st.routed, "merged": len(st.members) > 1,
            **counts})
        st.phase = DONE
        del self.states[e]
        self.collect.pop(e, None)

    def _record_verdict(self, csn, verdict, reason, cen):
        self.verdicts[csn] = (verdict, reason, cen)
        for client, txn_id in sorted(self.subs.pop(csn, ())):
            if csn in self.own:
                continue
            self._release_foreign(csn, client, txn_id, self.verdicts[csn])

    def _gate_groups(self, cen, groups, glob) -> set:
        by_gid: dict = {}
        for gid, expected, csn in groups:
            exp, present = by_gid.setdefault(gid, [expected, set()])
            by_gid[gid][0] = max(exp, expected)
            present.add(csn)
        exclude = set()
        for gid in sorted(by_gid):
            expected, present = by_gid[gid]
            g = self.groups.get(gid)
            if g is None:
                g = self.groups[gid] = _Group(expected, cen)
            doomed = g.state != "open" or len(present) > expected or any(
                c in glob for c in present)
            if not doomed and len(present) == expected:
                g.state = "done"
                continue
            if not doomed and cen - g.first_cen >= self.cfg.group_horizon:
                doomed = True
            if doomed:
                g.state = "aborted"
                for c in present:
                    glob.add(c, AbortReason.CROSS_MODEL_PEER_ABORTED)
            else:
                exclude |= present
        return exclude

    def _log_and_reply(self, st: _Epoch, glob, exclude):
        e = st.cen
        entries = []
        replies = []
        for t in self.collect.get(e, ()):
            c = t.csn
            if c in exclude:
                if c in self.own:
                    self._reenter(t)
                continue
            reason = glob.get(c)
            if reason is None and t.request.write_set:
                entries.append((c, t.request.write_set, t.request.engine))
            if c in self.own and c not in self.early:
                replies.append((t, reason))
        entries.sort(key=lambda x: x[0])
        stream = self.log.stream(self.stream_name())
        stream.append_epoch(e, entries, (self.id,), st.members)
        self._push_epoch(stream, e)
        for t, reason in replies:
            verdict = Verdict.COMMITTED if reason is None else Verdict.ABORTED
            reply = DecisionReply(t.request.txn_id, Decision(t.csn, verdict, reason), e)
            client = self.own[t.csn]
            if reason is None and self.cfg.log_mode == "sync":
                self.wait_storage.append((e, client, reply))
            else:
                self._send(client, Kind.DECISION_REPLY, reply)
        for d in self.takeovers:
            if d.start <= e <= d.end:
                self._takeover_epoch(d, e, st.members)
        self._release_waiting()

    def _reenter(self, t):
        cen = self.open_cen
        nt = t.with_cen(cen)
        self.in_collect.discard(t.csn)
        self._collect(nt)
        if t.csn in self.needs_ack:
            self._backup(nt, self.own[t.csn])

    def _drop_orphan(self, c):
        cen = self.orphans.pop(c)
        entry = self.backups.get(c)
        reason = AbortReason.EPOCH_REEXECUTION_DROPPED
        self._record_verdict(c, Verdict.ABORTED, reason, cen)
        if entry is not None:
            self._reply(entry.client, entry.txn.request.txn_id,
                        Decision(c, Verdict.ABORTED, reason), cen)

    # -- durability and push ------------------------------------------------------

    def _push_epoch(self, stream, e):
        entries, seal = stream.epoch_records(e)
        frame = LogPushFrame(PushKind.FRAME, stream.stream, entries, [seal], cen=e)
        for s in self.cfg.storage:
            p = self.pushes[s]
            p.frames[(stream.stream, e)] = frame
            if self._send(s, Kind.LOG_PUSH_FRAME, frame, e):
                if len(p.frames) == 1:
                    p.next_retry = self.now + self.cfg.push_rto
            else:
                p.next_retry = self.now + self.cfg.push_rto * p.backoff

    def _push_retries(self):
        for s in self.cfg.storage:
            p = self.pushes[s]
            if not p.frames or self.now < p.next_retry:
                continue
            ok = True
            for (name, e), frame in list(p.frames.items()):
                if not self._send(s, Kind.LOG_PUSH_FRAME, frame, e):
                    ok = False
                    break
            p.backoff = min(p.backoff * 2, max(1, self.cfg.push_backoff_max // self.cfg.push_rto))
            p.next_retry = self.now + self.cfg.push_rto * p.backoff
            if not ok:
                log.debug("node %d: storage %d unreachable", self.id, s)

    def _on_push_ack(self, m):
        b = m.body
        if b.sub == PushKind.ACK:
            p = self.pushes.get(m.src)
            if p is None:
                return
            if b.stream:
                if p.frames.pop((b.stream, b.cen), None) is not None:
                    p.backoff = 1
                    p.next_retry = self.now + self.cfg.push_rto
            if b.watermark > self.storage_wm.get(m.src, 0):
                self.storage_wm[m.src] = b.watermark
                self._release_waiting()

    def pushed_upto(self) -> int:
        own = self.stream_name()
        low = self.finalized
        for p in self.pushes.values():
            for (name, e) in p.frames:
                if name == own and e - 1 < low:
                    low = e - 1
        return low

    def storage_applied(self) -> int:
        """Highest epoch a majority of storage nodes have applied."""
        wms = sorted(self.storage_wm.values(), reverse=True)
        if not wms:
            return self.finalized
        return wms[majority(len(wms)) - 1]

    def _release_waiting(self):
        if not self.wait_storage:
            return
        applied = self.storage_applied()
        keep = []
        for cen, client, reply in self.wait_storage:
            if cen <= applied:
                self._send(client, Kind.DECISION_REPLY, reply)
            else:
                keep.append((cen, client, reply))
        self.wait_storage = keep

    def _on_pull(self, m):
        req = m.body
        page = self.cfg.pull_page
        if req.stream == "*":
            names = sorted(self.log.streams)
        else:
            names = [req.stream] if req.stream in self.log.streams else []
        for name in names:
            stream = self.log.streams[name]
            if req.stream == "*":
                seals = [s for s in stream.seals if s.cen > req.from_cen]
                more = len(seals) > page
                seals = seals[:page]
                top = seals[-1].cen if seals else req.from_cen
                cens = [e.cen for e in stream.entries]
                lo = bisect_right(cens, req.from_cen)
                hi = bisect_right(cens, top)
                base = stream.entries[lo - 1].lsn if lo else 0
                body = LogPullReply(name, stream.entries[lo:hi], seals, more, "", base)
            else:
                try:
                    entries, seals = stream.pull(req.from_lsn, req.from_cen, page)
                except Exception as exc:     # LsnAhead
                    body = LogPullReply(name, error=type(exc).__name__)
                else:
                    body = LogPullReply(name, entries, seals, False, "", req.from_lsn)
            self._send(m.src, Kind.LOG_PULL_REPLY, body)

    # -- membership ------------------------------------------------------------------

    def _beat(self):
        self.next_beat = self.now + self.cfg.beat_every
        body = MembershipBeat(self.history.number, self.open_cen, self.pushed_upto(),
                              self.joining)
        for peer in self.cfg.cluster:
            if peer != self.id:
                self._send(peer, Kind.MEMBERSHIP_BEAT, body)

    def _on_beat(self, m):
        b = m.body
        self.detector.beat(m.src, self.now)
        self.peer_pushed[m.src] = b.pushed_upto
        if self.joining:
            return
        latest = self.history.latest_members()
        if b.view < self.history.number and not b.join:
            for v in range(b.view + 1, self.history.number + 1):
                if v in self.claims:
                    self._send(m.src, Kind.LEADER_CLAIM, self.claims[v])
        if b.join:
            self._on_join_beat(m.src, latest)

    def _is_leader(self) -> bool:
        latest = self.history.latest_members()
        sus = self.detector.suspected([n for n in latest if n != self.id], self.now)
        live = [n for n in latest if n not in sus]
        return bool(live) and min(live) == self.id

    def _on_join_beat(self, node, latest):
        if node not in latest:
            if not self._is_leader() or self.history.pending_after(self.finalized):
                return
            j = self.open_cen + self.cfg.join_delay
            self._propose(LeaderClaim(self.history.number + 1, ClaimOp.ADD, node, j))
            return
        # already admitted: resend the claim and catch-up if they were lost
        leader = self._is_leader()
        for v, c in self.claims.items():
            if c.op == ClaimOp.ADD and c.node == node:
                if leader:
                    self._send(node, Kind.LEADER_CLAIM, c)
                if not leader and not self._catchup_shards(node, c.effective_cen):
                    continue
                if self.finalized >= c.effective_cen - 1:
                    last = self.catchup_sent.get(node, -10**9)
                    if self.now - last >= 4 * self.cfg.beat_every:
                        self._send_catchup(node, c.effective_cen)

    def _check_failures(self):
        latest = self.history.latest_members()
        watched = [n for n in latest if n != self.id]
        sus = self.detector.suspected(watched, self.now)
        if not sus:
            self.halted = False
            return
        live = [n for n in latest if n not in sus]
        if min(live) != self.id:
            return
        if len(live) < majority(len(self.cfg.cluster)):
            self.halted = True
            return
        f = min(sus)
        self._propose(LeaderClaim(self.history.number + 1, ClaimOp.REMOVE, f,
                                  self._first_incomplete(f)))

    def _first_incomplete(self, f) -> int:
        e = self.finalized + 1
        limit = self.open_cen + self.cfg.join_delay + 2
        while e <= limit:
            if f in self.history.members_at(e):
                st = self.states.get(e)
                if st is None or f not in st.aborts_in:
                    return e
            e += 1
        return e

    def _propose(self, claim):
        self.claims[claim.view] = claim
        for peer in set(self.history.latest_members()) | {claim.node}:
            if peer != self.id:
                self._send_peer(peer, Kind.LEADER_CLAIM, claim)
        self._install(claim)

    def _on_claim(self, claim):
        if self.joining:
            self.future_claims[claim.view] = claim
            return
        if claim.view <= self.history.number:
            return
        self.future_claims[claim.view] = claim
        while self.history.number + 1 in self.future_claims:
            c = self.future_claims.pop(self.history.number + 1)
            self.claims[c.view] = c
            self._install(c)
            if self.joining:
                return

    def _install(self, claim):
        self.stats["view_changes"] += 1
        if claim.op == ClaimOp.REMOVE:
            self._install_remove(claim)
        else:
            self._install_add(claim)
        self._replay_future()

    def _install_remove(self, claim):
        f, e_star = claim.node, claim.effective_cen
        old_leader = min(self.history.latest_members())
        self.history.apply_remove(claim.view, f, e_star)
        if f == self.id:
            log.info("node %d: removed from view %d, rejoining", self.id, claim.view)
            self._reset(True)
            self.started = True
            return
        latest = self.history.latest_members()
        for cut, smap in self.maps:
            if cut >= e_star or smap is self.map_for(e_star):
                for sh, reps in enumerate(smap.assignment):
                    if not any(n in latest for n in reps):
                        log.warning("node %d: shard %d lost its last replica", self.id, sh)
                        self.lost_shards.add(sh)
        reset = 0
        for e, st in sorted(self.states.items()):
            if e >= e_star:
                if st.phase > OPEN and e < self.open_cen:
                    reset += 1
                st.reset()
        self.stats["reexecuted_epochs"] += reset
        self.retry_out = [r for r in self.retry_out if r[0] != f]
        self.pending_catchup.pop(f, None)
        leader = min(self.history.latest_members())
        if leader == self.id:
            self._take_over(f, e_star)
        del old_leader

    def _take_over(self, f, e_star):
        """Inject the failed node's backups and cover its unpushed log epochs."""
        self.stats["takeovers"] += 1
        for entry in self.backups.of_origin(f):
            t = entry.txn
            c = t.csn
            if c in self.verdicts and c not in self.deferred:
                continue
            self.own[c] = entry.client
            self.txn_index[t.request.txn_id] = c
            if t.cen >= e_star:
                self._collect(t)
            elif c in self.deferred:
                self._reenter(t)
            elif t.cen <= self.finalized:
                self.orphans[c] = t.cen
                self._drop_orphan(c)
            else:
                self.orphans[c] = t.cen
        start = self.peer_pushed.get(f, 0) + 1
        d = _Takeover(f, f"n{self.id}-for-n{f}-v{self.history.number}", start, e_star - 1)
        if d.start <= d.end:
            self.takeovers.append(d)
            for e in range(d.start, min(d.end, self.finalized) + 1):
                members = self.history.members_at(e)
                if f in members:
                    self._takeover_epoch(d, e, members)

    def _takeover_epoch(self, d: _Takeover, e, members):
        if d.failed not in members:
            return
        entries = []
        for entry in self.backups.of_origin(d.failed):
            c = entry.txn.csn
            v = self.verdicts.get(c)
            if v and v[0] == Verdict.COMMITTED and v[2] == e and entry.txn.request.write_set:
                entries.append((c, entry.txn.request.write_set, entry.txn.request.engine))
        entries.sort(key=lambda x: x[0])
        stream = self.log.stream(d.stream)
        stream.append_epoch(e, entries, (d.failed,), members)
        self._push_epoch(stream, e)

    def _install_add(self, claim):
        node = claim.node
        self.history.apply_add(claim.view, node, claim.effective_cen)
        self.detector.reset([node], self.now)
        self.detector.beat(node, self.now)
        for e, st in self.states.items():
            if e >= claim.effective_cen:
                st.reset()
        if min(m for m in self.history.latest_members() if m != node) == self.id or \
                self._catchup_shards(node, claim.effective_cen):
            self.pending_catchup[node] = claim.effective_cen
            self._catchups_after(self.finalized)

    def _catchup_shards(self, joiner, j) -> list:
        """Shards whose snapshot this node donates to *joiner* joining at epoch *j*.

        The leader donates every shard it holds; each remaining shard comes
        from its lowest surviving replica.
        """
        smap = self.map_for(j)
        members = self.history.members_at(j - 1)
        leader = min(m for m in self.history.latest_members() if m != joiner)
        out = []
        for s in smap.shards_of(joiner):
            holders = [n for n in smap.assignment[s] if n != joiner and n in members]
            if not holders:
                continue
            donor = leader if leader in holders else min(holders)
            if donor == self.id and s in self.snapshots:
                out.append(s)
        return out

    def _catchups_after(self, e):
        for node, j in list(self.pending_catchup.items()):
            if e >= j - 1:
                self._send_catchup(node, j)
                del self.pending_catchup[node]

    def _send_catchup(self, node, j):
        self.catchup_sent[node] = self.now
        if min(m for m in self.history.latest_members() if m != node) == self.id:
            frame = AdminFrame(AdminKind.CATCH_UP, encode_catchup(self, node, j))
        else:
            frame = AdminFrame(AdminKind.CATCH_UP_SHARD, encode_shard_catchup(
                self.finalized, {s: self.snapshots[s] for s in self._catchup_shards(node, j)}))
        self._send(node, Kind.ADMIN_FRAME, frame)

    def _on_catchup(self, data):
        if not self.joining:
            return
        self.catchup_main = decode_catchup(data)
        self._finish_catchup()

    def _on_catchup_shard(self, data):
        if not self.joining:
            return
        epoch, snaps = decode_shard_catchup(data)
        for s, entries in snaps.items():
            self.catchup_parts[s] = (epoch, entries)
        self._finish_catchup()

    def _finish_catchup(self):
        """Leave joining mode once the leader's state and every shard have arrived."""
        c = self.catchup_main
        if c is None:
            return
        maps = [(cut, ShardMap.from_json(m)) for cut, m in c["maps"]]
        i = bisect_right([cut for cut, _ in maps], c["finalized"] + 1) - 1
        need = maps[max(i, 0)][1].shards_of(self.id)
        snaps = dict(c["snapshots"])
        for s in need:
            if s in snaps:
                continue
            part = self.catchup_parts.get(s)
            if part is None or part[0] != c["finalized"]:
                return
            snaps[s] = GlobalWriteVersionMap(part[1], c["finalized"])
        c["snapshots"] = {s: snaps[s] for s in need}
        self.catchup_main = None
        self.catchup_parts = {}
        self.history = ViewHistory.from_list(c["views"])
        self.maps = [(cut, ShardMap.from_json(m)) for cut, m in c["maps"]]
        self.finalized = c["finalized"]
        self.snapshots = c["snapshots"]
        for s, snap in self.snapshots.items():
            snap.snapshot_epoch = self.finalized
        for client, t in c["backups"]:
            self.backups.add(t, client)
        self.verdicts.update(c["verdicts"])
        self.txn_index.update(c["index"])
        self.groups = {g: _Group(*v) for g, v in c["groups"].items()}
        self.deferred = set(c["deferred"])
        self.tagger.advance_to(c["floor"])
        for v, claim in c["claims"].items():
            self.claims[v] = claim
        self.joining = False
        self.detector.reset([n for n in self.cfg.cluster if n != self.id], self.now)
        pend = {v: cl for v, cl in self.future_claims.items() if v > self.history.number}
        self.future_claims = {}
        for v in sorted(pend):
            self._on_claim(pend[v])
        self._replay_future()
        log.info("node %d: caught up at epoch %d", self.id, self.finalized)

    # -- resharding --------------------------------------------------------------------

    def plan_reshard(self, shards: int, replicas: int, cutover: Optional[int] = None):
        earliest = self.open_cen + self.cfg.reshard_lead
        if cutover is None:
            cutover = earliest
        if cutover < earliest:
            raise CutoverTooSoon(f"cutover {cutover} < earliest {earliest}")
        version = self.maps[-1][1].version + 1
        smap = ShardMap.build(version, shards, self.cfg.cluster, replicas)
        return cutover, smap

    def _install_plan(self, cutover, smap):
        if any(m.version >= smap.version for _, m in self.maps):
            return
        self.maps.append((cutover, smap))
        self.maps.sort(key=lambda x: x[0])

    def _reshard_after(self, e):
        """After finalizing the last epoch under an old map, ship snapshot metadata."""
        for cut, smap in self.maps:
            if cut != e + 1:
                continue
            old = self.map_for(e)
            if smap.same_layout(old):
                continue
            members_old = self.history.members_at(e)
            members_new = self.history.members_at(cut)
            for s in old.shards_of(self.id):
                if old.route_target(s, members_old) != self.id:
                    continue
                parts: dict = {n: {} for n in range(smap.num_shards)}
                snap = self.snapshots[s]
                for k, v in snap.entries.items():
                    parts[smap.shard_of(k)][k] = v
                for ns, entries in parts.items():
                    body = encode_transfer(smap.version, s, ns, e, entries)
                    for r in smap.live_replicas(ns, members_new):
                        if r == self.id:
                            self._accept_transfer(body)
                        else:
                            self._send_peer(r, Kind.ADMIN_FRAME,
                                            AdminFrame(AdminKind.SHARD_TRANSFER, body), e)
            self.reshard_records.append({
                "cen": e, "version": smap.version,
                "old": {s: dict(self.snapshots[s].entries)
                        for s in old.shards_of(self.id)
                        if old.route_target(s, members_old) == self.id}})

    def _accept_transfer(self, data):
        version, old_shard, new_shard, epoch, entries = decode_transfer(data)
        got = self.transfers.setdefault(version, {}).setdefault(new_shard, {})
        got[old_shard] = (epoch, entries)

    def _install_transfers(self, smap: ShardMap, e: int) -> bool:
        old = self.map_for(e - 1)
        got = self.transfers.get(smap.version, {})
        mine = smap.shards_of(self.id)
        for ns in mine:
            parts = got.get(ns, {})
            if any(s not in parts for s in range(old.num_shards)):
                return False
        new = {}
        for ns in mine:
            merged = {}
            for s in range(old.num_shards):
                merged.update(got[ns][s][1])
            new[ns] = GlobalWriteVersionMap(merged, e - 1)
        self.snapshots = new
        self.transfers.pop(smap.version, None)
        self.reshard_records.append({
            "cen": e, "version": smap.version,
            "new": {s: dict(m.entries) for s, m in new.items()}})
        self.installed_layouts.add(smap.version)
        return True

    # -- admin ----------------------------------------------------------------------------

    def _on_admin(self, m):
        b = m.body
        sub = b.sub
        if sub == AdminKind.CATCH_UP:
            self._on_catchup(b.body)
        elif sub == AdminKind.CATCH_UP_SHARD:
            self._on_catchup_shard(b.body)
        elif sub == AdminKind.SHARD_TRANSFER:
            self._accept_transfer(b.body)
        elif sub == AdminKind.RESHARD_PLAN:
            self._install_plan(b.body["cutover"], ShardMap.from_json(b.body["map"]))
        elif sub == AdminKind.TRIGGER_RESHARD:
            self._on_trigger_reshard(m)
        elif sub == AdminKind.GET_EPOCH_STATUS:
            self._send(m.src, Kind.ADMIN_FRAME, AdminFrame(AdminKind.EPOCH_STATUS,
                                                           self.epoch_status()))
        elif sub == AdminKind.GET_METRICS:
            self._send(m.src, Kind.ADMIN_FRAME, AdminFrame(AdminKind.METRICS, self.metrics()))
        elif sub == AdminKind.STATUS_QUERY:
            self._send(m.src, Kind.ADMIN_FRAME,
                       AdminFrame(AdminKind.STATUS, self.txn_status(b.body["txn_id"])))

    def _on_trigger_reshard(self, m):
        b = m.body.body
        if not self._is_leader():
            out = {"error": "NotLeader", "leader": min(self.history.latest_members())}
        else:
            try:
                cut, smap = self.plan_reshard(b["shards"], b.get("replicas", 0),
                                              b.get("cutover"))
            except CutoverTooSoon as exc:
                out = {"error": "CutoverTooSoon", "detail": str(exc)}
            else:
                plan = {"cutover": cut, "map": smap.to_json()}
                self._install_plan(cut, smap)
                for peer in self.history.latest_members():
                    if peer != self.id:
                        self._send_peer(peer, Kind.ADMIN_FRAME,
                                        AdminFrame(AdminKind.RESHARD_PLAN, plan))
                out = {"ok": True, "cutover": cut, "version": smap.version}
        self._send(m.src, Kind.ADMIN_FRAME, AdminFrame(AdminKind.STATUS, out))

    def epoch_status(self) -> dict:
        return {"node": self.id, "open": self.open_cen, "finalized": self.finalized,
                "view": self.history.number, "members": list(self.history.latest_members()),
                "map_version": self.map_for(self.open_cen).version, "joining": self.joining,
                "halted": self.halted, "lost_shards": sorted(self.lost_shards)}

    def metrics(self) -> dict:
        return {"node": self.id, **self.stats, "verdicts": len(self.verdicts),
                "log_tail": self.log.stream(self.stream_name()).tail_lsn,
                "storage_applied": self.storage_applied()}

    def txn_status(self, txn_id) -> dict:
        csn = self.txn_index.get(txn_id) or self.backups.by_txn_id.get(txn_id)
        if csn is None:
            return {"txn_id": txn_id, "state": "unknown"}
        v = self.verdicts.get(csn)
        if v is None:
            return {"txn_id": txn_id, "state": "pending", "csn": list(csn)}
        return {"txn_id": txn_id, "state": "committed" if v[0] == Verdict.COMMITTED
                else "aborted", "reason": v[1].name if v[1] else None, "cen": v[2],
                "csn": list(csn)}

    def close(self):
        self.log.close()


def _first_key(sub) -> bytes:
    r = sub.request
    if r.write_set:
        return r.write_set[0].key
    return r.read_set[0].key


def _covers_all(smap: ShardMap, node: int) -> bool:
    return len(smap.shards_of(node)) == smap.num_shards


# -- binary bodies for catch-up and shard transfer ------------------------------------


def _put_map(w: Writer, entries: dict):
    w.u32(len(entries))
    for k in sorted(entries):
        e = entries[k]
        w.bytes_(k)
        w.csn(e.committed_csn)
        w.u8(e.tombstone)


def _get_map(r: Reader) -> dict:
    out = {}
    for _ in range(r.u32()):
        k = r.bytes_()
        out[k] = VersionMapEntry(k, r.csn(), bool(r.u8()))
    return out


def encode_transfer(version, old_shard, new_shard, epoch, entries) -> bytes:
    w = Writer()
    w.u32(version)
    w.u32(old_shard)
    w.u32(new_shard)
    w.u64(epoch)
    _put_map(w, entries)
    return w.getvalue()


def decode_transfer(data):
    r = Reader(data)
    out = (r.u32(), r.u32(), r.u32(), r.u64(), _get_map(r))
    r.expect_end()
    return out


def encode_shard_catchup(epoch: int, snaps: dict) -> bytes:
    w = Writer()
    w.u64(epoch)
    w.u32(len(snaps))
    for s in sorted(snaps):
        w.u32(s)
        _put_map(w, snaps[s].entries)
    return w.getvalue()


def decode_shard_catchup(data):
    r = Reader(data)
    epoch = r.u64()
    snaps = {}
    for _ in range(r.u32()):
        s = r.u32()
        snaps[s] = _get_map(r)
    r.expect_end()
    return epoch, snaps


def encode_catchup(node: CCNode, joiner: int, j: int) -> bytes:
    smap = node.map_for(j)
    mine = smap.shards_of(joiner)
    # shards the leader does not replicate arrive separately from their own donors
    snaps = {s: node.snapshots[s] for s in mine if s in node.snapshots}
    floor = 0
    for c in list(node.verdicts) + list(node.backups.entries):
        if c.node_id == joiner and c.local_time > floor:
            floor = c.local_time
    head = {
        "views": node.history.to_list(),
        "maps": [[c, m.to_json()] for c, m in node.maps],
        "finalized": node.finalized,
        "groups": {g: [v.expected, v.first_cen, v.state] for g, v in node.groups.items()},
        "floor": floor,
    }
    w = Writer()
    w.str_(json.dumps(head, sort_keys=True))
    w.u32(len(snaps))
    for s in sorted(snaps):
        w.u32(s)
        _put_map(w, snaps[s].entries)
    entries = sorted(node.backups.entries.items())
    w.u32(len(entries))
    for _, e in entries:
        w.u32(e.client)
        put_tagged(w, e.txn)
    w.u32(len(node.verdicts))
    for c in sorted(node.verdicts):
        verdict, reason, cen = node.verdicts[c]
        w.csn(c)
        w.u8(verdict)
        w.u8(reason or 0)
        w.u64(cen)
    index = sorted(node.txn_index.items())
    w.u32(len(index))
    for txn_id, c in index:
        w.str_(txn_id)
        w.csn(c)
    w.u32(len(node.deferred))
    for c in sorted(node.deferred):
        w.csn(c)
    claims = sorted(node.claims.items())
    w.u32(len(claims))
    for v, cl in claims:
        cl.put(w)
    return w.getvalue()


def decode_catchup(data) -> dict:
    r = Reader(data)
    out = json.loads(r.str_())
    snaps = {}
    for _ in range(r.u32()):
        s = r.u32()
        snaps[s] = GlobalWriteVersionMap(_get_map(r), out["finalized"])
    out["snapshots"] = snaps
    out["backups"] = [(r.u32(), get_tagged(r)) for _ in range(r.u32())]
    verdicts = {}
    for _ in range(r.u32()):
        c = r.csn()
        verdict = Verdict(r.u8())
        reason = r.u8()
        verdicts[c] = (verdict, AbortReason(reason) if reason else None, r.u64())
    out["verdicts"] = verdicts
    out["index"] = {r.str_(): r.csn() for _ in range(r.u32())}
    out["deferred"] = [r.csn() for _ in range(r.u32())]
    out["claims"] = {}
    for _ in range(r.u32()):
        cl = LeaderClaim.get(r)
        out["claims"][cl.view] = cl
    r.expect_end()
    return out
