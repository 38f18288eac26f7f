"""Deterministic in-process cluster, scenario runner and run reports.

The loop is tick-lockstep: at each tick it applies scripted faults, delivers
due messages grouped by destination, then steps every actor that has mail or
asked to be woken, in id order. Given a config and seed the run, and the
report it writes, are byte-identical.

Actor ids: CC nodes 1.., storage 101.., clients 1001.., probes 9000...
"""

from __future__ import annotations

import dataclasses
import json
import logging
import tempfile
from collections import Counter
from dataclasses import dataclass, field
from typing import Callable, Optional

from .actors import ClientActor, ClientConfig, ProbeActor, StorageActor, StorageConfig
from .conflict import GlobalWriteVersionMap
from .coordinator import CCConfig, CCNode
from .core import INITIAL, AbortReason, Verdict
from .errors import ConfigError, IncompleteHistory
from .faults import KIND_LABEL, KIND_NAMES, parse_faults
from .messages import AdminFrame, AdminKind, GetData, Kind, SubmitTxn
from .oracle import check_end_state, si_oracle
from .transport import LinkModel, SimNetwork
from .workload import WorkloadSpec, base_dataset, engines_of, gen_workload

log = logging.getLogger(__name__)

STORAGE_BASE = 101
CLIENT_BASE = 1001
PROBE_BASE = 9000


@dataclass
class ScenarioConfig:
    seed: int = 1
    cc_nodes: int = 3
    exec_nodes: int = 4
    clients_per_exec: int = 4
    storage_nodes: int = 2
    shards: int = 1
    replicas: int = 0
    epoch_ticks: int = 10
    tick_ms: float = 1.0
    log_mode: str = "async"
    local_first: bool = True
    txns: int = 1000
    duration: Optional[int] = None          # ticks during which clients start txns
    faults: str = ""                        # fault script text
    transport: str = "sim"
    fsync: bool = False
    wire_check: bool = False
    trace: bool = False
    group_horizon: int = 4
    max_ticks: int = 5_000_000
    window: int = 100
    workload: WorkloadSpec = field(default_factory=WorkloadSpec)
    link: LinkModel = field(default_factory=LinkModel)
    storage: StorageConfig = field(default_factory=StorageConfig)
    client: ClientConfig = field(default_factory=ClientConfig)

    def __post_init__(self):
        nested = {"workload": WorkloadSpec, "link": LinkModel, "storage": StorageConfig,
                  "client": ClientConfig}
        for key, typ in nested.items():
            v = getattr(self, key)
            if isinstance(v, dict):
                bad = set(v) - {f.name for f in dataclasses.fields(typ)}
                if bad:
                    raise ConfigError(f"unknown {key} keys: {sorted(bad)}")
                setattr(self, key, typ(**v))

    def validate(self):
        if self.cc_nodes < 1 or self.storage_nodes < 1 or self.exec_nodes < 0:
            raise ConfigError("need at least one CC node and one storage node")
        if self.cc_nodes > 99 or self.storage_nodes > 99:
            raise ConfigError("at most 99 nodes per layer")
        if self.shards < 1:
            raise ConfigError("shards must be >= 1")
        if self.replicas < 0 or self.replicas > self.cc_nodes:
            raise ConfigError("replicas must be within [0, cc_nodes]")
        if self.epoch_ticks < 1:
            raise ConfigError("epoch must be >= 1 tick")
        if self.log_mode not in ("sync", "async"):
            raise ConfigError("log mode is sync or async")
        if self.transport not in ("sim", "tcp"):
            raise ConfigError("transport is sim or tcp")
        if self.txns < 0:
            raise ConfigError("txns must be >= 0")
        parse_faults(self.faults)
        return self

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "ScenarioConfig":
        unknown = set(d) - {f.name for f in dataclasses.fields(cls)}
        if unknown:
            raise ConfigError(f"unknown scenario keys: {sorted(unknown)}")
        return cls(**d).validate()


class InProcessCluster:
    def __init__(self, cfg: ScenarioConfig, log_dir: Optional[str] = None):
        cfg.validate()
        self.cfg = cfg
        self.net = SimNetwork(cfg.seed, cfg.link, cfg.wire_check, cfg.trace)
        self.script = parse_faults(cfg.faults)
        self.net.crash_hooks = [(t.kind, t.node, t.cen) for t in self.script.triggers]
        self._tmp = None
        if log_dir is None:
            self._tmp = tempfile.TemporaryDirectory(prefix="epochcc-")
            log_dir = self._tmp.name
        self.log_dir = log_dir
        self.cc_ids = tuple(range(1, cfg.cc_nodes + 1))
        self.storage_ids = tuple(range(STORAGE_BASE, STORAGE_BASE + cfg.storage_nodes))
        self.base = base_dataset(cfg.workload)
        self.engines = engines_of(cfg.workload)
        self.actors: dict = {}
        self.wake: dict = {}
        self.ccs: dict = {}
        self.storages: dict = {}
        self.retired: dict = {}           # crashed CC actors, for their verdict tables
        self.now = 0
        self.fault_log: list = []
        self.reshard_replies: list = []
        for i in self.cc_ids:
            self._start_cc(i, joining=False)
        for s in self.storage_ids:
            self._start_storage(s, recovering=False)
        self.generator = gen_workload(cfg.workload, cfg.seed)
        self.issued = 0
        self.clients: list = []
        n = cfg.exec_nodes * cfg.clients_per_exec
        for i in range(n):
            cid = CLIENT_BASE + i
            c = ClientActor(cid, self.cc_ids, self.cc_ids[i % len(self.cc_ids)],
                            self.storage_ids, self.storage_ids[i % len(self.storage_ids)],
                            self._next_plan, self.net, cfg.client)
            self._add(c)
            self.clients.append(c)
        self.admin = ProbeActor(PROBE_BASE, self.net)
        self._add(self.admin)
        self._probes = 1
        self._fault_ticks = sorted(self.script.ticks())

    # -- setup -------------------------------------------------------------------------

    def _cc_cfg(self, i) -> CCConfig:
        c = self.cfg
        return CCConfig(node_id=i, cluster=self.cc_ids, storage=self.storage_ids,
                        log_dir=f"{self.log_dir}/cc{i}", epoch_ticks=c.epoch_ticks,
                        shards=c.shards, replicas=c.replicas, log_mode=c.log_mode,
                        local_first=c.local_first, fsync=c.fsync,
                        suspect_after=max(30, 5 + 3 * c.link.max_latency),
                        group_horizon=c.group_horizon)

    def _preload(self, node: CCNode):
        smap = node.map_for(1)
        keys: dict = {s: [] for s in node.snapshots}
        for rows in self.base.values():
            for k in rows:
                s = smap.shard_of(k)
                if s in keys:
                    keys[s].append(k)
        for s, ks in keys.items():
            node.snapshots[s] = GlobalWriteVersionMap.preloaded(ks)

    def _start_cc(self, i, joining):
        node = CCNode(self._cc_cfg(i), self.net, joining=joining)
        if not joining:
            self._preload(node)
        self._add(node)
        self.ccs[i] = node

    def _start_storage(self, s, recovering):
        st = StorageActor(s, self.cc_ids, self.base, self.engines, self.net, self.cfg.storage,
                          recovering=recovering)
        self._add(st)
        self.storages[s] = st

    def _add(self, actor):
        self.actors[actor.id] = actor
        self.wake[actor.id] = self.now

    def add_probe(self) -> ProbeActor:
        p = ProbeActor(PROBE_BASE + self._probes, self.net)
        self._probes += 1
        self._add(p)
        return p

    def _next_plan(self):
        cfg = self.cfg
        if self.issued >= cfg.txns:
            return None
        if cfg.duration is not None and self.now >= cfg.duration:
            return None
        self.issued += 1
        return next(self.generator)

    # -- loop ----------------------------------------------------------------------------

    def _next_event(self) -> Optional[int]:
        cands = [t for t in self.wake.values() if t is not None]
        nt = self.net.next_tick()
        if nt is not None:
            cands.append(nt)
        while self._fault_ticks and self._fault_ticks[0] < self.now:
            self._fault_ticks.pop(0)
        if self._fault_ticks:
            cands.append(self._fault_ticks[0])
        if not cands:
            return None
        return max(min(cands), self.now)

    def run(self, stop: Optional[Callable[[], bool]] = None, until: Optional[int] = None) -> bool:
        """Advance until *stop* is true or tick *until*; returns True if stopped."""
        while True:
            if stop is not None and stop():
                return True
            if self.lost_shards():
                return False
            t = self._next_event()
            if t is None:
                return False
            if until is not None and t > until:
                self.now = until
                self.net.now = until
                return False
            if t > self.cfg.max_ticks:
                return False
            self.tick(t)

    def tick(self, t: int):
        self.now = t
        self.net.now = t
        if self._fault_ticks and self._fault_ticks[0] == t:
            self._fault_ticks.pop(0)
            for a in self.script.at(t):
                self._apply_fault(a)
        due = self.net.pop(t)
        woken = {aid for aid, w in self.wake.items() if w is not None and w <= t}
        for aid in sorted(woken | set(due)):
            actor = self.actors.get(aid)
            if actor is None:
                continue
            actor.step(t, due.get(aid, ()))
            w = actor.next_wakeup()
            self.wake[aid] = None if w is None else max(w, t + 1)
            if self.net.pending_crashes:
                for n in self.net.pending_crashes:
                    self._crash(n, triggered=True)
                self.net.pending_crashes = []

    # -- faults ------------------------------------------------------------------------------

    def _apply_fault(self, a):
        entry = {"tick": a.tick, "action": a.action}
        if a.action == "crash":
            for n in a.nodes:
                self._crash(n)
            return
        if a.action == "recover":
            for n in a.nodes:
                self._recover(n)
            return
        f = self.net.faults
        if a.action == "partition":
            f.groups = [frozenset(g) for g in a.groups]
            entry["groups"] = [sorted(g) for g in a.groups]
        elif a.action == "heal":
            f.groups = None
        elif a.action == "drop":
            f.drops[a.kind] = a.pct
            entry.update(kind=KIND_LABEL[a.kind], pct=a.pct)
        elif a.action == "undrop":
            if a.kind is None:
                f.drops.clear()
            else:
                f.drops.pop(a.kind, None)
        elif a.action == "reshard":
            leader = self.leader()
            entry.update(shards=a.shards, replicas=a.replicas, leader=leader)
            if leader is not None:
                self.admin.send(leader, Kind.ADMIN_FRAME, AdminFrame(
                    AdminKind.TRIGGER_RESHARD, {"shards": a.shards, "replicas": a.replicas}))
        self.fault_log.append(entry)

    def leader(self) -> Optional[int]:
        live = [n for n in self.cc_ids if n in self.ccs and not self.ccs[n].joining]
        if not live:
            return None
        members = self.ccs[live[0]].history.latest_members()
        cands = [n for n in members if n in live]
        return min(cands) if cands else None

    def _crash(self, n, triggered=False):
        if n in self.net.faults.down:
            return
        self.net.faults.down.add(n)
        self.fault_log.append({"tick": self.now, "action": "crash", "nodes": [n],
                               "triggered": triggered})
        actor = self.actors.pop(n, None)
        self.wake.pop(n, None)
        if n in self.ccs:
            node = self.ccs.pop(n)
            node.close()
            self.retired.setdefault(n, []).append(node)
        elif n in self.storages:
            self.storages.pop(n)
        del actor
        # messages already queued for the node are lost with it
        for bucket in self.net.queue.values():
            bucket[:] = [m for m in bucket if m.dst != n]

    def _recover(self, n):
        if n not in self.net.faults.down:
            return
        self.net.faults.down.discard(n)
        self.fault_log.append({"tick": self.now, "action": "recover", "nodes": [n]})
        if n in self.cc_ids:
            self._start_cc(n, joining=True)
        elif n in self.storage_ids:
            self._start_storage(n, recovering=True)
        self.wake[n] = self.now

    # -- completion --------------------------------------------------------------------------

    def history(self) -> list:
        out = [t for c in self.clients for t in c.history]
        out.sort(key=lambda t: (t.cen, t.csn, t.txn_id))
        return out

    def clients_done(self) -> bool:
        return all(c.done and c.cur is None for c in self.clients)

    def lost_shards(self) -> list:
        """Shards that lost every replica; the run cannot finish once this is non-empty."""
        out = set()
        for n in self.ccs.values():
            out |= n.lost_shards
        return sorted(out)

    def drained(self) -> bool:
        if not self.clients_done():
            return False
        target = max((t.cen for c in self.clients for t in c.history), default=0)
        for s in self.storages.values():
            if s.store.watermark < target or s.busy():
                return False
        for n in self.ccs.values():
            if n.joining or n.finalized < target:
                return False
        return True

    def close(self):
        for n in self.ccs.values():
            n.close()
        if self._tmp is not None:
            self._tmp.cleanup()
            self._tmp = None


# -- metrics --------------------------------------------------------------------------------


def _pct(values, q):
    if not values:
        return None
    v = sorted(values)
    i = min(len(v) - 1, max(0, int(round(q * (len(v) - 1)))))
    return v[i]


def rtt_per_epoch(net) -> dict:
    """cen -> (one-way hops, rounds) on the commit path of that epoch."""
    out = {}
    cens = {cen for (kind, cen) in net.by_cen if cen}
    for e in cens:
        route = net.by_cen.get((Kind.SUB_TXN_ROUTE, e), 0) > 0
        ws = net.by_cen.get((Kind.WRITE_SET_PAYLOAD, e), 0) > 0
        merge = net.by_cen.get((Kind.ABORT_SET_PAYLOAD, e), 0) > 0
        hops = 2 + route + ws + merge
        out[e] = (hops, 1 + route + ws + merge)
    return out


@dataclass
class RunReport:
    config: dict
    summary: dict
    records: list
    history: list = field(default_factory=list)

    def lines(self, with_history: bool = False):
        yield {"type": "config", "config": self.config}
        for r in self.records:
            yield r
        if with_history:
            for t in self.history:
                yield {"type": "txn", **t.to_json()}
        yield {"type": "summary", **self.summary}

    def to_jsonl(self, with_history: bool = False) -> str:
        return "".join(json.dumps(r, sort_keys=True, default=_json_default) + "\n"
                       for r in self.lines(with_history))

    def write(self, path: str, with_history: bool = True):
        with open(path, "w") as fh:
            fh.write(self.to_jsonl(with_history))


def _json_default(o):
    if isinstance(o, bytes):
        return o.hex()
    if isinstance(o, (set, frozenset)):
        return sorted(o)
    if hasattr(o, "name"):
        return o.name
    raise TypeError(f"not serializable: {type(o).__name__}")


def build_report(cluster: InProcessCluster, completed: bool) -> RunReport:
    cfg = cluster.cfg
    net = cluster.net
    hist = cluster.history()
    committed = [t for t in hist if t.verdict == Verdict.COMMITTED]
    reasons = Counter(t.reason.name for t in hist if t.verdict == Verdict.ABORTED)
    lat = [x for c in cluster.clients for x in c.latencies]
    lat_committed = [x[1] for x in lat if x[2]]
    last_tick = max((x[0] for x in lat), default=0)
    seconds = last_tick * cfg.tick_ms / 1000.0

    node_tables = {}
    for n, node in cluster.ccs.items():
        node_tables[n] = node.verdicts
    pending = sum(1 for c in cluster.clients if c.cur is not None)
    oracle: dict
    try:
        if pending:
            raise IncompleteHistory(f"{pending} transactions without a decision")
        res = si_oracle(hist, cluster.base, node_tables,
                        {k: v for c in cluster.clients for k, v in c.received.items()})
        oracle = res.summary()
    except IncompleteHistory as exc:
        oracle = {"ok": False, "error": f"IncompleteHistory: {exc}"}
    snaps = {s: st.store.snapshot() for s, st in cluster.storages.items()}
    end_state = check_end_state(cluster.base, hist, snaps) if completed else ["run incomplete"]

    # commit-path accounting
    per_epoch = rtt_per_epoch(net)
    hops = [per_epoch.get(t.cen, (2, 1)) for t in committed]
    rtt = {
        "mean": (sum(h for h, _ in hops) / 2 / len(hops)) if hops else 0.0,
        "max": (max(h for h, _ in hops) / 2) if hops else 0.0,
        "rounds_max": max((r for _, r in hops), default=0),
        "backup_rtt": 1 if net.by_kind_total(Kind.TXN_BACKUP) else 0,
        "storage_push_frames": net.by_kind_total(Kind.LOG_PUSH_FRAME),
    }

    # decision emission vs storage application (write transactions)
    emitted: dict = {}
    for nodes in [cluster.ccs.values()] + [v for v in cluster.retired.values()]:
        for node in nodes:
            for c, tk in node.emitted.items():
                if c not in emitted or tk < emitted[c]:
                    emitted[c] = tk
    applied: dict = {}
    for st in cluster.storages.values():
        for c, tk in st.first_apply.items():
            if c not in applied or tk < applied[c]:
                applied[c] = tk
    writes = [t for t in committed if t.writes and t.csn in emitted and t.csn in applied]
    before = sum(1 for t in writes if emitted[t.csn] < applied[t.csn])
    lag = [applied[t.csn] - emitted[t.csn] for t in writes]

    msgs = Counter()
    for (kind, src, dst), n in net.counts.items():
        msgs[KIND_LABEL[kind]] += n
    windows = Counter()
    for x in lat:
        if x[2]:
            windows[x[0] // cfg.window] += 1
    stats = Counter()
    for n in list(cluster.ccs.values()):
        for k in ("reexecuted_epochs", "view_changes", "takeovers", "dropped_stale",
                  "overloaded"):
            stats[k] = max(stats[k], n.stats[k])
    for lst in cluster.retired.values():
        for n in lst:
            stats["reexecuted_epochs"] = max(stats["reexecuted_epochs"],
                                             n.stats["reexecuted_epochs"])

    records = []
    for f in cluster.fault_log:
        records.append({"type": "fault", **f})
    for w in sorted(windows):
        records.append({"type": "window", "start": w * cfg.window, "committed": windows[w]})
    ref = min(cluster.ccs) if cluster.ccs else None
    if ref is not None:
        for r in cluster.ccs[ref].epoch_records:
            if r["committed"] or r["aborted"] or r["deferred"]:
                records.append({"type": "epoch", "node": ref, **r})
    reshard = reshard_check(cluster)
    if reshard:
        records.append({"type": "reshard", **reshard})

    summary = {
        "completed": completed,
        "lost_shards": cluster.lost_shards(),
        "ticks": cluster.now,
        "txns": len(hist),
        "committed": len(committed),
        "aborted": len(hist) - len(committed),
        "abort_rate": (len(hist) - len(committed)) / len(hist) if hist else 0.0,
        "aborts_by_reason": dict(sorted(reasons.items())),
        "throughput_tps": len(committed) / seconds if seconds else 0.0,
        "latency_ticks": {"p50": _pct(lat_committed, 0.5), "p95": _pct(lat_committed, 0.95),
                          "p99": _pct(lat_committed, 0.99)},
        "latency_ms": {q: (v * cfg.tick_ms if v is not None else None) for q, v in
                       (("p50", _pct(lat_committed, 0.5)), ("p95", _pct(lat_committed, 0.95)),
                        ("p99", _pct(lat_committed, 0.99)))},
        "messages_by_kind": dict(sorted(msgs.items())),
        "bytes_by_kind": {KIND_LABEL[k]: v for k, v in sorted(net.bytes_by_kind.items())},
        "dropped": {(KIND_LABEL.get(k, k) if not isinstance(k, str) else k): v
                    for k, v in sorted(net.dropped.items(), key=lambda x: str(x[0]))},
        "rtt": rtt,
        "epochs_finalized": min((n.finalized for n in cluster.ccs.values()), default=0),
        **dict(sorted(stats.items())),
        "decision_before_apply": {"writes": len(writes), "before": before,
                                  "fraction": before / len(writes) if writes else 1.0,
                                  "mean_lag_ticks": sum(lag) / len(lag) if lag else 0.0},
        "stale_read_aborts": reasons.get(AbortReason.READ_VALIDATION.name, 0),
        "storage_pulls": sum(s.pulls for s in cluster.storages.values()),
        "oracle": oracle,
        "end_state": {"ok": not end_state, "errors": end_state},
        "trace_digest": net.trace_digest(),
    }
    return RunReport(cfg.to_dict(), summary, records, hist)


def reshard_check(cluster: InProcessCluster) -> Optional[dict]:
    """Old-shard union at cutover - 1 must equal the new-shard union at cutover."""
    nodes = list(cluster.ccs.values()) + [n for lst in cluster.retired.values() for n in lst]
    olds, news = {}, {}
    for node in nodes:
        for r in node.reshard_records:
            if "old" in r:
                olds.setdefault(r["version"], {}).update(r["old"])
            else:
                news.setdefault(r["version"], []).append(r["new"])
    if not olds and not news:
        return None
    out = {"versions": sorted(set(olds) | set(news)), "ok": True, "keys": 0}
    for v in out["versions"]:
        old_union = {}
        for entries in olds.get(v, {}).values():
            old_union.update(entries)
        new_union = {}
        for per_node in news.get(v, []):
            for s, entries in per_node.items():
                for k, e in entries.items():
                    if k in new_union and new_union[k] != e:
                        out["ok"] = False
                    new_union[k] = e
        if old_union != new_union:
            out["ok"] = False
        out["keys"] += len(new_union)
    return out


def run_scenario(cfg: ScenarioConfig, log_dir: Optional[str] = None,
                 keep: bool = False) -> RunReport:
    cluster = InProcessCluster(cfg, log_dir)
    try:
        completed = cluster.run(stop=cluster.drained)
        report = build_report(cluster, completed)
        if keep:
            report.cluster = cluster
        return report
    finally:
        if not keep:
            cluster.close()


# -- synchronous access for the proxy and scripted scenarios ------------------------------


class SimBackend:
    """``proxy.Backend`` that drives the simulation until each call completes."""

    def __init__(self, cluster: InProcessCluster, cc: int, storage: int, limit: int = 5000):
        self.cluster = cluster
        self.cc = cc
        self.storage = storage
        self.probe = cluster.add_probe()
        self.limit = limit
        self.req = 0

    def open_epoch(self) -> int:
        return self.cluster.ccs[self.cc].open_cen

    def _wait(self, kind, pred):
        got = []

        def ready():
            m = self.probe.take(kind, pred)
            if m is not None:
                got.append(m)
                return True
            return False

        self.cluster.run(stop=ready, until=self.cluster.now + self.limit)
        if not got:
            raise TimeoutError(f"no {KIND_LABEL[kind]} within {self.limit} ticks")
        return got[0].body

    def get_data(self, key, engine="kv"):
        self.req += 1
        rid = self.req
        self.probe.send(self.storage, Kind.GET_DATA, GetData(rid, engine, [key]))
        return self._wait(Kind.DATA_REPLY, lambda b: b.req_id == rid).items[0][1]

    def send_submit(self, request):
        self.probe.send(self.cc, Kind.SUBMIT_TXN, SubmitTxn(self.probe.id, request))

    def wait_decision(self, txn_id):
        return self._wait(Kind.DECISION_REPLY,
                          lambda b: b.txn_id == txn_id and b.decision is not None)

    def submit(self, request):
        self.send_submit(request)
        return self.wait_decision(request.txn_id).decision


def run_read_skew(log_mode: str = "async", seed: int = 7) -> dict:
    """T1 writes X and Y; T3 sees T1's X but the old Y and must fail validation.

    Storage applies one row every 20 ticks, so there is a window in which X
    shows T1's write while Y still shows the initial value.
    """
    from .proxy import KVProxy
    from .workload import WorkloadSpec as _WS

    cfg = ScenarioConfig(
        seed=seed, cc_nodes=3, exec_nodes=0, storage_nodes=1, log_mode=log_mode, txns=0,
        workload=_WS(rows=1), link=LinkModel(base=1, jitter=0),
        storage=StorageConfig(rows_per_tick=1, apply_every=20))
    cluster = InProcessCluster(cfg)
    try:
        cluster.base = {"kv": {b"X": b"1", b"Y": b"1"}}
        for s in cluster.storages.values():
            s.store = type(s.store)(cluster.base, ("kv",))
        for n in cluster.ccs.values():
            cluster._preload(n)
        cluster.run(until=cfg.epoch_ticks)
        p1 = KVProxy(SimBackend(cluster, 1, STORAGE_BASE), "t1")
        t1 = p1.begin()
        p1.get(t1, b"X")
        p1.get(t1, b"Y")
        p1.put(t1, b"X", b"5")
        p1.put(t1, b"Y", b"5")
        p1.backend.send_submit(t1.to_request())

        b3 = SimBackend(cluster, 2, STORAGE_BASE)
        p3 = KVProxy(b3, "t3")
        polls = 0
        while True:
            sv = b3.get_data(b"X")
            polls += 1
            if sv is not None and sv.writer_csn != INITIAL:
                break
            cluster.run(until=cluster.now + 1)
        t3 = p3.begin()
        t3.observe(b"X", sv)
        y = p3.get(t3, b"Y")
        p3.put_new(t3, b"Z", b"%d" % (int(sv.value) + int(y)))
        d3 = p3.commit(t3)
        d1 = p1.backend.wait_decision(t1.txn_id).decision
        return {"t1": d1, "t3": d3, "x_seen": sv.value, "y_seen": y, "polls": polls}
    finally:
        cluster.close()
