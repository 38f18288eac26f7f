"""TCP mode: CC and storage nodes as separate processes.

A conductor in the parent process owns the clock. Each CC and storage node
runs ``python -m epochcc.live worker`` and talks to the conductor over a TCP
socket. Every tick the conductor sends each woken worker its due frames; the
worker steps its actor and answers with the frames it sent, its next wakeup
and a small status record. Workers call the same ``NetworkBase.prepare`` as
the simulator, so latency, drops and reachability rules are identical.
Clients run inside the conductor.

Control framing: ``u32 len | u8 type | body``. Types: STEP, DONE, FAULTS,
STATE_REQ, STATE, STOP, HELLO. Message frames inside STEP and DONE use the
regular wire format from ``transport``.

This mode exists to exercise real sockets and processes. The fault script
works as in the simulator (fault state is pushed to workers in FAULTS
frames), but a recovered worker starts with a fresh RNG, so runs with faults
are not reproducible. Nothing here claims determinism.
"""

from __future__ import annotations

import argparse
import heapq
import json
import os
import pickle
import socket
import struct
import subprocess
import sys
import tempfile
import time
from types import SimpleNamespace
from typing import Optional

from .actors import StorageActor
from .coordinator import CCNode
from .errors import Disconnected
from .harness import InProcessCluster, ScenarioConfig, build_report
from .messages import Kind
from .transport import NetworkBase, decode_frame, encode_frame

STEP, DONE, FAULTS, STATE_REQ, STATE, STOP, HELLO = range(1, 8)
_CTL = struct.Struct("<IB")


def _send_ctl(sock, kind: int, body: bytes = b""):
    sock.sendall(_CTL.pack(len(body), kind) + body)


def _recv_exact(sock, n: int) -> bytes:
    buf = bytearray()
    while len(buf) < n:
        chunk = sock.recv(n - len(buf))
        if not chunk:
            raise Disconnected("peer closed the connection")
        buf += chunk
    return bytes(buf)


def _recv_ctl(sock):
    n, kind = _CTL.unpack(_recv_exact(sock, _CTL.size))
    return kind, _recv_exact(sock, n)


def _frames(msgs) -> bytes:
    return struct.pack("<I", len(msgs)) + b"".join(encode_frame(m) for m in msgs)


def _unframes(data: bytes, pos: int = 0):
    (n,) = struct.unpack_from("<I", data, pos)
    pos += 4
    out = []
    view = memoryview(data)
    for _ in range(n):
        m, used = decode_frame(view[pos:])
        out.append(m)
        pos += used
    return out, pos


# -- worker side ---------------------------------------------------------------------


class WorkerNetwork(NetworkBase):
    """Buffers sends for the conductor instead of delivering them."""

    def __init__(self, seed, link):
        super().__init__(seed, link)
        self.outbox: list = []

    def send(self, src, dst, kind, body, cen=0, shard=0):
        msg = self.prepare(src, dst, kind, body, cen, shard)
        if msg is not None:
            self.outbox.append(msg)


def _status(actor) -> dict:
    if isinstance(actor, CCNode):
        return {"finalized": actor.finalized, "joining": actor.joining,
                "members": list(actor.history.latest_members()),
                "lost_shards": sorted(actor.lost_shards)}
    return {"watermark": actor.store.watermark, "busy": actor.busy()}


def _state(actor, net) -> bytes:
    if isinstance(actor, CCNode):
        d = {"verdicts": actor.verdicts, "emitted": actor.emitted, "stats": actor.stats,
             "epoch_records": actor.epoch_records, "reshard_records": actor.reshard_records,
             "finalized": actor.finalized, "joining": actor.joining,
             "lost_shards": actor.lost_shards}
    else:
        d = {"snapshot": actor.store.snapshot(), "first_apply": actor.first_apply,
             "pulls": actor.pulls, "watermark": actor.store.watermark}
    d["dropped"] = dict(net.dropped)
    return pickle.dumps(d)


def worker_main(args):
    with open(args.config) as fh:
        spec = json.load(fh)
    cfg = ScenarioConfig.from_dict(spec["scenario"])
    net = WorkerNetwork(cfg.seed, cfg.link)
    net.crash_hooks = [(Kind(k), n, c) for k, n, c in spec["crash_hooks"]]
    shell = InProcessCluster.__new__(InProcessCluster)
    shell.cfg = cfg
    shell.log_dir = spec["log_dir"]
    shell.cc_ids = tuple(spec["cc_ids"])
    shell.storage_ids = tuple(spec["storage_ids"])
    shell.base = {k: {bytes.fromhex(a): bytes.fromhex(b) for a, b in v.items()}
                  for k, v in spec["base"].items()}
    if args.role == "cc":
        actor = CCNode(shell._cc_cfg(args.id), net, joining=args.joining)
        if not args.joining:
            shell._preload(actor)
    else:
        actor = StorageActor(args.id, shell.cc_ids, shell.base, tuple(spec["engines"]), net,
                             cfg.storage, recovering=args.joining)
    sock = socket.create_connection(("127.0.0.1", args.port))
    sock.setsockopt(socket.IPPROTO_TCP, socket.TCP_NODELAY, 1)
    _send_ctl(sock, HELLO, struct.pack("<I", args.id))
    while True:
        kind, body = _recv_ctl(sock)
        if kind == STEP:
            (tick,) = struct.unpack_from("<Q", body, 0)
            msgs, _ = _unframes(body, 8)
            net.now = tick
            actor.step(tick, msgs)
            wake = actor.next_wakeup()
            crashed = 1 if net.pending_crashes else 0
            status = json.dumps(_status(actor)).encode()
            out = net.outbox
            net.outbox = []
            _send_ctl(sock, DONE, struct.pack("<qBI", -1 if wake is None else wake, crashed,
                                              len(status)) + status + _frames(out))
        elif kind == FAULTS:
            f = json.loads(body)
            net.faults.down = set(f["down"])
            net.faults.groups = None if f["groups"] is None else [frozenset(g) for g in
                                                                  f["groups"]]
            net.faults.drops = {int(k): v for k, v in f["drops"].items()}
        elif kind == STATE_REQ:
            _send_ctl(sock, STATE, _state(actor, net))
        elif kind == STOP:
            if isinstance(actor, CCNode):
                actor.close()
            sock.close()
            return


# -- conductor side --------------------------------------------------------------------


class RemoteActor:
    def __init__(self, aid, role):
        self.id = aid
        self.role = role
        self.sock = None
        self.proc = None
        self.wakeup: Optional[int] = 0
        self.status: dict = {}
        self.crashed = False

    def next_wakeup(self):
        return self.wakeup

    def close(self):
        """Hard stop, as a crash would."""
        if self.proc is not None and self.proc.poll() is None:
            self.proc.kill()
            self.proc.wait()
        if self.sock is not None:
            self.sock.close()


class LiveCluster(InProcessCluster):
    """Same loop as the simulator; CC and storage actors live in subprocesses."""

    def __init__(self, cfg: ScenarioConfig, log_dir: Optional[str] = None):
        self.remote: dict = {}
        self._pending: list = []
        self.listener = None
        self._fault_sig = None
        super().__init__(cfg, log_dir)
        self.listener = socket.socket()
        self.listener.setsockopt(socket.SOL_SOCKET, socket.SO_REUSEADDR, 1)
        self.listener.bind(("127.0.0.1", 0))
        self.listener.listen(64)
        self.listener.settimeout(60)
        self.port = self.listener.getsockname()[1]
        self.spec_path = os.path.join(self.log_dir, "live.json")
        with open(self.spec_path, "w") as fh:
            json.dump({
                "scenario": cfg.to_dict(), "log_dir": self.log_dir,
                "cc_ids": list(self.cc_ids), "storage_ids": list(self.storage_ids),
                "engines": list(self.engines),
                "crash_hooks": [[int(k), n, c] for k, n, c in self.net.crash_hooks],
                "base": {k: {a.hex(): b.hex() for a, b in v.items()}
                         for k, v in self.base.items()},
            }, fh)
        for aid, joining in self._pending:
            self._spawn(aid, joining)
        self._pending = []

    def _start_cc(self, i, joining):
        self._spawn(i, joining)

    def _start_storage(self, s, recovering):
        self._spawn(s, recovering)

    def _spawn(self, aid, joining):
        if self.listener is None:
            self._pending.append((aid, joining))
            return
        role = "cc" if aid in self.cc_ids else "storage"
        ra = RemoteActor(aid, role)
        cmd = [sys.executable, "-m", "epochcc.live", "worker", "--role", role, "--id", str(aid),
               "--port", str(self.port), "--config", self.spec_path]
        if joining:
            cmd.append("--joining")
        ra.proc = subprocess.Popen(cmd)
        conn, _ = self.listener.accept()
        conn.setsockopt(socket.IPPROTO_TCP, socket.TCP_NODELAY, 1)
        kind, body = _recv_ctl(conn)
        if kind != HELLO or struct.unpack("<I", body)[0] != aid:
            raise Disconnected("unexpected worker handshake")
        ra.sock = conn
        self.remote[aid] = ra
        self._add(ra)
        if role == "cc":
            self.ccs[aid] = ra
        else:
            self.storages[aid] = ra
        self._fault_sig = None

    def _sync_faults(self):
        f = self.net.faults
        body = json.dumps({"down": sorted(f.down),
                           "groups": None if f.groups is None else [sorted(g) for g in f.groups],
                           "drops": {int(k): v for k, v in f.drops.items()}},
                          sort_keys=True).encode()
        if body != self._fault_sig:
            for ra in self.remote.values():
                _send_ctl(ra.sock, FAULTS, body)
            self._fault_sig = body

    def tick(self, t: int):
        self.now = t
        self.net.now = t
        if self._fault_ticks and self._fault_ticks[0] == t:
            self._fault_ticks.pop(0)
            for a in self.script.at(t):
                self._apply_fault(a)
        self._sync_faults()
        due = self.net.pop(t)
        woken = {aid for aid, w in self.wake.items() if w is not None and w <= t}
        ids = sorted(woken | set(due))
        # remote actors of one tick can step concurrently: nothing they send arrives this tick
        busy = []
        for aid in ids:
            ra = self.remote.get(aid)
            if ra is not None and aid in self.actors:
                _send_ctl(ra.sock, STEP, struct.pack("<Q", t) + _frames(due.get(aid, ())))
                busy.append(ra)
        for aid in ids:
            if aid in self.remote or aid not in self.actors:
                continue
            actor = self.actors[aid]
            actor.step(t, due.get(aid, ()))
            w = actor.next_wakeup()
            self.wake[aid] = None if w is None else max(w, t + 1)
        for ra in busy:
            kind, body = _recv_ctl(ra.sock)
            wake, crashed, n = struct.unpack_from("<qBI", body, 0)
            pos = struct.calcsize("<qBI")
            ra.status = json.loads(body[pos:pos + n])
            msgs, _ = _unframes(body, pos + n)
            for m in msgs:
                self._inject(m)
            self.wake[ra.id] = None if wake < 0 else max(wake, t + 1)
            if crashed:
                self._crash(ra.id, triggered=True)

    def _inject(self, m):
        net = self.net
        net.counts[(m.kind, m.src, m.dst)] += 1
        net.by_cen[(m.kind, m.cen)] += 1
        bucket = net.queue.get(m.deliver_tick)
        if bucket is None:
            bucket = net.queue[m.deliver_tick] = []
            heapq.heappush(net._ticks, m.deliver_tick)
        bucket.append(m)

    def _crash(self, n, triggered=False):
        super()._crash(n, triggered)
        self.remote.pop(n, None)

    def leader(self):
        live = [n for n in self.cc_ids if n in self.remote and
                not self.remote[n].status.get("joining", False)]
        if not live:
            return None
        members = self.remote[live[0]].status.get("members", list(self.cc_ids))
        cands = [n for n in members if n in live]
        return min(cands) if cands else None

    def lost_shards(self) -> list:
        out = set()
        for ra in self.remote.values():
            out.update(ra.status.get("lost_shards", ()))
        return sorted(out)

    def drained(self) -> bool:
        if not self.clients_done():
            return False
        target = max((t.cen for c in self.clients for t in c.history), default=0)
        for n in self.storage_ids:
            ra = self.remote.get(n)
            if ra is not None and (ra.status.get("watermark", 0) < target or
                                   ra.status.get("busy", True)):
                return False
        for n in self.cc_ids:
            ra = self.remote.get(n)
            if ra is not None and (ra.status.get("joining", True) or
                                   ra.status.get("finalized", 0) < target):
                return False
        return True

    def collect_state(self):
        """Swap remote handles for plain snapshots that ``build_report`` can read."""
        for aid, ra in sorted(self.remote.items()):
            _send_ctl(ra.sock, STATE_REQ)
            kind, body = _recv_ctl(ra.sock)
            d = pickle.loads(body)
            self.net.dropped.update(d.pop("dropped"))
            if ra.role == "cc":
                self.ccs[aid] = SimpleNamespace(**d)
            else:
                store = SimpleNamespace(watermark=d["watermark"],
                                        snapshot=lambda d=d: d["snapshot"])
                self.storages[aid] = SimpleNamespace(store=store, first_apply=d["first_apply"],
                                                     pulls=d["pulls"], busy=lambda: False)
        self.retired = {}

    def close(self):
        for ra in self.remote.values():
            try:
                _send_ctl(ra.sock, STOP)
                ra.proc.wait(timeout=10)
            except (OSError, subprocess.TimeoutExpired):
                pass
            ra.close()
        self.remote = {}
        self.ccs = {}
        if self.listener is not None:
            self.listener.close()
        super().close()


def run_live(cfg: ScenarioConfig, log_dir: Optional[str] = None):
    tmp = None
    if log_dir is None:
        tmp = tempfile.TemporaryDirectory(prefix="epochcc-live-")
        log_dir = tmp.name
    cluster = LiveCluster(cfg, log_dir)
    started = time.monotonic()
    try:
        completed = cluster.run(stop=cluster.drained)
        cluster.collect_state()
        report = build_report(cluster, completed)
        report.summary["wall_seconds"] = round(time.monotonic() - started, 3)
        return report
    finally:
        cluster.close()
        if tmp is not None:
            tmp.cleanup()


def main(argv=None):
    p = argparse.ArgumentParser(prog="epochcc.live")
    sub = p.add_subparsers(dest="cmd", required=True)
    w = sub.add_parser("worker")
    w.add_argument("--role", choices=("cc", "storage"), required=True)
    w.add_argument("--id", type=int, required=True)
    w.add_argument("--port", type=int, required=True)
    w.add_argument("--config", required=True)
    w.add_argument("--joining", action="store_true")
    args = p.parse_args(argv)
    worker_main(args)


if __name__ == "__main__":
    main()
