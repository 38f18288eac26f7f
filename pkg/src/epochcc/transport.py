"""Frames and networks.

Frame layout (little-endian)::

    u32 len | u8 kind | u8 version | payload | u32 crc32

``len`` counts kind, version and payload. ``payload`` is a fixed header
(cen u64, shard u32, src u32, dst u32, deliver_tick u64, seq u64) followed
by the body's canonical encoding. The CRC covers kind, version and payload.

Both the simulated network and the TCP one route every send through
``NetworkBase.prepare`` so the per-sender RNG, latency model and drop rules
behave identically.
"""

from __future__ import annotations

import hashlib
import heapq
import random
import struct
import zlib
from collections import Counter
from dataclasses import dataclass, field
from typing import Optional

from .errors import CodecError, FrameCorrupt, Unreachable
from .messages import WIRE_VERSION, Kind, Message, body_size, decode_body, encode_body

_LEN = struct.Struct("<I")
_KV = struct.Struct("<BB")
_MHDR = struct.Struct("<QIIIQQ")
_CRC = struct.Struct("<I")


def encode_frame(msg: Message) -> bytes:
    payload = _MHDR.pack(msg.cen, msg.shard, msg.src, msg.dst, msg.deliver_tick, msg.seq) \
        + encode_body(msg.kind, msg.body)
    inner = _KV.pack(msg.kind, WIRE_VERSION) + payload
    return _LEN.pack(len(inner)) + inner + _CRC.pack(zlib.crc32(inner))


def decode_frame(data) -> tuple:
    """Decode one frame from the start of *data*; returns (message, bytes used)."""
    if len(data) < _LEN.size:
        raise CodecError("short frame")
    (n,) = _LEN.unpack_from(data, 0)
    end = _LEN.size + n + _CRC.size
    if len(data) < end:
        raise CodecError("short frame")
    inner = bytes(data[_LEN.size:_LEN.size + n])
    (crc,) = _CRC.unpack_from(data, _LEN.size + n)
    if crc != zlib.crc32(inner):
        raise FrameCorrupt("frame crc mismatch")
    kind_raw, version = _KV.unpack_from(inner, 0)
    if version != WIRE_VERSION:
        raise CodecError(f"unsupported wire version {version}")
    try:
        kind = Kind(kind_raw)
    except ValueError:
        raise CodecError(f"unknown message kind {kind_raw}") from None
    cen, shard, src, dst, tick, seq = _MHDR.unpack_from(inner, _KV.size)
    body = decode_body(kind, inner[_KV.size + _MHDR.size:])
    return Message(kind, src, dst, body, cen, shard, tick, seq), end


@dataclass
class LinkModel:
    """Latency in ticks: base + uniform jitter + payload bytes / bandwidth."""

    base: int = 1
    jitter: int = 1
    bytes_per_tick: int = 16384
    max_latency: int = 8

    def latency(self, rng: random.Random, size: int) -> int:
        lat = self.base
        if self.jitter:
            lat += rng.randint(0, self.jitter)
        if self.bytes_per_tick:
            lat += size // self.bytes_per_tick
        return max(1, min(lat, self.max_latency))


# Kinds whose loss the protocol repairs by retry or pull.
DROPPABLE = frozenset({Kind.LOG_PUSH_FRAME, Kind.LOG_PULL_REPLY, Kind.MEMBERSHIP_BEAT})


@dataclass
class FaultState:
    down: set = field(default_factory=set)
    groups: Optional[list] = None           # list of frozensets, None = healed
    drops: dict = field(default_factory=dict)   # Kind -> percent

    def reachable(self, src: int, dst: int) -> bool:
        if dst in self.down or src in self.down:
            return False
        if self.groups is None:
            return True
        gs = gd = None
        for i, g in enumerate(self.groups):
            if src in g:
                gs = i
            if dst in g:
                gd = i
        return gs is None or gd is None or gs == gd


class NetworkBase:
    """Counters, the per-sender RNG and the send-side fault rules."""

    def __init__(self, seed: int, link: Optional[LinkModel] = None):
        self.seed = seed
        self.link = link or LinkModel()
        self.now = 0
        self.faults = FaultState()
        self.counts: Counter = Counter()        # (kind, src, dst)
        self.by_cen: Counter = Counter()        # (kind, cen)
        self.bytes_by_kind: Counter = Counter()
        self.dropped: Counter = Counter()
        self._rngs: dict = {}
        self._seqs: Counter = Counter()
        self.crash_hooks: list = []           # (kind, src, cen) -> crash src after step
        self.pending_crashes: list = []

    def rng(self, src: int) -> random.Random:
        r = self._rngs.get(src)
        if r is None:
            r = self._rngs[src] = random.Random(f"{self.seed}:{src}")
        return r

    def prepare(self, src: int, dst: int, kind: Kind, body, cen: int = 0,
                shard: int = 0) -> Optional[Message]:
        if not self.faults.reachable(src, dst):
            raise Unreachable(f"{src} -> {dst}")
        rng = self.rng(src)
        pct = self.faults.drops.get(kind)
        self._seqs[src] += 1
        if pct and rng.random() * 100.0 < pct:
            self.dropped[kind] += 1
            return None
        size = body_size(body)
        tick = self.now + self.link.latency(rng, size)
        self.counts[(kind, src, dst)] += 1
        self.by_cen[(kind, cen)] += 1
        self.bytes_by_kind[kind] += size
        for hook in self.crash_hooks:
            if hook[0] == kind and hook[1] == src and hook[2] == cen:
                self.pending_crashes.append(src)
        return Message(kind, src, dst, body, cen, shard, tick, self._seqs[src])

    def by_kind_total(self, kind: Kind) -> int:
        return sum(n for (k, _, _), n in self.counts.items() if k == kind)

    def send(self, src, dst, kind, body, cen=0, shard=0) -> None:
        raise NotImplementedError


class SimNetwork(NetworkBase):
    """In-memory delivery keyed by tick; ordering within a tick is (dst, src, seq)."""

    def __init__(self, seed: int, link: Optional[LinkModel] = None, wire_check: bool = False,
                 trace: bool = False):
        super().__init__(seed, link)
        self.wire_check = wire_check
        self.queue: dict = {}
        self._ticks: list = []
        self.digest = hashlib.sha256() if trace else None
        self.delivered = 0

    def send(self, src, dst, kind, body, cen=0, shard=0) -> None:
        msg = self.prepare(src, dst, kind, body, cen, shard)
        if msg is None:
            return
        if self.wire_check:
            msg, _ = decode_frame(encode_frame(msg))
        bucket = self.queue.get(msg.deliver_tick)
        if bucket is None:
            bucket = self.queue[msg.deliver_tick] = []
            heapq.heappush(self._ticks, msg.deliver_tick)
        bucket.append(msg)

    def next_tick(self) -> Optional[int]:
        return self._ticks[0] if self._ticks else None

    def pop(self, tick: int) -> dict:
        """Messages due at *tick*, grouped by destination in delivery order."""
        if not self._ticks or self._ticks[0] != tick:
            return {}
        heapq.heappop(self._ticks)
        msgs = self.queue.pop(tick)
        msgs.sort(key=lambda m: (m.dst, m.src, m.seq))
        out: dict = {}
        for m in msgs:
            if m.dst in self.faults.down:
                self.dropped["crashed-dst"] += 1
                continue
            out.setdefault(m.dst, []).append(m)
            self.delivered += 1
            if self.digest is not None:
                self.digest.update(struct.pack("<QBII Q", tick, m.kind, m.src, m.dst, m.seq))
        return out

    def trace_digest(self) -> Optional[str]:
        return self.digest.hexdigest() if self.digest is not None else None
