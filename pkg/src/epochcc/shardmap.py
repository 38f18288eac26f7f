"""Key-to-shard assignment and sub-transaction splitting."""

from __future__ import annotations

import json
import zlib
from typing import Iterable


def stable_hash(key: bytes) -> int:
    return zlib.crc32(key)


class ShardMap:
    """shard(key) = crc32(key) mod num_shards; each shard has >= 1 replica."""

    __slots__ = ("version", "num_shards", "assignment", "_by_node")

    def __init__(self, version: int, num_shards: int, assignment):
        if num_shards < 1:
            raise ValueError("need at least one shard")
        assignment = tuple(tuple(sorted(a)) for a in assignment)
        if len(assignment) != num_shards or any(not a for a in assignment):
            raise ValueError("every shard needs at least one replica")
        self.version = version
        self.num_shards = num_shards
        self.assignment = assignment
        self._by_node: dict = {}
        for s, reps in enumerate(assignment):
            for n in reps:
                self._by_node.setdefault(n, []).append(s)

    @classmethod
    def build(cls, version: int, num_shards: int, nodes: Iterable[int], replicas: int = 0):
        """Round-robin placement: shard s lives on nodes[s], nodes[s+1], ..."""
        nodes = sorted(nodes)
        r = len(nodes) if replicas <= 0 else min(replicas, len(nodes))
        return cls(version, num_shards,
                   [[nodes[(s + i) % len(nodes)] for i in range(r)] for s in range(num_shards)])

    def shard_of(self, key: bytes) -> int:
        if self.num_shards == 1:
            return 0
        return zlib.crc32(key) % self.num_shards

    def shards_of(self, node: int) -> list:
        return self._by_node.get(node, [])

    def live_replicas(self, shard: int, members) -> list:
        return [n for n in self.assignment[shard] if n in members]

    def route_target(self, shard: int, members):
        """Lowest live replica, or None if the shard has none."""
        for n in self.assignment[shard]:
            if n in members:
                return n
        return None

    def needs_routing(self, members) -> bool:
        members = set(members)
        return any(not members <= set(a) for a in self.assignment)

    def same_layout(self, other: "ShardMap") -> bool:
        return self.num_shards == other.num_shards and self.assignment == other.assignment

    def __eq__(self, other):
        if not isinstance(other, ShardMap):
            return NotImplemented
        return self.version == other.version and self.same_layout(other)

    def __repr__(self):
        return f"ShardMap(v{self.version}, {self.num_shards} shards, {self.assignment})"

    def to_json(self) -> str:
        return json.dumps([self.version, self.num_shards, [list(a) for a in self.assignment]])

    @classmethod
    def from_json(cls, text: str) -> "ShardMap":
        v, n, a = json.loads(text)
        return cls(v, n, a)


def shard_txn(txn, smap: ShardMap) -> dict:
    """Split *txn* into per-shard sub-transactions sharing its csn and cen."""
    if smap.num_shards == 1:
        return {0: txn}
    reads: dict = {}
    writes: dict = {}
    for r in txn.request.read_set:
        reads.setdefault(smap.shard_of(r.key), []).append(r)
    for w in txn.request.write_set:
        writes.setdefault(smap.shard_of(w.key), []).append(w)
    shards = sorted(set(reads) | set(writes))
    if len(shards) == 1:
        return {shards[0]: txn}
    return {s: txn.with_sets(tuple(reads.get(s, ())), tuple(writes.get(s, ()))) for s in shards}
