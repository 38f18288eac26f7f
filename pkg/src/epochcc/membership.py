"""Consensus-lite membership: epoch-indexed views, failure detection, backups.

This is not Raft. The lowest live node proposes view changes, which need a
live majority of the configured cluster, and every view names the first
epoch it governs. Transaction backups go to every other member and count
as durable once a majority of the epoch's members (sender included) hold
them.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Iterable, Optional

from .errors import NoMajority


def majority(n: int) -> int:
    return n // 2 + 1


def elect_leader(live: Iterable[int]) -> int:
    """Lowest live id wins."""
    live = list(live)
    if not live:
        raise NoMajority("no live node")
    return min(live)


@dataclass(frozen=True)
class MembershipView:
    number: int
    members: tuple
    effective_cen: int

    @property
    def leader(self) -> int:
        return elect_leader(self.members)

    @property
    def term(self) -> int:
        return self.number


class ViewHistory:
    """Views ordered by number; each governs epochs from its effective CEN on.

    The governing view of epoch ``e`` is the one with the greatest
    (effective_cen, number) among those effective at or before ``e``.
    ``stamp(e)`` is the greatest view number effective at or before ``e``;
    epoch payloads are only accepted between nodes with equal stamps.
    """

    def __init__(self, members: Iterable[int]):
        self.views: list = [MembershipView(1, tuple(sorted(members)), 1)]

    @property
    def number(self) -> int:
        return self.views[-1].number

    @property
    def latest(self) -> MembershipView:
        return self.views[-1]

    def governing(self, cen: int) -> MembershipView:
        return max((v for v in self.views if v.effective_cen <= cen),
                   key=lambda v: (v.effective_cen, v.number), default=self.views[0])

    def members_at(self, cen: int) -> tuple:
        return self.governing(cen).members

    def stamp(self, cen: int) -> int:
        return max((v.number for v in self.views if v.effective_cen <= cen), default=1)

    def latest_members(self) -> tuple:
        return self.members_at(max(v.effective_cen for v in self.views))

    def apply_remove(self, number: int, node: int, from_cen: int) -> MembershipView:
        self.views = [
            MembershipView(v.number, tuple(m for m in v.members if m != node), v.effective_cen)
            if v.effective_cen >= from_cen else v for v in self.views]
        members = tuple(m for m in self.members_at(from_cen) if m != node)
        view = MembershipView(number, members, from_cen)
        self.views.append(view)
        return view

    def apply_add(self, number: int, node: int, at_cen: int) -> MembershipView:
        members = tuple(sorted(set(self.members_at(at_cen)) | {node}))
        view = MembershipView(number, members, at_cen)
        self.views.append(view)
        return view

    def pending_after(self, cen: int) -> bool:
        """True if some view takes effect after epoch *cen*."""
        return any(v.effective_cen > cen for v in self.views)

    def to_list(self) -> list:
        return [[v.number, list(v.members), v.effective_cen] for v in self.views]

    @classmethod
    def from_list(cls, items) -> "ViewHistory":
        h = cls(())
        h.views = [MembershipView(n, tuple(m), e) for n, m, e in items]
        return h


class FailureDetector:
    """Counts ticks since the last beat from each peer."""

    def __init__(self, timeout: int):
        self.timeout = timeout
        self.last_seen: dict = {}

    def reset(self, nodes: Iterable[int], now: int) -> None:
        for n in nodes:
            self.last_seen[n] = max(self.last_seen.get(n, now), now)

    def beat(self, node: int, now: int) -> None:
        self.last_seen[node] = now

    def suspected(self, nodes: Iterable[int], now: int) -> set:
        return {n for n in nodes if now - self.last_seen.get(n, now) > self.timeout}


@dataclass
class BackupEntry:
    client: int
    txn: object
    acks: set = field(default_factory=set)


class BackupLog:
    """Majority-acked append-only copies of transactions tagged by any member."""

    def __init__(self):
        self.entries: dict = {}        # csn -> BackupEntry
        self.by_txn_id: dict = {}      # txn_id -> csn

    def add(self, txn, client: int) -> BackupEntry:
        e = self.entries.get(txn.csn)
        if e is None:
            e = self.entries[txn.csn] = BackupEntry(client, txn)
        else:
            e.txn = txn
        self.by_txn_id[txn.request.txn_id] = txn.csn
        return e

    def ack(self, csn, node: int) -> None:
        e = self.entries.get(csn)
        if e is not None:
            e.acks.add(node)

    def acked(self, csn, members: tuple) -> bool:
        e = self.entries.get(csn)
        if e is None:
            return False
        holders = len(e.acks & set(members)) + 1
        return holders >= majority(len(members))

    def of_origin(self, origin: int) -> list:
        return [e for c, e in sorted(self.entries.items()) if c.node_id == origin]

    def get(self, csn) -> Optional[BackupEntry]:
        return self.entries.get(csn)
