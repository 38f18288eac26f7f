"""Per-shard conflict resolution: read-set validation and write-set resolution.

The resolver never mutates the committed snapshot while an epoch is being
resolved; committed writes are folded in by ``finalize_epoch`` once the
globally consistent abort set is known.
"""

from __future__ import annotations

from typing import Iterable, NamedTuple, Optional

from .codec import Writer
from .core import INITIAL, AbortReason, Csn, OpType, TaggedTxn, csn_precedes
from .errors import EpochOrderViolation


class VersionMapEntry(NamedTuple):
    key: bytes
    committed_csn: Csn
    tombstone: bool = False


class GlobalWriteVersionMap:
    """Latest committed version of every key of one shard."""

    __slots__ = ("entries", "snapshot_epoch")

    def __init__(self, entries=None, snapshot_epoch: int = 0):
        self.entries: dict = dict(entries) if entries else {}
        self.snapshot_epoch = snapshot_epoch

    @classmethod
    def preloaded(cls, keys: Iterable[bytes]) -> "GlobalWriteVersionMap":
        return cls({k: VersionMapEntry(k, INITIAL) for k in keys})

    def find(self, key) -> Optional[VersionMapEntry]:
        return self.entries.get(key)

    def copy(self) -> "GlobalWriteVersionMap":
        return GlobalWriteVersionMap(self.entries, self.snapshot_epoch)

    def __len__(self):
        return len(self.entries)

    def __eq__(self, other):
        if not isinstance(other, GlobalWriteVersionMap):
            return NotImplemented
        return self.snapshot_epoch == other.snapshot_epoch and self.entries == other.entries

    def to_bytes(self) -> bytes:
        w = Writer()
        w.u64(self.snapshot_epoch)
        w.u32(len(self.entries))
        for key in sorted(self.entries):
            e = self.entries[key]
            w.bytes_(key)
            w.csn(e.committed_csn)
            w.u8(e.tombstone)
        return w.getvalue()


class EpochAbortSet:
    """CSNs locally determined to abort in one epoch on one shard.

    Set semantics; when a CSN is added twice the lowest reason code is kept
    so the recorded reason does not depend on processing order.
    """

    __slots__ = ("reasons",)

    def __init__(self, reasons=None):
        self.reasons: dict = dict(reasons) if reasons else {}

    def add(self, csn: Csn, reason: AbortReason) -> None:
        old = self.reasons.get(csn)
        if old is None or reason < old:
            self.reasons[csn] = reason

    def update(self, other) -> None:
        items = other.reasons.items() if isinstance(other, EpochAbortSet) else other.items()
        for csn, reason in items:
            self.add(csn, reason)

    def __contains__(self, csn):
        return csn in self.reasons

    def __iter__(self):
        return iter(self.reasons)

    def __len__(self):
        return len(self.reasons)

    def __eq__(self, other):
        if isinstance(other, EpochAbortSet):
            return self.reasons == other.reasons
        return NotImplemented

    def get(self, csn):
        return self.reasons.get(csn)

    def csns(self) -> frozenset:
        return frozenset(self.reasons)


def validate_read_set(txn: TaggedTxn, snapshot: GlobalWriteVersionMap) -> Optional[AbortReason]:
    """Return None if every read matches *snapshot*, else READ_VALIDATION."""
    if snapshot.snapshot_epoch != txn.cen - 1:
        raise EpochOrderViolation(
            f"validating cen {txn.cen} against snapshot {snapshot.snapshot_epoch}")
    entries = snapshot.entries
    for key, version in txn.request.read_set:
        e = entries.get(key)
        if e is None:
            if version != INITIAL:
                return AbortReason.READ_VALIDATION
        elif e.committed_csn != version:
            # a tombstone is a version too: reading it as absent is consistent
            return AbortReason.READ_VALIDATION
    return None


def resolve_write_set(txn: TaggedTxn, global_map: GlobalWriteVersionMap,
                      epoch_map: dict, aborts: EpochAbortSet) -> bool:
    """Write-set conflict resolution for one (sub-)transaction.

    Returns True if *txn* currently holds every key it writes. Every record is
    examined even after a failure so that claims on the epoch map do not
    depend on processing order.
    """
    entries = global_map.entries
    csn = txn.csn
    failed = None
    for rec in txn.request.write_set:
        key = rec.key
        row = entries.get(key)
        exists = row is not None and not row.tombstone
        if rec.op_type == OpType.INSERT:
            if exists:
                failed = _worse(failed, AbortReason.WRITE_EXISTS)
                continue
        elif not exists:
            failed = _worse(failed, AbortReason.ROW_MISSING)
            continue
        holder = epoch_map.get(key)
        if holder is None:
            epoch_map[key] = csn
        elif csn_precedes(csn, holder):
            aborts.add(holder, AbortReason.LOST_COMPARE)
            epoch_map[key] = csn
        elif holder != csn:
            failed = _worse(failed, AbortReason.LOST_COMPARE)
    if failed is not None:
        aborts.add(csn, failed)
        return False
    return True


def _worse(current, reason):
    return reason if current is None or reason < current else current


def fold_writes(global_map: GlobalWriteVersionMap, txn: TaggedTxn) -> None:
    entries = global_map.entries
    csn = txn.csn
    for rec in txn.request.write_set:
        entries[rec.key] = VersionMapEntry(rec.key, csn, rec.op_type == OpType.DELETE)


def finalize_epoch(cen: int, txns: Iterable[TaggedTxn], global_abort_set,
                   global_map: GlobalWriteVersionMap, exclude=frozenset()) -> list:
    """Fold the surviving write sets of epoch *cen* into *global_map*.

    Returns the committed (sub-)transactions in CSN order. *exclude* holds
    CSNs that neither commit nor abort this epoch (deferred group members).
    """
    if cen != global_map.snapshot_epoch + 1:
        raise EpochOrderViolation(
            f"finalizing epoch {cen} on snapshot {global_map.snapshot_epoch}")
    committed = sorted((t for t in txns
                        if t.csn not in global_abort_set and t.csn not in exclude),
                       key=lambda t: t.csn)
    for t in committed:
        fold_writes(global_map, t)
    global_map.snapshot_epoch = cen
    return committed


class ShardEpoch:
    """Resolution state of one shard for one epoch on one replica."""

    __slots__ = ("snapshot", "cen", "epoch_map", "aborts", "writers")

    def __init__(self, snapshot: GlobalWriteVersionMap, cen: int):
        self.snapshot = snapshot
        self.cen = cen
        self.epoch_map: dict = {}
        self.aborts = EpochAbortSet()
        # csn -> sub-transaction for every writer seen this epoch
        self.writers: dict = {}

    def validate(self, txns) -> list:
        passed = []
        for t in txns:
            reason = validate_read_set(t, self.snapshot)
            if reason is None:
                passed.append(t)
            else:
                self.aborts.add(t.csn, reason)
        return passed

    def resolve(self, txns) -> None:
        for t in txns:
            if not t.request.write_set:
                continue
            self.writers[t.csn] = t
            resolve_write_set(t, self.snapshot, self.epoch_map, self.aborts)

    def winners(self, txns) -> list:
        return [t for t in txns if t.request.write_set and t.csn not in self.aborts]

    def finalize(self, global_abort_set, exclude=frozenset()) -> list:
        return finalize_epoch(self.cen, self.writers.values(), global_abort_set,
                              self.snapshot, exclude)
