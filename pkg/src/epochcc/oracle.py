"""Independent history checks.

Nothing here calls the conflict engine. The oracle rebuilds committed state
by folding write sets in (cen, csn) order and checks each claim against it:

(a) every committed read saw the version current at the end of epoch
    ``cen - 1``;
(b) no two committed transactions of one epoch write the same key;
(c) verdicts agree across CC nodes and with what clients were told, and
    cross-model groups are all-or-nothing;
plus write validity (inserts hit absent keys, updates and deletes hit
present ones) and end-state equality of every storage node with the fold.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional

from .core import INITIAL, AbortReason, Csn, OpType, ReadRecord, Verdict, WriteRecord
from .errors import IncompleteHistory


@dataclass
class HistTxn:
    txn_id: str
    engine: str
    reads: tuple
    writes: tuple
    group: Optional[str] = None
    csn: Optional[Csn] = None
    cen: int = 0
    verdict: Optional[Verdict] = None
    reason: Optional[AbortReason] = None

    def to_json(self) -> dict:
        return {
            "txn_id": self.txn_id, "engine": self.engine, "group": self.group,
            "csn": list(self.csn) if self.csn else None, "cen": self.cen,
            "verdict": self.verdict.name if self.verdict else None,
            "reason": self.reason.name if self.reason else None,
            "reads": [[r.key.hex(), list(r.read_version)] for r in self.reads],
            "writes": [[w.key.hex(), int(w.op_type), w.value.hex()] for w in self.writes],
        }

    @classmethod
    def from_json(cls, d: dict) -> "HistTxn":
        return cls(
            d["txn_id"], d["engine"],
            tuple(ReadRecord(bytes.fromhex(k), Csn(*v)) for k, v in d["reads"]),
            tuple(WriteRecord(bytes.fromhex(k), OpType(o), bytes.fromhex(v))
                  for k, o, v in d["writes"]),
            d.get("group"), Csn(*d["csn"]) if d.get("csn") else None, d.get("cen", 0),
            Verdict[d["verdict"]] if d.get("verdict") else None,
            AbortReason[d["reason"]] if d.get("reason") else None)


@dataclass
class OracleResult:
    ok: bool = True
    violations: list = field(default_factory=list)
    committed: int = 0
    aborted: int = 0

    def fail(self, msg: str):
        self.ok = False
        if len(self.violations) < 50:
            self.violations.append(msg)

    def summary(self) -> dict:
        return {"ok": self.ok, "committed": self.committed, "aborted": self.aborted,
                "violations": self.violations[:10]}


def fold_state(base: dict, txns) -> dict:
    """{(engine, key): (value, csn, deleted)} after applying committed txns in order."""
    state = {}
    for engine, rows in base.items():
        for k, v in rows.items():
            state[(engine, k)] = (v, INITIAL, False)
    for t in sorted((t for t in txns if t.verdict == Verdict.COMMITTED),
                    key=lambda t: (t.cen, t.csn)):
        for w in t.writes:
            if w.op_type == OpType.DELETE:
                state[(t.engine, w.key)] = (b"", t.csn, True)
            else:
                state[(t.engine, w.key)] = (w.value, t.csn, False)
    return state


def si_oracle(history, base: dict, node_tables=None, client_view=None) -> OracleResult:
    """Check a complete history.

    *node_tables* maps node id to {csn: (verdict, reason, cen)};
    *client_view* maps txn_id to the decision a client received.
    """
    res = OracleResult()
    txns = list(history)
    for t in txns:
        if t.verdict is None or t.csn is None:
            raise IncompleteHistory(f"no decision for {t.txn_id}")
    committed = sorted((t for t in txns if t.verdict == Verdict.COMMITTED),
                       key=lambda t: (t.cen, t.csn))
    res.committed = len(committed)
    res.aborted = len(txns) - len(committed)

    # key -> (csn, deleted) as of the end of the last folded epoch
    cur: dict = {}
    for rows in base.values():
        for k in rows:
            cur[k] = (INITIAL, False)
    i = 0
    while i < len(committed):
        e = committed[i].cen
        j = i
        while j < len(committed) and committed[j].cen == e:
            j += 1
        batch = committed[i:j]
        writers: dict = {}
        for t in batch:
            for r in t.reads:
                seen = cur.get(r.key, (INITIAL, False))[0]
                if seen != r.read_version:
                    res.fail(f"(a) {t.txn_id} cen {e} read {r.key!r} at {r.read_version}, "
                             f"snapshot has {seen}")
            for w in t.writes:
                other = writers.get(w.key)
                if other is not None:
                    res.fail(f"(b) {other} and {t.txn_id} both committed a write of "
                             f"{w.key!r} in epoch {e}")
                writers[w.key] = t.txn_id
                row = cur.get(w.key)
                exists = row is not None and not row[1]
                if w.op_type == OpType.INSERT and exists:
                    res.fail(f"write validity: {t.txn_id} inserted existing {w.key!r}")
                if w.op_type != OpType.INSERT and not exists:
                    res.fail(f"write validity: {t.txn_id} {w.op_type.name.lower()}d "
                             f"missing {w.key!r}")
        for t in batch:
            for w in t.writes:
                cur[w.key] = (t.csn, w.op_type == OpType.DELETE)
        i = j

    groups: dict = {}
    for t in txns:
        if t.group is not None:
            groups.setdefault(t.group, set()).add(t.verdict)
    for gid, verdicts in sorted(groups.items()):
        if len(verdicts) > 1:
            res.fail(f"(c) group {gid} has mixed verdicts")

    by_csn = {t.csn: t for t in txns}
    if node_tables:
        for node in sorted(node_tables):
            table = node_tables[node]
            for c, (verdict, reason, cen) in table.items():
                t = by_csn.get(c)
                if t is None:
                    continue
                if verdict != t.verdict or cen != t.cen:
                    res.fail(f"(c) node {node} has {verdict.name}@{cen} for {t.txn_id}, "
                             f"client saw {t.verdict.name}@{t.cen}")
    if client_view:
        for txn_id, decisions in client_view.items():
            if len({(d.csn, d.verdict) for d in decisions}) > 1:
                res.fail(f"(c) {txn_id} received conflicting decisions")
    return res


def check_end_state(base: dict, history, snapshots: dict) -> list:
    """Compare each storage snapshot {(engine, key): StoredValue} with the fold."""
    want = fold_state(base, history)
    errors = []
    for node in sorted(snapshots):
        got = {k: (sv.value, sv.writer_csn, sv.deleted) for k, sv in snapshots[node].items()}
        if got != want:
            diff = sorted(set(got.items()) ^ set(want.items()))[:3]
            errors.append(f"storage {node} differs from fold: {diff}")
    return errors
