import pytest

from epochcc.core import INITIAL, AbortReason, Csn, Decision, OpType, ReadRecord, Verdict, WriteRecord
from epochcc.errors import IncompleteHistory
from epochcc.oracle import HistTxn, check_end_state, fold_state, si_oracle
from epochcc.storage import StoredValue

BASE = {"kv": {b"x": b"0", b"y": b"0"}}
C, A = Verdict.COMMITTED, Verdict.ABORTED


def upd(k, v=b"1"):
    return WriteRecord(k, OpType.UPDATE, v)


def txn(name, cen, t, reads=(), writes=(), verdict=C, group=None, node=1):
    return HistTxn(name, "kv", tuple(reads), tuple(writes), group, Csn(t, node), cen, verdict,
                   None if verdict == C else AbortReason.LOST_COMPARE)


def test_empty_history_passes():
    assert si_oracle([], BASE).ok


def test_valid_chain_passes():
    h = [txn("a", 1, 1, [ReadRecord(b"x")], [upd(b"x")]),
         txn("b", 2, 5, [ReadRecord(b"x", Csn(1, 1))], [upd(b"x", b"2")]),
         txn("c", 2, 6, [ReadRecord(b"x", Csn(1, 1))], [upd(b"x", b"3")], verdict=A)]
    res = si_oracle(h, BASE)
    assert res.ok and (res.committed, res.aborted) == (2, 1)


def test_same_epoch_writers_flagged():
    h = [txn("a", 1, 1, writes=[upd(b"x")]), txn("b", 1, 2, writes=[upd(b"x")])]
    res = si_oracle(h, BASE)
    assert not res.ok and res.violations[0].startswith("(b)")


def test_stale_read_flagged():
    h = [txn("a", 1, 1, writes=[upd(b"x")]),
         txn("b", 2, 5, reads=[ReadRecord(b"x", INITIAL)])]
    res = si_oracle(h, BASE)
    assert not res.ok and res.violations[0].startswith("(a)")


def test_read_from_same_epoch_flagged():
    # b claims to read a's write although both are in epoch 1
    h = [txn("a", 1, 1, writes=[upd(b"x")]),
         txn("b", 1, 2, reads=[ReadRecord(b"x", Csn(1, 1))])]
    assert not si_oracle(h, BASE).ok


def test_write_validity_flagged():
    h = [txn("a", 1, 1, writes=[WriteRecord(b"x", OpType.INSERT, b"1")]),
         txn("b", 1, 2, writes=[WriteRecord(b"nope", OpType.DELETE)])]
    res = si_oracle(h, BASE)
    assert len([v for v in res.violations if v.startswith("write validity")]) == 2


def test_mixed_group_flagged():
    h = [txn("g:kv", 1, 1, writes=[upd(b"x")], group="g"),
         txn("g:table", 1, 2, writes=[upd(b"y")], group="g", verdict=A)]
    res = si_oracle(h, BASE)
    assert not res.ok and "group g" in res.violations[0]


def test_node_table_disagreement_flagged():
    h = [txn("a", 1, 1, writes=[upd(b"x")])]
    tables = {1: {Csn(1, 1): (C, None, 1)}, 2: {Csn(1, 1): (A, AbortReason.LOST_COMPARE, 1)}}
    res = si_oracle(h, BASE, node_tables=tables)
    assert not res.ok and "node 2" in res.violations[0]


def test_conflicting_client_decisions_flagged():
    h = [txn("a", 1, 1, writes=[upd(b"x")])]
    view = {"a": [Decision(Csn(1, 1), C), Decision(Csn(1, 1), A, AbortReason.LOST_COMPARE)]}
    assert not si_oracle(h, BASE, client_view=view).ok


def test_incomplete_history_raises():
    with pytest.raises(IncompleteHistory):
        si_oracle([HistTxn("a", "kv", (), ())], BASE)


def test_history_json_roundtrip():
    t = txn("a", 3, 9, [ReadRecord(b"x", Csn(2, 1))], [upd(b"x")], verdict=A, group="g")
    assert HistTxn.from_json(t.to_json()) == t


def test_end_state_check():
    h = [txn("a", 1, 1, writes=[upd(b"x", b"9"), WriteRecord(b"y", OpType.DELETE)])]
    fold = fold_state(BASE, h)
    good = {k: StoredValue(k[1], v, c, d) for k, (v, c, d) in fold.items()}
    assert check_end_state(BASE, h, {101: good}) == []
    bad = dict(good)
    bad[("kv", b"x")] = StoredValue(b"x", b"0", INITIAL)
    errs = check_end_state(BASE, h, {101: good, 102: bad})
    assert len(errs) == 1 and "102" in errs[0]
