import itertools
import random

import pytest
from hypothesis import given
from hypothesis import strategies as st

from epochcc.conflict import (
    EpochAbortSet, GlobalWriteVersionMap, ShardEpoch, VersionMapEntry, finalize_epoch,
    resolve_write_set, validate_read_set,
)
from epochcc.core import INITIAL, AbortReason, Csn, OpType, ReadRecord, WriteRecord
from epochcc.errors import EpochOrderViolation

from conftest import tagged

I, U, D = OpType.INSERT, OpType.UPDATE, OpType.DELETE
C = "commit"
WE, RM, LC = AbortReason.WRITE_EXISTS, AbortReason.ROW_MISSING, AbortReason.LOST_COMPARE
K = b"k"

# Two transactions write K in one epoch; T1's csn precedes T2's.
# Insert on a live row fails; update/delete on a missing or deleted row fails;
# survivors compare csns and the later one loses.
TRUTH = {
    ("present", I, I): (WE, WE), ("present", I, U): (WE, C), ("present", I, D): (WE, C),
    ("present", U, I): (C, WE), ("present", U, U): (C, LC), ("present", U, D): (C, LC),
    ("present", D, I): (C, WE), ("present", D, U): (C, LC), ("present", D, D): (C, LC),
    ("absent", I, I): (C, LC), ("absent", I, U): (C, RM), ("absent", I, D): (C, RM),
    ("absent", U, I): (RM, C), ("absent", U, U): (RM, RM), ("absent", U, D): (RM, RM),
    ("absent", D, I): (RM, C), ("absent", D, U): (RM, RM), ("absent", D, D): (RM, RM),
    ("tombstoned", I, I): (C, LC), ("tombstoned", I, U): (C, RM),
    ("tombstoned", I, D): (C, RM), ("tombstoned", U, I): (RM, C),
    ("tombstoned", U, U): (RM, RM), ("tombstoned", U, D): (RM, RM),
    ("tombstoned", D, I): (RM, C), ("tombstoned", D, U): (RM, RM),
    ("tombstoned", D, D): (RM, RM),
}


def snapshot_for(state):
    if state == "present":
        return GlobalWriteVersionMap({K: VersionMapEntry(K, INITIAL)})
    if state == "tombstoned":
        return GlobalWriteVersionMap({K: VersionMapEntry(K, Csn(0, 1), True)})
    return GlobalWriteVersionMap()


def run_pair(state, op1, op2, order):
    snap = snapshot_for(state)
    t1 = tagged(1, 1, writes=[WriteRecord(K, op1, b"" if op1 == D else b"a")])
    t2 = tagged(1, 2, writes=[WriteRecord(K, op2, b"" if op2 == D else b"b")])
    txns = [t1, t2] if order == 0 else [t2, t1]
    epoch_map, aborts = {}, EpochAbortSet()
    for t in txns:
        resolve_write_set(t, snap, epoch_map, aborts)
    got = tuple(aborts.get(t.csn) or C for t in (t1, t2))
    return got, snap, aborts, (t1, t2)


def test_truth_table_is_complete():
    assert len(TRUTH) == 27


@pytest.mark.parametrize("case", sorted(TRUTH, key=str), ids=lambda c: f"{c[0]}-{c[1].name}-{c[2].name}")
@pytest.mark.parametrize("order", [0, 1])
def test_write_set_truth_table(case, order):
    got, *_ = run_pair(*case, order)
    assert got == TRUTH[case]


@pytest.mark.parametrize("case", sorted(TRUTH, key=str), ids=lambda c: f"{c[0]}-{c[1].name}-{c[2].name}")
def test_truth_table_fold(case):
    got, snap, aborts, (t1, t2) = run_pair(*case, 0)
    finalize_epoch(1, [t1, t2], aborts, snap)
    winner = t1 if got[0] == C else t2 if got[1] == C else None
    e = snap.find(K)
    if winner is None:
        assert e == snapshot_for(case[0]).find(K)
    else:
        assert e.committed_csn == winner.csn
        assert e.tombstone == (winner.request.write_set[0].op_type == D)


def test_lowest_reason_kept():
    snap = GlobalWriteVersionMap({b"a": VersionMapEntry(b"a", INITIAL),
                                  b"b": VersionMapEntry(b"b", INITIAL)})
    early = tagged(1, 1, writes=[WriteRecord(b"b", U, b"x")])
    late = tagged(2, 1, writes=[WriteRecord(b"a", I, b"x"), WriteRecord(b"b", U, b"y")])
    for order in ([early, late], [late, early]):
        aborts, em = EpochAbortSet(), {}
        for t in order:
            resolve_write_set(t, snap, em, aborts)
        assert aborts.get(late.csn) == WE and early.csn not in aborts


def test_dethroned_holder_is_aborted():
    snap = GlobalWriteVersionMap({K: VersionMapEntry(K, INITIAL)})
    late = tagged(5, 1, writes=[WriteRecord(K, U, b"late")])
    early = tagged(2, 3, writes=[WriteRecord(K, U, b"early")])
    aborts, em = EpochAbortSet(), {}
    assert resolve_write_set(late, snap, em, aborts)
    assert resolve_write_set(early, snap, em, aborts)
    assert aborts.get(late.csn) == LC and em[K] == early.csn


def test_read_validation_against_previous_epoch():
    snap = GlobalWriteVersionMap({K: VersionMapEntry(K, Csn(3, 1))}, snapshot_epoch=4)
    ok = tagged(9, 1, cen=5, reads=[ReadRecord(K, Csn(3, 1))])
    stale = tagged(9, 2, cen=5, reads=[ReadRecord(K, INITIAL)])
    phantom = tagged(9, 3, cen=5, reads=[ReadRecord(b"zz", Csn(1, 1))])
    missing = tagged(9, 4, cen=5, reads=[ReadRecord(b"zz", INITIAL)])
    assert validate_read_set(ok, snap) is None
    assert validate_read_set(stale, snap) == AbortReason.READ_VALIDATION
    assert validate_read_set(phantom, snap) == AbortReason.READ_VALIDATION
    assert validate_read_set(missing, snap) is None
    with pytest.raises(EpochOrderViolation):
        validate_read_set(tagged(9, 5, cen=7), snap)


def test_tombstone_read_matches_its_stamp():
    snap = GlobalWriteVersionMap({K: VersionMapEntry(K, Csn(3, 1), True)}, snapshot_epoch=1)
    assert validate_read_set(tagged(9, 1, cen=2, reads=[ReadRecord(K, Csn(3, 1))]), snap) is None
    assert validate_read_set(tagged(9, 2, cen=2, reads=[ReadRecord(K, INITIAL)]),
                             snap) == AbortReason.READ_VALIDATION


def test_finalize_requires_next_epoch():
    with pytest.raises(EpochOrderViolation):
        finalize_epoch(3, [], EpochAbortSet(), GlobalWriteVersionMap(snapshot_epoch=1))


def test_finalize_excludes_deferred():
    snap = GlobalWriteVersionMap({K: VersionMapEntry(K, INITIAL)})
    t = tagged(1, 1, writes=[WriteRecord(K, U, b"v")])
    assert finalize_epoch(1, [t], EpochAbortSet(), snap, exclude={t.csn}) == []
    assert snap.find(K).committed_csn == INITIAL and snap.snapshot_epoch == 1


# -- order independence --------------------------------------------------------------

KEYS = [b"k%d" % i for i in range(6)]


@st.composite
def epochs(draw):
    live = draw(st.sets(st.sampled_from(KEYS)))
    dead = draw(st.sets(st.sampled_from(KEYS))) - live
    entries = {k: VersionMapEntry(k, Csn(0, 1)) for k in live}
    entries.update({k: VersionMapEntry(k, Csn(0, 2), True) for k in dead})
    n = draw(st.integers(1, 12))
    txns = []
    for i in range(n):
        wk = draw(st.lists(st.sampled_from(KEYS), unique=True, max_size=3))
        rk = draw(st.lists(st.sampled_from(KEYS), unique=True, max_size=3))
        ws = [WriteRecord(k, draw(st.sampled_from([I, U, D])), b"") for k in wk]
        rs = [ReadRecord(k, draw(st.sampled_from([INITIAL, Csn(0, 1), Csn(0, 2)]))) for k in rk]
        txns.append(tagged(i * 10 + draw(st.integers(1, 5)), draw(st.integers(1, 3)),
                           reads=rs, writes=ws))
    return entries, txns


def run_epoch(entries, txns):
    se = ShardEpoch(GlobalWriteVersionMap(entries), 1)
    passed = se.validate(txns)
    se.resolve(passed)
    se.finalize(se.aborts)
    return dict(se.aborts.reasons), se.snapshot.to_bytes()


@given(epochs(), st.randoms(use_true_random=False))
def test_resolution_is_order_independent(ep, rnd):
    entries, txns = ep
    want = run_epoch(entries, txns)
    shuffled = list(txns)
    rnd.shuffle(shuffled)
    assert run_epoch(entries, shuffled) == want


def test_all_permutations_small_epoch():
    rng = random.Random(3)
    entries = {k: VersionMapEntry(k, INITIAL) for k in KEYS[:3]}
    txns = [tagged(i + 1, 1 + i % 3, writes=[WriteRecord(k, rng.choice([I, U, D]), b"")
                                             for k in rng.sample(KEYS[:4], 2)])
            for i in range(5)]
    results = set()
    for p in itertools.permutations(txns):
        aborts, snap = run_epoch(entries, list(p))
        results.add((tuple(sorted(aborts.items())), snap))
    assert len(results) == 1
