import pytest

from epochcc.errors import NoMajority
from epochcc.membership import (
    BackupLog, FailureDetector, ViewHistory, elect_leader, majority,
)

from conftest import tagged


def test_majority_and_leader():
    assert [majority(n) for n in (1, 2, 3, 4, 5)] == [1, 2, 2, 3, 3]
    assert elect_leader([3, 2, 5]) == 2
    with pytest.raises(NoMajority):
        elect_leader([])


def test_remove_rewrites_future_views():
    h = ViewHistory([1, 2, 3])
    h.apply_add(2, 4, 10)
    h.apply_remove(3, 2, 5)
    assert h.members_at(4) == (1, 2, 3)
    assert h.members_at(5) == (1, 3)
    assert h.members_at(12) == (1, 3, 4)
    assert h.stamp(4) == 1 and h.stamp(5) == 3 and h.stamp(10) == 3
    assert h.latest_members() == (1, 3, 4)
    assert ViewHistory.from_list(h.to_list()).to_list() == h.to_list()


def test_pending_after():
    h = ViewHistory([1, 2])
    h.apply_add(2, 3, 8)
    assert h.pending_after(7) and not h.pending_after(8)


def test_failure_detector():
    fd = FailureDetector(10)
    fd.reset([1, 2], 0)
    fd.beat(1, 15)
    assert fd.suspected([1, 2], 15) == {2}
    assert fd.suspected([1, 2], 9) == set()


def test_backup_majority():
    log = BackupLog()
    t = tagged(1, 1)
    log.add(t, 1001)
    assert not log.acked(t.csn, (1, 2, 3, 4))
    log.ack(t.csn, 2)
    assert log.acked(t.csn, (1, 2, 3))
    assert not log.acked(t.csn, (1, 2, 3, 4))
    log.ack(t.csn, 9)                   # not a member, does not count
    assert not log.acked(t.csn, (1, 2, 3, 4))
    assert log.by_txn_id[t.request.txn_id] == t.csn
    assert [e.txn for e in log.of_origin(1)] == [t]
