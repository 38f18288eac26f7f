import os

import pytest

from epochcc.core import Csn, OpType, WriteRecord
from epochcc.durability import CommitLog, LogAdaptor, LogEntry, LogStream
from epochcc.errors import LsnAhead


def w(k, v=b"v"):
    return WriteRecord(k, OpType.UPDATE, v)


def fill(stream, epochs=3, per=2):
    t = 0
    for cen in range(1, epochs + 1):
        rows = []
        for _ in range(per):
            t += 1
            rows.append((Csn(t, 1), (w(b"k%d" % t),), "kv"))
        stream.append_epoch(cen, rows, covers=(1,), members=(1, 2))


def test_append_and_reopen(tmp_path):
    s = LogStream(str(tmp_path), "n1", 1, fsync=False)
    fill(s)
    assert s.tail_lsn == 6 and s.sealed_cen == 3
    s.close()
    again = LogStream(str(tmp_path), "n1", 1, fsync=False)
    assert [e.lsn for e in again.entries] == list(range(1, 7))
    assert [x.cen for x in again.seals] == [1, 2, 3]
    assert again.seals[0].members == (1, 2)
    assert all(e.verify() for e in again.entries)


def test_empty_epoch_still_sealed(tmp_path):
    s = LogStream(str(tmp_path), "n1", 1, fsync=False)
    first, last = s.append_epoch(1, [], covers=(1,), members=(1,))
    assert first > last and s.sealed_cen == 1 and s.tail_lsn == 0


def test_torn_tail_is_truncated(tmp_path):
    s = LogStream(str(tmp_path), "n1", 1, fsync=False)
    fill(s)
    s.close()
    seg = os.path.join(tmp_path, sorted(os.listdir(tmp_path))[0])
    size = os.path.getsize(seg)
    with open(seg, "r+b") as fh:
        fh.truncate(size - 5)       # half of the last seal
    again = LogStream(str(tmp_path), "n1", 1, fsync=False)
    assert again.sealed_cen == 2 and again.tail_lsn == 6
    assert os.path.getsize(seg) < size - 5
    again.append_epoch(3, [], covers=(1,), members=(1,))
    again.close()
    assert LogStream(str(tmp_path), "n1", 1, fsync=False).sealed_cen == 3


def test_corrupt_record_stops_scan(tmp_path):
    s = LogStream(str(tmp_path), "n1", 1, fsync=False)
    fill(s, epochs=2)
    s.close()
    seg = os.path.join(tmp_path, sorted(os.listdir(tmp_path))[0])
    data = bytearray(open(seg, "rb").read())
    data[-40] ^= 0x55
    open(seg, "wb").write(bytes(data))
    again = LogStream(str(tmp_path), "n1", 1, fsync=False)
    assert again.sealed_cen == 1


def test_segments_roll(tmp_path):
    s = LogStream(str(tmp_path), "n1", 1, fsync=False, segment_bytes=200)
    fill(s, epochs=6)
    s.close()
    assert len([f for f in os.listdir(tmp_path) if f.endswith(".seg")]) > 1
    again = LogStream(str(tmp_path), "n1", 1, fsync=False)
    assert again.tail_lsn == 12 and again.sealed_cen == 6


def test_pull_pages_by_seal(tmp_path):
    s = LogStream(str(tmp_path), "n1", 1, fsync=False)
    fill(s, epochs=4)
    entries, seals = s.pull(2, 1, limit=2)
    assert [x.cen for x in seals] == [2, 3]
    assert [e.lsn for e in entries] == [3, 4, 5, 6]
    with pytest.raises(LsnAhead):
        s.pull(99)


def test_commit_log_rediscovers_streams(tmp_path):
    log = CommitLog(str(tmp_path), 1, fsync=False)
    fill(log.stream("n1"), epochs=1)
    fill(log.stream("n1-for-n2-v1"), epochs=1)
    log.close()
    again = CommitLog(str(tmp_path), 1, fsync=False)
    assert sorted(again.streams) == ["n1", "n1-for-n2-v1"]


def test_entry_crc_and_adaptor():
    e = LogEntry.make(1, 1, Csn(1, 1), (w(b"a", b"1"), WriteRecord(b"b", OpType.DELETE)))
    assert e.verify()
    assert LogAdaptor().convert(e) == [(b"a", b"1"), (b"b", None)]
