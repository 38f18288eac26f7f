from hypothesis import given
from hypothesis import strategies as st

from epochcc.core import OpType, ReadRecord, WriteRecord
from epochcc.shardmap import ShardMap, shard_txn

from conftest import tagged


def test_build_round_robin():
    m = ShardMap.build(1, 3, [1, 2, 3], replicas=2)
    assert m.assignment == ((1, 2), (2, 3), (1, 3))
    assert m.shards_of(1) == [0, 2]
    assert ShardMap.build(1, 2, [1, 2, 3]).assignment == ((1, 2, 3), (1, 2, 3))


def test_routing_skips_dead_replicas():
    m = ShardMap.build(1, 3, [1, 2, 3], replicas=1)
    assert m.needs_routing((1, 2, 3))
    assert m.route_target(1, (1, 3)) is None
    m2 = ShardMap.build(1, 3, [1, 2, 3], replicas=2)
    assert m2.route_target(0, (2, 3)) == 2
    assert not ShardMap.build(1, 2, [1, 2]).needs_routing((1, 2))


def test_json_roundtrip():
    m = ShardMap.build(4, 3, [1, 2, 3], replicas=2)
    assert ShardMap.from_json(m.to_json()) == m


@given(st.lists(st.binary(min_size=1, max_size=6), unique=True, min_size=1, max_size=10),
       st.integers(1, 4))
def test_split_partitions_records(keys, n):
    m = ShardMap.build(1, n, [1, 2, 3])
    half = len(keys) // 2
    t = tagged(1, 1, reads=[ReadRecord(k) for k in keys[:half]],
               writes=[WriteRecord(k, OpType.UPDATE, b"v") for k in keys[half:]])
    parts = shard_txn(t, m)
    got_r = sorted(r for p in parts.values() for r in p.request.read_set)
    got_w = sorted(w for p in parts.values() for w in p.request.write_set)
    assert got_r == sorted(t.request.read_set) and got_w == sorted(t.request.write_set)
    for s, p in parts.items():
        assert p.csn == t.csn and p.cen == t.cen
        assert all(m.shard_of(r.key) == s for r in p.request.read_set) or len(parts) == 1
