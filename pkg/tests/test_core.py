import pytest

from epochcc.core import (
    INITIAL, Csn, DeterministicClock, GroupRef, OpType, ReadRecord, Tagger, TxnRequest,
    WriteRecord, check_request, csn_precedes,
)
from epochcc.errors import ClockRegression, MalformedRequest


def test_csn_order_time_then_node():
    assert csn_precedes(Csn(1, 9), Csn(2, 1))
    assert csn_precedes(Csn(3, 1), Csn(3, 2))
    assert not csn_precedes(Csn(3, 2), Csn(3, 2))
    assert not csn_precedes(Csn(4, 1), Csn(3, 5))


def test_initial_precedes_any_issued():
    assert csn_precedes(INITIAL, Csn(1, 1))


def test_tagger_is_strictly_monotonic():
    tg = Tagger(2)
    a = tg.tag(TxnRequest("a"), 1)
    b = tg.tag(TxnRequest("b"), 1)
    assert a.csn.node_id == 2 and csn_precedes(a.csn, b.csn)


def test_tagger_rejects_clock_going_back():
    clock = DeterministicClock(10)
    tg = Tagger(1, clock)
    tg.tag(TxnRequest("a"), 1)
    clock.value = 3
    with pytest.raises(ClockRegression):
        tg.tag(TxnRequest("b"), 1)


def test_advance_to_skips_used_times():
    tg = Tagger(1)
    tg.advance_to(50)
    assert tg.tag(TxnRequest("a"), 1).csn.local_time == 51


@pytest.mark.parametrize("req", [
    TxnRequest(""),
    TxnRequest("x", write_set=(WriteRecord(b"", OpType.UPDATE, b"v"),)),
    TxnRequest("x", write_set=(WriteRecord(b"k", OpType.UPDATE, b"1"),
                               WriteRecord(b"k", OpType.UPDATE, b"2"))),
    TxnRequest("x", write_set=(WriteRecord(b"k", OpType.DELETE, b"junk"),)),
    TxnRequest("x", read_set=(ReadRecord(b"k"), ReadRecord(b"k"))),
    TxnRequest("x", group=GroupRef("g", 0)),
])
def test_malformed_requests(req):
    with pytest.raises(MalformedRequest):
        check_request(req)


def test_empty_value_allowed_unless_schema_forbids():
    req = TxnRequest("x", write_set=(WriteRecord(b"k", OpType.UPDATE, b""),))
    check_request(req)
    with pytest.raises(MalformedRequest):
        check_request(req, allow_empty_values=False)
