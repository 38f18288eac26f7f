import pytest
from hypothesis import given
from hypothesis import strategies as st

from epochcc.codec import (
    decode_decision, decode_request, decode_tagged, encode_decision, encode_request,
    encode_tagged,
)
from epochcc.core import (
    AbortReason, Csn, Decision, GroupRef, OpType, ReadRecord, TaggedTxn, TxnRequest, Verdict,
    WriteRecord,
)
from epochcc.errors import CodecError
from epochcc.messages import (
    AbortSetPayload, DecisionReply, Kind, Message, ReplyStatus, SubmitTxn, TxnBatch,
)
from epochcc.transport import decode_frame, encode_frame

keys = st.binary(min_size=1, max_size=12)
csns = st.builds(Csn, st.integers(0, 2**40), st.integers(0, 2**16))
writes = st.builds(WriteRecord, keys, st.sampled_from(list(OpType)), st.binary(max_size=20))
reads = st.builds(ReadRecord, keys, csns)
groups = st.none() | st.builds(GroupRef, st.text(min_size=1, max_size=8), st.integers(1, 4))
requests = st.builds(TxnRequest, st.text(min_size=1, max_size=10),
                     st.lists(reads, max_size=5).map(tuple),
                     st.lists(writes, max_size=5).map(tuple), groups,
                     st.integers(0, 2**32), st.sampled_from(["kv", "table"]))


@st.composite
def tagged_txns(draw):
    csn = draw(csns)
    return TaggedTxn(draw(requests), csn, draw(st.integers(1, 2**32)), csn.node_id)


@given(requests)
def test_request_roundtrip(req):
    assert decode_request(encode_request(req)) == req


@given(tagged_txns())
def test_tagged_roundtrip(t):
    assert decode_tagged(encode_tagged(t)) == t


@given(csns, st.sampled_from(list(Verdict)), st.none() | st.sampled_from(list(AbortReason)))
def test_decision_roundtrip(c, v, r):
    d = Decision(c, v, r)
    assert decode_decision(encode_decision(d)) == d


@given(st.builds(SubmitTxn, st.integers(0, 2**31), requests, st.booleans()))
def test_submit_frame_roundtrip(body):
    m = Message(Kind.SUBMIT_TXN, 1001, 1, body, 3, 0, 17, 5)
    back, used = decode_frame(encode_frame(m))
    assert back == m and used == len(encode_frame(m))


@given(st.lists(tagged_txns(), max_size=4))
def test_batch_frame_roundtrip(txns):
    m = Message(Kind.WRITE_SET_PAYLOAD, 1, 2, TxnBatch(4, txns), 9, 1, 30, 2)
    assert decode_frame(encode_frame(m))[0] == m


def test_abort_set_and_reply_roundtrip():
    body = AbortSetPayload(2, {Csn(5, 1): AbortReason.LOST_COMPARE}, [Csn(5, 1), Csn(6, 1)],
                           [("g", 2, Csn(6, 1))])
    m = Message(Kind.ABORT_SET_PAYLOAD, 1, 3, body, 12)
    assert decode_frame(encode_frame(m))[0] == m
    rep = DecisionReply("t", None, 3, ReplyStatus.OVERLOADED)
    m = Message(Kind.DECISION_REPLY, 1, 1001, rep)
    assert decode_frame(encode_frame(m))[0] == m


def test_corrupt_frame_rejected():
    m = Message(Kind.SUBMIT_TXN, 1001, 1, SubmitTxn(1001, TxnRequest("x")), 1)
    raw = bytearray(encode_frame(m))
    raw[12] ^= 0xFF
    with pytest.raises(CodecError):
        decode_frame(bytes(raw))


def test_truncated_frame_rejected():
    m = Message(Kind.SUBMIT_TXN, 1001, 1, SubmitTxn(1001, TxnRequest("x")), 1)
    raw = encode_frame(m)
    with pytest.raises(CodecError):
        decode_frame(raw[:-3])


def test_trailing_bytes_in_body_rejected():
    with pytest.raises(CodecError):
        decode_request(encode_request(TxnRequest("x")) + b"\0")
