import pytest

from epochcc.errors import FaultScriptError
from epochcc.faults import parse_faults
from epochcc.messages import Kind

SCRIPT = """
# comment
at 120 crash 2
at 300 recover 2      # trailing comment
at 150 partition 1,2 | 3
at 200 heal
at 100 drop LogPushFrame 20
at 400 undrop LogPushFrame
at 250 reshard 3 2
on WriteSetPayload from 2 cen 5 crash
"""


def test_parse_all_actions():
    s = parse_faults(SCRIPT)
    assert [a.action for a in s.actions] == ["drop", "crash", "partition", "heal", "reshard",
                                             "recover", "undrop"]
    assert s.ticks() == [100, 120, 150, 200, 250, 300, 400]
    part = s.at(150)[0]
    assert part.groups == (frozenset({1, 2}), frozenset({3}))
    drop = s.at(100)[0]
    assert drop.kind == Kind.LOG_PUSH_FRAME and drop.pct == 20
    assert s.at(250)[0].shards == 3 and s.at(250)[0].replicas == 2
    (t,) = s.triggers
    assert (t.kind, t.node, t.cen) == (Kind.WRITE_SET_PAYLOAD, 2, 5)


def test_empty_script():
    assert not parse_faults("\n# nothing\n")


@pytest.mark.parametrize("line", [
    "crash 2", "at x crash 2", "at -1 crash 2", "at 5 crash", "at 5 explode 1",
    "at 5 partition 1,2", "at 5 drop SubmitTxn 10", "at 5 drop LogPushFrame 120",
    "at 5 drop LogPushFrame lots", "at 5 drop Bogus 10", "on WriteSetPayload from 2 crash",
    "at 5 reshard",
])
def test_malformed_lines(line):
    with pytest.raises(FaultScriptError, match="line 1"):
        parse_faults(line)
