import pytest
from hypothesis import settings

from epochcc.core import Csn, TaggedTxn, TxnRequest

settings.register_profile("default", deadline=None, max_examples=100)
settings.load_profile("default")


def tagged(t, node, cen=1, reads=(), writes=(), txn_id=None, group=None, engine="kv"):
    """Build a TaggedTxn with csn (t, node) directly."""
    req = TxnRequest(txn_id or f"t{t}.{node}", tuple(reads), tuple(writes), group, cen - 1,
                     engine)
    return TaggedTxn(req, Csn(t, node), cen, node)


@pytest.fixture
def mk():
    return tagged


def pytest_terminal_summary(terminalreporter):
    import sys
    mod = sys.modules.get("test_acceptance")
    lines = getattr(mod, "RESULTS", None)
    if lines:
        terminalreporter.section("acceptance criteria")
        for line in sorted(lines, key=lambda s: int(s.split(":")[0].split()[1])):
            terminalreporter.write_line(line)
