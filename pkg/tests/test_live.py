"""TCP mode: real worker processes and sockets."""

import pytest

from epochcc.harness import ScenarioConfig
from epochcc.live import run_live
from epochcc.workload import WorkloadSpec

pytestmark = pytest.mark.slow


def test_live_run_passes_oracle():
    r = run_live(ScenarioConfig(txns=200, transport="tcp", workload=WorkloadSpec(rows=200)))
    s = r.summary
    assert s["oracle"]["ok"] and s["end_state"]["ok"]
    assert s["txns"] == 200 and s["messages_by_kind"]["LogPushFrame"] > 0


def test_live_crash_and_recover_worker():
    r = run_live(ScenarioConfig(txns=500, transport="tcp", shards=2,
                                faults="at 100 crash 2\nat 300 recover 2\n",
                                workload=WorkloadSpec(rows=200)))
    s = r.summary
    assert s["oracle"]["ok"] and s["end_state"]["ok"]
    assert [x["action"] for x in r.records if x["type"] == "fault"] == ["crash", "recover"]


def test_live_partition_drops_and_reshard():
    faults = ("at 100 partition 1,2 | 3\nat 300 heal\nat 50 drop LogPushFrame 30\n"
              "at 400 undrop LogPushFrame\nat 500 reshard 2 2\n")
    r = run_live(ScenarioConfig(txns=800, transport="tcp", faults=faults,
                                workload=WorkloadSpec(rows=200)))
    s = r.summary
    assert s["completed"] and s["oracle"]["ok"] and s["end_state"]["ok"]
    assert sum(s["dropped"].values()) > 0
    assert any(x["type"] == "reshard" and x["ok"] for x in r.records)
