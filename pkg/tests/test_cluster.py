"""End-to-end runs of the simulated cluster."""

import pytest

from epochcc.core import Verdict
from epochcc.errors import ConfigError
from epochcc.harness import STORAGE_BASE, RunReport, ScenarioConfig, run_read_skew, run_scenario
from epochcc.workload import WorkloadSpec


def cfg(**kw):
    kw.setdefault("txns", 600)
    kw.setdefault("workload", WorkloadSpec(rows=300))
    return ScenarioConfig(**kw)


def assert_clean(report: RunReport):
    s = report.summary
    assert s["completed"], s
    assert s["oracle"]["ok"], s["oracle"]
    assert s["end_state"]["ok"], s["end_state"]
    if report.config["duration"] is None:
        assert len({t.txn_id.split(":")[0] for t in report.history}) == report.config["txns"]
    ids = [t.txn_id for t in report.history]
    assert len(ids) == len(set(ids))


@pytest.mark.parametrize("name,kw", [
    ("plain", {}),
    ("sync", dict(log_mode="sync")),
    ("sharded", dict(shards=3, replicas=2)),
    ("sharded_single_replica", dict(shards=3, replicas=1)),
    ("no_local_first", dict(shards=2, local_first=False)),
    ("cross_model", dict(workload=WorkloadSpec(rows=300, cross_model=0.4))),
    ("insert_delete", dict(workload=WorkloadSpec(rows=300, insert_fraction=0.2,
                                                 delete_fraction=0.2))),
    ("tpcc_lite", dict(workload=WorkloadSpec(kind="tpcc-lite", rows=300))),
    ("five_nodes", dict(cc_nodes=5, shards=2, replicas=3)),
    ("row_stepping", dict(storage={"rows_per_tick": 3})),
])
def test_scenarios_pass_oracle(name, kw):
    assert_clean(run_scenario(cfg(**kw)))


def test_same_seed_same_report():
    a = run_scenario(cfg(seed=4, trace=True, faults="at 150 crash 3\nat 400 recover 3\n"))
    b = run_scenario(cfg(seed=4, trace=True, faults="at 150 crash 3\nat 400 recover 3\n"))
    assert a.to_jsonl(True) == b.to_jsonl(True)
    assert a.summary["trace_digest"] is not None
    c = run_scenario(cfg(seed=5, trace=True))
    assert c.summary["trace_digest"] != a.summary["trace_digest"]


def test_wire_check_does_not_change_outcome():
    a = run_scenario(cfg(seed=2, txns=300))
    b = run_scenario(cfg(seed=2, txns=300, wire_check=True))
    assert [(t.txn_id, t.verdict) for t in a.history] == [(t.txn_id, t.verdict) for t in b.history]


def test_duration_bound():
    r = run_scenario(cfg(txns=10**6, duration=200))
    assert_clean(r)
    assert 0 < r.summary["txns"] < 10**6


def test_cc_crash_and_recover():
    r = run_scenario(cfg(faults="at 200 crash 3\nat 600 recover 3\n", txns=1000))
    assert_clean(r)
    s = r.summary
    assert s["view_changes"] >= 2
    actions = [x["action"] for x in r.records if x["type"] == "fault"]
    assert actions == ["crash", "recover"]


@pytest.mark.parametrize("node", [1, 3])
def test_sharded_rejoin_gets_shards_the_leader_lacks(node, monkeypatch):
    from epochcc import coordinator
    got = []
    orig = coordinator.CCNode._on_catchup_shard

    def spy(self, data):
        got.append(self.id)
        return orig(self, data)

    monkeypatch.setattr(coordinator.CCNode, "_on_catchup_shard", spy)
    r = run_scenario(cfg(shards=3, replicas=2, faults=f"at 200 crash {node}\nat 600 recover {node}\n"))
    assert_clean(r)
    assert got and set(got) == {node}


def test_losing_every_replica_of_a_shard_stops_the_run():
    r = run_scenario(cfg(shards=3, replicas=1, faults="at 200 crash 3\nat 600 recover 3\n"))
    assert not r.summary["completed"]
    assert r.summary["lost_shards"] == [2]
    assert r.summary["end_state"]["ok"] is False


def test_crash_before_exchange_reexecutes():
    r = run_scenario(cfg(faults="on TxnBackup from 2 cen 12 crash\n"))
    assert_clean(r)
    assert r.summary["reexecuted_epochs"] > 0


def test_storage_recovery_converges_byte_exact():
    r = run_scenario(cfg(faults="at 150 crash 102\nat 400 recover 102\n"), keep=True)
    try:
        assert_clean(r)
        assert r.summary["storage_pulls"] > 0
        st = r.cluster.storages
        assert st[STORAGE_BASE].store.state_bytes() == st[STORAGE_BASE + 1].store.state_bytes()
    finally:
        r.cluster.close()


def test_message_loss_is_repaired():
    r = run_scenario(cfg(faults="at 50 drop LogPushFrame 30\nat 50 drop MembershipBeat 10\n"
                                "at 500 undrop\n"))
    assert_clean(r)
    assert r.summary["dropped"]


def test_partition_minority_then_heal():
    r = run_scenario(cfg(faults="at 200 partition 1,2,101,102 | 3\nat 500 heal\n", txns=1000))
    assert_clean(r)


def test_reshard_midrun():
    r = run_scenario(cfg(shards=2, faults="at 250 reshard 3\n", txns=1000))
    assert_clean(r)
    (rec,) = [x for x in r.records if x["type"] == "reshard"]
    assert rec["ok"] and rec["keys"] > 0


def test_overload_is_reported_and_retried():
    c = cfg(txns=400)
    r = run_scenario(c)
    base = r.summary["overloaded"]
    from epochcc import harness
    orig = harness.InProcessCluster._cc_cfg

    def tight(self, i):
        cc = orig(self, i)
        cc.max_open_txns = 2
        return cc
    harness.InProcessCluster._cc_cfg = tight
    try:
        r2 = run_scenario(c)
    finally:
        harness.InProcessCluster._cc_cfg = orig
    assert_clean(r2)
    assert r2.summary["overloaded"] > base


def test_report_records_and_roundtrip(tmp_path):
    r = run_scenario(cfg(txns=200))
    p = tmp_path / "r.jsonl"
    r.write(str(p))
    lines = p.read_text().splitlines()
    import json
    types = [json.loads(x)["type"] for x in lines]
    assert types[0] == "config" and "summary" in types and types.count("txn") == 200
    assert "epoch" in types and "window" in types


def test_read_skew_anomaly_both_modes():
    for mode in ("async", "sync"):
        out = run_read_skew(mode)
        assert out["t1"].verdict == Verdict.COMMITTED
        assert out["t3"].verdict == Verdict.ABORTED
        assert out["t3"].reason.name == "READ_VALIDATION"
        assert (out["x_seen"], out["y_seen"]) == (b"5", b"1")


@pytest.mark.parametrize("kw", [dict(cc_nodes=0), dict(shards=0), dict(log_mode="lazy"),
                                dict(transport="udp"), dict(epoch_ticks=0)])
def test_bad_config(kw):
    with pytest.raises(ConfigError):
        ScenarioConfig(**kw).validate()


def test_config_dict_roundtrip():
    c = cfg(shards=2, faults="at 5 crash 2\n")
    assert ScenarioConfig.from_dict(c.to_dict()) == c
    with pytest.raises(ConfigError):
        ScenarioConfig.from_dict({"bogus": 1})
