import json

from epochcc.cli import main


def run(*args):
    return main(list(args))


def test_run_oracle_replay(tmp_path, capsys):
    out = tmp_path / "r.jsonl"
    assert run("run", "--txns", "200", "--rows", "200", "--seed", "3", "--out", str(out)) == 0
    line = capsys.readouterr().out
    assert "oracle=pass" in line and "end_state=pass" in line
    assert run("oracle", str(out)) == 0
    assert json.loads(capsys.readouterr().out)["ok"]
    assert run("replay", str(out)) == 0
    assert capsys.readouterr().out.strip() == "identical"


def test_replay_detects_tampering(tmp_path, capsys):
    out = tmp_path / "r.jsonl"
    run("run", "--txns", "100", "--out", str(out))
    text = out.read_text().replace('"committed": ', '"committed": 1', 1)
    out.write_text(text)
    capsys.readouterr()
    assert run("replay", str(out)) == 1


def test_oracle_flags_doctored_history(tmp_path, capsys):
    out = tmp_path / "r.jsonl"
    run("run", "--txns", "150", "--workload", "ycsb-a", "--out", str(out))
    recs = [json.loads(x) for x in out.read_text().splitlines()]
    for r in recs:
        if r["type"] == "txn" and r["verdict"] == "ABORTED" and r["writes"]:
            r["verdict"], r["reason"] = "COMMITTED", None
    out.write_text("\n".join(json.dumps(r) for r in recs) + "\n")
    capsys.readouterr()
    assert run("oracle", str(out)) == 1
    assert not json.loads(capsys.readouterr().out)["ok"]


def test_yaml_config_and_faults_file(tmp_path, capsys):
    faults = tmp_path / "f.txt"
    faults.write_text("at 100 crash 3\nat 300 recover 3\n")
    conf = tmp_path / "s.yaml"
    conf.write_text(f"seed: 9\ntxns: 300\nshards: 2\nfaults_file: {faults}\n"
                    "workload:\n  kind: ycsb-b\n  rows: 200\n")
    out = tmp_path / "r.jsonl"
    assert run("run", "--config", str(conf), "--zipf", "0", "--out", str(out)) == 0
    config = json.loads(out.read_text().splitlines()[0])["config"]
    assert config["shards"] == 2 and config["workload"]["distribution"] == "uniform"
    assert "crash 3" in config["faults"]


def test_errors_exit_2(tmp_path, capsys):
    bad = tmp_path / "bad.txt"
    bad.write_text("at soon crash 1\n")
    assert run("run", "--faults", str(bad)) == 2
    assert "line 1" in capsys.readouterr().err
    assert run("oracle", str(tmp_path / "missing.jsonl")) == 2


def test_no_history_flag(tmp_path):
    out = tmp_path / "r.jsonl"
    run("run", "--txns", "50", "--no-history", "--out", str(out))
    assert '"type": "txn"' not in out.read_text()
