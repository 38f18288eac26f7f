"""Command line: ``run``, ``oracle`` and ``replay``."""

from __future__ import annotations

import argparse
import json
import logging
import sys

import yaml

from .errors import ConfigError, EpochCCError
from .harness import ScenarioConfig, run_scenario
from .oracle import HistTxn, si_oracle
from .workload import WorkloadSpec, base_dataset


def _load_config(args) -> ScenarioConfig:
    data: dict = {}
    if args.config:
        with open(args.config) as fh:
            data = yaml.safe_load(fh) or {}
        if "faults_file" in data:
            with open(data.pop("faults_file")) as fh:
                data["faults"] = fh.read()
    flat = {
        "seed": args.seed, "cc_nodes": args.nodes_cc, "exec_nodes": args.nodes_exec,
        "storage_nodes": args.nodes_storage, "shards": args.shards, "replicas": args.replicas,
        "epoch_ticks": args.epoch, "log_mode": args.log_mode, "txns": args.txns,
        "duration": args.duration, "transport": args.transport,
    }
    for k, v in flat.items():
        if v is not None:
            data[k] = v
    wl = dict(data.get("workload") or {})
    if isinstance(data.get("workload"), WorkloadSpec):
        wl = vars(data["workload"])
    if args.workload is not None:
        wl["kind"] = args.workload
    if args.zipf is not None:
        if args.zipf <= 0:
            wl["distribution"] = "uniform"
        else:
            wl["distribution"] = "zipf"
            wl["theta"] = args.zipf
    for k in ("rows", "ops"):
        if getattr(args, k) is not None:
            wl[k] = getattr(args, k)
    if args.read_fraction is not None:
        wl["read_fraction"] = args.read_fraction
    if args.cross_model is not None:
        wl["cross_model"] = args.cross_model
    data["workload"] = wl
    if args.faults:
        with open(args.faults) as fh:
            data["faults"] = fh.read()
    return ScenarioConfig.from_dict(data)


def _summary_line(s: dict) -> str:
    return (f"txns={s['txns']} committed={s['committed']} abort_rate={s['abort_rate']:.3f} "
            f"tps={s['throughput_tps']:.1f} p50={s['latency_ticks']['p50']} "
            f"rtt_max={s['rtt']['max']} oracle={'pass' if s['oracle'].get('ok') else 'FAIL'} "
            f"end_state={'pass' if s['end_state']['ok'] else 'FAIL'}")


def cmd_run(args) -> int:
    cfg = _load_config(args)
    if cfg.transport == "tcp":
        from .live import run_live
        report = run_live(cfg)
    else:
        report = run_scenario(cfg)
    if args.out:
        report.write(args.out, with_history=not args.no_history)
    print(_summary_line(report.summary))
    ok = report.summary["oracle"].get("ok") and report.summary["end_state"]["ok"]
    return 0 if ok else 1


def _read_report(path):
    config, txns, summary = None, [], None
    with open(path) as fh:
        for line in fh:
            rec = json.loads(line)
            t = rec.get("type")
            if t == "config":
                config = rec["config"]
            elif t == "txn":
                txns.append(HistTxn.from_json(rec))
            elif t == "summary":
                summary = rec
    if config is None:
        raise ConfigError(f"{path}: no config record")
    return config, txns, summary


def cmd_oracle(args) -> int:
    config, txns, _ = _read_report(args.report)
    spec = WorkloadSpec(**config["workload"])
    res = si_oracle(txns, base_dataset(spec))
    print(json.dumps(res.summary(), sort_keys=True))
    return 0 if res.ok else 1


def cmd_replay(args) -> int:
    config, _, _ = _read_report(args.report)
    cfg = ScenarioConfig.from_dict(config)
    if cfg.transport == "tcp":
        print("replay is only deterministic for the sim transport", file=sys.stderr)
        return 2
    report = run_scenario(cfg)
    with open(args.report) as fh:
        original = fh.read()
    with_history = '"type": "txn"' in original
    fresh = report.to_jsonl(with_history)
    if args.out:
        with open(args.out, "w") as fh:
            fh.write(fresh)
    same = fresh == original
    print("identical" if same else "DIFFERENT")
    return 0 if same else 1


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="epochcc", description=__doc__)
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="cmd", required=True)

    r = sub.add_parser("run", help="run a scenario")
    r.add_argument("--config", help="YAML scenario file")
    r.add_argument("--seed", type=int)
    r.add_argument("--nodes-cc", type=int)
    r.add_argument("--nodes-exec", type=int)
    r.add_argument("--nodes-storage", type=int)
    r.add_argument("--shards", type=int)
    r.add_argument("--replicas", type=int, help="replicas per shard (0 = all CC nodes)")
    r.add_argument("--epoch", type=int, help="epoch length in ticks")
    r.add_argument("--log-mode", choices=("sync", "async"))
    r.add_argument("--workload", choices=("ycsb-a", "ycsb-b", "tpcc-lite"))
    r.add_argument("--zipf", type=float, help="zipf exponent; 0 selects uniform keys")
    r.add_argument("--rows", type=int)
    r.add_argument("--ops", type=int, help="operations per transaction")
    r.add_argument("--read-fraction", type=float)
    r.add_argument("--cross-model", type=float, help="fraction of cross-model transactions")
    r.add_argument("--txns", type=int)
    r.add_argument("--duration", type=int, help="ticks during which new txns start")
    r.add_argument("--faults", help="fault script file")
    r.add_argument("--transport", choices=("sim", "tcp"))
    r.add_argument("--out", help="write the JSONL report here")
    r.add_argument("--no-history", action="store_true", help="omit per-txn records")
    r.set_defaults(fn=cmd_run)

    o = sub.add_parser("oracle", help="re-check the history stored in a report")
    o.add_argument("report")
    o.set_defaults(fn=cmd_oracle)

    rp = sub.add_parser("replay", help="re-run a report's config and compare byte for byte")
    rp.add_argument("report")
    rp.add_argument("--out")
    rp.set_defaults(fn=cmd_replay)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.fn(args)
    except (EpochCCError, OSError, yaml.YAMLError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
