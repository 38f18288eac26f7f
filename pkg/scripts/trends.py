"""Directional sweeps: skew, read mix and transaction length."""

import argparse

from epochcc.harness import ScenarioConfig, run_scenario
from epochcc.workload import WorkloadSpec


def run(txns, seed, **wl):
    s = run_scenario(ScenarioConfig(seed=seed, txns=txns, workload=WorkloadSpec(**wl))).summary
    return s


def main():
    p = argparse.ArgumentParser()
    p.add_argument("--txns", type=int, default=3000)
    p.add_argument("--seed", type=int, default=1)
    a = p.parse_args()
    rows = []
    for label, wl in (("zipf 0.99", dict(distribution="zipf")),
                      ("uniform", dict(distribution="uniform")),
                      ("ycsb-a", dict(kind="ycsb-a")), ("ycsb-b", dict(kind="ycsb-b")),
                      *((f"ops={n}", dict(ops=n)) for n in (1, 2, 5, 10, 20))):
        s = run(a.txns, a.seed, **wl)
        rows.append((label, s["abort_rate"], s["throughput_tps"], s["latency_ticks"]["p50"]))
    print(f"{'workload':12s} {'abort':>7s} {'tps':>8s} {'p50':>5s}")
    for label, ab, tps, p50 in rows:
        print(f"{label:12s} {ab:7.3f} {tps:8.1f} {p50:5}")


if __name__ == "__main__":
    main()
