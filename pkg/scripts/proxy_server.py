"""Serve the proxy line protocol over a simulated three-node cluster.

    python3 scripts/proxy_server.py --port 7070
    printf 'BEGIN\nGET proxy-1 user00000001\nPUT proxy-1 user00000001 hi\nCOMMIT proxy-1\n' \
        | nc -q1 127.0.0.1 7070

Every request advances simulated time until it completes.
"""

import argparse
import time

from epochcc.harness import STORAGE_BASE, InProcessCluster, ScenarioConfig, SimBackend
from epochcc.proxy import KVProxy, serve_lines
from epochcc.workload import WorkloadSpec


def main():
    p = argparse.ArgumentParser()
    p.add_argument("--port", type=int, default=7070)
    p.add_argument("--rows", type=int, default=100)
    a = p.parse_args()
    cfg = ScenarioConfig(exec_nodes=0, txns=0, workload=WorkloadSpec(rows=a.rows))
    cluster = InProcessCluster(cfg)
    cluster.run(until=cfg.epoch_ticks)
    proxy = KVProxy(SimBackend(cluster, 1, STORAGE_BASE))
    server = serve_lines(proxy, port=a.port)
    print(f"listening on {server.server_address[0]}:{server.server_address[1]}", flush=True)
    try:
        while True:
            time.sleep(3600)
    except KeyboardInterrupt:
        pass
    finally:
        server.shutdown()
        cluster.close()


if __name__ == "__main__":
    main()
