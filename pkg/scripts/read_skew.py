"""Scripted X/Y read-skew scenario: T3 sees T1's X but the old Y."""

from epochcc.harness import run_read_skew

for mode in ("async", "sync"):
    out = run_read_skew(mode)
    t1, t3 = out["t1"], out["t3"]
    print(f"{mode:5s}  T1 {t1.verdict.name:9s}  T3 {t3.verdict.name} "
          f"({t3.reason.name if t3.reason else '-'})  T3 read X={out['x_seen'].decode()} "
          f"Y={out['y_seen'].decode()} after {out['polls']} polls")
