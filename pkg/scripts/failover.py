"""Crash a CC node mid-run, bring it back, and print committed txns per window."""

from epochcc.harness import ScenarioConfig, run_scenario
from epochcc.workload import WorkloadSpec

cfg = ScenarioConfig(seed=3, txns=6000, window=200, workload=WorkloadSpec(distribution="uniform"),
                     faults="at 1000 crash 2\nat 2500 recover 2\n")
r = run_scenario(cfg)
s = r.summary
for rec in r.records:
    if rec["type"] == "fault":
        print(f"tick {rec['tick']:5d}  {rec['action']} {rec.get('nodes', '')}")
peak = max(rec["committed"] for rec in r.records if rec["type"] == "window")
for rec in r.records:
    if rec["type"] == "window":
        bar = "#" * round(40 * rec["committed"] / peak)
        print(f"{rec['start']:6d}  {rec['committed']:4d}  {bar}")
print(f"view changes {s['view_changes']}, re-executed epochs {s['reexecuted_epochs']}, "
      f"oracle {'pass' if s['oracle']['ok'] else 'FAIL'}, "
      f"end state {'pass' if s['end_state']['ok'] else 'FAIL'}")
