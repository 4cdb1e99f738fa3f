"""
Few servers: anomaly indexes and virtualized replicas
=====================================================

With five servers a KS test has too few distances to work with, so each
server's distances closest to the benign cluster are scored by their MAD
anomaly index instead.

With only three physical servers, the client submits the same sub-run five
times to each. A malicious server can return one model for all five jobs;
its replicas are never compared with each other, so that trick gains nothing.
"""

from rttd.harness import collusion_scenario, mad_scenario, run_scenario

for seed in range(3):
    rep = run_scenario(mad_scenario(seed))
    v = rep.subruns[0].detection.verdicts
    print(f"MAD, seed {seed}: flagged {rep.flagged_servers}; "
          "Q3 / cluster max per server:",
          ", ".join(f"{q:.2g}/{own:.2g}" for q, own in (x.anomaly_summary for x in v)))

for seed in range(3):
    rep = run_scenario(collusion_scenario(seed))
    votes = {s: ok for s, ok in rep.subruns[0].server_verdicts.items()}
    print(f"3 servers x 5 jobs, seed {seed}: physical verdicts {votes}")
