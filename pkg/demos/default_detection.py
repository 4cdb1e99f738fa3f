"""
Catching backdoored servers in one replicated sub-run
=====================================================

Sixteen servers replay the same stretch of training from a shared
checkpoint. Eight are honest; eight slip a different trigger into the
model. Pairwise Zest distances between the returned models, a
minimum-variance benign cluster and a KS test per server separate them.
"""

import numpy as np

from rttd.harness import default_scenario, distance_groups, model_ground_truth, run_scenario

cfg = default_scenario(seed := 0)
print(f"{cfg.n} servers, T={cfg.T} steps, sub-run of k={cfg.k} steps starting at t={cfg.t}")

report = run_scenario(cfg)
sub = report.subruns[0]

# %%
# Distances by pair type. Honest servers differ only by data order and input
# jitter, so their mutual distances are small and tightly grouped.
truth, _ = model_ground_truth(cfg)
for group, values in distance_groups(sub.matrix, truth).items():
    print(f"{group:>20}: n={values.size:3d} mean={values.mean():.2e} var={np.var(values, ddof=1):.2e}")

# %%
# The cluster is the window of C(8,2)=28 sorted distances with least variance.
print("cluster spans", min(sub.detection.cluster.values), "to", max(sub.detection.cluster.values))

# %%
# Each server's sorted distances are scanned with windows of 7 and compared to
# the cluster. A server stays benign when some window has p >= 0.01.
for b, v in zip(cfg.servers, sub.detection.verdicts):
    label = "malicious" if b.malicious else "benign"
    asr = sub.attack_metrics.get(b.server_id)
    extra = f" ASR {asr.asr:.2f}" if asr else ""
    print(f"server {b.server_id:2d} ({label:9s}) best p={v.best_p_value:.3g} -> "
          f"{'benign' if v.is_benign else 'FLAGGED'}{extra}")

print(f"accuracy {report.accuracy:.3f}, primary clean accuracy {report.primary_clean_accuracy:.3f}")
