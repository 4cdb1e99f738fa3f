"""
Ablations: learning rate, sub-run length, start step
====================================================

Each sweep reruns the default scenario with one knob changed.
"""

import numpy as np

from rttd.harness import default_scenario, distance_groups, model_ground_truth, steps_per_epoch, sweep

cfg = default_scenario(0)
truth, _ = model_ground_truth(cfg)
spe = steps_per_epoch(cfg)


def spread(report):
    g = distance_groups(report.subruns[0].matrix, truth)
    return {name: np.var(v, ddof=1) for name, v in g.items()}


# %%
# A larger learning rate spreads the honest models further apart.
for eta, rep in zip((0.05, 0.5), sweep(cfg, "eta", [0.05, 0.5])):
    print(f"eta={eta}: benign variance {spread(rep)['benign-benign']:.2e}, accuracy {rep.accuracy:.2f}")

# %%
# Sub-run length in epochs: the benign group stays the tightest.
for epochs, rep in zip((1, 2, 5, 10), sweep(cfg, "k", [e * spe for e in (1, 2, 5, 10)])):
    v = spread(rep)
    print(f"k={epochs:2d} epochs: " + ", ".join(f"{g} {x:.1e}" for g, x in v.items()))

# %%
# Start step: at this scale a sub-run at t=0 is detected as well as one at T/2.
for t, rep in zip((0, cfg.T // 2), sweep(cfg, "t", [0, cfg.T // 2])):
    print(f"t={t}: accuracy {rep.accuracy:.2f}")
