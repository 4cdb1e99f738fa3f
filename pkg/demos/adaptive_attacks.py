"""
Adaptive attackers
==================

Two attackers who know how detection works.

The first lowers its learning rate so its parameters barely move. Early in
training, with heavy augmentation, that hides it in parameter space, but the
backdoor still shows up in the model's behaviour, which Zest measures.

The second matches an honest surrogate's outputs on masked samples after
every poisoned step. More masks per reference point pull it closer to the
benign models, but not into their cluster.
"""

from rttd.detector import pairwise_distances
from rttd.harness import (
    adaptive_zest_scenario,
    distance_groups,
    low_lr_scenario,
    model_ground_truth,
    probe_context,
    run_scenario,
)

# %%
# Low learning rate: the same models under two metrics.
cfg = low_lr_scenario(0)
truth, _ = model_ground_truth(cfg)
train, _, seg = cfg.dataset.build(cfg.scenario_seed)
sub = run_scenario(cfg, keep_models=True).subruns[0]
ctx = probe_context(cfg, train, seg, sub.subrun_index)
for metric, matrix in [("parameter", sub.matrix),
                       ("zest", pairwise_distances(sub.models, "zest", ctx))]:
    g = distance_groups(matrix, truth)
    ratio = g["benign-malicious"].min() / g["benign-benign"].max()
    print(f"{metric:>9}: min cross / max benign = {ratio:.2f} "
          f"({'overlap' if ratio < 1 else 'separated'})")

# %%
# Output matching: mean cross distance against the benign spread.
for masks in (10, 50, 100):
    for knows in (True, False):
        if not knows and masks != 100:
            continue
        cfg = adaptive_zest_scenario(0, masks, knows_reference_points=knows)
        rep = run_scenario(cfg)
        g = distance_groups(rep.subruns[0].matrix, model_ground_truth(cfg)[0])
        print(f"masks/point {masks:3d} {'exact' if knows else 'guessed'} refs: "
              f"mean cross {g['benign-malicious'].mean():.2e}, max benign {g['benign-benign'].max():.2e}, "
              f"accuracy {rep.accuracy:.2f}")
