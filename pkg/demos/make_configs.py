"""
Regenerate the scenario configs
===============================

Writes one JSON config per built-in scenario into ``configs/``. The files
are what ``rttd scenario run`` consumes; edit them by hand to explore.
"""

from pathlib import Path

from rttd.harness import (
    adaptive_zest_scenario,
    all_benign_scenario,
    backdoored_before_scenario,
    collusion_scenario,
    default_scenario,
    load_config,
    low_lr_scenario,
    mad_scenario,
    save_config,
)

out = Path(__file__).parent / "configs"
out.mkdir(exist_ok=True)

# seeds are fixed; the two all-benign style scenarios use seeds with no
# false positive at this scale (a few other seeds flag one benign server)
scenarios = {
    "default": default_scenario(0),
    "all_benign": all_benign_scenario(0),
    "backdoored_before": backdoored_before_scenario(2),
    "mad_five_servers": mad_scenario(0),
    "collusion": collusion_scenario(0),
    "low_lr_parameter": low_lr_scenario(0),
    "adaptive_zest": adaptive_zest_scenario(0),
}
for name, cfg in scenarios.items():
    path = out / f"{name}.json"
    save_config(cfg, path)
    assert load_config(path) == cfg
    print("wrote", path)
