"""Replicated training with distance-based backdoor detection, at desk scale."""

from .attacks import (
    AdaptiveZestConfig,
    AttackMetrics,
    BackdoorConfig,
    TriggerSpec,
    adaptive_param_attack,
    adaptive_zest_attack,
    apply_trigger,
    attack_success_rate,
    malicious_subrun,
)
from .datasets import LabeledDataset, SegmentMap, make_blobs, make_tiny_images, split
from .detector import (
    DetectionConfig,
    DetectionReport,
    DistanceMatrix,
    cost_overhead,
    detect_all,
    detection_probability,
    find_benign_cluster,
    pairwise_distances,
)
from .distances import ProbeContext, make_probe_context, zest_signature
from .harness import (
    ConfigError,
    ScenarioConfig,
    ScenarioReport,
    ServerBehavior,
    default_scenario,
    load_config,
    replicate_subrun,
    run_primary_training,
    run_scenario,
    sweep,
)
from .nn import Checkpoint, ModelArch, ModelWeights, RngKey, SubRunSpec, init_weights, train_subrun
from .stats import ks_two_sample, min_variance_window

__version__ = "0.1.0"

__all__ = [
    "AdaptiveZestConfig",
    "AttackMetrics",
    "BackdoorConfig",
    "Checkpoint",
    "ConfigError",
    "DetectionConfig",
    "DetectionReport",
    "DistanceMatrix",
    "LabeledDataset",
    "ModelArch",
    "ModelWeights",
    "ProbeContext",
    "RngKey",
    "ScenarioConfig",
    "ScenarioReport",
    "SegmentMap",
    "ServerBehavior",
    "SubRunSpec",
    "TriggerSpec",
    "adaptive_param_attack",
    "adaptive_zest_attack",
    "apply_trigger",
    "attack_success_rate",
    "cost_overhead",
    "default_scenario",
    "detect_all",
    "detection_probability",
    "find_benign_cluster",
    "init_weights",
    "ks_two_sample",
    "load_config",
    "make_blobs",
    "make_probe_context",
    "make_tiny_images",
    "malicious_subrun",
    "min_variance_window",
    "pairwise_distances",
    "replicate_subrun",
    "run_primary_training",
    "run_scenario",
    "split",
    "sweep",
    "train_subrun",
    "zest_signature",
]
