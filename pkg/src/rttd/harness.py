"""Scenario orchestration.

A scenario trains a primary model in sub-runs of ``k`` steps, hands the
checkpoint at one or more sub-run boundaries to ``n`` simulated servers
(optionally ``virtualize_replicas`` jobs each), measures pairwise model
distances and runs detection. Everything is keyed off ``scenario_seed``;
server ``s`` replica ``j`` on sub-run ``i`` draws from
``RngKey(scenario_seed, s * 10**6 + j, i)``.
"""

from __future__ import annotations

import csv
import io
import json
import math
import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Sequence

import numpy as np

from .attacks import (
    AdaptiveZestConfig,
    AttackMetrics,
    BackdoorConfig,
    ReferenceContext,
    TriggerSpec,
    adaptive_param_attack,
    adaptive_zest_attack,
    attack_success_rate,
    blend_noise,
    corner_patch,
    flag,
    malicious_subrun,
    random_pattern,
    stripe,
)
from .datasets import LabeledDataset, SegmentMap, dump_dataset, make_blobs, make_tiny_images, split
from .detector import DetectionConfig, DetectionReport, DistanceMatrix, detect_all, pairwise_distances, report_to_dict
from .distances import METRICS, ProbeContext, make_probe_context
from .nn import (
    Checkpoint,
    ModelArch,
    ModelWeights,
    RngKey,
    SubRunSpec,
    evaluate_accuracy,
    init_weights,
    save_checkpoint,
    train_subrun,
)

BEHAVIOR_KINDS = ("benign", "backdoor", "adaptive_param", "adaptive_zest")
SWEEP_AXES = ("k", "t", "eta", "n", "r", "asr", "metric", "masks_per_point")
GROUPS = ("benign-benign", "benign-malicious", "malicious-malicious")
REPORT_FORMAT = "rttd-report/1"
PRIMARY_SERVER = 1
REPLICA_STRIDE = 10**6
HISTOGRAM_BINS = 20


class ConfigError(ValueError):
    """Invalid scenario configuration; the message names the offending field."""


def server_key(seed: int, server_id: int, replica: int, subrun_index: int) -> RngKey:
    return RngKey(seed, server_id * REPLICA_STRIDE + replica, subrun_index)


# -- configuration ------------------------------------------------------------

@dataclass(frozen=True)
class ServerBehavior:
    server_id: int
    kind: str = "benign"
    attack: BackdoorConfig | None = None
    lr_scale: float = 0.01  # adaptive_param only
    zest: AdaptiveZestConfig | None = None  # adaptive_zest only

    def __post_init__(self):
        if self.kind not in BEHAVIOR_KINDS:
            raise ConfigError(f"kind: must be one of {BEHAVIOR_KINDS}, got {self.kind!r}")
        if self.server_id < 1:
            raise ConfigError("server_id: must be >= 1")
        if self.malicious and self.attack is None:
            raise ConfigError(f"attack: required for a {self.kind} server")
        if self.kind == "adaptive_param" and not 0.0 < self.lr_scale <= 1.0:
            raise ConfigError("lr_scale: must lie in (0, 1]")

    @property
    def malicious(self) -> bool:
        return self.kind != "benign"

    def to_dict(self) -> dict:
        d = {"server_id": self.server_id, "kind": self.kind}
        if self.attack is not None:
            d["attack"] = self.attack.to_dict()
        if self.kind == "adaptive_param":
            d["lr_scale"] = self.lr_scale
        if self.kind == "adaptive_zest":
            z = self.zest or AdaptiveZestConfig()
            d["zest"] = {"knows_reference_points": z.knows_reference_points,
                         "masks_per_point": z.masks_per_point, "match_weight": z.match_weight,
                         "match_steps_per_round": z.match_steps_per_round,
                         "guess_multiplier": z.guess_multiplier}
        return d


@dataclass(frozen=True)
class DatasetSpec:
    kind: str = "tiny_images"
    params: tuple[tuple[str, float], ...] = ()
    train_fraction: float = 0.7

    def build(self, seed: int) -> tuple[LabeledDataset, LabeledDataset, SegmentMap]:
        params = dict(self.params)
        if self.kind == "tiny_images":
            data, seg = make_tiny_images(seed, **params)
        elif self.kind == "blobs":
            segments = int(params.pop("num_segments", 4))
            data = make_blobs(seed, **params)
            seg = SegmentMap.contiguous(data.dim, segments)
        else:
            raise ConfigError(f"dataset.kind: unknown dataset {self.kind!r}")
        train, test = split(data, self.train_fraction, seed)
        return train, test, seg

    def to_dict(self) -> dict:
        return {"kind": self.kind, "params": dict(self.params), "train_fraction": self.train_fraction}


@dataclass(frozen=True)
class ProbeSpec:
    num_reference: int = 32
    num_masks: int = 64
    num_probe: int = 256
    ridge_lambda: float = 1e-6

    def to_dict(self) -> dict:
        return {"num_reference": self.num_reference, "num_masks": self.num_masks,
                "num_probe": self.num_probe, "ridge_lambda": self.ridge_lambda}


@dataclass(frozen=True)
class ScenarioConfig:
    scenario_seed: int
    arch: ModelArch
    T: int
    k: int
    servers: tuple[ServerBehavior, ...]
    t: int | None = None  # start step of the replicated sub-run; None -> seeded choice of m
    m: int = 1
    eta: float = 0.05
    batch_size: int = 32
    augment_noise_std: float = 0.01
    dataset: DatasetSpec = field(default_factory=DatasetSpec)
    metric: str = "zest"
    probe: ProbeSpec = field(default_factory=ProbeSpec)
    detection: DetectionConfig = field(default_factory=DetectionConfig)
    virtualize_replicas: int = 1
    collusion: bool = False  # malicious servers return one model for all their replicas
    pretrain_behavior: ServerBehavior | None = None  # primary's behaviour before the first replicated sub-run

    def __post_init__(self):
        object.__setattr__(self, "servers", tuple(self.servers))
        validate_config(self)

    @property
    def n(self) -> int:
        return len(self.servers)

    @property
    def benign_fraction_r(self) -> float:
        return self.detection.benign_fraction_r

    @property
    def num_subruns(self) -> int:
        return self.T // self.k

    def subrun_spec(self, index: int) -> SubRunSpec:
        return SubRunSpec(self.k, self.eta, self.batch_size, index * self.k, self.augment_noise_std)

    def behavior(self, server_id: int) -> ServerBehavior:
        for b in self.servers:
            if b.server_id == server_id:
                return b
        raise KeyError(server_id)

    def to_dict(self) -> dict:
        d = {
            "scenario_seed": self.scenario_seed,
            "arch": self.arch.to_dict(),
            "T": self.T, "k": self.k, "t": self.t, "m": self.m,
            "eta": self.eta, "batch_size": self.batch_size,
            "augment_noise_std": self.augment_noise_std,
            "dataset": self.dataset.to_dict(),
            "metric": self.metric,
            "probe": self.probe.to_dict(),
            "detection": self.detection.to_dict(),
            "virtualize_replicas": self.virtualize_replicas,
            "collusion": self.collusion,
            "servers": [b.to_dict() for b in self.servers],
        }
        if self.pretrain_behavior is not None:
            d["pretrain_behavior"] = self.pretrain_behavior.to_dict()
        return d


def validate_config(cfg: ScenarioConfig) -> None:
    if cfg.k < 1 or cfg.T < 1:
        raise ConfigError("T, k: must be positive")
    if cfg.T % cfg.k:
        raise ConfigError(f"T: {cfg.T} is not a multiple of k={cfg.k}")
    if cfg.t is not None:
        if cfg.t < 0 or cfg.t % cfg.k:
            raise ConfigError(f"t: {cfg.t} is not a sub-run boundary (multiple of k={cfg.k})")
        if cfg.t + cfg.k > cfg.T:
            raise ConfigError(f"t: t + k = {cfg.t + cfg.k} exceeds T={cfg.T}")
        if cfg.m != 1:
            raise ConfigError("m: must be 1 when t pins the replicated sub-run")
    if not 1 <= cfg.m <= cfg.T // cfg.k:
        raise ConfigError(f"m: must lie in [1, T/k={cfg.T // cfg.k}]")
    if not cfg.eta > 0 or not math.isfinite(cfg.eta):
        raise ConfigError("eta: must be positive")
    if cfg.batch_size < 1:
        raise ConfigError("batch_size: must be >= 1")
    if cfg.augment_noise_std < 0:
        raise ConfigError("augment_noise_std: must be >= 0")
    if cfg.metric not in METRICS:
        raise ConfigError(f"metric: must be one of {METRICS}")
    if cfg.virtualize_replicas < 1:
        raise ConfigError("virtualize_replicas: must be >= 1")
    ids = [b.server_id for b in cfg.servers]
    if len(set(ids)) != len(ids):
        raise ConfigError("servers: duplicate server_id")
    if PRIMARY_SERVER not in ids:
        raise ConfigError(f"servers: the primary server (id {PRIMARY_SERVER}) is missing")
    models = cfg.n * cfg.virtualize_replicas
    if models < 3:
        raise ConfigError("servers: need at least three models per replicated sub-run")
    benign = sum(not b.malicious for b in cfg.servers) * cfg.virtualize_replicas
    if cfg.detection.benign_count(models) > benign:
        raise ConfigError(
            f"detection.benign_fraction_r: ceil(r * n) = {cfg.detection.benign_count(models)} "
            f"exceeds the {benign} benign models declared")
    if cfg.detection.benign_count(models) < 2:
        raise ConfigError("detection.benign_fraction_r: ceil(r * n) must be at least 2")
    if not cfg.collusion:
        triggers = [b.attack.trigger for b in cfg.servers if b.malicious]
        if len(set(triggers)) != len(triggers):
            raise ConfigError("servers: malicious servers share a trigger but collusion is off")
    num_classes = cfg.arch.num_classes
    for b in cfg.servers:
        if b.attack is not None and b.attack.target_class >= num_classes:
            raise ConfigError(f"servers[{b.server_id}].attack.target_class: out of range")


# -- config files -------------------------------------------------------------

def _require(d: dict, key: str, where: str):
    if key not in d:
        raise ConfigError(f"{where}{key}: missing")
    return d[key]


def _behavior_from_dict(d: dict, where: str) -> ServerBehavior:
    if not isinstance(d, dict):
        raise ConfigError(f"{where}: expected an object")
    try:
        attack = BackdoorConfig.from_dict(d["attack"]) if "attack" in d else None
        zest = None
        if "zest" in d:
            z = d["zest"]
            zest = AdaptiveZestConfig(
                knows_reference_points=bool(z.get("knows_reference_points", True)),
                masks_per_point=int(z.get("masks_per_point", 10)),
                match_weight=float(z.get("match_weight", 1.0)),
                match_steps_per_round=int(z.get("match_steps_per_round", 5)),
                guess_multiplier=int(z.get("guess_multiplier", 10)))
        return ServerBehavior(int(_require(d, "server_id", where + ".")), d.get("kind", "benign"),
                              attack, float(d.get("lr_scale", 0.01)), zest)
    except ConfigError as exc:
        raise ConfigError(f"{where}.{exc}") from None
    except (KeyError, TypeError, ValueError) as exc:
        raise ConfigError(f"{where}: {exc}") from None


def config_from_dict(d: dict) -> ScenarioConfig:
    if not isinstance(d, dict):
        raise ConfigError("config: top level must be an object")
    try:
        arch = ModelArch.from_dict(_require(d, "arch", ""))
    except (KeyError, TypeError, ValueError) as exc:
        raise ConfigError(f"arch: {exc}") from None
    servers = _require(d, "servers", "")
    if not isinstance(servers, list):
        raise ConfigError("servers: expected a list")
    behaviors = tuple(_behavior_from_dict(s, f"servers[{i}]") for i, s in enumerate(servers))
    pre = d.get("pretrain_behavior")
    ds = d.get("dataset", {})
    probe = d.get("probe", {})
    try:
        dataset = DatasetSpec(ds.get("kind", "tiny_images"),
                              tuple(sorted(ds.get("params", {}).items())),
                              float(ds.get("train_fraction", 0.7)))
        probe_spec = ProbeSpec(int(probe.get("num_reference", 32)), int(probe.get("num_masks", 64)),
                               int(probe.get("num_probe", 256)), float(probe.get("ridge_lambda", 1e-6)))
        detection = DetectionConfig.from_dict(d.get("detection", {}))
    except (TypeError, ValueError, AttributeError) as exc:
        raise ConfigError(f"dataset/probe/detection: {exc}") from None
    t = d.get("t")
    try:
        return ScenarioConfig(
            scenario_seed=int(_require(d, "scenario_seed", "")),
            arch=arch,
            T=int(_require(d, "T", "")),
            k=int(_require(d, "k", "")),
            servers=behaviors,
            t=None if t is None else int(t),
            m=int(d.get("m", 1)),
            eta=float(d.get("eta", 0.05)),
            batch_size=int(d.get("batch_size", 32)),
            augment_noise_std=float(d.get("augment_noise_std", 0.01)),
            dataset=dataset,
            metric=d.get("metric", "zest"),
            probe=probe_spec,
            detection=detection,
            virtualize_replicas=int(d.get("virtualize_replicas", 1)),
            collusion=bool(d.get("collusion", False)),
            pretrain_behavior=None if pre is None else _behavior_from_dict(pre, "pretrain_behavior"),
        )
    except ConfigError:
        raise
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"config: {exc}") from None


def load_config(path) -> ScenarioConfig:
    try:
        text = Path(path).read_text()
    except OSError as exc:
        raise ConfigError(f"{path}: cannot read config ({exc.strerror})") from None
    try:
        d = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: line {exc.lineno} column {exc.colno}: {exc.msg}") from None
    return config_from_dict(d)


def save_config(cfg: ScenarioConfig, path) -> None:
    Path(path).write_text(json.dumps(cfg.to_dict(), indent=2, sort_keys=True) + "\n")


# -- default scenarios --------------------------------------------------------

def distinct_triggers(seed: int, side: int = 8, magnitude: float = 2.5) -> list[TriggerSpec]:
    """Eight triggers with different shapes and locations."""
    return [
        corner_patch(side, 2, "bottom_right", magnitude),
        stripe(side, 0, None, False, magnitude),
        flag(side, 0, 0, 3, 2, magnitude),
        random_pattern(side, seed * 10 + 1, 5, 0, 3, magnitude),
        random_pattern(side, seed * 10 + 2, 0, 5, 3, magnitude),
        blend_noise(side * side, seed * 10 + 3, 0.5, magnitude),
        corner_patch(side, 2, "top_left", magnitude),
        stripe(side, 3, None, True, magnitude),
    ]


def default_roster(seed: int, num_benign: int = 8, num_malicious: int = 8, kind: str = "backdoor",
                   low_ratio_attackers: int = 2, low_ratio: float = 0.1,
                   num_classes: int = 4, side: int = 8) -> tuple[ServerBehavior, ...]:
    """Benign servers first (the primary is server 1), then malicious ones.

    The last ``low_ratio_attackers`` backdoor servers poison at
    ``low_ratio`` times the benign learning rate.
    """
    triggers = distinct_triggers(seed, side)
    if num_malicious > len(triggers):
        extra = [random_pattern(side, seed * 10 + 100 + i, (i * 3) % (side - 2), (i * 5) % (side - 2))
                 for i in range(num_malicious - len(triggers))]
        triggers += extra
    roster = [ServerBehavior(i + 1) for i in range(num_benign)]
    for j in range(num_malicious):
        ratio = low_ratio if kind == "backdoor" and j >= num_malicious - low_ratio_attackers else 1.0
        attack = BackdoorConfig(triggers[j], j % num_classes, 0.2, ratio, 1)
        zest = AdaptiveZestConfig() if kind == "adaptive_zest" else None
        roster.append(ServerBehavior(num_benign + j + 1, kind, attack, 0.01, zest))
    return tuple(roster)


def steps_per_epoch(cfg: ScenarioConfig) -> int:
    train, _, _ = cfg.dataset.build(cfg.scenario_seed)
    return len(train) // cfg.batch_size


def default_scenario(seed: int = 0, **overrides) -> ScenarioConfig:
    """16 servers (8 benign, 8 distinct backdoors), 64-32-4 net, Zest.

    Tiny 8x8 images with 700 training points and batch 32 give 21 steps
    per epoch; T is 20 epochs, k is 5 epochs and the replicated sub-run
    starts at T/2.
    """
    spe = 700 // 32  # the default dataset splits 1000 points 70/30
    cfg = dict(scenario_seed=seed, arch=ModelArch(64, (32,), 4), T=20 * spe, k=5 * spe,
               t=10 * spe, servers=default_roster(seed))
    cfg.update(overrides)
    return ScenarioConfig(**cfg)


def low_lr_scenario(seed: int = 0, **overrides) -> ScenarioConfig:
    """Early one-epoch sub-run with heavy input jitter and low-lr attackers.

    Heavy augmentation spreads benign parameters enough that a stale,
    barely-moved attacker hides among them in parameter space.
    """
    spe = 700 // 16
    cfg = dict(scenario_seed=seed, arch=ModelArch(64, (32,), 4), T=20 * spe, k=spe, t=spe,
               batch_size=16, augment_noise_std=1.2,
               servers=default_roster(seed, kind="adaptive_param"), metric="parameter")
    cfg.update(overrides)
    return ScenarioConfig(**cfg)


def all_benign_scenario(seed: int = 0, n: int = 16, **overrides) -> ScenarioConfig:
    return default_scenario(seed, servers=default_roster(seed, n, 0), **overrides)


def mad_scenario(seed: int = 0, **overrides) -> ScenarioConfig:
    """Five servers (3 benign, 2 backdoored), r = 0.6, anomaly-index verdicts."""
    cfg = dict(servers=default_roster(seed, 3, 2, low_ratio_attackers=0),
               detection=DetectionConfig(0.6, fallback="mad"))
    cfg.update(overrides)
    return default_scenario(seed, **cfg)


def collusion_scenario(seed: int = 0, **overrides) -> ScenarioConfig:
    """Three servers with five jobs each; server 3 returns one backdoored model five times."""
    cfg = dict(servers=default_roster(seed, 2, 1, low_ratio_attackers=0), virtualize_replicas=5,
               collusion=True, detection=DetectionConfig(2 / 3))
    cfg.update(overrides)
    return default_scenario(seed, **cfg)


def backdoored_before_scenario(seed: int = 0, **overrides) -> ScenarioConfig:
    """The primary backdoors every sub-run before t; all servers behave in the replicated one."""
    bad = default_roster(seed, 0, 1, low_ratio_attackers=0)[0]
    return all_benign_scenario(seed, pretrain_behavior=replace(bad, server_id=PRIMARY_SERVER),
                               **overrides)


def adaptive_zest_scenario(seed: int = 0, masks_per_point: int = 10, knows_reference_points: bool = True,
                           **overrides) -> ScenarioConfig:
    roster = tuple(
        replace(b, zest=AdaptiveZestConfig(knows_reference_points, masks_per_point=masks_per_point))
        if b.malicious else b
        for b in default_roster(seed, kind="adaptive_zest"))
    return default_scenario(seed, servers=roster, **overrides)


# -- training -----------------------------------------------------------------

def _behavior_run(behavior: ServerBehavior, w: ModelWeights, train: LabeledDataset,
                  spec: SubRunSpec, key: RngKey, reference: ReferenceContext | None) -> ModelWeights:
    if behavior.kind == "benign":
        return train_subrun(w, train, spec, key)
    if behavior.kind == "backdoor":
        return malicious_subrun(w, train, spec, behavior.attack, key)
    if behavior.kind == "adaptive_param":
        return adaptive_param_attack(w, train, spec, behavior.attack, behavior.lr_scale, key)
    if reference is None:
        raise ValueError("adaptive_zest server needs the client's reference context")
    return adaptive_zest_attack(w, train, spec, behavior.attack, behavior.zest or AdaptiveZestConfig(),
                                reference, key)


def select_subruns(cfg: ScenarioConfig) -> list[int]:
    """Indices of replicated sub-runs: pinned by t, else a seeded uniform choice of m."""
    if cfg.t is not None:
        return [cfg.t // cfg.k]
    rng = RngKey(cfg.scenario_seed, 0, 0, "shuffle").generator(child=1)
    return sorted(int(i) for i in rng.choice(cfg.num_subruns, size=cfg.m, replace=False))


def initial_weights(cfg: ScenarioConfig) -> ModelWeights:
    return init_weights(cfg.arch, RngKey(cfg.scenario_seed, 0, 0, "init"))


def run_primary_training(cfg: ScenarioConfig, data=None) -> list[Checkpoint]:
    """Primary server trains T steps in T/k sub-runs; one checkpoint per boundary.

    The primary follows ``pretrain_behavior`` (when given) for every
    sub-run before the first replicated one, and its roster behaviour
    otherwise.
    """
    train, _, seg = data or cfg.dataset.build(cfg.scenario_seed)
    first = select_subruns(cfg)[0]
    behavior = cfg.behavior(PRIMARY_SERVER)
    w = initial_weights(cfg)
    meta = {"server": str(PRIMARY_SERVER)}
    ckpts = [Checkpoint(w, 0, meta)]
    for i in range(cfg.num_subruns):
        b = cfg.pretrain_behavior if cfg.pretrain_behavior is not None and i < first else behavior
        key = server_key(cfg.scenario_seed, PRIMARY_SERVER, 0, i)
        ref = probe_context(cfg, train, seg, i).reference_context() if b.kind == "adaptive_zest" else None
        w = _behavior_run(b, w, train, cfg.subrun_spec(i), key, ref)
        ckpts.append(Checkpoint(w, (i + 1) * cfg.k, meta))
    return ckpts


def probe_seed(cfg: ScenarioConfig, subrun_index: int) -> int:
    # kept below 2**63 so the value survives JSON and CLI round trips as an int
    return RngKey(cfg.scenario_seed, 0, subrun_index, "shuffle").seed64(child=2) >> 1


def probe_context(cfg: ScenarioConfig, train: LabeledDataset, seg: SegmentMap,
                  subrun_index: int) -> ProbeContext:
    """The client's probe, drawn from its own training data."""
    p = cfg.probe
    return make_probe_context(train, seg, probe_seed(cfg, subrun_index), p.num_reference,
                              p.num_masks, p.num_probe)


def _task(args):
    behavior, w, train, spec, key, ref = args
    try:
        return _behavior_run(behavior, w, train, spec, key, ref)
    except Exception as exc:
        raise RuntimeError(f"server {behavior.server_id}: {exc}") from exc


def worker_count() -> int:
    """RTTD_THREADS caps worker processes: unset or 1 -> serial, 0 -> all cores."""
    raw = os.environ.get("RTTD_THREADS")
    if raw is None or raw.strip() == "":
        return 1
    try:
        n = int(raw)
    except ValueError:
        raise ConfigError(f"RTTD_THREADS: not an integer: {raw!r}") from None
    if n < 0:
        raise ConfigError("RTTD_THREADS: must be >= 0")
    if n == 0:
        return os.cpu_count() or 1
    return n


def replicate_subrun(w_t: ModelWeights, cfg: ScenarioConfig, subrun_index: int,
                     data=None, reference: ReferenceContext | None = None) -> list[ModelWeights]:
    """n * virtualize_replicas models, ordered server by server then replica.

    With collusion on, each malicious server computes one model and returns
    it for every replica.
    """
    train = (data or cfg.dataset.build(cfg.scenario_seed))[0]
    spec = cfg.subrun_spec(subrun_index)
    tasks, slots = [], []
    for b in cfg.servers:
        for rep in range(cfg.virtualize_replicas):
            if cfg.collusion and b.malicious and rep > 0:
                slots.append(slots[-1])
                continue
            key = server_key(cfg.scenario_seed, b.server_id, rep, subrun_index)
            slots.append(len(tasks))
            tasks.append((b, w_t, train, spec, key, reference))
    workers = min(worker_count(), len(tasks))
    if workers > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            results = list(pool.map(_task, tasks))
    else:
        results = [_task(t) for t in tasks]
    return [results[s] for s in slots]


# -- reports ------------------------------------------------------------------

@dataclass(frozen=True)
class HistogramRow:
    metric: str
    group: str
    bin_lo: float
    bin_hi: float
    count: int


def group_labels(truth: Sequence[bool]) -> list[tuple[int, int, str]]:
    out = []
    for i in range(len(truth)):
        for j in range(i + 1, len(truth)):
            both = truth[i] + truth[j]
            out.append((i, j, GROUPS[2 - both]))
    return out


def distance_groups(matrix: DistanceMatrix, truth: Sequence[bool]) -> dict[str, np.ndarray]:
    vals = {g: [] for g in GROUPS}
    for i, j, g in group_labels(truth):
        vals[g].append(matrix.entries[i, j])
    return {g: np.array(v) for g, v in vals.items()}


def histogram_rows(matrix: DistanceMatrix, truth: Sequence[bool],
                   bins: int = HISTOGRAM_BINS) -> list[HistogramRow]:
    upper = matrix.upper()
    lo, hi = float(upper.min()), float(upper.max())
    edges = np.linspace(lo, hi, bins + 1) if hi > lo else np.array([lo, hi])
    rows = []
    for g, vals in distance_groups(matrix, truth).items():
        counts = np.histogram(vals, bins=edges)[0] if vals.size else np.zeros(edges.size - 1, int)
        rows.extend(HistogramRow(matrix.metric_tag, g, float(a), float(b), int(c))
                    for a, b, c in zip(edges[:-1], edges[1:], counts))
    return rows


def histogram_csv(rows: Sequence[HistogramRow]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["metric", "group", "bin_lo", "bin_hi", "count"])
    for r in rows:
        w.writerow([r.metric, r.group, repr(r.bin_lo), repr(r.bin_hi), r.count])
    return buf.getvalue()


@dataclass(frozen=True)
class SubRunResult:
    subrun_index: int
    start_step: int
    matrix: DistanceMatrix
    detection: DetectionReport
    attack_metrics: dict[int, AttackMetrics]
    server_verdicts: dict[int, bool]  # physical server -> benign
    histogram: tuple[HistogramRow, ...]
    probe_seed: int
    models: tuple[ModelWeights, ...] = field(repr=False, default=())


@dataclass(frozen=True)
class ScenarioReport:
    config: ScenarioConfig
    subruns: tuple[SubRunResult, ...]
    accuracy: float
    primary_clean_accuracy: float

    @property
    def flagged_servers(self) -> list[int]:
        return sorted({s for r in self.subruns for s, ok in r.server_verdicts.items() if not ok})

    def to_dict(self) -> dict:
        truth = {b.server_id: not b.malicious for b in self.config.servers}
        return {
            "format": REPORT_FORMAT,
            "config": self.config.to_dict(),
            "accuracy": self.accuracy,
            "primary_clean_accuracy": self.primary_clean_accuracy,
            "flagged_servers": self.flagged_servers,
            "subruns": [
                {
                    "subrun_index": r.subrun_index,
                    "start_step": r.start_step,
                    "probe_seed": r.probe_seed,
                    "detection": report_to_dict(r.detection),
                    "server_verdicts": [
                        {"server_id": s, "is_benign": ok, "truth": truth[s]}
                        for s, ok in sorted(r.server_verdicts.items())
                    ],
                    "attack_metrics": [
                        {"server_id": s, "asr": a.asr, "clean_accuracy": a.clean_accuracy}
                        for s, a in sorted(r.attack_metrics.items())
                    ],
                }
                for r in self.subruns
            ],
        }


def model_ground_truth(cfg: ScenarioConfig) -> tuple[list[bool], list[int]]:
    truth, groups = [], []
    for b in cfg.servers:
        truth += [not b.malicious] * cfg.virtualize_replicas
        groups += [b.server_id] * cfg.virtualize_replicas
    return truth, groups


def run_scenario(cfg: ScenarioConfig, keep_models: bool = False) -> ScenarioReport:
    """Primary training, replication of the chosen sub-runs, distances, detection."""
    try:
        data = cfg.dataset.build(cfg.scenario_seed)
    except (ValueError, TypeError) as exc:
        raise RuntimeError(f"dataset: {exc}") from exc
    train, test, seg = data
    try:
        ckpts = run_primary_training(cfg, data)
    except ValueError as exc:
        raise RuntimeError(f"primary training: {exc}") from exc
    truth, groups = model_ground_truth(cfg)
    virtual = cfg.virtualize_replicas > 1
    results = []
    for idx in select_subruns(cfg):
        ctx = probe_context(cfg, train, seg, idx)
        w_t = ckpts[idx].weights
        try:
            models = replicate_subrun(w_t, cfg, idx, data, ctx.reference_context())
        except RuntimeError as exc:
            raise RuntimeError(f"replication of sub-run {idx}: {exc}") from exc
        try:
            matrix = pairwise_distances(models, cfg.metric, ctx, cfg.probe.ridge_lambda)
            det = detect_all(matrix, cfg.detection, truth, groups if virtual else None)
        except ValueError as exc:
            raise RuntimeError(f"detection on sub-run {idx}: {exc}") from exc
        metrics = {}
        for pos, b in enumerate(cfg.servers):
            if b.malicious:
                model = models[pos * cfg.virtualize_replicas]
                metrics[b.server_id] = attack_success_rate(model, test, b.attack.trigger,
                                                           b.attack.target_class)
        verdicts = {}
        for pos, b in enumerate(cfg.servers):
            votes = det.verdicts[pos * cfg.virtualize_replicas:(pos + 1) * cfg.virtualize_replicas]
            # physical server verdict: majority of its replicas
            verdicts[b.server_id] = 2 * sum(v.is_benign for v in votes) > len(votes)
        results.append(SubRunResult(idx, idx * cfg.k, matrix, det, metrics, verdicts,
                                    tuple(histogram_rows(matrix, truth)), probe_seed(cfg, idx),
                                    tuple(models) if keep_models else ()))
    correct = [ok == (not cfg.behavior(s).malicious) for r in results for s, ok in r.server_verdicts.items()]
    return ScenarioReport(cfg, tuple(results), float(np.mean(correct)),
                          evaluate_accuracy(ckpts[-1].weights, test))


def write_report(report: ScenarioReport, out_dir, models: bool = True) -> list[Path]:
    """report.json, one histogram CSV per sub-run, the training split, and checkpoints.

    Output bytes depend only on the report, so equal configs give equal files.
    """
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    written = []
    path = out / "report.json"
    path.write_text(json.dumps(report.to_dict(), indent=1, sort_keys=True) + "\n")
    written.append(path)
    for r in report.subruns:
        path = out / f"histogram_subrun{r.subrun_index}.csv"
        path.write_text(histogram_csv(r.histogram))
        written.append(path)
    train, _, seg = report.config.dataset.build(report.config.scenario_seed)
    path = out / "train_data.json"
    dump_dataset(train, path, seg)
    written.append(path)
    if models:
        cfg = report.config
        for r in report.subruns:
            sub = out / f"models_subrun{r.subrun_index}"
            sub.mkdir(exist_ok=True)
            for pos, m in enumerate(r.models):
                b = cfg.servers[pos // cfg.virtualize_replicas]
                rep = pos % cfg.virtualize_replicas
                path = sub / f"{pos:03d}_server{b.server_id}_replica{rep}.bin"
                meta = {"server": str(b.server_id), "replica": str(rep), "subrun": str(r.subrun_index)}
                save_checkpoint(Checkpoint(m, r.start_step + cfg.k, meta), path)
                written.append(path)
    return written


# -- sweeps -------------------------------------------------------------------

def _with_axis(cfg: ScenarioConfig, axis: str, value) -> ScenarioConfig:
    if axis == "k":
        return replace(cfg, k=int(value))
    if axis == "t":
        return replace(cfg, t=int(value), m=1)
    if axis == "eta":
        return replace(cfg, eta=float(value))
    if axis == "metric":
        return replace(cfg, metric=str(value))
    if axis == "r":
        return replace(cfg, detection=replace(cfg.detection, benign_fraction_r=float(value)))
    if axis == "n":
        return _shrink_roster(cfg, int(value))
    if axis == "asr":
        servers = tuple(
            replace(b, attack=replace(b.attack, poison_fraction=float(value))) if b.malicious else b
            for b in cfg.servers)
        return replace(cfg, servers=servers)
    if axis == "masks_per_point":
        if not any(b.kind == "adaptive_zest" for b in cfg.servers):
            raise ConfigError("masks_per_point: no adaptive_zest server in the roster")
        servers = tuple(
            replace(b, zest=replace(b.zest or AdaptiveZestConfig(), masks_per_point=int(value)))
            if b.kind == "adaptive_zest" else b
            for b in cfg.servers)
        return replace(cfg, servers=servers)
    raise ConfigError(f"axis: must be one of {SWEEP_AXES}, got {axis!r}")


def _shrink_roster(cfg: ScenarioConfig, n: int) -> ScenarioConfig:
    """Keep the roster's benign share: first b benign and first n - b malicious servers."""
    benign = [b for b in cfg.servers if not b.malicious]
    bad = [b for b in cfg.servers if b.malicious]
    nb = math.ceil(round(n * len(benign) / cfg.n, 9))
    if nb > len(benign) or n - nb > len(bad):
        raise ConfigError(f"n: roster of {cfg.n} servers cannot supply {n}")
    return replace(cfg, servers=tuple(benign[:nb] + bad[:n - nb]))


def sweep(cfg: ScenarioConfig, axis: str, values: Sequence) -> list[ScenarioReport]:
    """One independent scenario per value, all with the base config's seed."""
    if axis not in SWEEP_AXES:
        raise ConfigError(f"axis: must be one of {SWEEP_AXES}, got {axis!r}")
    configs = []
    for v in values:
        try:
            configs.append(_with_axis(cfg, axis, v))
        except ConfigError as exc:
            raise ConfigError(f"{axis}={v!r}: {exc}") from None
        except (TypeError, ValueError) as exc:
            raise ConfigError(f"{axis}={v!r}: {exc}") from None
    return [run_scenario(c) for c in configs]
