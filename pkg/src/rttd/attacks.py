"""Malicious server behaviours.

Trigger poisoning with its own learning-rate ratio and cadence, attack
success measurement, and two adaptive adversaries: one that scales every
learning rate down to stay near the starting weights, and one that pulls
its backdoored model toward a clean surrogate on masked reference samples.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable

import numpy as np

from .datasets import LabeledDataset, SegmentMap
from .nn import (
    ModelWeights,
    RngKey,
    SubRunSpec,
    _forward_cache,
    backward,
    evaluate_accuracy,
    forward,
    iter_minibatches,
    loss_and_grad,
    train_subrun,
)

TRIGGER_KINDS = ("corner_patch", "stripe", "flag", "blend_noise", "random_pattern")


@dataclass(frozen=True)
class TriggerSpec:
    """A trigger writes ``pattern()`` into ``indices`` (blend_noise mixes instead)."""

    kind: str
    indices: tuple[int, ...]
    magnitude: float = 2.5
    seed: int = 0
    alpha: float = 0.5

    def __post_init__(self):
        if self.kind not in TRIGGER_KINDS:
            raise ValueError(f"trigger kind must be one of {TRIGGER_KINDS}")
        object.__setattr__(self, "indices", tuple(int(i) for i in self.indices))
        if not self.indices:
            raise ValueError("trigger region is empty")
        if min(self.indices) < 0:
            raise ValueError("trigger index out of bounds")
        if len(set(self.indices)) != len(self.indices):
            raise ValueError("trigger indices must be distinct")
        if not math.isfinite(self.magnitude):
            raise ValueError("trigger magnitude must be finite")
        if not 0.0 < self.alpha <= 1.0:
            raise ValueError("blend alpha must lie in (0, 1]")

    def pattern(self) -> np.ndarray:
        m = len(self.indices)
        if self.kind in ("corner_patch", "stripe"):
            return np.full(m, float(self.magnitude))
        if self.kind == "flag":
            bands = np.array([1.0, -1.0, 0.5])
            return self.magnitude * bands[np.arange(m) * 3 // m]
        rng = np.random.default_rng(self.seed)
        if self.kind == "random_pattern":
            return self.magnitude * rng.choice([-1.0, 1.0], size=m)
        return self.magnitude * rng.standard_normal(m)

    def to_dict(self) -> dict:
        return {"kind": self.kind, "indices": list(self.indices), "magnitude": self.magnitude,
                "seed": self.seed, "alpha": self.alpha}

    @classmethod
    def from_dict(cls, d: dict) -> "TriggerSpec":
        return cls(d["kind"], tuple(d["indices"]), float(d.get("magnitude", 2.5)),
                   int(d.get("seed", 0)), float(d.get("alpha", 0.5)))


def _block(side: int, top: int, left: int, height: int, width: int) -> tuple[int, ...]:
    if top < 0 or left < 0 or top + height > side or left + width > side:
        raise ValueError("trigger block falls outside the image")
    return tuple(int(r * side + c) for r in range(top, top + height)
                 for c in range(left, left + width))


def corner_patch(side: int, size: int = 2, corner: str = "bottom_right",
                 magnitude: float = 2.5) -> TriggerSpec:
    top = 0 if corner.startswith("top") else side - size
    left = 0 if corner.endswith("left") else side - size
    return TriggerSpec("corner_patch", _block(side, top, left, size, size), magnitude)


def stripe(side: int, row: int = 0, length: int | None = None, vertical: bool = False,
           magnitude: float = 2.5) -> TriggerSpec:
    length = side if length is None else length
    if vertical:
        return TriggerSpec("stripe", _block(side, 0, row, length, 1), magnitude)
    return TriggerSpec("stripe", _block(side, row, 0, 1, length), magnitude)


def flag(side: int, top: int = 0, left: int = 0, height: int = 3, width: int = 2,
         magnitude: float = 2.5) -> TriggerSpec:
    return TriggerSpec("flag", _block(side, top, left, height, width), magnitude)


def random_pattern(side: int, seed: int, top: int = 0, left: int = 0, size: int = 3,
                   magnitude: float = 2.5) -> TriggerSpec:
    return TriggerSpec("random_pattern", _block(side, top, left, size, size), magnitude, seed)


def blend_noise(dim: int, seed: int, alpha: float = 0.5, magnitude: float = 2.5) -> TriggerSpec:
    return TriggerSpec("blend_noise", tuple(range(dim)), magnitude, seed, alpha)


def apply_trigger(x, trigger: TriggerSpec) -> np.ndarray:
    """Stamp the trigger onto one vector or each row of a batch."""
    arr = np.array(x, dtype=np.float64)
    dim = arr.shape[-1]
    if max(trigger.indices) >= dim:
        raise ValueError(f"trigger index {max(trigger.indices)} outside dimension {dim}")
    idx = list(trigger.indices)
    pattern = trigger.pattern()
    if trigger.kind == "blend_noise":
        arr[..., idx] = trigger.alpha * pattern + (1.0 - trigger.alpha) * arr[..., idx]
    else:
        arr[..., idx] = pattern
    return arr


@dataclass(frozen=True)
class BackdoorConfig:
    trigger: TriggerSpec
    target_class: int
    poison_fraction: float = 0.2
    backdoor_lr_ratio: float = 1.0
    reinforce_every: int = 1

    def __post_init__(self):
        if self.target_class < 0:
            raise ValueError("target class must be >= 0")
        if not 0.0 < self.poison_fraction <= 1.0:
            raise ValueError("poison fraction must lie in (0, 1]")
        if self.backdoor_lr_ratio <= 0:
            raise ValueError("backdoor lr ratio must be > 0")
        if self.reinforce_every < 1:
            raise ValueError("reinforce_every must be >= 1")

    def to_dict(self) -> dict:
        return {"trigger": self.trigger.to_dict(), "target_class": self.target_class,
                "poison_fraction": self.poison_fraction,
                "backdoor_lr_ratio": self.backdoor_lr_ratio,
                "reinforce_every": self.reinforce_every}

    @classmethod
    def from_dict(cls, d: dict) -> "BackdoorConfig":
        return cls(TriggerSpec.from_dict(d["trigger"]), int(d["target_class"]),
                   float(d.get("poison_fraction", 0.2)),
                   float(d.get("backdoor_lr_ratio", 1.0)),
                   int(d.get("reinforce_every", 1)))


@dataclass(frozen=True)
class AdaptiveZestConfig:
    knows_reference_points: bool = True
    surrogate_spec: SubRunSpec | None = None
    masks_per_point: int = 10
    match_weight: float = 1.0
    match_steps_per_round: int = 5
    # without the exact points, guess this many times as many from the
    # training data and spread the same masked-sample budget over them
    guess_multiplier: int = 10

    def __post_init__(self):
        if self.guess_multiplier < 1:
            raise ValueError("guess_multiplier must be >= 1")
        if self.masks_per_point < 1:
            raise ValueError("masks_per_point must be >= 1")
        if self.match_weight < 0:
            raise ValueError("match_weight must be >= 0")
        if self.match_steps_per_round < 1:
            raise ValueError("match_steps_per_round must be >= 1")


@dataclass(frozen=True, eq=False)
class ReferenceContext:
    """What the Zest-aware adversary knows about the client's probe."""

    reference_points: np.ndarray
    segment_map: SegmentMap
    baseline: float = 0.0


@dataclass(frozen=True)
class AttackMetrics:
    asr: float
    clean_accuracy: float


def _check_model_data(weights: ModelWeights, dataset: LabeledDataset, attack: BackdoorConfig):
    if dataset.dim != weights.arch.input_dim:
        raise ValueError("dataset dimension does not match the model")
    if attack.target_class >= weights.arch.num_classes:
        raise ValueError("target class out of range")
    if max(attack.trigger.indices) >= dataset.dim:
        raise ValueError("trigger region out of bounds")


def _poisoned_training(weights: ModelWeights, dataset: LabeledDataset, spec: SubRunSpec,
                       attack: BackdoorConfig, key: RngKey, lr_scale: float = 1.0,
                       after_poison: Callable[[ModelWeights], ModelWeights] | None = None,
                       ) -> ModelWeights:
    _check_model_data(weights, dataset, attack)
    poison_rng = key.for_stream("attack").generator()
    n_poison = int(round(attack.poison_fraction * spec.batch_size))
    current = weights
    for step, xb, yb in iter_minibatches(dataset, spec, key):
        lr = spec.learning_rate * lr_scale
        poisoned = (step + 1) % attack.reinforce_every == 0
        if poisoned:
            lr *= attack.backdoor_lr_ratio
            if n_poison:
                pos = poison_rng.choice(yb.size, size=n_poison, replace=False)
                xb = xb.copy()
                yb = yb.copy()
                xb[pos] = apply_trigger(xb[pos], attack.trigger)
                yb[pos] = attack.target_class
        _, grad = loss_and_grad(current, xb, yb)
        current = current.with_values(current.values - lr * grad)
        if poisoned and after_poison is not None:
            current = after_poison(current)
    return current


def malicious_subrun(weights: ModelWeights, dataset: LabeledDataset, spec: SubRunSpec,
                     attack: BackdoorConfig, key: RngKey) -> ModelWeights:
    """Sub-run in which every ``reinforce_every``-th step uses a poisoned batch.

    Poisoned steps run at ``backdoor_lr_ratio * eta``; the reported step
    count stays ``spec.steps``.
    """
    return _poisoned_training(weights, dataset, spec, attack, key)


def adaptive_param_attack(weights: ModelWeights, dataset: LabeledDataset, spec: SubRunSpec,
                          attack: BackdoorConfig, lr_scale: float, key: RngKey) -> ModelWeights:
    if not 0.0 < lr_scale <= 1.0:
        raise ValueError("lr_scale must lie in (0, 1]")
    return _poisoned_training(weights, dataset, spec, attack, key, lr_scale=lr_scale)


def masked_batch(x: np.ndarray, masks: np.ndarray, segment_map: SegmentMap,
                 baseline: float = 0.0) -> np.ndarray:
    """Rows of ``x`` with segments whose mask bit is 0 set to ``baseline``."""
    keep = np.asarray(masks, dtype=bool)[:, segment_map.segment_of]
    return np.where(keep, np.asarray(x, dtype=np.float64)[None, :], baseline)


def adaptive_zest_attack(weights: ModelWeights, dataset: LabeledDataset, spec: SubRunSpec,
                         attack: BackdoorConfig, zcfg: AdaptiveZestConfig,
                         reference: ReferenceContext, key: RngKey) -> ModelWeights:
    """Backdoor while matching a clean surrogate's logits on masked samples.

    The surrogate is what this server would have returned had it trained
    honestly (same key). After each poisoned step the model takes
    ``match_steps_per_round`` full-batch steps on
    ``match_weight * MSE(logits, surrogate_logits)`` over a fixed set of
    ``masks_per_point`` masked copies of each reference point.
    """
    if zcfg.match_weight == 0:
        return _poisoned_training(weights, dataset, spec, attack, key)
    seg = reference.segment_map
    if seg.dim != dataset.dim:
        raise ValueError("segment map does not match the data dimension")
    rng = key.for_stream("attack").generator(child=1)
    n_ref = len(reference.reference_points)
    per_point = zcfg.masks_per_point
    if zcfg.knows_reference_points:
        refs = np.asarray(reference.reference_points, dtype=np.float64)
    else:
        size = min(zcfg.guess_multiplier * n_ref, len(dataset))
        pick = rng.choice(len(dataset), size=size, replace=False)
        refs = dataset.features[np.sort(pick)]
        per_point = max(1, round(n_ref * per_point / size))
    masks = rng.random((len(refs), per_point, seg.num_segments)) < 0.5
    samples = np.concatenate([
        masked_batch(x, m, seg, reference.baseline) for x, m in zip(refs, masks)
    ])

    surrogate = train_subrun(weights, dataset, zcfg.surrogate_spec or spec, key)
    target = forward(surrogate, samples)
    lr = spec.learning_rate

    def match(current: ModelWeights) -> ModelWeights:
        for _ in range(zcfg.match_steps_per_round):
            acts = _forward_cache(current, samples)
            diff = acts[-1] - target
            grad = backward(current, acts, zcfg.match_weight * 2.0 * diff / diff.size)
            current = current.with_values(current.values - lr * grad)
        return current

    return _poisoned_training(weights, dataset, spec, attack, key, after_poison=match)


def attack_success_rate(weights: ModelWeights, test: LabeledDataset, trigger: TriggerSpec,
                        target_class: int) -> AttackMetrics:
    """ASR over test points whose true class is not the target, plus clean accuracy."""
    if len(test) == 0:
        raise ValueError("test set is empty")
    eligible = test.labels != target_class
    if not np.any(eligible):
        raise ValueError("no test points outside the target class")
    triggered = apply_trigger(test.features[eligible], trigger)
    pred = np.argmax(forward(weights, triggered), axis=1)
    return AttackMetrics(asr=float(np.mean(pred == target_class)),
                         clean_accuracy=evaluate_accuracy(weights, test))


def random_guess_band(num_classes: int, n: int, sigmas: float = 3.0) -> float:
    """1/C plus ``sigmas`` binomial standard deviations at ``n`` trials."""
    p = 1.0 / num_classes
    return p + sigmas * math.sqrt(p * (1 - p) / n)
