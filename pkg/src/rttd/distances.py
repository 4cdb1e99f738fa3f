"""Model distances: parameter cosine, output cosine, Zest, and linear CKA.

Every comparison within one sub-run shares a :class:`ProbeContext`, so all
pairs see the same probe inputs, reference points and masks.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass

import numpy as np

from .attacks import ReferenceContext, masked_batch
from .datasets import LabeledDataset, SegmentMap
from .nn import ModelWeights, forward, forward_hidden

METRICS = ("parameter", "output", "zest", "cka")


@dataclass(frozen=True, eq=False)
class ProbeContext:
    probe_points: np.ndarray
    reference_points: np.ndarray
    masks: np.ndarray  # (R, N, S) bool
    segment_map: SegmentMap
    seed: int
    baseline: float = 0.0

    def __post_init__(self):
        probe = np.array(self.probe_points, dtype=np.float64)
        refs = np.array(self.reference_points, dtype=np.float64)
        masks = np.array(self.masks, dtype=bool)
        if masks.ndim != 3 or masks.shape[0] != refs.shape[0]:
            raise ValueError("masks must have shape (R, N, S)")
        if masks.shape[2] != self.segment_map.num_segments:
            raise ValueError("mask length must equal the number of segments")
        for arr in (probe, refs, masks):
            arr.setflags(write=False)
        object.__setattr__(self, "probe_points", probe)
        object.__setattr__(self, "reference_points", refs)
        object.__setattr__(self, "masks", masks)

    @property
    def fingerprint(self) -> str:
        h = hashlib.sha256()
        for arr in (self.reference_points, self.masks.astype(np.uint8),
                    self.segment_map.segment_of):
            h.update(np.ascontiguousarray(arr).tobytes())
        h.update(repr(float(self.baseline)).encode())
        return h.hexdigest()[:16]

    def reference_context(self) -> ReferenceContext:
        return ReferenceContext(self.reference_points, self.segment_map, self.baseline)


def make_probe_context(data: LabeledDataset, segment_map: SegmentMap, seed: int,
                       num_reference: int = 32, num_masks: int = 64,
                       num_probe: int = 256) -> ProbeContext:
    """Seeded probe points, reference points and Bernoulli(0.5) segment masks."""
    if segment_map.dim != data.dim:
        raise ValueError("segment map does not match the data dimension")
    rng = np.random.default_rng(seed)
    n = len(data)
    probe_idx = np.sort(rng.permutation(n)[:min(num_probe, n)])
    ref_idx = np.sort(rng.permutation(n)[:min(num_reference, n)])
    masks = rng.random((ref_idx.size, num_masks, segment_map.num_segments)) < 0.5
    return ProbeContext(data.features[probe_idx], data.features[ref_idx], masks,
                        segment_map, seed)


@dataclass(frozen=True, eq=False)
class ZestSignature:
    values: np.ndarray
    shape: tuple[int, int, int]  # (R, S, num_classes)
    context_id: str = ""

    def __post_init__(self):
        vals = np.array(self.values, dtype=np.float64).ravel()
        if vals.size != int(np.prod(self.shape)):
            raise ValueError("signature length does not match its shape")
        if not np.all(np.isfinite(vals)):
            raise ValueError("signature is not finite")
        vals.setflags(write=False)
        object.__setattr__(self, "values", vals)
        object.__setattr__(self, "shape", tuple(int(s) for s in self.shape))

    def blocks(self) -> np.ndarray:
        return self.values.reshape(self.shape)


def cosine_distance(a, b) -> float:
    """1 - cos(a, b), clamped to [0, 2]; exactly 0 for equal vectors."""
    a = np.asarray(a, dtype=np.float64).ravel()
    b = np.asarray(b, dtype=np.float64).ravel()
    if a.shape != b.shape:
        raise ValueError("vectors differ in length")
    na = np.linalg.norm(a)
    nb = np.linalg.norm(b)
    if na == 0.0 or nb == 0.0:
        raise ValueError("cosine distance undefined for a zero vector")
    if np.array_equal(a, b):
        return 0.0
    d = 1.0 - float(np.dot(a, b)) / (na * nb)
    return min(max(d, 0.0), 2.0)


def _same_arch(w1: ModelWeights, w2: ModelWeights):
    if w1.arch != w2.arch:
        raise ValueError("models have different architectures")


def param_cosine_distance(w1: ModelWeights, w2: ModelWeights) -> float:
    _same_arch(w1, w2)
    return cosine_distance(w1.values, w2.values)


def output_vector(w: ModelWeights, ctx: ProbeContext) -> np.ndarray:
    if len(ctx.probe_points) == 0:
        raise ValueError("probe context has no probe points")
    return forward(w, ctx.probe_points).ravel()


def output_space_distance(w1: ModelWeights, w2: ModelWeights, ctx: ProbeContext) -> float:
    _same_arch(w1, w2)
    return cosine_distance(output_vector(w1, ctx), output_vector(w2, ctx))


def masked_samples(x, mask, segment_map: SegmentMap, baseline: float = 0.0) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64).ravel()
    mask = np.asarray(mask).ravel()
    if mask.size != segment_map.num_segments:
        raise ValueError("mask length must equal the number of segments")
    if x.size != segment_map.dim:
        raise ValueError("input length does not match the segment map")
    return masked_batch(x, mask[None, :], segment_map, baseline)[0]


def zest_signature(w: ModelWeights, ctx: ProbeContext, ridge_lambda: float = 1e-6) -> ZestSignature:
    """Concatenated per-reference linear surrogates of the model's logits.

    For each reference point, regress the logits on the masked copies
    against the mask bits plus an intercept (ridge on the slopes only),
    and keep the S x C slope block.
    """
    r, n, s = ctx.masks.shape
    if r < 1:
        raise ValueError("need at least one reference point")
    if n < s + 1:
        raise ValueError(f"need at least S+1={s + 1} masks per reference point, got {n}")
    if ridge_lambda < 0:
        raise ValueError("ridge lambda must be >= 0")
    penalty = np.eye(s + 1) * ridge_lambda
    penalty[s, s] = 0.0
    blocks = []
    for x, masks in zip(ctx.reference_points, ctx.masks):
        design = np.hstack([masks.astype(np.float64), np.ones((n, 1))])
        targets = forward(w, masked_batch(x, masks, ctx.segment_map, ctx.baseline))
        gram = design.T @ design + penalty
        if ridge_lambda == 0 and np.linalg.matrix_rank(gram) < s + 1:
            raise np.linalg.LinAlgError("singular normal equations; use ridge_lambda > 0")
        coef = np.linalg.solve(gram, design.T @ targets)
        blocks.append(coef[:s])
    num_classes = w.arch.num_classes
    return ZestSignature(np.concatenate(blocks).ravel(), (r, s, num_classes), ctx.fingerprint)


def zest_distance(s1: ZestSignature, s2: ZestSignature) -> float:
    if s1.shape != s2.shape or s1.context_id != s2.context_id:
        raise ValueError("signatures come from different probe contexts")
    return cosine_distance(s1.values, s2.values)


def linear_cka(x, y) -> float:
    """Linear CKA of two activation matrices (rows = probe points).

    Uses ||Y^T X||_F^2 = <XX^T, YY^T> so the value is exactly symmetric.
    """
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if x.ndim != 2 or y.ndim != 2 or x.shape[0] != y.shape[0] or x.shape[0] == 0:
        raise ValueError("activation matrices need the same number of rows")
    return _cka_from_grams(_centered_gram(x), _centered_gram(y))


def _centered_gram(x: np.ndarray) -> np.ndarray:
    xc = x - x.mean(axis=0)
    gram = xc @ xc.T
    if not np.any(gram):
        raise ValueError("activations have zero variance")
    return gram


def _cka_from_grams(k: np.ndarray, l: np.ndarray) -> float:
    cross = float(np.sum(k * l))
    return cross / (np.sqrt(float(np.sum(k * k))) * np.sqrt(float(np.sum(l * l))))


def cka_linear_distance(w1: ModelWeights, w2: ModelWeights, ctx: ProbeContext) -> float:
    _same_arch(w1, w2)
    if len(ctx.probe_points) == 0:
        raise ValueError("probe context has no probe points")
    if w1.same_as(w2):
        return 0.0
    k = _centered_gram(forward_hidden(w1, ctx.probe_points))
    l = _centered_gram(forward_hidden(w2, ctx.probe_points))
    return min(max(1.0 - _cka_from_grams(k, l), 0.0), 1.0)


def model_features(models, metric: str, ctx: ProbeContext | None,
                   ridge_lambda: float = 1e-6) -> list:
    """Per-model quantity each metric compares (computed once per model)."""
    if metric == "parameter":
        return [m.values for m in models]
    if ctx is None:
        raise ValueError(f"metric {metric!r} needs a probe context")
    if metric == "output":
        return [output_vector(m, ctx) for m in models]
    if metric == "zest":
        return [zest_signature(m, ctx, ridge_lambda) for m in models]
    if metric == "cka":
        if len(ctx.probe_points) == 0:
            raise ValueError("probe context has no probe points")
        return [_centered_gram(forward_hidden(m, ctx.probe_points)) for m in models]
    raise ValueError(f"unknown metric {metric!r}; choose from {METRICS}")


def feature_distance(metric: str, a, b) -> float:
    if metric == "zest":
        return zest_distance(a, b)
    if metric == "cka":
        if np.array_equal(a, b):
            return 0.0
        return min(max(1.0 - _cka_from_grams(a, b), 0.0), 1.0)
    return cosine_distance(a, b)
