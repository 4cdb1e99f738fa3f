"""Seeded synthetic classification data.

Two families: Gaussian blobs in R^d, and tiny grayscale images whose pixel
grid is partitioned into square blocks for masking.
"""

from __future__ import annotations

import json
from dataclasses import dataclass

import numpy as np

from .nn import format_float


@dataclass(frozen=True, eq=False)
class LabeledDataset:
    features: np.ndarray
    labels: np.ndarray
    num_classes: int

    def __post_init__(self):
        x = np.array(self.features, dtype=np.float64)
        y = np.array(self.labels, dtype=np.int64).ravel()
        if x.ndim != 2 or x.shape[0] == 0:
            raise ValueError("features must be a non-empty 2-d array")
        if y.size != x.shape[0]:
            raise ValueError("features and labels differ in length")
        if np.any(y < 0) or np.any(y >= self.num_classes):
            raise ValueError("label out of range")
        x.setflags(write=False)
        y.setflags(write=False)
        object.__setattr__(self, "features", x)
        object.__setattr__(self, "labels", y)

    def __len__(self) -> int:
        return self.labels.size

    @property
    def dim(self) -> int:
        return self.features.shape[1]

    def subset(self, idx) -> "LabeledDataset":
        idx = np.asarray(idx, dtype=np.int64)
        return LabeledDataset(self.features[idx], self.labels[idx], self.num_classes)

    def class_counts(self) -> np.ndarray:
        return np.bincount(self.labels, minlength=self.num_classes)


@dataclass(frozen=True, eq=False)
class SegmentMap:
    """Feature index -> segment id in [0, num_segments)."""

    segment_of: np.ndarray
    num_segments: int

    def __post_init__(self):
        seg = np.array(self.segment_of, dtype=np.int64).ravel()
        if seg.size == 0:
            raise ValueError("segment map is empty")
        if np.any(seg < 0) or np.any(seg >= self.num_segments):
            raise ValueError("segment id out of range")
        if np.unique(seg).size != self.num_segments:
            raise ValueError("every segment must be non-empty")
        seg.setflags(write=False)
        object.__setattr__(self, "segment_of", seg)

    @property
    def dim(self) -> int:
        return self.segment_of.size

    def members(self, segment: int) -> np.ndarray:
        return np.flatnonzero(self.segment_of == segment)

    @classmethod
    def grid(cls, side: int, blocks: int = 4) -> "SegmentMap":
        """Split a side x side image into a blocks x blocks grid of tiles."""
        if blocks < 1 or blocks > side:
            raise ValueError("need 1 <= blocks <= side")
        rows = np.arange(side) * blocks // side
        seg = (rows[:, None] * blocks + rows[None, :]).ravel()
        return cls(seg, blocks * blocks)

    @classmethod
    def contiguous(cls, dim: int, num_segments: int) -> "SegmentMap":
        if num_segments < 1 or num_segments > dim:
            raise ValueError("need 1 <= num_segments <= dim")
        return cls(np.arange(dim) * num_segments // dim, num_segments)

    def to_dict(self) -> dict:
        return {"num_segments": self.num_segments, "segment_of": self.segment_of.tolist()}

    @classmethod
    def from_dict(cls, d: dict) -> "SegmentMap":
        return cls(np.array(d["segment_of"]), int(d["num_segments"]))


def make_blobs(seed: int, num_classes: int, dim: int, points_per_class: int,
               spread: float) -> LabeledDataset:
    if min(num_classes, dim, points_per_class) < 1 or spread < 0:
        raise ValueError("parameters must be positive")
    rng = np.random.default_rng(seed)
    centers = rng.normal(size=(num_classes, dim))
    feats = np.concatenate([
        c + spread * rng.standard_normal((points_per_class, dim)) for c in centers
    ])
    labels = np.repeat(np.arange(num_classes), points_per_class)
    return LabeledDataset(feats, labels, num_classes)


def make_tiny_images(seed: int, num_classes: int = 4, side: int = 8,
                     points_per_class: int = 250, blocks: int = 4,
                     noise: float = 0.3, shift: int = 1) -> tuple[LabeledDataset, SegmentMap]:
    """Grayscale side x side images, flattened row-major.

    Each class owns a template of two Gaussian bumps at seeded positions.
    A sample is the template rolled by up to ``shift`` pixels, scaled by a
    random contrast, plus pixel noise. Features are centered on the
    per-pixel mean so a zero pixel is the dataset average.
    """
    if side < 4:
        raise ValueError("side must be >= 4")
    if num_classes < 2 or points_per_class < 1:
        raise ValueError("need >= 2 classes and >= 1 point per class")
    rng = np.random.default_rng(seed)
    yy, xx = np.mgrid[0:side, 0:side]
    # bumps sit in distinct cells of a coarse grid so classes stay separable
    cells_per_row = max(2, side // 2)
    cell = side / cells_per_row
    order = rng.permutation(cells_per_row**2)
    order = np.resize(order, 2 * num_classes)
    templates = []
    for c in range(num_classes):
        img = np.zeros((side, side))
        for cid in order[2 * c:2 * c + 2]:
            cy = (cid // cells_per_row + 0.5) * cell + rng.uniform(-0.3, 0.3)
            cx = (cid % cells_per_row + 0.5) * cell + rng.uniform(-0.3, 0.3)
            width = rng.uniform(0.9, 1.4)
            img += np.exp(-((yy - cy) ** 2 + (xx - cx) ** 2) / (2 * width**2))
        templates.append(img / img.max())
    feats = []
    for c in range(num_classes):
        for _ in range(points_per_class):
            dy, dx = rng.integers(-shift, shift + 1, size=2)
            img = np.roll(templates[c], (dy, dx), axis=(0, 1))
            img = rng.uniform(0.7, 1.3) * img + noise * rng.standard_normal((side, side))
            feats.append(img.ravel())
    feats = np.array(feats)
    feats -= feats.mean(axis=0)
    labels = np.repeat(np.arange(num_classes), points_per_class)
    return LabeledDataset(feats, labels, num_classes), SegmentMap.grid(side, blocks)


def split(dataset: LabeledDataset, fraction: float, seed: int) -> tuple[LabeledDataset, LabeledDataset]:
    if not 0.0 < fraction < 1.0:
        raise ValueError("fraction must lie in (0, 1)")
    n = len(dataset)
    n_first = int(round(fraction * n))
    if n_first == 0 or n_first == n:
        raise ValueError("split leaves one side empty")
    perm = np.random.default_rng(seed).permutation(n)
    return dataset.subset(np.sort(perm[:n_first])), dataset.subset(np.sort(perm[n_first:]))


def dataset_to_dict(dataset: LabeledDataset, segment_map: SegmentMap | None = None) -> dict:
    out = {
        "format": "rttd-dataset/1",
        "num_classes": dataset.num_classes,
        "labels": dataset.labels.tolist(),
        "features": dataset.features.tolist(),
    }
    if segment_map is not None:
        out["segment_map"] = segment_map.to_dict()
    return out


def dump_dataset(dataset: LabeledDataset, path, segment_map: SegmentMap | None = None) -> None:
    d = dataset_to_dict(dataset, segment_map)
    rows = ",\n  ".join("[" + ", ".join(format_float(v) for v in row) + "]"
                        for row in dataset.features)
    head = {k: v for k, v in d.items() if k != "features"}
    text = json.dumps(head, sort_keys=True)[:-1] + ',\n "features": [\n  ' + rows + "\n ]}\n"
    with open(path, "w") as fh:
        fh.write(text)


def load_dataset(path) -> tuple[LabeledDataset, SegmentMap | None]:
    with open(path) as fh:
        d = json.load(fh)
    if d.get("format") != "rttd-dataset/1":
        raise ValueError(f"unknown dataset format {d.get('format')!r}")
    ds = LabeledDataset(np.array(d["features"], dtype=np.float64), np.array(d["labels"]),
                        int(d["num_classes"]))
    seg = SegmentMap.from_dict(d["segment_map"]) if "segment_map" in d else None
    return ds, seg
