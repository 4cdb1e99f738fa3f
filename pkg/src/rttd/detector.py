"""Detection over one replicated sub-run.

Sorted pairwise distances -> minimum-variance window of C(ceil(r n), 2)
values (the benign cluster) -> per-server comparison of its own sorted
distances against that cluster, by KS test or by MAD anomaly indexes.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import NamedTuple, Sequence

import numpy as np

from .distances import METRICS, ProbeContext, feature_distance, model_features
from .nn import ModelWeights
from .stats import WindowSelection, anomaly_index, ks_two_sample, median, min_variance_window, quantile


@dataclass(frozen=True, eq=False)
class DistanceMatrix:
    entries: np.ndarray
    metric_tag: str

    def __post_init__(self):
        m = np.array(self.entries, dtype=np.float64)
        if m.ndim != 2 or m.shape[0] != m.shape[1]:
            raise ValueError("distance matrix must be square")
        if not np.array_equal(m, m.T):
            raise ValueError("distance matrix must be symmetric")
        if np.any(np.diag(m) != 0):
            raise ValueError("distance matrix must have a zero diagonal")
        if np.any(m < 0) or not np.all(np.isfinite(m)):
            raise ValueError("distances must be finite and non-negative")
        if self.metric_tag not in METRICS:
            raise ValueError(f"metric tag must be one of {METRICS}")
        m.setflags(write=False)
        object.__setattr__(self, "entries", m)

    @property
    def n(self) -> int:
        return self.entries.shape[0]

    def upper(self) -> np.ndarray:
        iu = np.triu_indices(self.n, k=1)
        return self.entries[iu]

    def row(self, i: int) -> np.ndarray:
        return np.delete(self.entries[i], i)

    def scaled(self, factor: float) -> "DistanceMatrix":
        return DistanceMatrix(self.entries * factor, self.metric_tag)

    def permuted(self, order) -> "DistanceMatrix":
        order = np.asarray(order)
        return DistanceMatrix(self.entries[np.ix_(order, order)], self.metric_tag)


@dataclass(frozen=True)
class DetectionConfig:
    benign_fraction_r: float = 0.5
    significance: float = 0.01
    window_policy: str = "contiguous_sorted"
    fallback: str = "ks"
    mad_quartile: float = 0.75

    def __post_init__(self):
        if not 0.0 < self.benign_fraction_r <= 1.0:
            raise ValueError("benign fraction r must lie in (0, 1]")
        if not 0.0 < self.significance < 1.0:
            raise ValueError("significance must lie in (0, 1)")
        if self.window_policy != "contiguous_sorted":
            raise ValueError("only the contiguous_sorted window policy exists")
        if self.fallback not in ("ks", "mad"):
            raise ValueError("fallback must be 'ks' or 'mad'")
        if not 0.0 <= self.mad_quartile <= 1.0:
            raise ValueError("mad_quartile must lie in [0, 1]")

    def benign_count(self, n: int) -> int:
        # rounding guards against r * n landing a hair above an integer
        return math.ceil(round(self.benign_fraction_r * n, 9))

    def to_dict(self) -> dict:
        return {"benign_fraction_r": self.benign_fraction_r, "significance": self.significance,
                "window_policy": self.window_policy, "fallback": self.fallback,
                "mad_quartile": self.mad_quartile}

    @classmethod
    def from_dict(cls, d: dict) -> "DetectionConfig":
        return cls(**{k: d[k] for k in ("benign_fraction_r", "significance", "window_policy",
                                        "fallback", "mad_quartile") if k in d})


@dataclass(frozen=True)
class ServerVerdict:
    server_id: int
    is_benign: bool
    best_p_value: float | None = None
    anomaly_summary: tuple[float, float] | None = None  # (row quartile index, cluster max index)
    window_used: WindowSelection | None = None


@dataclass(frozen=True)
class DetectionReport:
    matrix: DistanceMatrix
    cluster: WindowSelection
    verdicts: tuple[ServerVerdict, ...]
    config: DetectionConfig = field(default_factory=DetectionConfig)
    ground_truth: tuple[bool, ...] | None = None
    accuracy: float | None = None
    groups: tuple[int, ...] | None = None

    @property
    def flagged(self) -> list[int]:
        return [v.server_id for v in self.verdicts if not v.is_benign]

    def to_dict(self) -> dict:
        return report_to_dict(self)


def pairwise_distances(models: Sequence[ModelWeights], metric: str,
                       ctx: ProbeContext | None = None, ridge_lambda: float = 1e-6) -> DistanceMatrix:
    if len(models) < 3:
        raise ValueError("need at least three models")
    arch = models[0].arch
    for i, m in enumerate(models):
        if m.arch != arch:
            raise ValueError(f"model {i} has a different architecture")
    feats = []
    for i, m in enumerate(models):
        try:
            feats.extend(model_features([m], metric, ctx, ridge_lambda))
        except (ValueError, np.linalg.LinAlgError) as exc:
            raise ValueError(f"model {i}: {exc}") from exc
    n = len(models)
    out = np.zeros((n, n))
    for i in range(n):
        for j in range(i + 1, n):
            try:
                d = feature_distance(metric, feats[i], feats[j])
            except ValueError as exc:
                raise ValueError(f"pair ({i}, {j}): {exc}") from exc
            out[i, j] = out[j, i] = d
    return DistanceMatrix(out, metric)


def cluster_length(n: int, cfg: DetectionConfig) -> int:
    return math.comb(cfg.benign_count(n), 2)


def find_benign_cluster(matrix: DistanceMatrix, cfg: DetectionConfig) -> WindowSelection:
    length = cluster_length(matrix.n, cfg)
    if length < 1:
        raise ValueError("ceil(r * n) must be at least 2")
    return min_variance_window(np.sort(matrix.upper()), length)


def _row_window_len(row_size: int, n: int, cfg: DetectionConfig) -> int:
    length = cfg.benign_count(n) - 1
    if length > row_size:
        raise ValueError("window longer than the server's distance row")
    if length < 1:
        raise ValueError("ceil(r * n) must be at least 2")
    return length


def _server_row(matrix: DistanceMatrix, i: int, groups) -> np.ndarray:
    """Distances from model i to every other model, or only to models of other groups."""
    if groups is None:
        return matrix.row(i)
    groups = np.asarray(groups)
    return matrix.entries[i][groups != groups[i]]


def verdict_for_server(matrix: DistanceMatrix, i: int, cluster: WindowSelection,
                       cfg: DetectionConfig, groups=None) -> ServerVerdict:
    """KS-test every contiguous window of the server's sorted distances.

    Null hypothesis: the server is benign. It survives when any window
    reaches p >= significance. With ``groups`` (physical server per model)
    only distances to other physical servers count.
    """
    row = np.sort(_server_row(matrix, i, groups))
    length = _row_window_len(row.size, matrix.n, cfg)
    best_p = -1.0
    best_start = 0
    for start in range(row.size - length + 1):
        p = ks_two_sample(cluster.values, row[start:start + length]).p_value
        if p > best_p:
            best_p, best_start = p, start
    chunk = row[best_start:best_start + length]
    window = WindowSelection(best_start, length, float(np.var(chunk, ddof=1)) if length > 1 else 0.0,
                             tuple(float(v) for v in chunk))
    return ServerVerdict(i, best_p >= cfg.significance, best_p_value=best_p, window_used=window)


def mad_verdict_for_server(matrix: DistanceMatrix, i: int, cluster: WindowSelection,
                           cfg: DetectionConfig, groups=None) -> ServerVerdict:
    """Anomaly-index rule for small server counts.

    Take the ceil(r n) - 1 row distances nearest the cluster median, score
    each against the cluster, and call the server benign when the chosen
    quartile of those scores does not exceed the largest score of the
    cluster's own members.
    """
    row = _server_row(matrix, i, groups)
    length = _row_window_len(row.size, matrix.n, cfg)
    centre = median(cluster.values)
    nearest = np.sort(row[np.argsort(np.abs(row - centre), kind="stable")[:length]])
    scores = [anomaly_index(v, cluster.values) for v in nearest]
    own = max(anomaly_index(v, cluster.values) for v in cluster.values)
    q = quantile(scores, cfg.mad_quartile)
    window = WindowSelection(0, length, float(np.var(nearest, ddof=1)) if length > 1 else 0.0,
                             tuple(float(v) for v in nearest))
    return ServerVerdict(i, q <= own, anomaly_summary=(q, own), window_used=window)


def detect_all(matrix: DistanceMatrix, cfg: DetectionConfig,
               ground_truth: Sequence[bool] | None = None,
               groups: Sequence[int] | None = None) -> DetectionReport:
    """Cluster, then a verdict per model.

    ``groups`` names the physical server behind each model when one server
    returns several replicas; a model is then never compared with its
    siblings.
    """
    if groups is not None and len(groups) != matrix.n:
        raise ValueError("groups length does not match the matrix")
    cluster = find_benign_cluster(matrix, cfg)
    rule = verdict_for_server if cfg.fallback == "ks" else mad_verdict_for_server
    verdicts = tuple(rule(matrix, i, cluster, cfg, groups) for i in range(matrix.n))
    accuracy = None
    truth = None
    if ground_truth is not None:
        truth = tuple(bool(t) for t in ground_truth)
        if len(truth) != matrix.n:
            raise ValueError("ground truth length does not match the matrix")
        accuracy = float(np.mean([v.is_benign == t for v, t in zip(verdicts, truth)]))
    return DetectionReport(matrix, cluster, verdicts, cfg, truth, accuracy,
                           None if groups is None else tuple(int(g) for g in groups))


def detection_probability(m: int, k: int, T: int) -> float:
    """Chance a single-step backdoor falls inside one of m replicated k-step sub-runs."""
    if min(m, k, T) <= 0:
        raise ValueError("m, k and T must be positive")
    if m * k > T:
        raise ValueError("m * k cannot exceed T")
    return m * k / T


class CostBreakdown(NamedTuple):
    replication_steps: int
    distance_step_equivalents: float
    fraction_of_T: float
    replication_fraction: float
    money: float | None


def cost_overhead(n: int, m: int, k: int, metric: str, probe_batches_D: int, T: int,
                  price_per_step: float | None = None) -> CostBreakdown:
    """Extra training-step equivalents of replicating m sub-runs on n servers.

    Replication costs m k (n - 1) steps. Distances cost (D/3) C(n,2) m
    step-equivalents for probe-based metrics and (1/3) C(n,2) m for
    parameter cosine.
    """
    if min(n, m, k, T) <= 0 or probe_batches_D <= 0:
        raise ValueError("arguments must be positive")
    if metric not in METRICS:
        raise ValueError(f"unknown metric {metric!r}")
    replication = m * k * (n - 1)
    batches = 1 if metric == "parameter" else probe_batches_D
    distance = math.comb(n, 2) * m * batches / 3
    total = replication + distance
    money = None if price_per_step is None else total * price_per_step
    return CostBreakdown(replication, distance, total / T, replication / T, money)


# -- serialization ------------------------------------------------------------

def _window_to_dict(w: WindowSelection | None) -> dict | None:
    if w is None:
        return None
    return {"start_index": w.start_index, "length": w.length, "variance": w.variance,
            "values": list(w.values)}


def _window_from_dict(d: dict | None) -> WindowSelection | None:
    if d is None:
        return None
    return WindowSelection(int(d["start_index"]), int(d["length"]), float(d["variance"]),
                           tuple(float(v) for v in d["values"]))


def report_to_dict(report: DetectionReport) -> dict:
    return {
        "metric": report.matrix.metric_tag,
        "matrix": report.matrix.entries.tolist(),
        "sorted_distances": np.sort(report.matrix.upper()).tolist(),
        "cluster": _window_to_dict(report.cluster),
        "config": report.config.to_dict(),
        "verdicts": [
            {
                "server_id": v.server_id,
                "is_benign": v.is_benign,
                "best_p_value": v.best_p_value,
                "anomaly_summary": None if v.anomaly_summary is None else list(v.anomaly_summary),
                "window_used": _window_to_dict(v.window_used),
                "truth": None if report.ground_truth is None else report.ground_truth[v.server_id],
            }
            for v in report.verdicts
        ],
        "ground_truth": None if report.ground_truth is None else list(report.ground_truth),
        "accuracy": report.accuracy,
        "groups": None if report.groups is None else list(report.groups),
    }


def report_from_dict(d: dict) -> DetectionReport:
    matrix = DistanceMatrix(np.array(d["matrix"], dtype=np.float64), d["metric"])
    verdicts = tuple(
        ServerVerdict(
            int(v["server_id"]),
            bool(v["is_benign"]),
            v["best_p_value"],
            None if v["anomaly_summary"] is None else tuple(v["anomaly_summary"]),
            _window_from_dict(v["window_used"]),
        )
        for v in d["verdicts"]
    )
    truth = None if d.get("ground_truth") is None else tuple(d["ground_truth"])
    groups = None if d.get("groups") is None else tuple(d["groups"])
    return DetectionReport(matrix, _window_from_dict(d["cluster"]), verdicts,
                           DetectionConfig.from_dict(d["config"]), truth, d.get("accuracy"), groups)
