"""Scalar statistics used by the detector.

Two-sample Kolmogorov-Smirnov test with the asymptotic p-value, median
absolute deviation and the anomaly index built on it, and the
minimum-variance window search over sorted values.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

MAD_CONSISTENCY = 1.4826

# series truncation for the Kolmogorov survival function
_SERIES_TOL = 1e-12
_SERIES_MAX_TERMS = 1_000_000
_SMALL_LAMBDA = 0.2


@dataclass(frozen=True)
class KsResult:
    statistic: float
    p_value: float


@dataclass(frozen=True)
class WindowSelection:
    start_index: int
    length: int
    variance: float
    values: tuple[float, ...]

    @property
    def stop_index(self) -> int:
        return self.start_index + self.length


def _as_sample(x, name: str) -> np.ndarray:
    arr = np.asarray(x, dtype=float).ravel()
    if arr.size == 0:
        raise ValueError(f"{name} sample is empty")
    return arr


def kolmogorov_sf(lam: float) -> float:
    """Q(lam) = 2 * sum_{j>=1} (-1)^(j-1) exp(-2 j^2 lam^2), clamped to (0, 1].

    Summation stops once a term drops below 1e-12. Below lam=0.2 that series
    needs millions of terms, so the equivalent form
    1 - sqrt(2 pi)/lam * sum_{k>=1} exp(-(2k-1)^2 pi^2 / (8 lam^2)) is used.
    """
    if lam <= 0.0:
        return 1.0
    if lam < 0.05:
        return 1.0  # 1 - Q < 1e-200 here
    if lam < _SMALL_LAMBDA:
        b = -math.pi * math.pi / (8.0 * lam * lam)
        tail = sum(math.exp(b * (2 * k - 1) ** 2) for k in range(1, 4))
        return min(1.0, 1.0 - math.sqrt(2.0 * math.pi) / lam * tail)
    a = -2.0 * lam * lam
    total = 0.0
    sign = 1.0
    for j in range(1, _SERIES_MAX_TERMS + 1):
        term = math.exp(a * j * j)
        total += sign * term
        if term < _SERIES_TOL:
            break
        sign = -sign
    p = 2.0 * total
    if p > 1.0:
        return 1.0
    if p <= 0.0:
        return math.ulp(0.0)
    return p


def ks_statistic(a, b) -> float:
    a = np.sort(_as_sample(a, "first"))
    b = np.sort(_as_sample(b, "second"))
    points = np.concatenate([a, b])
    cdf_a = np.searchsorted(a, points, side="right") / a.size
    cdf_b = np.searchsorted(b, points, side="right") / b.size
    return float(np.max(np.abs(cdf_a - cdf_b)))


def ks_two_sample(a, b) -> KsResult:
    """Two-sided two-sample KS test.

    The p-value uses the asymptotic Kolmogorov distribution with the
    small-sample correction lam = (sqrt(ne) + 0.12 + 0.11 / sqrt(ne)) * D.
    """
    a = _as_sample(a, "first")
    b = _as_sample(b, "second")
    d = ks_statistic(a, b)
    ne = a.size * b.size / (a.size + b.size)
    sq = math.sqrt(ne)
    lam = (sq + 0.12 + 0.11 / sq) * d
    return KsResult(statistic=d, p_value=kolmogorov_sf(lam))


def median(values) -> float:
    arr = np.sort(_as_sample(values, "input"))
    n = arr.size
    mid = n // 2
    if n % 2:
        return float(arr[mid])
    return float((arr[mid - 1] + arr[mid]) / 2.0)


def mad(values) -> float:
    arr = _as_sample(values, "input")
    return median(np.abs(arr - median(arr)))


def anomaly_index(x: float, reference) -> float:
    """Number of (normal-calibrated) MADs between ``x`` and the reference median.

    A degenerate reference (MAD == 0) gives 0 for x at the median and
    ``math.inf`` otherwise.
    """
    ref = _as_sample(reference, "reference")
    med = median(ref)
    spread = mad(ref)
    dev = abs(float(x) - med)
    if spread == 0.0:
        return 0.0 if dev == 0.0 else math.inf
    return dev / (MAD_CONSISTENCY * spread)


def quantile(values, q: float) -> float:
    """Linear-interpolation quantile that tolerates infinite entries."""
    if not 0.0 <= q <= 1.0:
        raise ValueError("quantile must lie in [0, 1]")
    arr = np.sort(_as_sample(values, "input"))
    pos = q * (arr.size - 1)
    lo = int(math.floor(pos))
    hi = min(lo + 1, arr.size - 1)
    frac = pos - lo
    if frac == 0.0 or arr[lo] == arr[hi]:
        return float(arr[lo])
    if math.isinf(arr[hi]):
        return math.inf
    return float(arr[lo] + frac * (arr[hi] - arr[lo]))


def sample_variance(values) -> float:
    arr = np.asarray(values, dtype=float)
    if arr.size < 2:
        return 0.0
    return float(np.var(arr, ddof=1))


def min_variance_window(sorted_values, window_len: int) -> WindowSelection:
    """Contiguous window (stride 1) of ``window_len`` values with least variance.

    Ties go to the smallest start index.
    """
    arr = np.asarray(sorted_values, dtype=float).ravel()
    if window_len < 1:
        raise ValueError("window length must be at least 1")
    if window_len > arr.size:
        raise ValueError(
            f"window length {window_len} exceeds number of values {arr.size}"
        )
    if np.any(np.diff(arr) < 0):
        raise ValueError("values must be sorted ascending")
    if window_len == 1:
        return WindowSelection(0, 1, 0.0, (float(arr[0]),))
    windows = np.lib.stride_tricks.sliding_window_view(arr, window_len)
    variances = np.var(windows, axis=1, ddof=1)
    start = int(np.argmin(variances))
    return WindowSelection(
        start_index=start,
        length=window_len,
        variance=float(variances[start]),
        values=tuple(float(v) for v in arr[start:start + window_len]),
    )
