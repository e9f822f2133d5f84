"""Centerline distance metrics.

Accuracy is scored as average dynamic time warping: both polylines are
resampled to a fixed count, optimally aligned under a monotone warping,
and the total matched distance is divided by the alignment length, giving
a per-correspondence pixel error. Head/tail ambiguity is handled by also
scoring the reversed counterpart and keeping the minimum.
"""

from __future__ import annotations

import dataclasses
import math

import numpy as np

from .errors import InvalidInputError
from .geometry import resample_polyline


@dataclasses.dataclass(frozen=True)
class MetricConfig:
    n: int = 100
    orientation_invariant: bool = True

    def __post_init__(self):
        if self.n < 2:
            raise InvalidInputError("resample count must be >= 2")


def dtw(a, b):
    """Optimal monotone alignment of two point sequences.

    Returns (cost, path): cost is the summed Euclidean distance over the
    matched pairs of the optimal path; path is the list of index pairs,
    starting at (0, 0) and ending at (len(a)-1, len(b)-1). Steps are
    (1,0), (0,1), (1,1); ties prefer the diagonal, then the a-advance.
    """
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.ndim != 2 or b.ndim != 2 or a.shape[0] < 1 or b.shape[0] < 1:
        raise InvalidInputError("dtw inputs must be nonempty (N, 2) arrays")
    diff = a[:, None, :2] - b[None, :, :2]
    dist = np.sqrt((diff ** 2).sum(axis=2))
    n, m = dist.shape
    acc = np.full((n + 1, m + 1), np.inf)
    acc[0, 0] = 0.0
    for i in range(1, n + 1):
        row = acc[i]
        prev = acc[i - 1]
        drow = dist[i - 1]
        for j in range(1, m + 1):
            best = prev[j - 1]
            if prev[j] < best:
                best = prev[j]
            if row[j - 1] < best:
                best = row[j - 1]
            row[j] = drow[j - 1] + best
    path = []
    i, j = n - 1, m - 1
    while True:
        path.append((i, j))
        if i == 0 and j == 0:
            break
        if i == 0:
            j -= 1
        elif j == 0:
            i -= 1
        else:
            diag = acc[i, j]
            up = acc[i, j + 1]
            left = acc[i + 1, j]
            if diag <= up and diag <= left:
                i -= 1
                j -= 1
            elif up <= left:
                i -= 1
            else:
                j -= 1
    path.reverse()
    return float(acc[n, m]), path


def avg_dtw(a, b, cfg: MetricConfig | None = None) -> float:
    """Per-correspondence DTW distance between two polylines, in pixels."""
    cfg = cfg if cfg is not None else MetricConfig()
    ra = resample_polyline(np.asarray(a, dtype=np.float64)[:, :2], cfg.n)
    rb = resample_polyline(np.asarray(b, dtype=np.float64)[:, :2], cfg.n)
    cost, path = dtw(ra, rb)
    score = cost / len(path)
    if cfg.orientation_invariant:
        cost_r, path_r = dtw(ra, rb[::-1])
        score = min(score, cost_r / len(path_r))
    return float(score)


_REPORT_FRACTIONS = (0.05, 0.10, 0.20, 0.50)


def top_fraction_mean(values, p: float) -> float:
    """Mean of the best (smallest) floor(p * n) values, at least one."""
    vals = sorted(float(v) for v in values)
    if not vals:
        raise InvalidInputError("need at least one value")
    if not 0.0 < p <= 1.0:
        raise InvalidInputError("fraction must lie in (0, 1]")
    take = max(1, math.floor(p * len(vals)))
    return float(np.mean(vals[:take]))


def table_report(groups: dict, p: float = 0.5) -> list:
    """Per-group summary rows.

    Each row carries the group's count, the mean over its best p-fraction
    of values, and the standard 5/10/20/50% best-fraction means.
    """
    if not groups:
        raise InvalidInputError("need at least one group")
    rows = []
    for name, values in groups.items():
        values = list(values)
        row = {
            "group": name,
            "count": len(values),
            "top_mean": top_fraction_mean(values, p),
            "fraction": p,
        }
        for frac in _REPORT_FRACTIONS:
            row[f"p{int(frac * 100):02d}"] = top_fraction_mean(values, frac)
        rows.append(row)
    return rows
