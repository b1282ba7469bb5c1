"""Wilcoxon signed-rank test for paired accuracy lists."""
from __future__ import annotations

import math
from typing import Sequence

import numpy as np

from .errors import AllZeroDifferences, TooFewPairs

EXACT_MAX_N = 20
MIN_PAIRS = 5


def average_ranks(values: Sequence[float]) -> np.ndarray:
    """1-based ranks; tied values share the mean of their positions."""
    v = np.asarray(values, dtype=np.float64)
    order = np.argsort(v, kind="mergesort")
    ranks = np.empty(len(v))
    i = 0
    while i < len(v):
        j = i
        while j + 1 < len(v) and v[order[j + 1]] == v[order[i]]:
            j += 1
        ranks[order[i:j + 1]] = (i + j) / 2.0 + 1.0
        i = j + 1
    return ranks


def signed_rank_null(ranks: Sequence[float]) -> np.ndarray:
    """Null distribution of twice the positive rank sum.

    Entry s is the probability that 2 * W+ == s when every sign is +/- with
    probability 1/2.  Ranks are doubled so tied (half-integer) ranks stay
    integral.
    """
    doubled = [int(round(2 * r)) for r in ranks]
    counts = np.zeros(sum(doubled) + 1)
    counts[0] = 1.0
    for r in doubled:
        shifted = np.zeros_like(counts)
        shifted[r:] = counts[: len(counts) - r]
        counts = counts + shifted
    return counts / 2.0 ** len(doubled)


def wilcoxon_signed_rank(a: Sequence[float], b: Sequence[float], exact_max_n: int = EXACT_MAX_N) -> float:
    """Two-sided p-value for the paired differences ``a - b``.

    Zero differences are dropped.  Up to ``exact_max_n`` pairs the p-value
    is exact, 2 * min(P(W+ <= w), P(W+ >= w)) capped at 1; above that a
    normal approximation with tie-corrected variance and a 0.5 continuity
    correction is used.
    """
    if len(a) != len(b):
        raise ValueError("paired samples must have equal length")
    d = np.asarray(a, dtype=np.float64) - np.asarray(b, dtype=np.float64)
    if len(d) and not np.any(d != 0):
        raise AllZeroDifferences("every paired difference is zero")
    d = d[d != 0]
    if len(d) < MIN_PAIRS:
        raise TooFewPairs(f"{len(d)} non-zero differences, need {MIN_PAIRS}")
    ranks = average_ranks(np.abs(d))
    w_plus = float(ranks[d > 0].sum())
    n = len(d)
    if n <= exact_max_n:
        dist = signed_rank_null(ranks)
        s = int(round(2 * w_plus))
        lower = dist[: s + 1].sum()
        upper = dist[s:].sum()
        return float(min(1.0, 2.0 * min(lower, upper)))
    mean = n * (n + 1) / 4.0
    _, tie_sizes = np.unique(np.abs(d), return_counts=True)
    var = n * (n + 1) * (2 * n + 1) / 24.0 - float(((tie_sizes ** 3) - tie_sizes).sum()) / 48.0
    z = max(0.0, abs(w_plus - mean) - 0.5) / math.sqrt(var)
    return float(min(1.0, math.erfc(z / math.sqrt(2.0))))
