"""Rank statistics, trimmed means and the oracle/trace-all crossover model."""

from __future__ import annotations

import math
from collections import Counter
from dataclasses import dataclass
from typing import NamedTuple, Sequence

DEFAULT_TRIM = 0.33
LARGE_EFFECT = 0.71
SIGNIFICANCE = 0.05
# switch from exact enumeration to the normal approximation above this many samples
EXACT_MAX_TOTAL = 20


class EmptySamples(ValueError):
    pass


class NonPositiveModel(ValueError):
    pass


def trimmed_mean(samples: Sequence[float], trim: float = DEFAULT_TRIM) -> float:
    """Mean after dropping ``floor(trim * n)`` samples from each end."""
    if not samples:
        raise EmptySamples("trimmed_mean of no samples")
    if not 0.0 <= trim < 0.5:
        raise ValueError("trim must lie in [0, 0.5)")
    n = len(samples)
    # the epsilon keeps e.g. 0.29 * 100 from flooring to 28
    k = math.floor(trim * n + 1e-9)
    kept = sorted(samples)[k:n - k]
    return math.fsum(kept) / len(kept)


def rank_data(values: Sequence[float]) -> list[float]:
    """1-based ranks, ties receiving the mean of the ranks they span."""
    order = sorted(range(len(values)), key=values.__getitem__)
    ranks = [0.0] * len(values)
    i = 0
    while i < len(order):
        j = i
        while j + 1 < len(order) and values[order[j + 1]] == values[order[i]]:
            j += 1
        mid = (i + j) / 2 + 1
        for k in range(i, j + 1):
            ranks[order[k]] = mid
        i = j + 1
    return ranks


class MannWhitneyResult(NamedTuple):
    statistic: float
    pvalue: float


def mann_whitney_u(a: Sequence[float], b: Sequence[float]) -> MannWhitneyResult:
    """Two-sided Mann-Whitney U test; the statistic is U for ``a``.

    Up to EXACT_MAX_TOTAL pooled samples the p-value comes from the exact
    permutation distribution of the (midrank) rank sum, so ties are handled
    exactly. Beyond that a tie-corrected normal approximation is used,
    without continuity correction. p = P(|U - n1*n2/2| >= |u - n1*n2/2|).
    """
    n1, n2 = len(a), len(b)
    if n1 < 1 or n2 < 1:
        raise EmptySamples("both samples need at least one value")
    ranks = rank_data(list(a) + list(b))
    r1 = math.fsum(ranks[:n1])
    u = r1 - n1 * (n1 + 1) / 2
    if n1 + n2 <= EXACT_MAX_TOTAL:
        return MannWhitneyResult(u, _exact_p(ranks, n1, u))
    n = n1 + n2
    ties = sum(t ** 3 - t for t in Counter(ranks).values())
    var = n1 * n2 / 12 * ((n + 1) - ties / (n * (n - 1)))
    if var <= 0:
        return MannWhitneyResult(u, 1.0)
    z = (u - n1 * n2 / 2) / math.sqrt(var)
    return MannWhitneyResult(u, min(1.0, math.erfc(abs(z) / math.sqrt(2))))


def _exact_p(ranks: list[float], n1: int, u: float) -> float:
    # doubled midranks are integers, so the whole distribution stays exact
    doubled = [round(2 * r) for r in ranks]
    # dist[k][s]: number of size-k subsets with doubled rank sum s
    dist = [Counter() for _ in range(n1 + 1)]
    dist[0][0] = 1
    for r in doubled:
        for k in range(min(n1, len(doubled)), 0, -1):
            prev = dist[k - 1]
            if prev:
                cur = dist[k]
                for s, c in prev.items():
                    cur[s + r] += c
    total = math.comb(len(ranks), n1)
    # in doubled units: 2U = S - n1(n1+1), centre n1*n2
    n2 = len(ranks) - n1
    offset = n1 * (n1 + 1)
    dev_obs = abs(round(2 * u) - n1 * n2)
    extreme = sum(c for s, c in dist[n1].items() if abs(s - offset - n1 * n2) >= dev_obs)
    return extreme / total


def vargha_delaney_a12(a: Sequence[float], b: Sequence[float]) -> float:
    """Probability that a value from ``a`` exceeds one from ``b`` (ties count half)."""
    if not a or not b:
        raise EmptySamples("both samples need at least one value")
    ranks = rank_data(list(a) + list(b))
    n1, n2 = len(a), len(b)
    u = math.fsum(ranks[:n1]) - n1 * (n1 + 1) / 2
    return u / (n1 * n2)


def effect_size_label(a12: float) -> str:
    """Magnitude label using the conventional 0.56 / 0.64 / 0.71 cut points."""
    d = max(a12, 1 - a12)
    if d >= LARGE_EFFECT:
        return "large"
    if d >= 0.64:
        return "medium"
    if d >= 0.56:
        return "small"
    return "negligible"


@dataclass(frozen=True)
class CrossoverModel:
    """Per-test-case costs: plain execution, full tracing, and the extra
    cost the oracle route pays for each coverage-increasing test case."""

    t_base: float
    t_trace: float
    c_extra: float

    def oracle_cost(self, rate: float) -> float:
        return self.t_base + rate * self.c_extra


def crossover_rate(model: CrossoverModel) -> float:
    """Coverage-increasing rate where oracle-first and trace-all cost the same."""
    if min(model.t_base, model.t_trace, model.c_extra) <= 0:
        raise NonPositiveModel(f"model terms must be positive: {model}")
    r = (model.t_trace - model.t_base) / model.c_extra
    return min(1.0, max(0.0, r))
