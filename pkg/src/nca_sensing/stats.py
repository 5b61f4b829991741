"""Two-sample Mann-Whitney U test with midrank ties.

Small samples (``len(a) + len(b) <= EXACT_LIMIT``) get the exact permutation
distribution of U; larger ones use the tie-corrected normal approximation with
a continuity correction.
"""

from __future__ import annotations

import math
from collections import Counter
from typing import Sequence

import numpy as np

EXACT_LIMIT = 12


def midranks(values: Sequence[float]) -> np.ndarray:
    """1-based ranks, tied values sharing the mean of their positions."""
    x = np.asarray(values, dtype=np.float64)
    order = np.argsort(x, kind="mergesort")
    ranks = np.empty(len(x))
    i = 0
    while i < len(x):
        j = i
        while j + 1 < len(x) and x[order[j + 1]] == x[order[i]]:
            j += 1
        ranks[order[i:j + 1]] = (i + j) / 2.0 + 1.0
        i = j + 1
    return ranks


def _rank_sum_distribution(doubled_ranks: Sequence[int], n1: int) -> Counter:
    # counts of every achievable sum of n1 of the (doubled, hence integer) ranks
    table = [Counter() for _ in range(n1 + 1)]
    table[0][0] = 1
    for r in doubled_ranks:
        for k in range(n1, 0, -1):
            for s, cnt in table[k - 1].items():
                table[k][s + r] += cnt
    return table[n1]


def _norm_sf(z: float) -> float:
    return 0.5 * math.erfc(z / math.sqrt(2.0))


def mann_whitney_u(a: Sequence[float], b: Sequence[float], alternative: str = "two-sided", method: str = "auto"):
    """Return ``(U, p)`` where U counts pairs with ``a_i > b_j`` (ties count 1/2).

    ``alternative`` is ``"two-sided"``, ``"less"`` (a tends smaller) or
    ``"greater"``. ``method`` is ``"auto"``, ``"exact"`` or ``"asymptotic"``.
    """
    a = list(map(float, a))
    b = list(map(float, b))
    n1, n2 = len(a), len(b)
    if n1 == 0 or n2 == 0:
        raise ValueError("both samples must be non-empty")
    if alternative not in ("two-sided", "less", "greater"):
        raise ValueError(f"unknown alternative {alternative!r}")
    ranks = midranks(a + b)
    u = float(ranks[:n1].sum() - n1 * (n1 + 1) / 2.0)
    mu = n1 * n2 / 2.0
    if method == "auto":
        method = "exact" if n1 + n2 <= EXACT_LIMIT else "asymptotic"

    if method == "exact":
        doubled = [int(round(2 * r)) for r in ranks]
        dist = _rank_sum_distribution(doubled, n1)
        total = sum(dist.values())
        offset = n1 * (n1 + 1)  # doubled rank-sum -> doubled U
        obs = int(round(2 * u))
        dev = abs(obs - 2 * mu)
        if alternative == "two-sided":
            hits = sum(c for s, c in dist.items() if abs(s - offset - 2 * mu) >= dev - 1e-9)
        elif alternative == "less":
            hits = sum(c for s, c in dist.items() if s - offset <= obs)
        else:
            hits = sum(c for s, c in dist.items() if s - offset >= obs)
        return u, min(1.0, hits / total)

    n = n1 + n2
    ties = sum(t**3 - t for t in Counter(a + b).values())
    var = n1 * n2 / 12.0 * ((n + 1) - ties / (n * (n - 1)))
    if var <= 0:
        return u, 1.0
    sd = math.sqrt(var)
    if alternative == "two-sided":
        z = (abs(u - mu) - 0.5) / sd
        return u, 1.0 if z <= 0 else min(1.0, 2.0 * _norm_sf(z))
    if alternative == "greater":
        return u, _norm_sf((u - mu - 0.5) / sd)
    return u, 1.0 - _norm_sf((u - mu + 0.5) / sd)
