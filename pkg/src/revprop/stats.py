"""Exact Wilcoxon signed-rank test for small paired samples."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.stats import rankdata

MAX_EXACT_N = 25


@dataclass(frozen=True)
class WilcoxonResult:
    W: float
    p_two_sided: float
    n: int


def wilcoxon_signed_rank(a, b) -> WilcoxonResult:
    """Paired two-sided test on ``a - b``.

    Zero differences are dropped; tied magnitudes get average ranks.  ``W`` is
    the smaller of the positive and negative rank sums and the p-value is the
    exact fraction of the ``2^n`` equally likely sign assignments whose
    smaller rank sum is ``<= W``.
    """
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape or a.ndim != 1:
        raise ValueError("a and b must be 1-D and of equal length")
    d = a - b
    d = d[d != 0]
    n = d.size
    if n == 0:
        raise ValueError("all paired differences are zero; the test is degenerate")
    if n > MAX_EXACT_N:
        raise ValueError(f"exact enumeration supports n <= {MAX_EXACT_N}, got {n}")
    ranks = rankdata(np.abs(d))
    # Average ranks are multiples of 1/2; doubling makes them integers.
    r2 = np.rint(2 * ranks).astype(np.int64)
    total2 = int(r2.sum())
    w_pos2 = int(r2[d > 0].sum())
    w2 = min(w_pos2, total2 - w_pos2)

    # counts[s] = number of sign assignments whose doubled positive sum is s
    counts = np.zeros(total2 + 1, dtype=object)
    counts[0] = 1
    for r in r2:
        shifted = np.zeros_like(counts)
        shifted[r:] = counts[:total2 + 1 - r]
        counts = counts + shifted
    s = np.arange(total2 + 1)
    extreme = np.minimum(s, total2 - s) <= w2
    hits = int(counts[extreme].sum())
    return WilcoxonResult(W=w2 / 2, p_two_sided=hits / 2**n, n=n)
