"""Small estimator helpers shared by the Monte Carlo routines."""
from __future__ import annotations

import math

from statsmodels.stats.proportion import proportion_confint

Z95 = 1.959963984540054


def wilson_interval(hits: int, n: int, alpha: float = 0.05) -> tuple[float, float]:
    """Wilson score interval for a binomial proportion."""
    if n < 1:
        raise ValueError("need at least one trial")
    lo, hi = proportion_confint(hits, n, alpha=alpha, method="wilson")
    # the closed form rounds at the endpoints; keep p_hat inside
    p = hits / n
    lo = 0.0 if hits == 0 else min(float(lo), p)
    hi = 1.0 if hits == n else max(float(hi), p)
    return lo, hi


def neg_scaled_log(p: float, eps: float) -> float:
    """``-eps^2 log p``, or NaN when ``p`` is zero (never evaluates log 0)."""
    if p <= 0:
        return math.nan
    return -eps * eps * math.log(p)
