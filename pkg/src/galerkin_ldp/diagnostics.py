"""Empirical constants behind the tightness estimates: Gaussian tails of the
stochastic convolution, the a-priori growth ratio, and the smoothing bound."""
from __future__ import annotations

import math

import numpy as np

from .dynamics import SimConfig, exptight_ratio, integrate_mild
from .noise import chunk_size_for, chunked_map, convolve, sample_increments, sup_norm_samples, tail_estimate
from .spectral import SpectralOperator, smoothing_constant, smoothing_ratio


def fernique_fit(sups: np.ndarray, p_min: float = 1e-3, p_max: float = 0.5) -> dict:
    """Fit ``P(S > r) ~ C exp(-c r^2)`` to the empirical tail of the samples ``S``.

    Uses thresholds whose empirical tail lies in ``[p_min, p_max]``.  Returns
    the decay constant ``c`` and prefactor ``C`` (``nan`` when the sample is
    too small to resolve the tail).
    """
    s = np.sort(np.asarray(sups, dtype=float))
    n = s.size
    ranks = np.arange(n, 0, -1) / n  # P(S >= s_i)
    keep = (ranks >= p_min) & (ranks <= p_max)
    if np.count_nonzero(keep) < 10:
        return {"c": math.nan, "C": math.nan, "n_points": int(np.count_nonzero(keep))}
    slope, intercept = np.polyfit(s[keep] ** 2, np.log(ranks[keep]), 1)
    return {"c": float(-slope), "C": float(math.exp(intercept)), "n_points": int(np.count_nonzero(keep))}


def tail_table(op: SpectralOperator, alpha: float, T: float, n_steps: int, eps_list, R_list,
               n_samples: int, seed: int, workers: int = 1) -> tuple[list[dict], dict]:
    """Tail estimates for every ``(eps, R)`` pair from one shared set of paths, plus the fit."""
    sups = sup_norm_samples(op, alpha, T, n_steps, n_samples, seed, workers)
    rows = []
    for eps in eps_list:
        for R in R_list:
            t = tail_estimate(op, eps, R, alpha, n_samples, seed, T, n_steps, sups=sups)
            rows.append({"eps": t.eps, "R": t.R, "n": t.n, "hits": t.hits, "p_hat": t.p_hat,
                         "ci_lo": t.ci_lo, "ci_hi": t.ci_hi})
    return rows, fernique_fit(sups)


def exptight_constant(cfg: SimConfig, n_samples: int, seed: int, workers: int = 1) -> float:
    """Largest observed ``||X_t||_V0 / (||x0||_V0 + ||eps W_A(t)||_V0 + 1)`` over sampled paths."""

    def run(start, count):
        incs = sample_increments(seed, cfg.op.n_modes, cfg.n_steps, cfg.dt, count, start)
        return exptight_ratio(cfg, integrate_mild(cfg, incs), convolve(cfg.op, incs))

    return max(chunked_map(run, n_samples, chunk_size_for(cfg.n_steps, cfg.op.n_modes), workers))


def regime_check(decay_constant: float, growth_b: float, T: float) -> dict:
    """Compare T with ``c / b^2``; the tightness argument for linear growth needs ``T`` below it.

    Reported only, never enforced.
    """
    if growth_b == 0:
        limit = math.inf
    elif math.isnan(decay_constant):
        limit = math.nan
    else:
        limit = decay_constant / growth_b ** 2
    inside = None if math.isnan(limit) else bool(T < limit)
    return {"T": T, "growth_b": growth_b, "decay_constant": decay_constant,
            "T_limit": None if not math.isfinite(limit) else limit, "inside_regime": inside}


def smoothing_scan(op: SpectralOperator, betas, times, n_fields: int, seed: int) -> dict:
    """Largest ``smoothing_ratio / (beta/e)^beta`` over random fields; never above 1."""
    gen = np.random.Generator(np.random.Philox(np.random.SeedSequence(seed)))
    xs = gen.standard_normal((n_fields, op.n_modes))
    worst = 0.0
    for beta in betas:
        bound = smoothing_constant(beta)
        for t in times:
            for x in xs:
                worst = max(worst, smoothing_ratio(op, beta, t, x) / bound)
    return {"max_ratio_to_bound": worst}
