"""Rare-event probabilities across a noise sweep and the large-deviation verdict.

Plain Monte Carlo counts hits of simulated paths.  The tilted estimator
simulates under noise shifted by a deterministic control that makes a
chosen path typical, then reweights by the exact discrete likelihood ratio.
Both share the sample-chunking and the aggregation, so with a zero control
they produce identical numbers.
"""
from __future__ import annotations

import csv
import json
import math
from dataclasses import asdict, dataclass, field

import numpy as np
from scipy.stats import norm

from .action import EventSpec, MinimizeOptions, MinimizeResult, initial_path, minimize_action
from .dynamics import SimConfig, drift_step, integrate_mild
from .noise import PathOnGrid, chunk_size_for, chunked_map, sample_increments
from .stats import Z95, neg_scaled_log, wilson_interval

CSV_COLUMNS = ("eps", "n", "hits", "p_hat", "ci_lo", "ci_hi", "neg_eps2_log_p", "method")


@dataclass(frozen=True)
class Row:
    eps: float
    n: int
    hits: int
    p_hat: float
    ci_lo: float
    ci_hi: float
    neg_eps2_log_p: float
    variance: float
    method: str
    seed: int

    def csv_values(self) -> list:
        out = []
        for col in CSV_COLUMNS:
            v = getattr(self, col)
            out.append("" if isinstance(v, float) and math.isnan(v) else v)
        return out


def _aggregate(parts: list[np.ndarray]) -> tuple[float, float]:
    """Mean and variance of the mean, order independent (exactly rounded sums)."""
    values = np.concatenate(parts)
    n = values.size
    mean = math.fsum(values) / n
    second = math.fsum(values * values) / n
    return mean, max(second - mean * mean, 0.0) / n


def estimate_plain(cfg: SimConfig, event: EventSpec, n_samples: int, seed: int,
                   workers: int = 1) -> Row:
    """Fraction of simulated paths meeting the event, with a Wilson interval."""
    if n_samples < 1:
        raise ValueError("n_samples must be >= 1")
    event.check(cfg.op)

    def run(start, count):
        incs = sample_increments(seed, cfg.op.n_modes, cfg.n_steps, cfg.dt, count, start)
        return event.hit(cfg.op, integrate_mild(cfg, incs).values).astype(float)

    parts = chunked_map(run, n_samples, chunk_size_for(cfg.n_steps, cfg.op.n_modes), workers)
    p_hat, var = _aggregate(parts)
    hits = int(sum(int(np.count_nonzero(p)) for p in parts))
    lo, hi = wilson_interval(hits, n_samples)
    return Row(cfg.eps, n_samples, hits, p_hat, lo, hi, neg_scaled_log(p_hat, cfg.eps), var,
               "plain", int(seed))


def tilt_control(cfg: SimConfig, tilt: PathOnGrid) -> np.ndarray:
    """Control ``u_k`` under which the noiseless shifted recursion reproduces ``tilt``.

    ``s dt u_k = tilt_{k+1} - (e^{-lam dt} tilt_k + phi1 dt B(tilt_k))``, where
    ``s`` is the per-mode noise scale of the exact OU step.  For a tilt equal
    to the unperturbed flow this is exactly zero.
    """
    if tilt.n_steps != cfg.n_steps or tilt.n_modes != cfg.op.n_modes:
        raise ValueError("tilt path does not match the simulation grid")
    if abs(tilt.T - cfg.T) > 1e-12 * cfg.T:
        raise ValueError("tilt path horizon differs from the configuration")
    v = tilt.values
    if np.max(np.abs(v[0] - cfg.x0)) > 1e-9 * (1.0 + np.max(np.abs(cfg.x0))):
        raise ValueError("tilt path must start at x0")
    f = cfg.factors()
    return (v[1:] - drift_step(cfg, f, v[:-1])) / (f.noise_scale * cfg.dt)


def estimate_tilted(cfg: SimConfig, event: EventSpec, n_samples: int, tilt: PathOnGrid, seed: int,
                    workers: int = 1) -> Row:
    """Importance-sampling estimate with the noise shifted by ``eps^-1 u dt``.

    Each sample carries the likelihood ratio
    ``exp(-eps^-1 sum <u, dW> - eps^-2/2 sum ||u||^2 dt)``.  The interval is
    ``p_hat +- z * SE``; when every weight is exactly one the sample is an
    ordinary Monte Carlo sample and the Wilson interval is used instead.
    Zero-hit rows get the Wilson bound on the hit fraction times the largest
    observed weight as a heuristic upper limit.
    """
    if n_samples < 1:
        raise ValueError("n_samples must be >= 1")
    if cfg.eps <= 0:
        raise ValueError("tilted estimator needs eps > 0")
    event.check(cfg.op)
    u = tilt_control(cfg, tilt)
    shift = (u * cfg.dt) / cfg.eps
    quad = float(np.sum(u * u)) * cfg.dt / (2.0 * cfg.eps ** 2)

    def run(start, count):
        incs = sample_increments(seed, cfg.op.n_modes, cfg.n_steps, cfg.dt, count, start)
        log_w = -np.sum(u * incs.increments, axis=(-2, -1)) / cfg.eps - quad
        hit = event.hit(cfg.op, integrate_mild(cfg, incs.shifted(shift)).values)
        w = np.exp(log_w)
        return np.where(hit, w, 0.0), hit, w

    results = chunked_map(run, n_samples, chunk_size_for(cfg.n_steps, cfg.op.n_modes), workers)
    p_hat, var = _aggregate([r[0] for r in results])
    hits = int(sum(int(np.count_nonzero(r[1])) for r in results))
    unit = all(np.all(r[2] == 1.0) for r in results)
    if unit:
        lo, hi = wilson_interval(hits, n_samples)
    elif hits == 0:
        lo = 0.0
        hi = wilson_interval(0, n_samples)[1] * max(1.0, max(float(np.max(r[2])) for r in results))
    else:
        se = math.sqrt(var)
        lo, hi = max(0.0, p_hat - Z95 * se), p_hat + Z95 * se
    return Row(cfg.eps, n_samples, hits, p_hat, lo, hi, neg_scaled_log(p_hat, cfg.eps), var,
               "tilted", int(seed))


@dataclass(frozen=True)
class SweepSettings:
    """Sample sizes and verdict tolerances for :func:`eps_sweep`."""

    plain_scale: float = 1e5      # plain n = plain_scale / eps^2 ...
    plain_cap: int = 1_000_000    # ... capped here
    tilted_n: int = 10_000
    rel_tol: float = 0.25
    abs_tol: float = 0.05

    def n_for(self, eps: float, method: str) -> int:
        if method == "tilted":
            return int(self.tilted_n)
        return int(min(self.plain_cap, math.ceil(self.plain_scale / eps ** 2)))


@dataclass
class RareEventReport:
    rows: list
    action_min: float
    action_detail: dict
    regular_event_gap: float | None
    tolerance: float
    passed: bool
    reference_eps: float | None
    distance: float | None
    trend_ok: bool
    upper_bound_ok: bool | None
    advice: str
    config: dict = field(default_factory=dict)

    def verdict(self) -> dict:
        return {
            "schema_version": 1,
            "action_min": self.action_min,
            "action": self.action_detail,
            "regular_event_gap": self.regular_event_gap,
            "tolerance": self.tolerance,
            "pass": self.passed,
            "reference_eps": self.reference_eps,
            "distance": self.distance,
            "trend_ok": self.trend_ok,
            "upper_bound_ok": self.upper_bound_ok,
            "advice": self.advice,
            "rows": [_row_json(r) for r in self.rows],
            "config": self.config,
        }


def _row_json(r: Row) -> dict:
    d = asdict(r)
    return {k: (None if isinstance(v, float) and math.isnan(v) else v) for k, v in d.items()}


def row_seed(seed: int, index: int) -> int:
    """Independent stream label for sweep row ``index``."""
    return int(np.random.SeedSequence([int(seed), int(index)]).generate_state(1, dtype=np.uint64)[0] >> 1)


def evaluate_verdict(rows: list, action_min: float, rel_tol: float = 0.25,
                     abs_tol: float = 0.05) -> dict:
    """Verdict fields derived from the rows and the action minimum alone."""
    tol = max(rel_tol * action_min, abs_tol)
    live = [r for r in rows if r.hits > 0 and r.p_hat > 0]
    if not live:
        return {"tolerance": tol, "passed": False, "reference_eps": None, "distance": None,
                "trend_ok": False, "upper_bound_ok": None}
    ref = live[-1]
    dist = abs(ref.neg_eps2_log_p - action_min)
    dists = [abs(r.neg_eps2_log_p - action_min) for r in live]
    trend = all(d1 <= d0 for d0, d1 in zip(dists, dists[1:]))
    # -eps^2 log(upper CI) is the most favourable value for the lower side
    slack = neg_scaled_log(ref.ci_hi, ref.eps) if ref.ci_hi > 0 else math.inf
    return {"tolerance": tol, "passed": dist <= tol, "reference_eps": ref.eps, "distance": dist,
            "trend_ok": trend, "upper_bound_ok": bool(slack >= action_min - tol)}


def eps_sweep(cfg_template: SimConfig, event: EventSpec, eps_list, n_schedule=None, method="plain",
              seed: int = 0, opts: MinimizeOptions | None = None, settings: SweepSettings | None = None,
              workers: int = 1, minimizer: MinimizeResult | None = None) -> RareEventReport:
    """Run one estimator per noise level and compare with the minimized action.

    ``method`` is one name for every level or a list aligned with
    ``eps_list``; ``n_schedule`` is a callable ``(eps, method) -> n``, a list,
    or ``None`` for the default schedule in ``settings``.
    """
    eps_list = [float(e) for e in eps_list]
    if not eps_list:
        raise ValueError("eps_list must not be empty")
    if any(e1 >= e0 for e0, e1 in zip(eps_list, eps_list[1:])):
        raise ValueError("eps_list must be strictly decreasing")
    if any(e <= 0 for e in eps_list):
        raise ValueError("eps values must be positive")
    methods = [method] * len(eps_list) if isinstance(method, str) else list(method)
    if len(methods) != len(eps_list) or any(m not in ("plain", "tilted") for m in methods):
        raise ValueError("method must be 'plain', 'tilted' or one of those per eps")
    settings = settings or SweepSettings()
    if n_schedule is None:
        ns = [settings.n_for(e, m) for e, m in zip(eps_list, methods)]
    elif callable(n_schedule):
        ns = [int(n_schedule(e, m)) for e, m in zip(eps_list, methods)]
    else:
        ns = [int(n) for n in n_schedule]
    op = cfg_template.op
    if minimizer is None:
        init = initial_path(op, cfg_template.x0, event, cfg_template.T, cfg_template.n_steps)
        minimizer = minimize_action(op, cfg_template.drift, cfg_template.x0, event, init, opts)
    action_min = minimizer.action.value
    rows = []
    for i, (eps, m, n) in enumerate(zip(eps_list, methods, ns)):
        cfg = cfg_template.with_eps(eps)
        s = row_seed(seed, i)
        if m == "plain":
            rows.append(estimate_plain(cfg, event, n, s, workers))
        else:
            rows.append(estimate_tilted(cfg, event, n, minimizer.path, s, workers))
    v = evaluate_verdict(rows, action_min, settings.rel_tol, settings.abs_tol)
    advice = ""
    if all(r.hits == 0 for r in rows if r.method == "plain") and "tilted" not in methods:
        advice = "all plain estimates had zero hits; rerun the small-eps levels with method 'tilted'"
    elif any(r.hits == 0 for r in rows):
        advice = "some levels had zero hits; they carry only an upper confidence bound"
    if not minimizer.converged:
        advice = (advice + "; " if advice else "") + "action minimizer did not converge: " + minimizer.message
    return RareEventReport(
        rows=rows, action_min=action_min, action_detail=minimizer.summary(),
        regular_event_gap=minimizer.regular_event_gap, tolerance=v["tolerance"], passed=v["passed"],
        reference_eps=v["reference_eps"], distance=v["distance"], trend_ok=v["trend_ok"],
        upper_bound_ok=v["upper_bound_ok"], advice=advice,
    )


@dataclass(frozen=True)
class TrickRow:
    c: float
    n: int
    hits: int
    p_hat: float
    ci_lo: float
    ci_hi: float
    bound: float
    exact: float
    below_bound: bool


def exponential_trick_check(cfg: SimConfig, Y_max: float, c_values, n_samples: int, seed: int,
                            workers: int = 1) -> list[TrickRow]:
    """Tail of ``M_T = sum <Y, dW_k>`` for the constant integrand ``Y = Y_max e_0``.

    Compares the empirical ``P(M_T > c)`` with ``exp(-c^2 / (2 Y_max^2 T))``
    and with the exact Gaussian tail.  For ``Y_max = 0`` the bound is
    reported as the trivial value 1.
    """
    if Y_max < 0:
        raise ValueError("Y_max must be nonnegative")
    c_values = np.asarray(c_values, dtype=float)

    def run(start, count):
        incs = sample_increments(seed, cfg.op.n_modes, cfg.n_steps, cfg.dt, count, start)
        return Y_max * np.sum(incs.increments[..., 0], axis=-1)

    m = np.concatenate(chunked_map(run, n_samples, chunk_size_for(cfg.n_steps, cfg.op.n_modes), workers))
    rows = []
    for c in c_values:
        hits = int(np.count_nonzero(m > c))
        lo, hi = wilson_interval(hits, n_samples)
        if Y_max == 0:
            bound, exact = 1.0, float(c < 0)
        else:
            bound = math.exp(-c * c / (2.0 * Y_max ** 2 * cfg.T))
            exact = float(norm.sf(c / (Y_max * math.sqrt(cfg.T))))
        rows.append(TrickRow(float(c), n_samples, hits, hits / n_samples, lo, hi, bound, exact,
                             bool(lo <= bound)))
    return rows


def write_rows_csv(path, rows: list[Row]):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(CSV_COLUMNS)
        for r in rows:
            w.writerow(r.csv_values())


def json_safe(obj):
    """Copy with numpy types turned into Python ones and non-finite floats into ``None``."""
    if isinstance(obj, dict):
        return {str(k): json_safe(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [json_safe(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return json_safe(obj.tolist())
    if isinstance(obj, (np.floating, float)):
        v = float(obj)
        return v if math.isfinite(v) else None
    if isinstance(obj, np.integer):
        return int(obj)
    if isinstance(obj, np.bool_):
        return bool(obj)
    return obj


def write_verdict_json(path, report: RareEventReport, extra: dict | None = None):
    doc = report.verdict()
    doc.update(extra or {})
    with open(path, "w") as fh:
        json.dump(json_safe(doc), fh, indent=2, sort_keys=True, allow_nan=False)
        fh.write("\n")
