"""Action functionals on discrete paths and the minimum action method.

Paths are piecewise linear between grid nodes.  On each interval the
residual is

    r_k = (phi_{k+1} - phi_k)/dt + Lam m_k - B(m_k),    m_k = (phi_k + phi_{k+1})/2,

and the action is ``dt/2 * sum_k ||r_k||^2``.  Per-mode contributions are
accumulated with ``math.fsum`` so truncated sums are exactly monotone in the
number of modes.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field, replace

import numpy as np
from scipy.linalg import cholesky_banded, solve_banded
from scipy.optimize import minimize

from .drift import Drift, ZeroDrift
from .dynamics import SimConfig, gamma_B_inverse, skeleton_flow
from .noise import PathOnGrid
from .spectral import SpectralOperator, fractional_power_norm

OBSERVABLES = ("terminal_mode", "terminal_norm", "sup_norm")


@dataclass(frozen=True)
class ActionValue:
    value: float
    breakdown: np.ndarray = field(repr=False)
    dt: float
    n_steps: int
    note: str = ""

    @property
    def finite(self) -> bool:
        return math.isfinite(self.value)

    def __float__(self):
        return self.value

    def to_dict(self) -> dict:
        return {
            "value": self.value if self.finite else None,
            "finite": self.finite,
            "breakdown": [float(v) for v in self.breakdown] if self.finite else None,
            "dt": self.dt,
            "n_steps": self.n_steps,
            "note": self.note,
        }


def _infinite(n_modes: int, path: PathOnGrid, note: str) -> ActionValue:
    return ActionValue(math.inf, np.full(n_modes, math.inf), path.dt, path.n_steps, note)


def _from_residual(r: np.ndarray, path: PathOnGrid) -> ActionValue:
    per_mode = np.array([0.5 * path.dt * math.fsum(col) for col in (r * r).T])
    return ActionValue(math.fsum(per_mode), per_mode, path.dt, path.n_steps)


def _residual(op, drift: Drift | None, values: np.ndarray, dt: float, lam=None):
    lam = op.eigenvalues if lam is None else lam
    mid = 0.5 * (values[..., :-1, :] + values[..., 1:, :])
    r = np.diff(values, axis=-2) / dt + lam * mid
    if drift is not None:
        r = r - drift(op, mid)
    return r, mid


def _single(path: PathOnGrid) -> np.ndarray:
    if path.values.ndim != 2:
        raise ValueError("action functionals take a single path, not a batch")
    return path.values


def schilder_action(path: PathOnGrid, atol: float = 1e-12) -> ActionValue:
    """``1/2 int ||phi'||^2 dt``; infinite unless the path starts at 0."""
    v = _single(path)
    if np.max(np.abs(v[0])) > atol:
        return _infinite(path.n_modes, path, "path does not start at 0")
    return _from_residual(np.diff(v, axis=0) / path.dt, path)


def galerkin_action(op: SpectralOperator, path: PathOnGrid, N: int | None = None) -> ActionValue:
    """``1/2 int ||phi' - A phi||^2 dt`` restricted to the first N modes."""
    v = _single(path)
    N = op.n_modes if N is None else N
    if not 1 <= N <= op.n_modes:
        raise ValueError(f"N must lie in [1, {op.n_modes}], got {N}")
    r, _ = _residual(op, None, v[:, :N], path.dt, op.eigenvalues[:N])
    return _from_residual(r, path)


def galerkin_profile(op: SpectralOperator, path: PathOnGrid) -> list[float]:
    """``[S_1, ..., S_Nmax]``; nondecreasing by construction."""
    full = galerkin_action(op, path)
    return [math.fsum(full.breakdown[:n]) for n in range(1, op.n_modes + 1)]


def drift_action(op: SpectralOperator, drift: Drift, x0, path: PathOnGrid,
                 atol: float = 1e-9) -> ActionValue:
    """``1/2 int ||phi' - A phi - B(phi)||^2 dt``; infinite unless ``phi(0) = x0``."""
    v = _single(path)
    x0 = np.asarray(x0, dtype=float)
    if np.max(np.abs(v[0] - x0)) > atol * (1.0 + np.max(np.abs(x0))):
        return _infinite(op.n_modes, path, "path does not start at x0")
    r, _ = _residual(op, drift, v, path.dt)
    return _from_residual(r, path)


def action_via_inverse(op: SpectralOperator, drift: Drift, x0, path: PathOnGrid) -> ActionValue:
    """Action of the perturbation that the skeleton map sends to ``path``."""
    cfg = SimConfig(op, drift, x0, path.T, path.n_steps)
    try:
        w = gamma_B_inverse(cfg, path)
    except ValueError:
        return _infinite(op.n_modes, path, "path does not start at x0")
    return galerkin_action(op, w)


def _gradient_values(op, drift: Drift, values: np.ndarray, dt: float) -> tuple[float, np.ndarray]:
    r, mid = _residual(op, drift, values, dt)
    g = dt * r
    common = 0.5 * op.eigenvalues * g - 0.5 * drift.vjp(op, mid, g)
    out = np.zeros(values.shape)
    out[1:] += r + common
    out[:-1] += common - r
    return 0.5 * dt * float(np.sum(r * r)), out


def action_gradient(op: SpectralOperator, drift: Drift, x0, path: PathOnGrid) -> np.ndarray:
    """Gradient of the discrete drift action with respect to every node value.

    Row 0 is included for completeness; callers drop fixed coordinates.
    """
    if not drift.differentiable:
        raise ValueError("drift is not differentiable; pass drift.smoothed(eta)")
    v = _single(path)
    x0 = np.asarray(x0, dtype=float)
    if np.max(np.abs(v[0] - x0)) > 1e-9 * (1.0 + np.max(np.abs(x0))):
        raise ValueError("path does not start at x0; the action is infinite")
    return _gradient_values(op, drift, v, path.dt)[1]


@dataclass(frozen=True)
class EventSpec:
    """Threshold event ``observable(path) >= threshold``."""

    observable: str
    threshold: float
    mode: int = 0
    alpha: float = 0.0

    def __post_init__(self):
        if self.observable not in OBSERVABLES:
            raise ValueError(f"observable must be one of {OBSERVABLES}, got {self.observable!r}")
        if self.alpha < 0:
            raise ValueError("alpha must be >= 0")

    def check(self, op: SpectralOperator):
        if self.observable == "terminal_mode" and not 0 <= self.mode < op.n_modes:
            raise ValueError(f"event mode {self.mode} outside [0, {op.n_modes})")

    def value(self, op: SpectralOperator, values: np.ndarray):
        """Observable for paths of shape ``(..., K+1, n_modes)``."""
        if self.observable == "terminal_mode":
            return values[..., -1, self.mode]
        if self.observable == "terminal_norm":
            return fractional_power_norm(op, self.alpha, values[..., -1, :])
        return np.max(fractional_power_norm(op, self.alpha, values), axis=-1)

    def hit(self, op: SpectralOperator, values: np.ndarray):
        return self.value(op, values) >= self.threshold

    def shifted(self, margin: float) -> "EventSpec":
        return replace(self, threshold=self.threshold + margin)

    def to_config(self) -> dict:
        return {"observable": self.observable, "threshold": self.threshold,
                "mode": self.mode, "alpha": self.alpha}

    @classmethod
    def from_config(cls, cfg: dict) -> "EventSpec":
        return cls(str(cfg["observable"]), float(cfg["threshold"]),
                   int(cfg.get("mode", 0)), float(cfg.get("alpha", 0.0)))


def _value_gradient(op, event: EventSpec, values: np.ndarray) -> np.ndarray:
    g = np.zeros(values.shape)
    if event.observable == "terminal_mode":
        g[-1, event.mode] = 1.0
        return g
    weights = op.eigenvalues ** (2.0 * event.alpha)
    if event.observable == "terminal_norm":
        k = values.shape[0] - 1
    else:
        k = int(np.argmax(fractional_power_norm(op, event.alpha, values)))
    norm = math.sqrt(float(np.sum(weights * values[k] ** 2)))
    if norm > 0:
        g[k] = weights * values[k] / norm
    return g


def initial_path(op: SpectralOperator, x0, event: EventSpec, T: float, n_steps: int) -> PathOnGrid:
    """Straight line in time from ``x0`` to a field that meets the event."""
    x0 = np.asarray(x0, dtype=float)
    target = x0.copy()
    if event.observable == "terminal_mode":
        target[event.mode] = event.threshold
    else:
        target[0] = max(abs(x0[0]), event.threshold / op.eigenvalues[0] ** event.alpha)
    s = np.linspace(0.0, 1.0, n_steps + 1)[:, None]
    return PathOnGrid(np.linspace(0.0, T, n_steps + 1), (1.0 - s) * x0 + s * target)


@dataclass(frozen=True)
class MinimizeOptions:
    max_iters: int = 5000
    tol: float = 1e-5
    eta: float = 1e-4
    n_starts: int = 1
    penalty_schedule: tuple = (1e2, 1e3, 1e4, 1e5, 1e6)
    constraint_tol: float = 1e-5
    probe_margin: float = 1e-3
    seed: int = 0
    max_restarts: int = 8

    @classmethod
    def from_config(cls, cfg: dict) -> "MinimizeOptions":
        known = {k: cfg[k] for k in cls.__dataclass_fields__ if k in cfg}
        if "penalty_schedule" in known:
            known["penalty_schedule"] = tuple(float(v) for v in known["penalty_schedule"])
        return cls(**known)


@dataclass
class MinimizeResult:
    path: PathOnGrid
    action: ActionValue            # with the drift as given
    smoothed_action: ActionValue   # with the surrogate used for descent
    grad_norm: float
    converged: bool
    n_iter: int
    constraint_violation: float
    skeleton_in_event: bool
    start_actions: list
    probe_threshold: float | None = None
    probe_action: float | None = None
    message: str = ""

    def __iter__(self):
        yield self.path
        yield self.action

    @property
    def regular_event_gap(self) -> float | None:
        if self.probe_action is None:
            return None
        return abs(self.probe_action - self.action.value)

    def summary(self) -> dict:
        return {
            "action": self.action.to_dict(),
            "smoothed_action": self.smoothed_action.value,
            "grad_norm": self.grad_norm,
            "converged": self.converged,
            "n_iter": self.n_iter,
            "constraint_violation": self.constraint_violation,
            "skeleton_in_event": self.skeleton_in_event,
            "start_actions": self.start_actions,
            "probe_threshold": self.probe_threshold,
            "probe_action": self.probe_action,
            "regular_event_gap": self.regular_event_gap,
            "message": self.message,
        }


class _Problem:
    """Drift action over the free node values, in preconditioned coordinates.

    Per mode the free values are mapped through the Cholesky factor of the
    B = 0 Hessian, so the linear part of the problem is perfectly
    conditioned and only the drift bends the landscape.
    """

    def __init__(self, op, drift: Drift, template: np.ndarray, free: np.ndarray, dt: float,
                 event: EventSpec | None = None, penalty: float = 0.0):
        self.op, self.drift, self.dt = op, drift, dt
        self.template = template.copy()
        self.free = free
        self.event, self.penalty = event, penalty
        self.factors = []
        for n in range(op.n_modes):
            idx = np.nonzero(free[:, n])[0]
            self.factors.append((idx, self._factor(op.eigenvalues[n], idx, template.shape[0] - 1)))

    def _factor(self, lam: float, idx: np.ndarray, K: int):
        if idx.size == 0:
            return None
        a = 1.0 / self.dt + 0.5 * lam
        b = -1.0 / self.dt + 0.5 * lam
        diag = np.where(idx < K, a * a + b * b, a * a) * self.dt
        upper = np.zeros(idx.size)
        # neighbours k, k+1 both free couple through residual k
        adjacent = np.diff(idx) == 1
        upper[1:] = np.where(adjacent, a * b * self.dt, 0.0)
        u = cholesky_banded(np.vstack([upper, diag]), lower=False)
        lower = np.zeros_like(u)
        lower[0] = u[1]
        lower[1, :-1] = u[0, 1:]
        return u, lower

    def to_values(self, y: np.ndarray) -> np.ndarray:
        values = self.template.copy()
        pos = 0
        for n, (idx, fac) in enumerate(self.factors):
            if fac is None:
                continue
            values[idx, n] = solve_banded((0, 1), fac[0], y[pos:pos + idx.size])
            pos += idx.size
        return values

    def to_coords(self, values: np.ndarray) -> np.ndarray:
        parts = []
        for n, (idx, fac) in enumerate(self.factors):
            if fac is None:
                continue
            u = fac[0]
            x = values[idx, n]
            parts.append(u[1] * x + np.concatenate([u[0, 1:] * x[1:], [0.0]]))
        return np.concatenate(parts)

    def objective(self, values: np.ndarray) -> tuple[float, np.ndarray]:
        f, g = _gradient_values(self.op, self.drift, values, self.dt)
        if self.penalty > 0:
            gap = self.event.threshold - float(self.event.value(self.op, values))
            if gap > 0:
                f += 0.5 * self.penalty * gap * gap
                g -= self.penalty * gap * _value_gradient(self.op, self.event, values)
        return f, g

    def __call__(self, y: np.ndarray):
        values = self.to_values(y)
        f, g = self.objective(values)
        parts = []
        for n, (idx, fac) in enumerate(self.factors):
            if fac is not None:
                parts.append(solve_banded((1, 0), fac[1], g[idx, n]))
        return f, np.concatenate(parts)

    def grad_norm(self, values: np.ndarray) -> float:
        g = self.objective(values)[1]
        return math.sqrt(float(np.sum(g[self.free] ** 2)) / self.dt)

    def solve(self, values: np.ndarray, opts: MinimizeOptions) -> tuple[np.ndarray, int, float]:
        y = self.to_coords(values)
        iters = 0
        best = self.to_values(y)
        gn = self.grad_norm(best)
        for _ in range(opts.max_restarts):
            if gn <= opts.tol or iters >= opts.max_iters:
                break
            res = minimize(self, y, jac=True, method="L-BFGS-B",
                           options={"maxiter": opts.max_iters - iters, "maxfun": 4 * opts.max_iters,
                                    "ftol": 1e-16, "gtol": 1e-14, "maxcor": 30})
            iters += int(res.nit)
            cand = self.to_values(res.x)
            cand_gn = self.grad_norm(cand)
            if cand_gn >= gn and res.nit == 0:
                break
            if cand_gn < gn or self.objective(cand)[0] < self.objective(best)[0]:
                y, best, gn = res.x, cand, cand_gn
        return best, iters, gn


def _smooth_perturbation(rng: np.random.Generator, n_steps: int, n_modes: int, amplitude: float,
                         pin_end: bool) -> np.ndarray:
    s = np.linspace(0.0, 1.0, n_steps + 1)[:, None]
    out = np.zeros((n_steps + 1, n_modes))
    for j in range(1, 4):
        shape = np.sin(j * math.pi * s) if pin_end else np.sin((j - 0.5) * math.pi * s)
        out += shape * rng.normal(scale=amplitude / j, size=n_modes)
    return out


def _solve_event(op, drift_s: Drift, x0, event: EventSpec, start: np.ndarray, dt: float,
                 opts: MinimizeOptions, pinned: bool) -> tuple[np.ndarray, int, float]:
    K = start.shape[0] - 1
    free = np.ones(start.shape, dtype=bool)
    free[0] = False
    template = start.copy()
    template[0] = x0
    if event is None:
        return _Problem(op, drift_s, template, free, dt).solve(template, opts)
    if pinned:
        free[K, event.mode] = False
        template[K, event.mode] = event.threshold
        return _Problem(op, drift_s, template, free, dt).solve(template, opts)
    values, total = template, 0
    gn = math.inf
    for mu in opts.penalty_schedule:
        prob = _Problem(op, drift_s, values, free, dt, event, mu)
        values, iters, gn = prob.solve(values, opts)
        total += iters
        if event.threshold - float(event.value(op, values)) <= opts.constraint_tol:
            break
    return values, total, gn


def minimize_action(op: SpectralOperator, drift: Drift, x0, event: EventSpec, init: PathOnGrid,
                    opts: MinimizeOptions | None = None) -> MinimizeResult:
    """Local minimizer of the discrete drift action over paths meeting ``event``.

    Terminal-mode events pin the terminal coefficient at the threshold;
    norm events use an increasing exterior quadratic penalty.  When the
    unperturbed flow already meets the event the unconstrained problem is
    solved instead (its minimum is zero).  Non-differentiable drifts are
    replaced by their smoothed surrogate for the descent; both actions are
    reported.
    """
    opts = opts or MinimizeOptions()
    event.check(op)
    x0 = np.asarray(x0, dtype=float)
    v0 = _single(init)
    if np.max(np.abs(v0[0] - x0)) > 1e-9 * (1.0 + np.max(np.abs(x0))):
        raise ValueError("initial path must start at x0")
    drift_s = drift if drift.differentiable else drift.smoothed(opts.eta)
    if not drift_s.differentiable:
        raise ValueError(f"{type(drift).__name__} cannot be minimized (no smooth surrogate)")
    dt = init.dt
    K = init.n_steps
    skel = skeleton_flow(SimConfig(op, drift_s, x0, init.T, K)).values
    in_event = bool(event.hit(op, skel))
    pinned = event.observable == "terminal_mode"
    rng = np.random.Generator(np.random.Philox(np.random.SeedSequence(opts.seed)))

    if in_event:
        starts = [skel]
        active = None
    else:
        starts = [v0]
        active = event
    scale = 0.1 * (1.0 + abs(event.threshold))
    for _ in range(1, opts.n_starts):
        starts.append(starts[0] + _smooth_perturbation(rng, K, op.n_modes, scale, pin_end=True))

    best = None
    start_actions = []
    for start in starts:
        values, iters, gn = _solve_event(op, drift_s, x0, active, start, dt, opts, pinned)
        f = drift_action(op, drift_s, x0, PathOnGrid(init.t, values)).value
        start_actions.append(f)
        if best is None or f < best[0]:
            best = (f, values, iters, gn)
    f, values, iters, gn = best
    path = PathOnGrid(init.t, values)
    violation = max(0.0, event.threshold - float(event.value(op, values)))
    result = MinimizeResult(
        path=path,
        action=drift_action(op, drift, x0, path),
        smoothed_action=drift_action(op, drift_s, x0, path),
        grad_norm=gn,
        converged=bool(gn <= opts.tol and violation <= opts.constraint_tol),
        n_iter=iters,
        constraint_violation=violation,
        skeleton_in_event=in_event,
        start_actions=start_actions,
    )
    if not result.converged:
        result.message = f"not converged: gradient norm {gn:.3g}, violation {violation:.3g}"
    if opts.probe_margin > 0:
        probe_event = event.shifted(opts.probe_margin)
        probe_in_event = bool(probe_event.hit(op, skel))
        if probe_in_event:
            probe_start, probe_active = skel, None
        else:
            probe_start = values.copy()
            s = np.linspace(0.0, 1.0, K + 1)
            if pinned:
                probe_start[:, event.mode] += opts.probe_margin * s
            probe_active = probe_event
        pv, _, _ = _solve_event(op, drift_s, x0, probe_active, probe_start, dt, opts, pinned)
        result.probe_threshold = probe_event.threshold
        result.probe_action = drift_action(op, drift, x0, PathOnGrid(init.t, pv)).value
    return result


@dataclass
class SkeletonCandidate:
    path: PathOnGrid
    action: float
    smoothed_action: float
    grad_norm: float
    distance_from_flow: float


def find_skeletons(op: SpectralOperator, drift: Drift, x0, T: float, n_steps: int,
                   n_starts: int = 8, seed: int = 0, action_tol: float = 1e-3,
                   opts: MinimizeOptions | None = None, min_separation: float = 1e-2,
                   amplitude: float = 1.0) -> list[SkeletonCandidate]:
    """Distinct near-zero-action paths from ``x0`` found by multi-start descent.

    Starts are the unperturbed flow plus random smooth perturbations with a
    free end.  Minimizers whose action is below ``action_tol`` are kept
    when they differ from all earlier ones by more than ``min_separation``
    in the max norm.  This samples the zero set; it does not enumerate it.
    """
    opts = opts or MinimizeOptions()
    x0 = np.asarray(x0, dtype=float)
    drift_s = drift if drift.differentiable else drift.smoothed(opts.eta)
    t = np.linspace(0.0, T, n_steps + 1)
    skel = skeleton_flow(SimConfig(op, drift_s, x0, T, n_steps)).values
    rng = np.random.Generator(np.random.Philox(np.random.SeedSequence([opts.seed, seed])))
    s = np.linspace(0.0, 1.0, n_steps + 1)[:, None] ** 2
    decay = amplitude / (1.0 + np.abs(op.frequencies))
    starts = [skel] + [skel + s * rng.normal(scale=decay) for _ in range(n_starts - 1)]
    found: list[SkeletonCandidate] = []
    for start in starts:
        values, iters, gn = _solve_event(op, drift_s, x0, None, start, T / n_steps, opts, False)
        path = PathOnGrid(t, values)
        s_act = drift_action(op, drift_s, x0, path).value
        if s_act > action_tol:
            continue
        if any(np.max(np.abs(values - c.path.values)) <= min_separation for c in found):
            continue
        found.append(SkeletonCandidate(path, drift_action(op, drift, x0, path).value, s_act, gn,
                                       float(np.max(np.abs(values - skel)))))
    return found
