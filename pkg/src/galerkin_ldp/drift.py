"""Drift maps B and their bounded, mollified regularizations B_R.

Every drift is an immutable object called as ``drift(op, x)`` on mode
coefficient arrays of shape ``(..., n_modes)``.  Each declares a growth
envelope ``(a, b)`` with ``||B(x)|| <= a + b ||x||`` in H.

The regularization pipeline takes a drift B and a level ``R >= 1`` to

1. the cutoff ``B'_R(x) = rho(||B(x)||) B(x)``, equal to B wherever
   ``||B(x)|| <= a + bR``;
2. a Gaussian mollification ``x -> E[B'_R(e^{tau A} x + Y)]`` with
   ``Y ~ W_A(tau)``, averaged over a fixed antithetic sample set;
3. a second cutoff, which keeps ``||B_R|| <= a + bR + 1`` everywhere.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .spectral import SpectralOperator, fractional_power_norm, from_grid, to_grid

CUTOFF_LIPSCHITZ = 1.5  # max slope of the cubic smoothstep


class Drift:
    """Common interface; subclasses are frozen dataclasses."""

    differentiable = True

    def __call__(self, op: SpectralOperator, x) -> np.ndarray:
        raise NotImplementedError

    @property
    def envelope(self) -> tuple[float, float]:
        raise NotImplementedError

    def vjp(self, op: SpectralOperator, x, v) -> np.ndarray:
        """Row-vector Jacobian product ``v^T DB(x)``, batched over leading axes."""
        raise NotImplementedError(f"{type(self).__name__} has no derivative")

    def smoothed(self, eta: float) -> "Drift":
        return self

    def to_config(self) -> dict:
        raise NotImplementedError


@dataclass(frozen=True)
class ZeroDrift(Drift):
    def __call__(self, op, x):
        return np.zeros(np.shape(x))

    @property
    def envelope(self):
        return (0.0, 0.0)

    def vjp(self, op, x, v):
        return np.zeros(np.shape(v))

    def to_config(self):
        return {"variant": "zero"}


@dataclass(frozen=True)
class ConstantDrift(Drift):
    """``B(x) = c`` for a fixed field c."""

    value: tuple

    def __call__(self, op, x):
        c = np.asarray(self.value, dtype=float)
        return np.broadcast_to(c, np.shape(x)).copy()

    @property
    def envelope(self):
        return (float(np.linalg.norm(self.value)), 0.0)

    def vjp(self, op, x, v):
        return np.zeros(np.shape(v))

    def to_config(self):
        return {"variant": "constant", "value": list(map(float, self.value))}


def _phases(n_modes: int) -> np.ndarray:
    return 0.7 * np.arange(n_modes) + 0.3


@dataclass(frozen=True)
class AffineBoundedDrift(Drift):
    """Smooth test map ``a sin(x + theta) / sqrt(N) + b * shift(x)``.

    The sine is taken coefficientwise with fixed phases ``theta_n``, so its
    H-norm never exceeds ``a``; ``shift`` cyclically permutes the modes and
    preserves the norm.  Globally Lipschitz with constant ``a/sqrt(N) + b``.
    """

    a: float = 1.0
    b: float = 0.0

    def __post_init__(self):
        if self.a < 0 or self.b < 0:
            raise ValueError("affine_bounded drift needs a, b >= 0")

    def __call__(self, op, x):
        x = np.asarray(x, dtype=float)
        n = x.shape[-1]
        out = (self.a / math.sqrt(n)) * np.sin(x + _phases(n))
        if self.b:
            out = out + self.b * np.roll(x, 1, axis=-1)
        return out

    @property
    def envelope(self):
        return (float(self.a), float(self.b))

    def lipschitz_for(self, n_modes: int) -> float:
        return self.a / math.sqrt(n_modes) + self.b

    def vjp(self, op, x, v):
        x = np.asarray(x, dtype=float)
        v = np.asarray(v, dtype=float)
        n = x.shape[-1]
        out = v * (self.a / math.sqrt(n)) * np.cos(x + _phases(n))
        if self.b:
            out = out + self.b * np.roll(v, -1, axis=-1)
        return out

    def to_config(self):
        return {"variant": "affine_bounded", "a": self.a, "b": self.b}


@dataclass(frozen=True)
class PowerDrift(Drift):
    """Pointwise power ``scale * |u|^gamma`` evaluated on the torus grid.

    With ``eta > 0`` the profile is replaced by the smooth surrogate
    ``(u^2 + eta^2)^(gamma/2) - eta^gamma``, which still vanishes at 0 and
    never exceeds ``|u|^gamma``.
    """

    gamma: float = 0.5
    scale: float = 1.0
    eta: float = 0.0

    def __post_init__(self):
        if not 0.0 < self.gamma < 1.0:
            raise ValueError(f"gamma must lie in (0, 1), got {self.gamma}")
        if self.scale < 0 or self.eta < 0:
            raise ValueError("scale and eta must be nonnegative")

    @property
    def differentiable(self):
        return self.eta > 0

    def profile(self, u):
        if self.eta == 0:
            return np.abs(u) ** self.gamma
        return (u * u + self.eta ** 2) ** (0.5 * self.gamma) - self.eta ** self.gamma

    def profile_derivative(self, u):
        if self.eta == 0:
            raise ValueError("power drift is not differentiable at 0; use smoothed(eta)")
        return self.gamma * u * (u * u + self.eta ** 2) ** (0.5 * self.gamma - 1.0)

    def __call__(self, op, x):
        return from_grid(op, self.scale * self.profile(to_grid(op, x)))

    @property
    def envelope(self):
        # Young: |u|^g <= (1-g) + g|u|, then the L2 norm over the torus
        return (self.scale * (1.0 - self.gamma) * math.sqrt(2.0 * math.pi), self.scale * self.gamma)

    def vjp(self, op, x, v):
        u = to_grid(op, x)
        v = np.asarray(v, dtype=float)
        return (self.scale * self.profile_derivative(u) * (v @ op.analysis)) @ op.synthesis

    def smoothed(self, eta):
        if self.eta > 0 or eta <= 0:
            return self
        return PowerDrift(self.gamma, self.scale, float(eta))

    def to_config(self):
        return {"variant": "power", "gamma": self.gamma, "scale": self.scale, "eta": self.eta}


@dataclass(frozen=True)
class ShiftedDrift(Drift):
    """``omega * x + inner(x)``: moves a shift of the linear part into the drift."""

    omega: float
    inner: Drift

    @property
    def differentiable(self):
        return self.inner.differentiable

    def __call__(self, op, x):
        x = np.asarray(x, dtype=float)
        return self.omega * x + self.inner(op, x)

    @property
    def envelope(self):
        a, b = self.inner.envelope
        return (a, b + abs(self.omega))

    def vjp(self, op, x, v):
        return self.omega * np.asarray(v, dtype=float) + self.inner.vjp(op, x, v)

    def smoothed(self, eta):
        return ShiftedDrift(self.omega, self.inner.smoothed(eta))

    def to_config(self):
        return {"variant": "shifted", "omega": self.omega, "inner": self.inner.to_config()}


def eval_drift(spec: Drift, op: SpectralOperator, x) -> np.ndarray:
    return spec(op, x)


def smoothstep(t):
    t = np.clip(t, 0.0, 1.0)
    return t * t * (3.0 - 2.0 * t)


def cutoff_rho(R: float, a: float, b: float, r):
    """C^1 cutoff: 1 on ``[0, a+bR]``, 0 on ``[a+bR+1, inf)``, cubic in between.

    The slope never exceeds ``CUTOFF_LIPSCHITZ`` in absolute value.
    """
    if R < 1:
        raise ValueError(f"R must be >= 1, got {R}")
    out = 1.0 - smoothstep(np.asarray(r, dtype=float) - (a + b * R))
    return float(out) if out.ndim == 0 else out


def cutoff_field(R: float, a: float, b: float, field_values: np.ndarray) -> np.ndarray:
    """``rho(||f||) f`` along the trailing axis."""
    norms = np.linalg.norm(field_values, axis=-1, keepdims=True)
    return cutoff_rho(R, a, b, norms) * field_values


def cutoff_drift(op, inner: Drift, R: float, x) -> np.ndarray:
    """``B'_R(x) = rho(||B(x)||) B(x)``."""
    a, b = inner.envelope
    return cutoff_field(R, a, b, inner(op, x))


@dataclass(frozen=True)
class MollifyParams:
    """Mollification scale ``delta_R`` and the Gaussian sample set used for it."""

    delta_R: float
    lambda0: float
    n_mc: int = 256
    seed: int = 0

    def __post_init__(self):
        if self.delta_R <= 0 or self.lambda0 <= 0:
            raise ValueError("delta_R and lambda0 must be positive")
        if self.n_mc < 2 or self.n_mc % 2:
            raise ValueError("n_mc must be a positive even number (antithetic pairs)")

    @property
    def tau_R(self) -> float:
        return self.delta_R ** 3 / (2.0 * self.lambda0)

    def check_level(self, R: float):
        if R < 1:
            raise ValueError(f"R must be >= 1, got {R}")
        if not self.delta_R < 1.0 / R:
            raise ValueError(f"delta_R={self.delta_R} must be below 1/R={1.0 / R}")


def convolution_samples(op: SpectralOperator, tau: float, n_mc: int, seed: int) -> np.ndarray:
    """Antithetic draws of ``W_A(tau)``: per-mode variance ``(1 - e^{-2 lam tau}) / (2 lam)``."""
    var = -np.expm1(-2.0 * op.eigenvalues * tau) / (2.0 * op.eigenvalues)
    gen = np.random.Generator(np.random.Philox(np.random.SeedSequence(seed)))
    half = gen.standard_normal((n_mc // 2, op.n_modes)) * np.sqrt(var)
    return np.concatenate([half, -half])


_MOLLIFY_ELEMENTS = 2 ** 20


def mollify_BR(op, inner: Drift, R: float, p: MollifyParams, x) -> np.ndarray:
    """Average of ``B'_R(e^{tau A} x + y)`` over the fixed sample set ``y``."""
    p.check_level(R)
    x = np.asarray(x, dtype=float)
    if x.shape[-1] != op.n_modes:
        raise ValueError(f"field has {x.shape[-1]} modes, operator has {op.n_modes}")
    y = convolution_samples(op, p.tau_R, p.n_mc, p.seed)
    decay = np.exp(-op.eigenvalues * p.tau_R)
    flat = x.reshape(-1, op.n_modes)
    out = np.empty_like(flat)
    step = max(1, _MOLLIFY_ELEMENTS // (p.n_mc * op.n_modes))
    for s in range(0, flat.shape[0], step):
        pts = (decay * flat[s:s + step])[:, None, :] + y
        out[s:s + step] = cutoff_drift(op, inner, R, pts).mean(axis=1)
    return out.reshape(x.shape)


def regularized_BR(op, inner: Drift, R: float, p: MollifyParams, x) -> np.ndarray:
    """Mollified cutoff drift followed by the recutoff; norm at most ``a + bR + 1``."""
    a, b = inner.envelope
    return cutoff_field(R, a, b, mollify_BR(op, inner, R, p, x))


@dataclass(frozen=True)
class RegularizedDrift(Drift):
    R: float
    inner: Drift
    params: MollifyParams = field(repr=False)

    differentiable = False

    def __post_init__(self):
        self.params.check_level(self.R)

    def __call__(self, op, x):
        return regularized_BR(op, self.inner, self.R, self.params, x)

    @property
    def envelope(self):
        a, b = self.inner.envelope
        return (a + b * self.R + 1.0, 0.0)

    def to_config(self):
        return {
            "variant": "regularized", "R": self.R, "inner": self.inner.to_config(),
            "delta_R": self.params.delta_R, "n_mc": self.params.n_mc, "seed": self.params.seed,
        }


def default_alpha(op: SpectralOperator) -> float:
    """Exponent of the V-norm defining the sets ``F_R = {||x||_V <= R}``."""
    return op.delta / 4.0


def sample_ball(op: SpectralOperator, alpha: float, R: float, n: int, seed: int,
                boundary_fraction: float = 0.5) -> np.ndarray:
    """Random points of ``{||x||_V <= R}`` that also satisfy ``||x||_H <= R``.

    Directions are Gaussian; a ``boundary_fraction`` of the points sits on
    the sphere of radius R, the rest have radius uniform in ``[0, R]``.
    """
    gen = np.random.Generator(np.random.Philox(np.random.SeedSequence(seed)))
    d = gen.standard_normal((n, op.n_modes))
    d /= fractional_power_norm(op, alpha, d)[:, None]
    radius = R * gen.uniform(size=n)
    radius[: int(round(boundary_fraction * n))] = R
    x = radius[:, None] * d
    h = np.linalg.norm(x, axis=-1)
    shrink = np.minimum(1.0, R / np.maximum(h, 1e-300))
    return x * shrink[:, None]


def modulus_probe(op, inner: Drift, R: float, alpha: float | None = None, n_pairs: int = 256,
                  seed: int = 0, target: float | None = None, max_halvings: int = 30) -> float:
    """Empirical uniform-continuity scale of ``B'_R`` on ``F_{R+1}``.

    Returns the largest ``delta = 2^-j / (2R)`` for which every sampled pair
    with ``||x - x'||_V = delta`` has ``||B'_R(x) - B'_R(x')|| < target``
    (default ``1/R^2``).  Falls back to the last candidate tried.
    """
    alpha = default_alpha(op) if alpha is None else alpha
    target = 1.0 / R ** 2 if target is None else target
    x = sample_ball(op, alpha, R + 1.0, n_pairs, seed, boundary_fraction=0.25)
    gen = np.random.Generator(np.random.Philox(np.random.SeedSequence([seed, 1])))
    d = gen.standard_normal((n_pairs, op.n_modes))
    d /= fractional_power_norm(op, alpha, d)[:, None]
    base = cutoff_drift(op, inner, R, x)
    delta = 1.0 / (2.0 * R)
    for _ in range(max_halvings):
        moved = cutoff_drift(op, inner, R, x + delta * d)
        if np.max(np.linalg.norm(moved - base, axis=-1)) < target:
            break
        delta *= 0.5
    return delta


def default_mollify_params(op, inner: Drift, R: float, n_mc: int = 256, seed: int = 0,
                           alpha: float | None = None, n_pairs: int = 256) -> MollifyParams:
    """``delta_R = min(1/(2R), modulus_probe(R))``."""
    delta = min(1.0 / (2.0 * R), modulus_probe(op, inner, R, alpha, n_pairs, seed))
    return MollifyParams(delta, op.lambda0, n_mc, seed)


@dataclass
class ApproxScan:
    R: list
    max_error: list
    delta_R: list
    tau_R: list
    slope: float

    @property
    def strictly_decreasing(self) -> bool:
        return all(e1 < e0 for e0, e1 in zip(self.max_error, self.max_error[1:]))

    def rows(self) -> list[dict]:
        return [
            {"R": r, "max_error": e, "delta_R": d, "tau_R": t}
            for r, e, d, t in zip(self.R, self.max_error, self.delta_R, self.tau_R)
        ]


def loglog_slope(xs, ys) -> float:
    xs = np.asarray(xs, dtype=float)
    ys = np.asarray(ys, dtype=float)
    if np.any(ys <= 0) or xs.size < 2:
        return float("nan")
    return float(np.polyfit(np.log(xs), np.log(ys), 1)[0])


def approx_error_scan(op, inner: Drift, R_list, p_schedule=None, sample_budget: int = 512,
                      seed: int = 0, alpha: float | None = None) -> ApproxScan:
    """Empirical ``sup_{F_R} ||B_R(x) - B(x)||`` for each R and the log-log slope.

    ``p_schedule`` maps R to :class:`MollifyParams`; by default
    :func:`default_mollify_params` is used.
    """
    R_list = [float(r) for r in R_list]
    if not R_list:
        raise ValueError("R_list must not be empty")
    if any(r1 <= r0 for r0, r1 in zip(R_list, R_list[1:])):
        raise ValueError("R_list must be strictly increasing")
    alpha = default_alpha(op) if alpha is None else alpha
    if p_schedule is None:
        def p_schedule(R):
            return default_mollify_params(op, inner, R, seed=seed, alpha=alpha)
    errs, deltas, taus = [], [], []
    for i, R in enumerate(R_list):
        p = p_schedule(R)
        x = sample_ball(op, alpha, R, sample_budget, seed + 7919 * (i + 1))
        diff = regularized_BR(op, inner, R, p, x) - inner(op, x)
        errs.append(float(np.max(np.linalg.norm(diff, axis=-1))))
        deltas.append(p.delta_R)
        taus.append(p.tau_R)
    return ApproxScan(R_list, errs, deltas, taus, loglog_slope(R_list, errs))


def lipschitz_estimate(op, drift: Drift, R: float, alpha: float | None = None,
                       n_pairs: int = 512, seed: int = 0, scale: float = 1e-3) -> float:
    """Largest sampled difference quotient ``||B(x) - B(x')||_H / ||x - x'||_V`` on ``F_R``."""
    alpha = default_alpha(op) if alpha is None else alpha
    x = sample_ball(op, alpha, R, n_pairs, seed)
    gen = np.random.Generator(np.random.Philox(np.random.SeedSequence([seed, 2])))
    steps = gen.standard_normal(x.shape)
    steps *= (scale * R / fractional_power_norm(op, alpha, steps))[:, None]
    num = np.linalg.norm(drift(op, x + steps) - drift(op, x), axis=-1)
    return float(np.max(num / fractional_power_norm(op, alpha, steps)))


def envelope_violations(op, drift: Drift, x) -> int:
    """Number of samples breaking ``||B(x)|| <= a + b||x||`` (with round-off slack)."""
    a, b = drift.envelope
    lhs = np.linalg.norm(drift(op, x), axis=-1)
    rhs = a + b * np.linalg.norm(x, axis=-1)
    return int(np.count_nonzero(lhs > rhs * (1.0 + 1e-12) + 1e-12))


def drift_from_config(cfg: dict, op: SpectralOperator | None = None) -> Drift:
    """Build a drift from its JSON block (see ``to_config`` of each variant)."""
    variant = cfg.get("variant")
    if variant == "zero":
        return ZeroDrift()
    if variant == "constant":
        return ConstantDrift(tuple(float(v) for v in cfg["value"]))
    if variant == "affine_bounded":
        return AffineBoundedDrift(float(cfg.get("a", 1.0)), float(cfg.get("b", 0.0)))
    if variant == "power":
        return PowerDrift(float(cfg["gamma"]), float(cfg.get("scale", 1.0)), float(cfg.get("eta", 0.0)))
    if variant == "shifted":
        return ShiftedDrift(float(cfg["omega"]), drift_from_config(cfg["inner"], op))
    if variant == "regularized":
        if op is None:
            raise ValueError("regularized drift needs the operator")
        inner = drift_from_config(cfg["inner"], op)
        R = float(cfg["R"])
        n_mc = int(cfg.get("n_mc", 256))
        seed = int(cfg.get("seed", 0))
        if cfg.get("delta_R") is None:
            params = default_mollify_params(op, inner, R, n_mc, seed)
        else:
            params = MollifyParams(float(cfg["delta_R"]), op.lambda0, n_mc, seed)
        return RegularizedDrift(R, inner, params)
    raise ValueError(f"unknown drift variant {variant!r}")
