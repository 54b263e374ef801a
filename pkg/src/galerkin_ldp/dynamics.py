"""Mild-form integration, the skeleton map and Girsanov weights.

All trajectories use the exponential Euler recursion

    z_{k+1} = e^{-lam dt} z_k + phi1 dt B(z_k) + (increment of the perturbation),

with the drift frozen at the left endpoint.  The noisy equation is the
skeleton map applied to the perturbation ``eps * W_A``, so ``eps = 0`` and a
zero perturbation run literally the same arithmetic.
"""
from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np

from .drift import Drift, ZeroDrift
from .noise import NoiseIncrements, PathOnGrid, convolve
from .spectral import SpectralOperator, StepFactors, fractional_power_norm, step_factors


class BlowupError(FloatingPointError):
    """A trajectory became non-finite; ``step`` is the first offending grid index."""

    def __init__(self, step: int, sample: int | None = None):
        where = f" (sample {sample})" if sample is not None else ""
        super().__init__(f"non-finite state at step {step}{where}; try a smaller dt")
        self.step = step
        self.sample = sample


@dataclass(frozen=True, eq=False)
class SimConfig:
    op: SpectralOperator
    drift: Drift = field(default_factory=ZeroDrift)
    x0: np.ndarray | None = None
    T: float = 1.0
    n_steps: int = 100
    eps: float = 0.0

    def __post_init__(self):
        if not self.T > 0:
            raise ValueError(f"T must be positive, got {self.T}")
        if self.n_steps < 1:
            raise ValueError(f"n_steps must be >= 1, got {self.n_steps}")
        if self.eps < 0:
            raise ValueError(f"eps must be nonnegative, got {self.eps}")
        x0 = np.zeros(self.op.n_modes) if self.x0 is None else np.array(self.x0, dtype=float)
        if x0.shape != (self.op.n_modes,) or not np.all(np.isfinite(x0)):
            raise ValueError(f"x0 must be a finite field with {self.op.n_modes} modes")
        x0.setflags(write=False)
        object.__setattr__(self, "x0", x0)

    @property
    def dt(self) -> float:
        return self.T / self.n_steps

    @property
    def t_grid(self) -> np.ndarray:
        return np.linspace(0.0, self.T, self.n_steps + 1)

    @property
    def x0_norm(self) -> float:
        """``||x0||`` in ``D((-A)^{delta/2})``."""
        return fractional_power_norm(self.op, self.op.delta / 2.0, self.x0)

    def with_eps(self, eps: float) -> "SimConfig":
        return replace(self, eps=float(eps))

    def with_drift(self, drift: Drift) -> "SimConfig":
        return replace(self, drift=drift)

    def factors(self) -> StepFactors:
        return step_factors(self.op, self.dt)


def drift_step(cfg: SimConfig, f: StepFactors, z: np.ndarray) -> np.ndarray:
    """Deterministic part of one step: ``e^{-lam dt} z + phi1 dt B(z)``."""
    return f.decay * z + (f.phi1 * cfg.dt) * cfg.drift(cfg.op, z)


def _first_bad(values: np.ndarray) -> tuple[int, int | None]:
    bad = ~np.all(np.isfinite(values), axis=-1)  # (..., K+1)
    steps = np.nonzero(bad.reshape(-1, bad.shape[-1]).any(axis=0))[0]
    step = int(steps[0])
    if bad.ndim == 1:
        return step, None
    sample = int(np.nonzero(bad.reshape(-1, bad.shape[-1])[:, step])[0][0])
    return step, sample


def _check_grid(cfg: SimConfig, n_steps: int, n_modes: int):
    if n_steps != cfg.n_steps or n_modes != cfg.op.n_modes:
        raise ValueError(
            f"grid mismatch: got {n_steps} steps x {n_modes} modes, "
            f"config has {cfg.n_steps} x {cfg.op.n_modes}"
        )


def _skeleton(cfg: SimConfig, w: np.ndarray) -> np.ndarray:
    """Solve ``z = e^{tA}x0 + int e^{(t-s)A} B(z) ds + w`` on the grid.

    Writes ``z = v + w`` and steps ``v_{k+1} = e^{-lam dt} v_k + phi1 dt B(z_k)``.
    """
    f = cfg.factors()
    coef = f.phi1 * cfg.dt
    v = np.empty(w.shape)
    z = np.empty(w.shape)
    v[..., 0, :] = cfg.x0
    z[..., 0, :] = cfg.x0 + w[..., 0, :]
    with np.errstate(over="ignore", invalid="ignore"):
        for k in range(w.shape[-2] - 1):
            v[..., k + 1, :] = f.decay * v[..., k, :] + coef * cfg.drift(cfg.op, z[..., k, :])
            z[..., k + 1, :] = v[..., k + 1, :] + w[..., k + 1, :]
    if not np.all(np.isfinite(z)):
        raise BlowupError(*_first_bad(z))
    return z


def gamma_B(cfg: SimConfig, w: PathOnGrid) -> PathOnGrid:
    """Skeleton map: the solution driven by the additive perturbation path ``w``."""
    _check_grid(cfg, w.n_steps, w.n_modes)
    if not np.allclose(w.values[..., 0, :], 0.0, atol=1e-12):
        raise ValueError("perturbation path must start at 0")
    return PathOnGrid(cfg.t_grid, _skeleton(cfg, w.values))


def integrate_mild(cfg: SimConfig, incs: NoiseIncrements) -> PathOnGrid:
    """Exponential Euler for ``dX = (AX + B(X))dt + eps dW`` with ``X_0 = x0``."""
    _check_grid(cfg, incs.n_steps, incs.n_modes)
    if abs(incs.dt - cfg.dt) > 1e-12 * cfg.dt:
        raise ValueError(f"increments use dt={incs.dt}, config has dt={cfg.dt}")
    w = cfg.eps * convolve(cfg.op, incs).values
    return PathOnGrid(cfg.t_grid, _skeleton(cfg, w))


def skeleton_flow(cfg: SimConfig) -> PathOnGrid:
    """Unperturbed trajectory (``eps = 0``)."""
    return PathOnGrid(cfg.t_grid, _skeleton(cfg, np.zeros((cfg.n_steps + 1, cfg.op.n_modes))))


def gamma_B_inverse(cfg: SimConfig, z: PathOnGrid, atol: float = 1e-9) -> PathOnGrid:
    """``w_t = z_t - e^{tA}x0 - int_0^t e^{(t-s)A} B(z_s) ds`` with the trapezoid rule."""
    _check_grid(cfg, z.n_steps, z.n_modes)
    vals = z.values
    mismatch = np.max(np.abs(vals[..., 0, :] - cfg.x0))
    if mismatch > atol * (1.0 + np.max(np.abs(cfg.x0))):
        raise ValueError(f"path starts {mismatch:.3g} away from x0")
    f = cfg.factors()
    half = 0.5 * cfg.dt
    b = cfg.drift(cfg.op, vals)
    integral = np.zeros(vals.shape)
    for k in range(vals.shape[-2] - 1):
        integral[..., k + 1, :] = f.decay * (integral[..., k, :] + half * b[..., k, :]) + half * b[..., k + 1, :]
    free = np.exp(-np.outer(cfg.t_grid, cfg.op.eigenvalues)) * cfg.x0
    w = vals - free - integral
    w[..., 0, :] = 0.0
    return PathOnGrid(z.t, w)


def girsanov_log_weight(cfg: SimConfig, z: PathOnGrid, incs: NoiseIncrements) -> np.ndarray | float:
    """``xi_T = eps^-1 sum <B(z_k), dW_k> - eps^-2/2 sum ||B(z_k)||^2 dt`` (left points).

    Batched over leading axes of ``z.values`` and ``incs.increments``.
    """
    if cfg.eps <= 0:
        raise ValueError("Girsanov weight needs eps > 0")
    _check_grid(cfg, z.n_steps, z.n_modes)
    b = cfg.drift(cfg.op, z.values[..., :-1, :])
    dw = incs.increments
    linear = np.sum(b * dw, axis=(-2, -1))
    quad = np.sum(b * b, axis=(-2, -1)) * cfg.dt
    xi = linear / cfg.eps - quad / (2.0 * cfg.eps ** 2)
    return float(xi) if np.ndim(xi) == 0 else xi


def exptight_ratio(cfg: SimConfig, x: PathOnGrid, w: PathOnGrid) -> float:
    """``max_t ||X_t||_V0 / (||x0||_V0 + ||eps W_A(t)||_V0 + 1)`` with ``V0 = D((-A)^{delta/2})``.

    ``w`` is the unit-amplitude convolution that drove ``x``.
    """
    alpha = cfg.op.delta / 2.0
    num = fractional_power_norm(cfg.op, alpha, x.values)
    den = cfg.x0_norm + cfg.eps * fractional_power_norm(cfg.op, alpha, w.values) + 1.0
    return float(np.max(num / den))
