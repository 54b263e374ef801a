"""Diagonal linear operators on the torus and their semigroups.

The operator ``A`` is stored through the eigenvalues ``lam_n`` of ``-A``
(so ``A e_n = -lam_n e_n``).  A field is a plain float array of mode
coefficients with trailing axis of length ``n_modes``; any leading axes
are treated as a batch.

Mode ordering is ``k = 0, +1, -1, +2, -2, ...``.  Positive frequencies carry
``cos(k x) / sqrt(pi)``, negative ones ``sin(|k| x) / sqrt(pi)`` and the
constant mode is ``1 / sqrt(2 pi)``, all on ``[0, 2 pi)``.
"""
from __future__ import annotations

import math
import warnings
from dataclasses import dataclass, field
from functools import cached_property

import numpy as np

TWO_PI = 2.0 * math.pi


def mode_frequencies(n_modes: int) -> np.ndarray:
    """Signed integer frequency of each mode index."""
    k = np.zeros(n_modes, dtype=int)
    for n in range(1, n_modes):
        m = (n + 1) // 2
        k[n] = m if n % 2 == 1 else -m
    return k


def grid_size(n_modes: int) -> int:
    """Smallest power of two that is at least ``2 * n_modes``."""
    m = 1
    while m < 2 * n_modes:
        m *= 2
    return m


@dataclass(frozen=True, eq=False)
class SpectralOperator:
    """Self-adjoint negative operator given by its spectrum.

    Build instances through :func:`make_operator` (torus fractional
    Laplacian) or :func:`operator_from_eigenvalues` (explicit spectrum).
    """

    sigma: float
    omega: float
    n_modes: int
    eigenvalues: np.ndarray
    delta: float
    frequencies: np.ndarray = field(repr=False)

    def __post_init__(self):
        lam = np.asarray(self.eigenvalues, dtype=float)
        if lam.shape != (self.n_modes,):
            raise ValueError(f"expected {self.n_modes} eigenvalues, got shape {lam.shape}")
        if not np.all(np.isfinite(lam)) or np.any(lam <= 0):
            raise ValueError("eigenvalues must be finite and strictly positive")
        if np.any(np.diff(lam) < 0):
            raise ValueError("eigenvalues must be nondecreasing in the mode index")
        if not 0.0 < self.delta < 1.0:
            raise ValueError(f"delta must lie in (0, 1), got {self.delta}")
        lam.setflags(write=False)
        object.__setattr__(self, "eigenvalues", lam)

    @property
    def lambda0(self) -> float:
        return float(self.eigenvalues[0])

    @property
    def n_grid(self) -> int:
        return grid_size(self.n_modes)

    @cached_property
    def grid_points(self) -> np.ndarray:
        return TWO_PI * np.arange(self.n_grid) / self.n_grid

    @cached_property
    def synthesis(self) -> np.ndarray:
        """``(n_grid, n_modes)`` matrix of basis functions sampled on the grid."""
        x = self.grid_points[:, None]
        k = self.frequencies[None, :]
        basis = np.where(k > 0, np.cos(k * x), np.sin(-k * x)) / math.sqrt(math.pi)
        basis[:, self.frequencies == 0] = 1.0 / math.sqrt(TWO_PI)
        basis.setflags(write=False)
        return basis

    @cached_property
    def analysis(self) -> np.ndarray:
        """``(n_modes, n_grid)`` discrete projection, exact inverse of :attr:`synthesis`."""
        a = (TWO_PI / self.n_grid) * self.synthesis.T
        a.setflags(write=False)
        return a

    def to_config(self) -> dict:
        return {
            "sigma": self.sigma,
            "omega": self.omega,
            "n_modes": self.n_modes,
            "delta": self.delta,
            "eigenvalues": self.eigenvalues.tolist(),
        }


def trace_gate_bound(sigma: float) -> float:
    """Supremum of admissible ``delta`` for the torus fractional Laplacian."""
    return 1.0 - 1.0 / (2.0 * sigma)


def make_operator(sigma: float, omega: float, n_modes: int, delta: float) -> SpectralOperator:
    """Shifted fractional Laplacian ``-(-Laplacian)^sigma - omega`` truncated to ``n_modes``.

    Raises ``ValueError`` when ``delta`` violates the trace-class condition
    ``delta < 1 - 1/(2 sigma)`` or when ``omega == 0`` (the constant mode
    would carry a zero eigenvalue).
    """
    if sigma <= 0:
        raise ValueError(f"sigma must be positive, got {sigma}")
    if n_modes < 1:
        raise ValueError(f"n_modes must be >= 1, got {n_modes}")
    if omega < 0:
        raise ValueError(f"omega must be nonnegative, got {omega}")
    gate = trace_gate_bound(sigma)
    if not (0.0 < delta < 1.0 and delta < gate):
        raise ValueError(
            f"trace-class gate violated: need 0 < delta < 1 - 1/(2 sigma) = {gate:g}, "
            f"got sigma={sigma}, delta={delta}"
        )
    if omega == 0:
        raise ValueError("omega must be > 0: the zero frequency would give eigenvalue 0")
    k = mode_frequencies(n_modes)
    lam = np.abs(k).astype(float) ** (2.0 * sigma) + omega
    return SpectralOperator(float(sigma), float(omega), int(n_modes), lam, float(delta), k)


def operator_from_eigenvalues(eigenvalues, delta: float, sigma: float = 1.0,
                              omega: float = 0.0) -> SpectralOperator:
    """Operator with an explicitly prescribed (finite) spectrum.

    A finite spectrum is trivially trace class, so only positivity and
    ordering are checked.  ``sigma``/``omega`` are kept as labels only.
    """
    lam = np.asarray(eigenvalues, dtype=float).ravel()
    if lam.size and lam.min() < 1e-4:
        warnings.warn(
            f"smallest eigenvalue {lam.min():g} is tiny: the semigroup is close to the "
            "identity and the dynamics approach pure Brownian motion",
            stacklevel=2,
        )
    return SpectralOperator(float(sigma), float(omega), lam.size, lam, float(delta),
                            mode_frequencies(lam.size))


def _check_field(op: SpectralOperator, x) -> np.ndarray:
    x = np.asarray(x, dtype=float)
    if x.shape[-1:] != (op.n_modes,):
        raise ValueError(f"field has trailing size {x.shape[-1:]}, operator has {op.n_modes} modes")
    return x


def apply_semigroup(op: SpectralOperator, t: float, x) -> np.ndarray:
    """``e^{tA} x``, mode by mode."""
    if t < 0:
        raise ValueError(f"t must be nonnegative, got {t}")
    x = _check_field(op, x)
    if t == 0:
        return x.copy()
    out = np.exp(-op.eigenvalues * t) * x
    if not np.all(np.isfinite(out)):
        raise FloatingPointError("non-finite value in semigroup output")
    return out


def fractional_power_norm(op: SpectralOperator, alpha: float, x) -> np.ndarray | float:
    """Norm of ``(-A)^alpha x`` in H; reduces over the trailing axis."""
    if alpha < 0:
        raise ValueError(f"alpha must be >= 0, got {alpha}")
    x = _check_field(op, x)
    y = x if alpha == 0 else op.eigenvalues ** alpha * x
    out = np.sqrt(np.sum(y * y, axis=-1))
    return float(out) if np.ndim(out) == 0 else out


def smoothing_constant(beta: float) -> float:
    """``max_{r >= 0} r^beta e^{-r} = (beta/e)^beta``."""
    return (beta / math.e) ** beta


def smoothing_ratio(op: SpectralOperator, beta: float, t: float, x) -> float:
    """``t^beta ||(-A)^beta e^{tA} x|| / ||x||``; never exceeds ``(beta/e)^beta``."""
    if t <= 0:
        raise ValueError(f"t must be positive, got {t}")
    if beta <= 0:
        raise ValueError(f"beta must be positive, got {beta}")
    x = _check_field(op, x)
    nx = np.linalg.norm(x)
    if nx == 0:
        raise ValueError("smoothing ratio undefined for the zero field")
    r = op.eigenvalues * t
    # (r^beta e^{-r}) directly, avoids overflow of lam^beta for stiff modes
    weights = np.exp(beta * np.log(r) - r)
    return float(np.linalg.norm(weights * x) / nx)


def to_grid(op: SpectralOperator, x) -> np.ndarray:
    """Physical values on ``op.n_grid`` uniform torus points."""
    x = _check_field(op, x)
    return x @ op.synthesis.T


def from_grid(op: SpectralOperator, u) -> np.ndarray:
    """Project grid values back onto the retained modes."""
    u = np.asarray(u, dtype=float)
    if u.shape[-1] < op.n_modes:
        raise ValueError(f"grid of size {u.shape[-1]} cannot represent {op.n_modes} modes")
    if u.shape[-1] != op.n_grid:
        raise ValueError(f"expected {op.n_grid} grid values, got {u.shape[-1]}")
    return u @ op.analysis.T


@dataclass(frozen=True)
class StepFactors:
    """Per-mode coefficients of one exact linear step of length ``dt``."""

    decay: np.ndarray        # e^{-lam dt}
    phi1: np.ndarray         # (1 - e^{-lam dt}) / (lam dt)
    noise_scale: np.ndarray  # sqrt((1 - e^{-2 lam dt}) / (2 lam dt))


def step_factors(op: SpectralOperator, dt: float) -> StepFactors:
    if dt <= 0:
        raise ValueError(f"dt must be positive, got {dt}")
    z = op.eigenvalues * dt
    return StepFactors(
        decay=np.exp(-z),
        phi1=-np.expm1(-z) / z,
        noise_scale=np.sqrt(-np.expm1(-2.0 * z) / (2.0 * z)),
    )
