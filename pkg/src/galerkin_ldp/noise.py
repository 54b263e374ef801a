"""Truncated cylindrical Wiener noise and the stochastic convolution.

Randomness is organised in fixed blocks of ``BLOCK`` consecutive sample
indices.  Each block owns an independent Philox (counter-based) stream keyed
by ``(seed, block)``, so the increments of sample ``i`` depend only on the
seed, ``i`` and the array shape, never on how many samples were requested
or how the work was split between workers.
"""
from __future__ import annotations

import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass

import numpy as np

from .spectral import SpectralOperator, fractional_power_norm, step_factors
from .stats import wilson_interval

BLOCK = 256
_CHUNK_ELEMENTS = 2 ** 21


@dataclass(frozen=True, eq=False)
class NoiseIncrements:
    """Brownian increments, shape ``(n_steps, n_modes)`` or ``(n_samples, n_steps, n_modes)``."""

    dt: float
    increments: np.ndarray
    seed: int
    start: int = 0

    @property
    def n_steps(self) -> int:
        return self.increments.shape[-2]

    @property
    def n_modes(self) -> int:
        return self.increments.shape[-1]

    def shifted(self, extra: np.ndarray) -> "NoiseIncrements":
        """Increments with a deterministic per-step shift added (same seed label)."""
        return NoiseIncrements(self.dt, self.increments + extra, self.seed, self.start)


@dataclass(frozen=True, eq=False)
class PathOnGrid:
    """Trajectory on a uniform grid; ``values`` has shape ``(..., K+1, n_modes)``."""

    t: np.ndarray
    values: np.ndarray

    def __post_init__(self):
        t = np.asarray(self.t, dtype=float)
        if t.ndim != 1 or t.size < 2 or t[0] != 0.0:
            raise ValueError("time grid must be 1-d, start at 0 and hold at least two nodes")
        steps = np.diff(t)
        if np.any(steps <= 0) or not np.allclose(steps, steps[0], rtol=1e-9, atol=0.0):
            raise ValueError("time grid must be uniform")
        if self.values.shape[-2] != t.size:
            raise ValueError(f"{t.size} time nodes but values have {self.values.shape[-2]}")

    @classmethod
    def on_uniform_grid(cls, T: float, values) -> "PathOnGrid":
        values = np.asarray(values, dtype=float)
        return cls(np.linspace(0.0, T, values.shape[-2]), values)

    @property
    def T(self) -> float:
        return float(self.t[-1])

    @property
    def n_steps(self) -> int:
        return self.t.size - 1

    @property
    def dt(self) -> float:
        return self.T / self.n_steps

    @property
    def n_modes(self) -> int:
        return self.values.shape[-1]

    @property
    def terminal(self) -> np.ndarray:
        return self.values[..., -1, :]

    def __getitem__(self, item) -> "PathOnGrid":
        """Select samples from a batch of paths."""
        return PathOnGrid(self.t, self.values[item])


def _block_normals(seed: int, block: int, n_steps: int, n_modes: int) -> np.ndarray:
    ss = np.random.SeedSequence(seed, spawn_key=(block,))
    gen = np.random.Generator(np.random.Philox(ss))
    return gen.standard_normal((BLOCK, n_steps, n_modes))


def standard_normals(seed: int, start: int, count: int, n_steps: int, n_modes: int) -> np.ndarray:
    """Standard normals for sample indices ``start .. start+count-1``."""
    if count < 1:
        raise ValueError("count must be >= 1")
    first, last = start // BLOCK, (start + count - 1) // BLOCK
    blocks = [_block_normals(seed, b, n_steps, n_modes) for b in range(first, last + 1)]
    stacked = blocks[0] if len(blocks) == 1 else np.concatenate(blocks)
    offset = start - first * BLOCK
    return stacked[offset:offset + count]


def sample_increments(rng_seed: int, n_modes: int, n_steps: int, dt: float,
                      n_samples: int | None = None, start: int = 0) -> NoiseIncrements:
    """Independent ``Normal(0, dt)`` increments.

    With ``n_samples=None`` a single path (sample index ``start``) is returned
    with shape ``(n_steps, n_modes)``.
    """
    if n_steps < 1:
        raise ValueError("n_steps must be >= 1")
    if dt <= 0:
        raise ValueError("dt must be positive")
    count = 1 if n_samples is None else n_samples
    z = standard_normals(rng_seed, start, count, n_steps, n_modes) * math.sqrt(dt)
    if n_samples is None:
        z = z[0]
    return NoiseIncrements(float(dt), z, rng_seed, start)


def convolve(op: SpectralOperator, incs: NoiseIncrements) -> PathOnGrid:
    """Stochastic convolution ``W_A`` on the grid, exact in law at every node.

    Each step applies the exact Ornstein-Uhlenbeck transition; the Gaussian
    part is the stored Brownian increment rescaled to the transition
    variance ``(1 - e^{-2 lam dt}) / (2 lam)``.
    """
    if incs.n_modes != op.n_modes:
        raise ValueError(f"increments have {incs.n_modes} modes, operator has {op.n_modes}")
    f = step_factors(op, incs.dt)
    dw = incs.increments
    K = incs.n_steps
    w = np.zeros(dw.shape[:-2] + (K + 1, op.n_modes))
    for k in range(K):
        w[..., k + 1, :] = f.decay * w[..., k, :] + f.noise_scale * dw[..., k, :]
    return PathOnGrid(np.linspace(0.0, K * incs.dt, K + 1), w)


def chunk_size_for(n_steps: int, n_modes: int) -> int:
    per_sample = (n_steps + 1) * n_modes
    blocks = max(1, _CHUNK_ELEMENTS // (per_sample * BLOCK))
    return blocks * BLOCK


def chunked_map(fn, n_samples: int, chunk: int, workers: int = 1) -> list:
    """Apply ``fn(start, count)`` over fixed sample chunks, results in chunk order.

    Chunk boundaries do not depend on ``workers``, so aggregated results are
    identical for any worker count.
    """
    if n_samples < 1:
        raise ValueError("n_samples must be >= 1")
    spans = [(s, min(chunk, n_samples - s)) for s in range(0, n_samples, chunk)]
    if workers <= 1 or len(spans) == 1:
        return [fn(s, c) for s, c in spans]
    with ThreadPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(lambda sc: fn(*sc), spans))


@dataclass(frozen=True)
class TailEstimate:
    eps: float
    R: float
    n: int
    hits: int
    p_hat: float
    ci_lo: float
    ci_hi: float


def sup_norm_samples(op: SpectralOperator, alpha: float, T: float, n_steps: int,
                     n_samples: int, seed: int, workers: int = 1) -> np.ndarray:
    """``sup_k ||W_A(t_k)||_{D((-A)^alpha)}`` for each sample (noise amplitude one)."""
    dt = T / n_steps

    def run(start, count):
        incs = sample_increments(seed, op.n_modes, n_steps, dt, count, start)
        return fractional_power_norm(op, alpha, convolve(op, incs).values).max(axis=-1)

    chunk = chunk_size_for(n_steps, op.n_modes)
    return np.concatenate(chunked_map(run, n_samples, chunk, workers))


def tail_estimate(op: SpectralOperator, eps: float, R: float, alpha: float, n_samples: int,
                  seed: int, T: float = 1.0, n_steps: int = 100,
                  sups: np.ndarray | None = None) -> TailEstimate:
    """Monte Carlo estimate of ``P(sup_k ||eps W_A(t_k)||_alpha > R)`` with a Wilson interval.

    The sup runs over grid nodes only (no bridge correction).  Pass
    precomputed ``sups`` from :func:`sup_norm_samples` to reuse paths
    across several ``(eps, R)`` pairs.
    """
    if n_samples < 1:
        raise ValueError("n_samples must be >= 1")
    if sups is None:
        sups = sup_norm_samples(op, alpha, T, n_steps, n_samples, seed)
    else:
        n_samples = sups.size
    hits = int(np.count_nonzero(eps * sups > R))
    lo, hi = wilson_interval(hits, n_samples)
    return TailEstimate(float(eps), float(R), n_samples, hits, hits / n_samples, lo, hi)
