import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from scipy.integrate import quad

from galerkin_ldp.noise import (BLOCK, NoiseIncrements, PathOnGrid, chunked_map, convolve,
                                sample_increments, sup_norm_samples, tail_estimate)
from galerkin_ldp.spectral import make_operator, operator_from_eigenvalues


def _variance_tolerance(var, n, k=5.0):
    return k * var * math.sqrt(2.0 / (n - 1))


def test_increment_moments():
    n, dt = 100_000, 0.01
    incs = sample_increments(1, 3, 1, dt, n).increments[:, 0, :]
    assert np.all(np.abs(incs.mean(axis=0)) <= 4 * math.sqrt(dt / n))
    assert np.all(np.abs(incs.var(axis=0, ddof=1) / dt - 1.0) <= 0.05)


def test_same_seed_bitwise():
    a = sample_increments(42, 4, 10, 0.1, 300).increments
    b = sample_increments(42, 4, 10, 0.1, 300).increments
    np.testing.assert_array_equal(a, b)
    c = sample_increments(43, 4, 10, 0.1, 300).increments
    assert not np.array_equal(a, c)


def test_dt_rescaling():
    small = sample_increments(5, 2, 1, 0.01, 50_000).increments
    big = sample_increments(5, 2, 1, 0.04, 50_000).increments
    np.testing.assert_allclose(big.std(axis=0) / small.std(axis=0), 2.0, rtol=1e-12)
    indep = sample_increments(6, 2, 1, 0.04, 50_000).increments
    np.testing.assert_allclose(indep.std(axis=0) / small.std(axis=0), 2.0, rtol=0.02)


def test_sample_index_independent_of_request():
    full = sample_increments(9, 3, 5, 0.2, 3 * BLOCK + 17).increments
    parts = [sample_increments(9, 3, 5, 0.2, c, s).increments
             for s, c in [(0, 100), (100, 300), (400, 3 * BLOCK + 17 - 400)]]
    np.testing.assert_array_equal(np.concatenate(parts), full)
    single = sample_increments(9, 3, 5, 0.2, start=BLOCK + 3).increments
    np.testing.assert_array_equal(single, full[BLOCK + 3])


def test_sample_increments_rejects_bad_input():
    with pytest.raises(ValueError):
        sample_increments(0, 2, 0, 0.1)
    with pytest.raises(ValueError):
        sample_increments(0, 2, 3, 0.0)


@pytest.mark.parametrize("workers", [1, 2, 4])
def test_chunked_map_worker_independent(workers):
    def fn(start, count):
        return np.arange(start, start + count) ** 2

    out = np.concatenate(chunked_map(fn, 1000, 128, workers))
    np.testing.assert_array_equal(out, np.arange(1000) ** 2)


def test_convolve_zero_increments():
    op = make_operator(1.0, 1.0, 4, 0.4)
    w = convolve(op, NoiseIncrements(0.1, np.zeros((10, 4)), 0))
    np.testing.assert_array_equal(w.values, 0.0)
    assert w.T == pytest.approx(1.0)


def test_convolve_dimension_mismatch():
    op = make_operator(1.0, 1.0, 4, 0.4)
    with pytest.raises(ValueError):
        convolve(op, sample_increments(0, 3, 5, 0.1))


@pytest.mark.parametrize("lam", [0.3, 1.0, 7.0])
def test_convolution_variance_matches_ito_isometry(lam):
    op = operator_from_eigenvalues([lam], 0.4)
    T, K, n = 1.0, 25, 100_000
    oracle, _ = quad(lambda s: math.exp(-2 * lam * (T - s)), 0, T, epsabs=1e-14)
    w = convolve(op, sample_increments(11, 1, K, T / K, n)).terminal[:, 0]
    assert abs(w.var(ddof=1) - oracle) <= _variance_tolerance(oracle, n)
    assert abs(w.mean()) <= 5 * math.sqrt(oracle / n)


def test_convolution_law_at_every_node():
    op = make_operator(1.0, 1.0, 3, 0.4)
    K, n = 8, 100_000
    w = convolve(op, sample_increments(12, 3, K, 1.0 / K, n)).values
    t = np.linspace(0, 1, K + 1)
    for k in range(1, K + 1):
        var = -np.expm1(-2 * op.eigenvalues * t[k]) / (2 * op.eigenvalues)
        assert np.all(np.abs(w[:, k].var(axis=0, ddof=1) - var) <= _variance_tolerance(var, n))


def test_modes_uncorrelated():
    op = operator_from_eigenvalues([1.0, 3.0], 0.4)
    n = 100_000
    w = convolve(op, sample_increments(13, 2, 20, 0.05, n)).terminal
    corr = np.corrcoef(w.T)[0, 1]
    assert abs(corr) <= 5 / math.sqrt(n)


def test_grid_refinement_keeps_marginal_law():
    op = make_operator(1.0, 1.0, 3, 0.4)
    n = 50_000
    coarse = convolve(op, sample_increments(14, 3, 10, 0.1, n)).terminal
    fine = convolve(op, sample_increments(15, 3, 20, 0.05, n)).terminal
    var = coarse.var(axis=0, ddof=1)
    tol = 5 * math.sqrt(2) * var * math.sqrt(2.0 / (n - 1))
    assert np.all(np.abs(var - fine.var(axis=0, ddof=1)) <= tol)


def test_path_grid_validation():
    with pytest.raises(ValueError):
        PathOnGrid(np.array([0.0, 0.1, 0.3]), np.zeros((3, 2)))
    with pytest.raises(ValueError):
        PathOnGrid(np.array([0.1, 0.2]), np.zeros((2, 2)))
    with pytest.raises(ValueError):
        PathOnGrid(np.linspace(0, 1, 4), np.zeros((3, 2)))
    p = PathOnGrid.on_uniform_grid(2.0, np.zeros((5, 3)))
    assert (p.T, p.n_steps, p.dt, p.n_modes) == (2.0, 4, 0.5, 3)


def test_tail_vanishes_for_small_eps():
    op = make_operator(1.0, 1.0, 4, 0.4)
    t = tail_estimate(op, 1e-3, 1.0, 0.0, 2000, seed=1)
    assert t.hits == 0 and t.p_hat == 0.0 and t.ci_lo == 0.0 < t.ci_hi


def test_grid_sup_against_fine_grid():
    op = operator_from_eigenvalues([1.0], 0.4)
    n = 20_000
    coarse = tail_estimate(op, 1.0, 1.0, 0.0, n, seed=2, T=1.0, n_steps=100)
    fine = tail_estimate(op, 1.0, 1.0, 0.0, n, seed=3, T=1.0, n_steps=1000)
    se = math.sqrt(coarse.p_hat * (1 - coarse.p_hat) / n + fine.p_hat * (1 - fine.p_hat) / n)
    # the grid sup never exceeds the continuum sup; the bias of dt = 0.01 is a few percent
    assert coarse.p_hat <= fine.p_hat + 3 * se
    assert abs(coarse.p_hat - fine.p_hat) <= 0.1 * fine.p_hat + 3 * se


def test_tail_exponent_grows_with_radius():
    op = make_operator(1.0, 1.0, 4, 0.4)
    sups = sup_norm_samples(op, 0.0, 1.0, 50, 200_000, seed=4)
    slopes = []
    for R in (1.0, 1.2, 1.4):
        eps = np.array([1.0, 0.7, 0.5])
        p = [tail_estimate(op, e, R, 0.0, sups.size, 4, sups=sups).p_hat for e in eps]
        assert all(pi > 0 for pi in p)
        slopes.append(np.polyfit(eps ** -2, np.log(p), 1)[0])
    assert all(s < 0 for s in slopes)
    assert all(abs(s1) >= abs(s0) for s0, s1 in zip(slopes, slopes[1:]))


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 2 ** 32 - 1), st.integers(1, 600), st.integers(0, 600))
def test_determinism_property(seed, count, start):
    a = sample_increments(seed, 2, 3, 0.5, count, start).increments
    b = sample_increments(seed, 2, 3, 0.5, count, start).increments
    np.testing.assert_array_equal(a, b)
    c = sample_increments(seed, 2, 3, 0.5, start=start + count - 1).increments
    np.testing.assert_array_equal(a[-1], c)
