import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from hypothesis.extra.numpy import arrays

from galerkin_ldp.drift import (CUTOFF_LIPSCHITZ, AffineBoundedDrift, ConstantDrift, MollifyParams,
                                PowerDrift, RegularizedDrift, ShiftedDrift, ZeroDrift,
                                approx_error_scan, cutoff_drift, cutoff_rho, default_mollify_params,
                                drift_from_config, envelope_violations, eval_drift,
                                lipschitz_estimate, mollify_BR, regularized_BR, sample_ball)
from galerkin_ldp.spectral import fractional_power_norm, from_grid, make_operator, to_grid

OP = make_operator(1.0, 1.0, 8, 0.4)
DRIFTS = [
    ZeroDrift(),
    ConstantDrift((0.5, -1.0, 0.0, 0.0, 0.2, 0.0, 0.0, 0.1)),
    AffineBoundedDrift(1.0, 0.0),
    AffineBoundedDrift(2.0, 0.7),
    PowerDrift(0.5, 1.0),
    PowerDrift(0.3, 2.0, 1e-3),
    ShiftedDrift(1.0, PowerDrift(0.5, 1.0)),
]


def _random_fields(n, seed, n_modes=8):
    rng = np.random.default_rng(seed)
    d = rng.standard_normal((n, n_modes))
    return d * 10.0 ** rng.uniform(-3, 3, size=(n, 1))


def test_zero_variant():
    np.testing.assert_array_equal(eval_drift(ZeroDrift(), OP, _random_fields(10, 0)), 0.0)


def test_power_on_constant_field():
    x = from_grid(OP, np.full(OP.n_grid, 4.0))
    np.testing.assert_allclose(to_grid(OP, PowerDrift(0.5, 3.0)(OP, x)), 6.0, rtol=1e-13)


def test_power_at_zero_is_zero():
    np.testing.assert_array_equal(PowerDrift(0.5, 1.0)(OP, np.zeros(8)), 0.0)


@pytest.mark.parametrize("drift", DRIFTS, ids=lambda d: type(d).__name__)
def test_growth_envelope(drift):
    assert envelope_violations(OP, drift, _random_fields(10_000, 1)) == 0


def test_smoothed_profile_below_power():
    p = PowerDrift(0.5, 1.0, 1e-4)
    u = np.linspace(-5, 5, 10_001)
    assert np.all(p.profile(u) <= np.abs(u) ** 0.5)
    assert np.max(np.abs(u) ** 0.5 - p.profile(u)) <= 1e-4 ** 0.5 * (1 + 1e-12)


def _jacobian_fd(drift, x, h=1e-6):
    cols = []
    for j in range(x.size):
        e = np.zeros(x.size)
        e[j] = h
        cols.append((drift(OP, x + e) - drift(OP, x - e)) / (2 * h))
    return np.array(cols).T


@pytest.mark.parametrize("drift", [AffineBoundedDrift(1.5, 0.4), PowerDrift(0.5, 1.0, 1e-2),
                                   ShiftedDrift(1.0, PowerDrift(0.5, 1.0, 1e-2)), ConstantDrift((1.0,) * 8)])
def test_vjp_matches_jacobian(drift):
    rng = np.random.default_rng(2)
    x = rng.standard_normal(8) + np.array([3.0] + [0.0] * 7)
    v = rng.standard_normal(8)
    np.testing.assert_allclose(drift.vjp(OP, x, v), v @ _jacobian_fd(drift, x), rtol=1e-6, atol=1e-8)


def test_power_without_smoothing_has_no_gradient():
    assert not PowerDrift(0.5).differentiable
    with pytest.raises(ValueError):
        PowerDrift(0.5).vjp(OP, np.ones(8), np.ones(8))
    assert PowerDrift(0.5).smoothed(1e-4).differentiable


def test_parameter_validation():
    for bad in (dict(gamma=0.0), dict(gamma=1.0), dict(gamma=0.5, scale=-1)):
        with pytest.raises(ValueError):
            PowerDrift(**bad)
    with pytest.raises(ValueError):
        AffineBoundedDrift(-1.0, 0.0)


def test_cutoff_plateaus_and_midpoint():
    a, b, R = 1.0, 0.5, 2.0
    assert cutoff_rho(R, a, b, a + b * R) == 1.0
    assert cutoff_rho(R, a, b, 0.0) == 1.0
    assert cutoff_rho(R, a, b, a + b * R + 1.0) == 0.0
    assert cutoff_rho(R, a, b, 1e9) == 0.0
    # 3 s^2 - 2 s^3 at s = 1/2
    assert cutoff_rho(R, a, b, a + b * R + 0.5) == 0.5
    with pytest.raises(ValueError):
        cutoff_rho(0.5, a, b, 1.0)


def test_cutoff_lipschitz_and_monotone():
    r = np.linspace(0, 5, 500_001)
    rho = cutoff_rho(2.0, 1.0, 0.5, r)
    slopes = np.diff(rho) / np.diff(r)
    assert np.all(slopes <= 0)
    assert np.max(np.abs(slopes)) <= CUTOFF_LIPSCHITZ + 1e-9
    assert np.max(np.abs(slopes)) >= CUTOFF_LIPSCHITZ - 1e-3


def test_mollify_params_invariants():
    p = MollifyParams(0.3, 2.0, 64, 1)
    assert p.tau_R == 0.3 ** 3 / 4.0
    p.check_level(3.0)
    with pytest.raises(ValueError):
        p.check_level(4.0)
    with pytest.raises(ValueError):
        MollifyParams(0.1, 1.0, 3)
    with pytest.raises(ValueError):
        MollifyParams(0.0, 1.0)


def test_mollify_zero_and_constant():
    p = MollifyParams(0.2, OP.lambda0, 64, 3)
    x = _random_fields(20, 4)
    np.testing.assert_array_equal(mollify_BR(OP, ZeroDrift(), 2.0, p, x), 0.0)
    c = ConstantDrift((0.3, -0.2, 0.1, 0.0, 0.0, 0.5, 0.0, 0.0))
    np.testing.assert_allclose(mollify_BR(OP, c, 2.0, p, x), np.broadcast_to(c.value, x.shape), rtol=4e-15)


def test_mollify_converges_to_cutoff_drift():
    inner = AffineBoundedDrift(2.0, 0.5)
    R = 1.0
    x = sample_ball(OP, 0.1, R, 200, seed=5)
    target = cutoff_drift(OP, inner, R, x)
    errs = []
    delta, n_mc = 0.8, 16
    for _ in range(4):
        p = MollifyParams(delta, OP.lambda0, n_mc, 7)
        errs.append(np.max(np.linalg.norm(mollify_BR(OP, inner, R, p, x) - target, axis=-1)))
        delta /= 2 ** (1 / 3)  # halves tau_R
        n_mc *= 4
    assert all(e1 < e0 for e0, e1 in zip(errs, errs[1:])), errs


def test_recutoff_plateau_and_bound():
    inner = AffineBoundedDrift(1.0, 0.5)
    R = 2.0
    p = MollifyParams(0.2, OP.lambda0, 64, 0)
    x = sample_ball(OP, 0.1, R, 100, seed=6)
    mol = mollify_BR(OP, inner, R, p, x)
    assert np.all(np.linalg.norm(mol, axis=-1) <= 1.0 + 0.5 * R)
    np.testing.assert_array_equal(regularized_BR(OP, inner, R, p, x), mol)
    huge = _random_fields(1000, 7) * 1e6
    for d in (inner, PowerDrift(0.5, 1.0), ShiftedDrift(1.0, PowerDrift(0.5, 3.0))):
        a, b = d.envelope
        out = regularized_BR(OP, d, R, p, huge)
        assert np.all(np.linalg.norm(out, axis=-1) <= a + b * R + 1.0)


def test_cutoff_equals_drift_on_F_R():
    inner = AffineBoundedDrift(1.5, 0.5)
    for R in (1.0, 3.0):
        x = sample_ball(OP, 0.1, R, 500, seed=8)
        assert np.all(np.linalg.norm(x, axis=-1) <= R * (1 + 1e-12))
        np.testing.assert_array_equal(cutoff_drift(OP, inner, R, x), inner(OP, x))


def test_sample_ball_in_both_norms():
    x = sample_ball(OP, 0.1, 3.0, 1000, seed=9)
    assert np.all(fractional_power_norm(OP, 0.1, x) <= 3.0 * (1 + 1e-12))
    assert np.all(np.linalg.norm(x, axis=-1) <= 3.0 * (1 + 1e-12))


def test_approx_scan_zero_drift():
    scan = approx_error_scan(OP, ZeroDrift(), [1, 2, 4], sample_budget=64)
    assert scan.max_error == [0.0, 0.0, 0.0]


def test_approx_scan_lipschitz_monotone():
    scan = approx_error_scan(OP, AffineBoundedDrift(1.0, 0.5), [1, 2, 4, 8], sample_budget=256, seed=3)
    assert scan.strictly_decreasing, scan.max_error
    assert all(d < 1 / R for d, R in zip(scan.delta_R, scan.R))
    assert all(t == pytest.approx(d ** 3 / (2 * OP.lambda0), rel=1e-15)
               for d, t in zip(scan.delta_R, scan.tau_R))


def test_approx_scan_power_two_point():
    scan = approx_error_scan(OP, PowerDrift(0.5, 1.0), [2, 8], sample_budget=256, seed=4)
    assert scan.max_error[1] < scan.max_error[0]


def test_approx_scan_validation():
    with pytest.raises(ValueError):
        approx_error_scan(OP, ZeroDrift(), [])
    with pytest.raises(ValueError):
        approx_error_scan(OP, ZeroDrift(), [2, 1])


def test_lipschitz_estimate_finite_and_bounded():
    inner = AffineBoundedDrift(1.0, 0.5)
    est = lipschitz_estimate(OP, inner, 2.0)
    assert 0 < est <= inner.lipschitz_for(8) * (1 + 1e-6)
    p = default_mollify_params(OP, inner, 2.0, n_mc=64)
    reg = lipschitz_estimate(OP, RegularizedDrift(2.0, inner, p), 2.0)
    assert math.isfinite(reg) and reg > 0


@pytest.mark.parametrize("drift", DRIFTS[:5] + [ShiftedDrift(1.0, PowerDrift(0.5, 2.0))], ids=str)
def test_config_round_trip(drift):
    rebuilt = drift_from_config(drift.to_config(), OP)
    x = _random_fields(5, 10)
    np.testing.assert_array_equal(rebuilt(OP, x), drift(OP, x))


def test_regularized_config_round_trip():
    cfg = {"variant": "regularized", "R": 2.0, "delta_R": 0.1, "n_mc": 32, "seed": 1,
           "inner": {"variant": "power", "gamma": 0.5}}
    d = drift_from_config(cfg, OP)
    assert isinstance(d, RegularizedDrift) and d.params.tau_R == 0.1 ** 3 / 2
    with pytest.raises(ValueError):
        drift_from_config({"variant": "cubic"})


@settings(max_examples=40, deadline=None)
@given(arrays(np.float64, 8, elements=st.floats(-1e4, 1e4)), st.floats(0.01, 0.99), st.floats(0.1, 5))
def test_power_envelope_property(x, gamma, scale):
    assert envelope_violations(OP, PowerDrift(gamma, scale), x[None]) == 0


@settings(max_examples=40, deadline=None)
@given(arrays(np.float64, 8, elements=st.floats(-1e6, 1e6)), st.floats(1.0, 20.0))
def test_regularized_bound_property(x, R):
    inner = ShiftedDrift(1.0, PowerDrift(0.5, 1.0))
    a, b = inner.envelope
    p = MollifyParams(0.5 / R, OP.lambda0, 16, 0)
    assert np.linalg.norm(regularized_BR(OP, inner, R, p, x)) <= a + b * R + 1.0
