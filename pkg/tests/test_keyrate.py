import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

import oracles
from qkdnet.keyrate import (
    DecoyEstimate,
    NoFeasibleTheta,
    NonPositiveYield,
    ProtocolParameters,
    TransmissionTally,
    asymptotic_rate,
    binary_entropy,
    decoy_bounds,
    finite_key_length,
    gaussian_bounds,
    phase_error_deviation,
    phase_error_log2_bound,
    table_tally,
)

TABLE = ProtocolParameters(Y0=1e-6)


def params_dict(p):
    return dict(
        mu=p.mu, nu=p.nu, Y0=p.Y0, q_s=p.q_s, q_d=p.q_d, f=p.f,
        delta_sigmas=p.delta_sigmas, eps_step=p.eps_step, delta_cost=p.delta_cost,
    )


def test_binary_entropy_values():
    assert binary_entropy(0.5) == 1.0
    assert binary_entropy(0.0) == 0.0
    assert binary_entropy(1.0) == 0.0
    # 50-digit evaluation of the closed form
    assert binary_entropy(0.01) == pytest.approx(0.0807931358959111742, rel=1e-14)


@pytest.mark.parametrize("p", [-0.1, 1.5])
def test_binary_entropy_domain(p):
    with pytest.raises(ValueError):
        binary_entropy(p)


def test_decoy_bounds_table_values():
    Y1, e1 = decoy_bounds(TABLE, 0.067, 0.022, 0.024)
    # frozen from tests/oracles.py at 50 digits
    assert Y1 == pytest.approx(0.0997898220746245718, rel=1e-13)
    assert e1 == pytest.approx(0.0322878948429568045, rel=1e-13)


def test_decoy_bounds_degenerate_intensities():
    with pytest.raises(ValueError):
        ProtocolParameters(mu=0.2, nu=0.2)


def test_dark_only_channel():
    # With every gain equal to Y0 the closed form stays (barely) positive,
    # but the error bound is above 1/2, so no key can come from it.
    Y1, e1 = decoy_bounds(TABLE, 1e-6, 1e-6, 0.5)
    Y1_ref, e1_ref = oracles.decoy(0.6, 0.2, 1e-6, 1e-6, 1e-6, 0.5e-6)
    assert Y1 == pytest.approx(float(Y1_ref), rel=1e-12)
    assert e1 > 0.5
    with pytest.raises(NonPositiveYield):
        decoy_bounds(TABLE, 1e-5, 1e-6, 0.5)


def test_asymptotic_rate_table():
    Y1, e1 = decoy_bounds(TABLE, 0.067, 0.022, 0.024)
    r = asymptotic_rate(TABLE, 0.067, 0.01, DecoyEstimate(Y1, e1))
    assert r == pytest.approx(0.0179793052239470936, rel=1e-12)


def test_asymptotic_rate_limits():
    r = asymptotic_rate(TABLE, 0.067, 0.01, DecoyEstimate(0.0, 0.0))
    assert r == pytest.approx(-1.5 * 0.067 * binary_entropy(0.01))
    p = ProtocolParameters(Y0=0.0)
    assert asymptotic_rate(p, 0.1, 0.0, DecoyEstimate(0.2, 0.0)) == pytest.approx(
        0.2 * 0.6 * math.exp(-0.6)
    )


def test_gaussian_bounds():
    assert gaussian_bounds(0.0, 10, 10) == (0.0, 0.0)
    assert gaussian_bounds(0.3, 10, 0) == (0.3, 0.3)
    lo, hi = gaussian_bounds(0.067, 6.3e7, 10)
    dev = 0.000326112260347884430
    assert lo == pytest.approx(0.067 - dev, rel=1e-13)
    assert hi == pytest.approx(0.067 + dev, rel=1e-13)
    assert gaussian_bounds(1e-4, 4, 10)[0] == 0.0


def test_theta_decreases_with_samples():
    t1 = phase_error_deviation(0.0323, 1e5, 1e5, 1e-10)
    t2 = phase_error_deviation(0.0323, 1e6, 1e6, 1e-10)
    t3 = phase_error_deviation(0.0323, 1e7, 1e7, 1e-10)
    assert t1 > t2 > t3 > 0


def test_theta_straddles_target():
    theta = phase_error_deviation(0.0323, 1e6, 1e6, 1e-10)
    target = math.log2(1e-10)
    assert phase_error_log2_bound(theta, 0.0323, 1e6, 1e6) <= target
    assert phase_error_log2_bound(theta - 2e-12, 0.0323, 1e6, 1e6) > target
    ref = oracles.theta_smallest(0.0323, 1e6, 1e6, 1e-10)
    assert theta == pytest.approx(float(ref), abs=2e-12)


def test_theta_vacuous_and_infeasible():
    assert phase_error_deviation(0.03, 10, 10, 1.0) == 0.0
    with pytest.raises(NoFeasibleTheta):
        phase_error_deviation(0.03, 2, 2, 1e-10)


def test_finite_key_table_set():
    r = finite_key_length(TABLE, table_tally(TABLE))
    assert r.K_tot > 0 and r.rate_bps > 0
    assert r.K_tot == pytest.approx(r.K_x + r.K_z)
    Kz, Kx = oracles.finite_key(params_dict(TABLE), 6.3e7, *_arrays(table_tally(TABLE)))
    assert r.K_z == pytest.approx(float(Kz), rel=1e-9)
    assert r.K_x == pytest.approx(float(Kx), rel=1e-9)
    assert r.rate_bps == pytest.approx(40e6 * r.K_tot / 6.3e7)


def _arrays(t):
    return t.sent, t.detected, t.errors


def test_finite_size_penalty():
    big = finite_key_length(TABLE, table_tally(TABLE))
    small = finite_key_length(TABLE, table_tally(TABLE, N_sent=6.3e5))
    assert small.rate_bps < big.rate_bps


def test_noiseless_reduction():
    p = ProtocolParameters(Y0=0.0)
    t = TransmissionTally.from_observables(1e9, p, (0.05, 0.02, 0.0), (0.0, 0.0, 0.0))
    r = finite_key_length(p, t)
    for b in ("X", "Z"):
        est = r.estimates[b]
        assert est.e1_U == 0.0 and est.theta == 0.0
    expected = sum(r.estimates[b].M1_zsL for b in ("X", "Z")) - 2 * p.delta_cost
    assert r.K_tot == pytest.approx(expected, rel=1e-12)


def test_abort_reports_reason():
    t = TransmissionTally.from_observables(1e5, TABLE, (1e-5, 1e-6, 1e-6), (0.5, 0.5, 0.5))
    r = finite_key_length(TABLE, t)
    assert r.K_tot == 0 and r.aborted
    assert any("non_positive_yield" in s for s in r.reasons)


def test_rate_monotone_in_qber():
    rates = []
    for E in np.linspace(0.0, 0.05, 11):
        rates.append(finite_key_length(TABLE, table_tally(TABLE, E_mu=E)).rate_bps)
    assert all(a >= b for a, b in zip(rates, rates[1:]))


def test_rate_monotone_in_N():
    rates = [finite_key_length(TABLE, table_tally(TABLE, N_sent=N)).rate_bps
             for N in (1e7, 3e7, 1e8, 1e9, 1e10)]
    assert all(a <= b for a, b in zip(rates, rates[1:]))


def test_asymptotic_consistency():
    t = table_tally(TABLE, N_sent=1e13)
    r = finite_key_length(TABLE, t)
    Y1, e1 = decoy_bounds(TABLE, 0.067, 0.022, 0.024)
    asym = asymptotic_rate(TABLE, 0.067, 0.01, DecoyEstimate(Y1, e1))
    # two bases, each holding a quarter of the pulses, signal fraction q_s
    expected = asym * TABLE.q_s * 0.5
    assert r.per_pulse_rate == pytest.approx(expected, rel=0.01)


def random_case(rng):
    mu = rng.uniform(0.3, 0.8)
    nu = rng.uniform(0.05, 0.6 * mu)
    q_s = rng.uniform(0.5, 0.85)
    q_d = rng.uniform(0.05, 1 - q_s - 0.02)
    p = ProtocolParameters(
        mu=mu, nu=nu, q_s=q_s, q_d=q_d, f=rng.uniform(1.0, 1.6),
        Y0=10 ** rng.uniform(-7, -5), delta_sigmas=rng.uniform(0, 10),
        eps_step=10 ** rng.uniform(-12, -6), delta_cost=rng.uniform(0, 400),
    )
    eta = 10 ** rng.uniform(-2.5, -0.5)
    mis = rng.uniform(0.001, 0.03)
    gains = [p.Y0 + 1 - math.exp(-eta * x) for x in p.intensities]
    qbers = [(0.5 * p.Y0 + mis * (1 - math.exp(-eta * x))) / g for x, g in zip(p.intensities, gains)]
    N = 10 ** rng.uniform(8, 11)
    return p, TransmissionTally.from_observables(N, p, gains, qbers)


def test_oracle_equivalence_random_draws():
    rng = np.random.default_rng(20240501)
    positive = 0
    for _ in range(1000):
        p, t = random_case(rng)
        Y1, e1 = decoy_bounds(p, *(t.gain("Z", i) for i in ("signal", "decoy")), t.qber("Z", "decoy"))
        Y1r, e1r = oracles.decoy(p.mu, p.nu, p.Y0, t.gain("Z", "signal"), t.gain("Z", "decoy"),
                                 t.errors[1, 1] / t.sent[1, 1])
        assert Y1 == pytest.approx(float(Y1r), rel=1e-9)
        assert e1 == pytest.approx(float(e1r), rel=1e-9)
        r = finite_key_length(p, t)
        Kz, Kx = oracles.finite_key(params_dict(p), t.N_sent, *_arrays(t))
        for got, ref in ((r.K_z, Kz), (r.K_x, Kx)):
            assert got == pytest.approx(float(ref), rel=1e-9, abs=1e-6)
        positive += r.K_tot > 0
    assert positive > 500


@settings(max_examples=200, deadline=None)
@given(
    st.floats(0.001, 0.2), st.floats(1e3, 1e9), st.floats(1e3, 1e9),
)
def test_theta_meets_target(e, nx, nz):
    try:
        theta = phase_error_deviation(e, nx, nz, 1e-10)
    except NoFeasibleTheta:
        return
    assert phase_error_log2_bound(theta, e, nx, nz) <= math.log2(1e-10) + 1e-9
    assert 0 <= theta < 1 - e


@settings(max_examples=100, deadline=None)
@given(st.floats(0.0, 0.2), st.floats(1e6, 1e10))
def test_key_components_never_negative(E, N):
    r = finite_key_length(TABLE, table_tally(TABLE, N_sent=N, E_mu=E, E_nu=E))
    assert r.K_x >= 0 and r.K_z >= 0
    if r.K_tot == 0:
        assert r.reasons
