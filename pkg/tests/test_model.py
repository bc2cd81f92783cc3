from __future__ import annotations

import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from flusmc.model import (
    ContactSchedule,
    DomainError,
    InvalidParameterError,
    ScheduleRangeError,
    StepSizeError,
    TransmissionParams,
    attack_rate,
    build_schedule,
    dominant_eigenvector,
    euler_step,
    force_of_infection,
    initial_state,
    normalise_contact_matrix,
    r0_from_growth_rate,
    reciprocal_contact_matrix,
    simulate_epidemic,
    stage_proportions,
)

POPS = np.array([962500.0, 2227500.0, 2310000.0])
CONTACTS = np.array([[10.0, 5.0, 2.5], [2.2, 9.0, 4.0], [1.0, 3.8, 5.0]])


def flat_schedule(days=245):
    return build_schedule(CONTACTS, POPS, [(0, days, None)])


def growth_rate(psi, d_I=3.47, days=(8, 30)):
    params = TransmissionParams(psi=psi, nu=-17.0, d_I=d_I)
    traj = simulate_epidemic(params, flat_schedule(), POPS, 2 * days[1])
    total = traj.daily_infections().sum(axis=1)
    d = np.arange(days[0], days[1] + 1)
    return np.polyfit(d, np.log(total[d - 1]), 1)[0]


def test_reciprocal_matrix_is_symmetric_and_balances_totals():
    m = reciprocal_contact_matrix(CONTACTS, POPS)
    assert np.allclose(m, m.T)
    tot = POPS[:, None] * POPS[None, :] * m
    raw = POPS[:, None] * CONTACTS
    assert np.allclose(tot, 0.5 * (raw + raw.T))


def test_normalised_matrix_has_unit_spectral_radius():
    m = normalise_contact_matrix(reciprocal_contact_matrix(CONTACTS, POPS), POPS)
    assert np.max(np.abs(np.linalg.eigvals(POPS[:, None] * m))) == pytest.approx(1.0, rel=1e-12)


def test_dominant_eigenvector_is_fixed_point():
    m = normalise_contact_matrix(reciprocal_contact_matrix(CONTACTS, POPS), POPS)
    v = dominant_eigenvector(m, POPS)
    assert v.sum() == pytest.approx(1.0)
    assert np.allclose((POPS[:, None] * m) @ v, v, rtol=1e-10)


def test_r0_continuous_limit():
    for psi in (0.05, 0.133, 0.25):
        cont = r0_from_growth_rate(psi, 2.0, 3.47, None)
        assert r0_from_growth_rate(psi, 2.0, 3.47, 1e-6) == pytest.approx(cont, rel=1e-5)


def test_r0_zero_growth_is_one():
    assert r0_from_growth_rate(0.0, 2.0, 3.0, None) == 1.0
    assert r0_from_growth_rate(0.0, 2.0, 3.0, 0.5) == pytest.approx(1.0, rel=1e-12)


def test_r0_matches_linearised_euler_map():
    # the spectral radius of the linear one-step map must be exp(psi dt)
    psi, d_L, d_I, dt = 0.133, 2.0, 3.47, 0.5
    R0 = r0_from_growth_rate(psi, d_L, d_I, dt)
    a, b = 2 * dt / d_L, 2 * dt / d_I
    k = dt * R0 / d_I
    J = np.array([[1 - a, 0, k, k], [a, 1 - a, 0, 0], [0, a, 1 - b, 0], [0, 0, b, 1 - b]])
    rho = max(abs(np.linalg.eigvals(J)))
    assert rho == pytest.approx(math.exp(psi * dt), rel=1e-12)
    # and the stage proportions are its eigenvector
    w = stage_proportions(psi, d_L, d_I, dt)
    assert np.allclose(J @ w, rho * w, rtol=1e-10)


def test_invalid_parameters():
    with pytest.raises(InvalidParameterError):
        TransmissionParams(psi=-0.1, nu=-14, d_I=3)
    with pytest.raises(InvalidParameterError):
        TransmissionParams(psi=0.1, nu=float("nan"), d_I=3)
    with pytest.raises(InvalidParameterError):
        r0_from_growth_rate(0.1, 2.0, -1.0)


@pytest.mark.parametrize("psi", [0.05, 0.133, 0.25])
def test_growth_rate_recovered(psi):
    assert growth_rate(psi) == pytest.approx(psi, rel=0.02)


def test_conservation_over_490_steps():
    params = TransmissionParams(psi=0.2, nu=-12.0, d_I=3.47, m=(0.4, 0.5, 0.06, 0.3, 0.42))
    sched = build_schedule(CONTACTS, POPS, [(0, 65, None), (65, 82, 2), (82, 127, 1), (127, 245, 4)])
    state = initial_state(params, POPS, sched.baseline_matrix)
    R0 = r0_from_growth_rate(params.psi, params.d_L, params.d_I)
    for k in range(490):
        lam = force_of_infection(state, sched.multiplier_at(k, params.m) * sched.baseline_matrix, R0, params.d_I, 0.5)
        state = euler_step(state, lam, params.d_L, params.d_I, 0.5)
        assert np.all(np.abs(state.total() / POPS - 1.0) <= 1e-9)


@given(psi=st.floats(0.01, 0.4), nu=st.floats(-18, -9), d_I=st.floats(1.2, 6.0))
def test_conservation_property(psi, nu, d_I):
    params = TransmissionParams(psi=psi, nu=nu, d_I=d_I)
    sched = flat_schedule(100)
    traj = simulate_epidemic(params, sched, POPS, 200)
    i0 = math.exp(nu) * POPS.sum() * dominant_eigenvector(sched.baseline_matrix, POPS)
    # susceptibles only fall, and never below zero
    assert np.all(np.diff(traj.susceptibles, axis=0) <= 1e-9)
    assert np.all(traj.susceptibles >= 0)
    # every new infection leaves S: S_0 - S_T equals the summed increments
    assert np.allclose(POPS - i0 - traj.susceptibles[-1], traj.delta.sum(axis=0), rtol=1e-9)


def test_initial_state_split():
    params = TransmissionParams(psi=0.133, nu=-13.9, d_I=3.47)
    s = initial_state(params, POPS)
    seeded = s.E1 + s.E2 + s.I1 + s.I2
    assert seeded.sum() == pytest.approx(math.exp(-13.9) * POPS.sum(), rel=1e-12)
    assert np.allclose(s.total(), POPS)


def test_no_infection_when_nu_is_minus_inf():
    params = TransmissionParams(psi=0.2, nu=-math.inf, d_I=3.0)
    assert attack_rate(params, flat_schedule(20), POPS) == 0.0


def test_too_many_initial_infections():
    with pytest.raises(InvalidParameterError):
        initial_state(TransmissionParams(psi=0.1, nu=0.0, d_I=3.0), POPS)


def test_step_size_error():
    s = initial_state(TransmissionParams(psi=0.1, nu=-10, d_I=3.0), POPS)
    with pytest.raises(StepSizeError):
        euler_step(s, np.zeros(3), d_L=2.0, d_I=0.5, dt=0.5)


def test_domain_error():
    s = initial_state(TransmissionParams(psi=0.1, nu=-10, d_I=3.0), POPS)
    with pytest.raises(DomainError):
        force_of_infection(s, np.full((3, 3), 1.0), R0=10.0, d_I=2.0, dt=0.5)


def test_schedule_windows():
    sched = build_schedule(CONTACTS, POPS, [(0, 3, None), (3, 5, 2)])
    assert list(sched.window_index()) == [-1] * 6 + [1] * 4
    assert sched.multiplier_at(7, (0.1, 0.7, 1, 1, 1)) == 0.7
    assert sched.multiplier_at(0, (0.1, 0.7, 1, 1, 1)) == 1.0
    with pytest.raises(ScheduleRangeError):
        sched.multiplier_at(10, (1,) * 5)
    with pytest.raises(ValueError):
        ContactSchedule(np.eye(3), ((0, 4, None), (5, 8, 1)))


def test_daily_aggregation():
    params = TransmissionParams(psi=0.15, nu=-12, d_I=3.0)
    traj = simulate_epidemic(params, flat_schedule(10), POPS, 20)
    assert np.allclose(traj.daily_infections()[0], traj.delta[0] + traj.delta[1])
    assert np.allclose(traj.daily_susceptibles()[2], traj.susceptibles[5])
