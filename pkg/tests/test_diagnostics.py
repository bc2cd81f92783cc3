from __future__ import annotations

import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from scipy import stats

from flusmc.diagnostics import (
    DiagnosticUndefinedError,
    GaussianSummary,
    adaptive_mixture_cdf,
    forecast,
    gaussian_kl,
    log_score_from_weights,
    mixture_cdf,
    mixture_quantiles,
    pit_bounds,
    pit_chi2,
    pit_histogram,
    rps,
    rps_null_moments,
    z_rps,
)
from flusmc.params import truth_vector
from flusmc.smc.weights import DegenerateWeightsError


def analytic_kl(m0, S0, m1, S1):
    d = len(m0)
    P1 = np.linalg.inv(S1)
    diff = np.asarray(m1) - np.asarray(m0)
    return 0.5 * (np.trace(P1 @ S0) + diff @ P1 @ diff - d + math.log(np.linalg.det(S1) / np.linalg.det(S0)))


# ---------------------------------------------------------------- KL


def test_kl_unit_shift():
    a = GaussianSummary(np.zeros(1), np.eye(1))
    b = GaussianSummary(np.ones(1), np.eye(1))
    assert gaussian_kl(a, b) == pytest.approx(0.5, abs=1e-12)


def test_kl_scale_change_orientation():
    a = GaussianSummary(np.zeros(1), np.eye(1))
    b = GaussianSummary(np.zeros(1), 4 * np.eye(1))
    # KL(N(0,1) || N(0,4)) and its reverse differ
    assert gaussian_kl(a, b) == pytest.approx(0.5 * (0.25 - 1 + math.log(4)), abs=1e-12)
    assert gaussian_kl(b, a) == pytest.approx(0.5 * (4 - 1 - math.log(4)), abs=1e-12)


@given(st.integers(1, 4), st.integers(0, 10_000))
def test_kl_matches_closed_form(d, seed):
    rng = np.random.default_rng(seed)
    A, B = rng.normal(size=(d, d)), rng.normal(size=(d, d))
    S0, S1 = A @ A.T + 0.5 * np.eye(d), B @ B.T + 0.5 * np.eye(d)
    m0, m1 = rng.normal(size=d), rng.normal(size=d)
    kl = gaussian_kl(GaussianSummary(m0, S0), GaussianSummary(m1, S1))
    assert kl == pytest.approx(analytic_kl(m0, S0, m1, S1), rel=1e-10, abs=1e-10)


def test_kl_identical_samples_zero(rng):
    x = rng.normal(size=(400, 3))
    assert gaussian_kl(x, x) == pytest.approx(0.0, abs=1e-12)


def test_kl_from_weighted_samples(rng):
    x = rng.normal(size=(200_000, 1))
    y = rng.normal(1.0, 1.0, size=(200_000, 1))
    assert gaussian_kl(x, y) == pytest.approx(0.5, abs=0.02)
    # weights shift the mean of the first sample by tilting
    w = np.exp(x[:, 0])
    assert gaussian_kl(x, y, weights0=w) == pytest.approx(0.0, abs=0.02)


def test_kl_exclusion_by_name(rng):
    x = rng.normal(size=(5000, 3))
    y = x.copy()
    y[:, 1:] += 5.0
    names = ["psi", "beta_B1", "beta_B2"]
    assert gaussian_kl(x, y) > 10
    assert gaussian_kl(x, y, exclude=["beta_B"], names=names) == pytest.approx(0.0, abs=1e-12)
    assert gaussian_kl(x, y, exclude=[1, 2]) == pytest.approx(0.0, abs=1e-12)
    with pytest.raises(ValueError):
        gaussian_kl(x, y, exclude=["beta_B"])
    with pytest.raises(ValueError):
        gaussian_kl(x, y[:, :2])


# ---------------------------------------------------------------- mixtures and RPS


def test_negbin_mixture_against_scipy(rng):
    mu = rng.uniform(0.1, 300, size=50)
    eta = rng.uniform(0.05, 5, size=50)
    w = rng.dirichlet(np.ones(50))
    F = mixture_cdf("negbin", w, 2000, mu=mu, eta=eta)
    ref = sum(wi * stats.nbinom.cdf(np.arange(2001), m / e, 1 / (1 + e)) for wi, m, e in zip(w, mu, eta))
    assert np.max(np.abs(F - ref)) < 1e-10


def test_binomial_mixture_against_scipy():
    p = np.array([0.1, 0.5, 0.93])
    w = np.array([0.2, 0.3, 0.5])
    F = mixture_cdf("binom", w, 40, n=40, p=p)
    ref = sum(wi * stats.binom.cdf(np.arange(41), 40, pi) for wi, pi in zip(w, p))
    assert np.allclose(F, ref, atol=1e-14)
    assert F[-1] == pytest.approx(1.0)


def test_adaptive_grid_covers_tail():
    F = adaptive_mixture_cdf("negbin", np.ones(1), y=5, mu=np.array([5000.0]), eta=np.array([10.0]))
    assert 1 - F[-1] <= 1e-10 and F.size > 5000


def test_rps_point_masses():
    F = np.array([0.0, 0.0, 1.0])
    assert rps(F, 2) == 0.0
    assert rps(F, 1) == 1.0
    assert rps(F, 3) == 1.0
    with pytest.raises(ValueError):
        rps(np.array([0.5, 0.9]), 0)


@pytest.mark.parametrize("y", [0, 3, 17, 60])
def test_rps_negbin_brute_force(y):
    mu, eta = 12.0, 2.5
    k = np.arange(5000)
    Fs = stats.nbinom.cdf(k, mu / eta, 1 / (1 + eta))
    brute = np.sum((Fs - (k >= y)) ** 2)
    got = rps(lambda K: mixture_cdf("negbin", np.ones(1), K, mu=np.array([mu]), eta=np.array([eta])), y)
    assert got == pytest.approx(brute, abs=1e-8)


def test_null_moments_exact():
    p = np.array([0.1, 0.2, 0.4, 0.25, 0.05])
    F = np.cumsum(p)
    s = np.array([rps(F, y) for y in range(5)])
    m, v = rps_null_moments(F)
    assert m == pytest.approx(p @ s, abs=1e-14)
    assert v == pytest.approx(p @ s**2 - (p @ s) ** 2, abs=1e-14)


def test_z_single_observation():
    F = np.cumsum([0.3, 0.3, 0.4])
    m, v = rps_null_moments(F)
    assert z_rps([rps(F, 2)], [m], [v]) == pytest.approx((rps(F, 2) - m) / math.sqrt(v))
    with pytest.raises(DiagnosticUndefinedError):
        z_rps([0.0], [0.0], [0.0])


def _z_replicate(rng, shift):
    mu = rng.uniform(2, 80, size=30)
    eta = rng.uniform(0.2, 3, size=30)
    s, m, v = [], [], []
    for a, e in zip(mu, eta):
        F = adaptive_mixture_cdf("negbin", np.ones(1), mu=np.array([a]), eta=np.array([e]))
        y = rng.negative_binomial(a * shift / e, 1 / (1 + e))
        s.append(rps(F, y))
        mi, vi = rps_null_moments(F)
        m.append(mi)
        v.append(vi)
    return z_rps(s, m, v)


def test_z_calibrated_under_null():
    rng = np.random.default_rng(5)
    z = np.array([_z_replicate(rng, 1.0) for _ in range(1000)])
    assert abs(z.mean()) < 0.1
    assert 0.85 < z.var() < 1.15


def test_z_detects_biased_predictive():
    rng = np.random.default_rng(6)
    z = np.array([_z_replicate(rng, 2.0) for _ in range(50)])
    assert np.mean(z > 1.96) > 0.9


# ---------------------------------------------------------------- PIT


def test_pit_bounds_and_point_masses():
    F = np.array([0.2, 0.7, 1.0])
    assert pit_bounds(F, 0) == (0.0, 0.2)
    assert pit_bounds(F, 2) == (0.7, 1.0)
    assert pit_bounds(F, 9) == (1.0, 1.0)
    h = pit_histogram([0.0], [0.2], bins=10)
    assert np.allclose(h, [0.5, 0.5] + [0] * 8)
    # degenerate predictive, observation on its atom: all mass in the top bin
    assert np.allclose(pit_histogram([1.0], [1.0], 4), [0, 0, 0, 1])
    # observation below the support
    assert np.allclose(pit_histogram([0.0], [0.0], 4), [1, 0, 0, 0])


def test_pit_uniform_for_calibrated_counts():
    rng = np.random.default_rng(8)
    lo, hi = [], []
    for _ in range(5000):
        mu, eta = rng.uniform(0.5, 30), rng.uniform(0.1, 2)
        F = adaptive_mixture_cdf("negbin", np.ones(1), mu=np.array([mu]), eta=np.array([eta]))
        y = rng.negative_binomial(mu / eta, 1 / (1 + eta))
        a, b = pit_bounds(F, y)
        lo.append(a)
        hi.append(b)
    h = pit_histogram(lo, hi)
    assert h.sum() == pytest.approx(1.0)
    assert pit_chi2(lo, hi)[1] > 0.001


def test_pit_near_continuous_limit():
    # large mean, so F(y) - F(y-1) is tiny and the PIT is essentially F(y)
    F = adaptive_mixture_cdf("negbin", np.ones(1), mu=np.array([1e5]), eta=np.array([0.5]))
    y = int(1e5 + 200)
    lo, hi = pit_bounds(F, y)
    assert hi - lo < 1e-3
    h = pit_histogram([lo], [hi], 10)
    assert h[int(hi * 10)] == pytest.approx(1.0)


# ---------------------------------------------------------------- log score


def test_log_score_identities(rng):
    w = rng.uniform(size=20)
    L = rng.uniform(0.01, 1, size=20)
    expected = -math.log(np.sum(w * L) / np.sum(w))
    assert log_score_from_weights(w, w * L) == pytest.approx(expected)
    assert log_score_from_weights(np.log(w), np.log(w * L), log_scale=True) == pytest.approx(expected)
    assert log_score_from_weights(w, w) == 0.0
    with pytest.raises(DegenerateWeightsError):
        log_score_from_weights(w, np.zeros(20))


# ---------------------------------------------------------------- forecast


def test_mixture_quantiles():
    F = np.array([0.1, 0.5, 0.5, 0.975, 1.0])
    assert list(mixture_quantiles(F, [0.05, 0.5, 0.975, 0.99])) == [0, 1, 3, 4]


def test_single_particle_forecast_matches_negbin(reduced, engine1):
    th = truth_vector(reduced.truth)[None]
    out = forecast(th, np.ones(1), engine1, 100, horizon=5)
    ex = engine1.expected(th, 104)
    eta = ex["eta"][0, 99:104]
    mu = ex["confirmed"][0, 99:104]
    ref = np.stack([stats.nbinom.ppf(q, mu / eta[:, None], 1 / (1 + eta[:, None])) for q in (0.025, 0.5, 0.975)], -1)
    assert out["confirmed"].shape == (5, reduced.n_ages, 3)
    assert np.array_equal(out["confirmed"], ref)


def test_forecast_copies_equal_single(reduced, engine1):
    th = truth_vector(reduced.truth)[None]
    a = forecast(th, np.ones(1), engine1, 90, horizon=3)
    b = forecast(np.repeat(th, 7, axis=0), np.arange(1.0, 8.0), engine1, 90, horizon=3)
    assert np.array_equal(a["confirmed"], b["confirmed"])
    with pytest.raises(ValueError):
        forecast(th, np.ones(1), engine1, 90, horizon=0)
