from __future__ import annotations

import math

import numpy as np
import pytest
from scipy import stats
from scipy.special import expit

from flusmc.mcmc import (
    EpidemicPosterior,
    InitialisationError,
    McmcConfig,
    McmcResult,
    find_map,
    kl_reference_distribution,
    posterior_mcmc,
    run_mcmc,
)
from flusmc.params import ParameterSpace, truth_vector


def test_config_validation():
    with pytest.raises(ValueError):
        McmcConfig(iterations=10, burn_in=10)
    with pytest.raises(ValueError):
        McmcConfig(iterations=10, burn_in=1, thin=0)
    assert McmcConfig().landmark_days == (50, 70, 83, 120, 164, 245)


def test_gaussian_target_moments():
    mu = np.array([1.0, -0.5])
    cov = np.array([[2.0, 0.8], [0.8, 1.0]])
    P = np.linalg.inv(cov)

    def lt(z):
        d = z - mu
        return -0.5 * d @ P @ d

    res = run_mcmc(lt, np.zeros(2), McmcConfig(iterations=60_000, burn_in=10_000, thin=1, seed=2))
    x = res.samples
    b = x.reshape(100, -1, 2).mean(axis=1)
    se = b.std(axis=0, ddof=1) / 10
    assert np.all(np.abs(x.mean(axis=0) - mu) <= 3 * se)
    assert np.allclose(np.cov(x.T), cov, rtol=0.1)
    assert 0.15 < res.accept_rate < 0.4
    assert res.n_evals == 60_000


def test_flat_target_on_bounded_transform():
    # z = logit(u) with u uniform: density of z is u (1 - u)
    def lt(z):
        u = expit(z[0])
        return math.log(u * (1 - u)) if 0 < u < 1 else -math.inf

    res = run_mcmc(lt, np.zeros(1), McmcConfig(iterations=120_000, burn_in=20_000, thin=50, seed=9))
    assert stats.kstest(expit(res.samples[:, 0]), "uniform").pvalue > 0.01


def test_initialisation_error():
    with pytest.raises(InitialisationError):
        run_mcmc(lambda z: -math.inf, np.zeros(2), McmcConfig(iterations=10, burn_in=1))


def test_deterministic_under_seed():
    lt = lambda z: -0.5 * float(z @ z)  # noqa: E731
    a = run_mcmc(lt, np.zeros(3), McmcConfig(iterations=3000, burn_in=1000, seed=4))
    b = run_mcmc(lt, np.zeros(3), McmcConfig(iterations=3000, burn_in=1000, seed=4))
    assert np.array_equal(a.samples, b.samples)


def test_find_map_on_quadratic():
    lt = lambda z: -0.5 * float((z - 2) @ np.diag([1.0, 4.0]) @ (z - 2))  # noqa: E731
    z, lp, cov = find_map(lt, np.zeros((1, 2)))
    assert np.allclose(z, 2, atol=1e-4)
    assert np.allclose(cov, np.diag([1.0, 0.25]), rtol=1e-3)


def test_identical_replicates_have_zero_kl():
    x = np.random.default_rng(1).normal(size=(500, 3))
    base = McmcResult(x, np.zeros(500), 0.2, np.array([]), 0, 1.0, np.eye(3))
    assert kl_reference_distribution(base, [base, x]) == pytest.approx([0.0, 0.0], abs=1e-12)


def test_epidemic_posterior_consistency(reduced, engine1):
    space = ParameterSpace(["psi", "d_I"], truth_vector(reduced.truth))
    post = EpidemicPosterior(engine1, space, 90)
    z = np.array([[math.log(0.13), math.log(2.4)], [math.log(0.14), math.log(2.6)]])
    assert np.allclose(post.batch(z), [post(z[0]), post(z[1])])


def test_posterior_mcmc_records_evaluations(reduced, engine1):
    space = ParameterSpace(["psi"], truth_vector(reduced.truth))
    res = posterior_mcmc(engine1, space, 80, McmcConfig(iterations=2000, burn_in=500, seed=1))
    assert res.n_evals >= 2000
    assert abs(math.exp(res.samples[:, 0].mean()) - 0.133) < 0.02
