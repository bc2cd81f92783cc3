from __future__ import annotations

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from scipy import stats

from flusmc.smc.kernels import (
    KERNELS,
    KernelConfig,
    KernelDegeneracyError,
    KernelStats,
    MHKernel,
    conditional_gaussian,
    mvn_logpdf,
    propose_approx_gibbs,
    propose_componentwise_rw,
    propose_marginal_block,
    regularise,
    run_kernel_chain,
    weighted_moments,
)

MU = np.array([1.0, -2.0, 0.5])
COV = np.array([[1.0, 0.5, 0.4], [0.5, 2.0, -0.6], [0.4, -0.6, 1.5]])


def random_spd(rng, d):
    a = rng.normal(size=(d, d))
    return a @ a.T + d * np.eye(d)


def test_conditional_against_precision_form(rng):
    d = 6
    S = random_spd(rng, d)
    m = rng.normal(size=d)
    idx = np.array([1, 4])
    cond = conditional_gaussian(m, S, idx)
    P = np.linalg.inv(regularise(S))
    rest = np.setdiff1d(np.arange(d), idx)
    z = rng.normal(size=(3, d))
    # conditional precision is the G block of the joint precision
    assert np.allclose(np.linalg.inv(cond.cov), P[np.ix_(idx, idx)], rtol=1e-9)
    Pgg_inv = np.linalg.inv(P[np.ix_(idx, idx)])
    expect = m[idx] - (z[:, rest] - m[rest]) @ (Pgg_inv @ P[np.ix_(idx, rest)]).T
    assert np.allclose(cond.mean_given(z), expect, rtol=1e-9)


def test_conditional_of_all_components_is_marginal(rng):
    S = random_spd(rng, 3)
    cond = conditional_gaussian(np.zeros(3), S, [0, 1, 2])
    assert np.allclose(cond.cov, regularise(S))


def test_mvn_logpdf(rng):
    S = random_spd(rng, 4)
    m = rng.normal(size=4)
    x = rng.normal(size=(5, 4))
    chol = np.linalg.cholesky(S)
    assert np.allclose(mvn_logpdf(x, m, chol), stats.multivariate_normal(m, S).logpdf(x))


@given(st.integers(2, 40), st.integers(1, 4), st.integers(0, 2**31))
def test_weighted_moments_reduce_to_plain(n, d, seed):
    rng = np.random.default_rng(seed)
    x = rng.normal(size=(n, d))
    m, c = weighted_moments(x, np.full(n, 3.7))
    assert np.allclose(m, x.mean(axis=0))
    assert np.allclose(c, np.cov(x.T, ddof=1).reshape(d, d))


def test_weighted_moments_match_duplication(rng):
    x = rng.normal(size=(5, 2))
    counts = np.array([1, 2, 3, 1, 1])
    m, _ = weighted_moments(x, counts)
    assert np.allclose(m, np.repeat(x, counts, axis=0).mean(axis=0))


def test_singular_covariance():
    with pytest.raises(KernelDegeneracyError):
        KernelStats(np.zeros(2), np.zeros((2, 2)))


def test_gibbs_q_ratio(rng):
    st_ = KernelStats(MU, COV)
    z = rng.normal(size=(4, 3))
    zs, ratio = propose_approx_gibbs(st_, rng, z)
    ref = stats.multivariate_normal(st_.mean, st_.cov)
    assert np.allclose(ratio, ref.logpdf(z) - ref.logpdf(zs))
    zs, ratio = propose_approx_gibbs(st_, rng, z, [1])
    assert np.allclose(zs[:, [0, 2]], z[:, [0, 2]])
    c = conditional_gaussian(MU, COV, [1])
    m = c.mean_given(z)[:, 0]
    sd = np.sqrt(c.cov[0, 0])
    assert np.allclose(ratio, stats.norm.logpdf(z[:, 1], m, sd) - stats.norm.logpdf(zs[:, 1], m, sd))


def test_marginal_block_keeps_excluded(rng):
    st_ = KernelStats(MU, COV)
    z = rng.normal(size=(4, 3))
    zs, ratio = propose_marginal_block(z, st_, [2], rng)
    assert np.allclose(zs[:, 2], z[:, 2])
    ref = stats.multivariate_normal(MU[:2], st_.cov[:2, :2])
    assert np.allclose(ratio, ref.logpdf(z[:, :2]) - ref.logpdf(zs[:, :2]))


def test_componentwise_rw_default_scale(rng):
    st_ = KernelStats(MU, COV)
    z = np.zeros((200_000, 3))
    zs = propose_componentwise_rw(z, st_, [0, 2], rng)
    c = conditional_gaussian(MU, COV, [0, 2])
    assert np.allclose(np.cov(zs[:, [0, 2]].T), 2.38**2 / 2 * c.cov, rtol=0.02)
    assert np.all(zs[:, 1] == 0)


def test_config_validation():
    with pytest.raises(ValueError):
        KernelConfig(kind="nope")
    with pytest.raises(ValueError):
        KernelConfig(r_A_star=0)
    assert KernelConfig().epsilon_L == 0.5
    assert KernelConfig().rw_scale(4) == pytest.approx(2.38**2 / 4)


def test_sweep_sequences():
    groups = [[0], [1, 2]]
    assert MHKernel(KernelConfig("correlated_rw"), groups).sweeps() == [("rw", None)]
    assert MHKernel(KernelConfig("gibbs_componentwise"), groups).sweeps() == [("cgibbs", 0), ("cgibbs", 1)]
    assert MHKernel(KernelConfig("hybrid"), groups).sweeps()[0] == ("block", None)
    assert MHKernel(KernelConfig("hybrid_reduced"), groups, [2]).sweeps() == [("mblock", None), ("crw", 0), ("crw", 1)]


@pytest.mark.slow
@pytest.mark.parametrize("kind", KERNELS)
def test_kernel_targets_gaussian(kind):
    P = np.linalg.inv(COV)

    def log_target(z):
        d = z - MU
        return -0.5 * np.einsum("ij,jk,ik->i", d, P, d)

    # deliberately imperfect proposal statistics: MH must correct them
    stats_ = KernelStats(MU + 0.3, 1.5 * COV)
    ker = MHKernel(KernelConfig(kind), [[0], [1, 2]], [2])
    chains, _ = run_kernel_chain(ker, log_target, stats_, np.tile(MU, (4, 1)), 25_000, np.random.default_rng(11))
    x = chains.reshape(-1, 3)
    # batch-means standard error
    b = chains.reshape(50, -1, 3).mean(axis=1)
    se = b.std(axis=0, ddof=1) / np.sqrt(50)
    assert np.all(np.abs(x.mean(axis=0) - MU) <= 3 * se)
    assert np.all(np.abs(np.cov(x.T) - COV) <= 0.1 * np.abs(COV))
