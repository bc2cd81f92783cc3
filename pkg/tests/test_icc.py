from __future__ import annotations

import numpy as np
import pytest

from flusmc.smc.icc import ICCUndefinedError, icc


def anova_icc(groups):
    # textbook unbalanced one-way ANOVA estimator
    k = len(groups)
    n_i = np.array([len(g) for g in groups], dtype=float)
    N = n_i.sum()
    allv = np.concatenate(groups)
    grand = allv.mean()
    msb = sum(n * (np.mean(g) - grand) ** 2 for n, g in zip(n_i, groups)) / (k - 1)
    msw = sum(np.sum((np.asarray(g) - np.mean(g)) ** 2) for g in groups) / (N - k)
    n0 = (N - np.sum(n_i**2) / N) / (k - 1)
    s2a = (msb - msw) / n0
    return s2a / (s2a + msw)


def test_matches_textbook_estimator(rng):
    groups = [rng.normal(mu, 1.0, size=s) for mu, s in zip(rng.normal(0, 2, 8), [2, 3, 5, 4, 2, 7, 3, 6])]
    g = np.concatenate(groups)
    labels = np.repeat(np.arange(8), [len(x) for x in groups])
    assert icc(g, labels) == pytest.approx(anova_icc(groups), rel=1e-12)


def test_singletons_dropped(rng):
    g = rng.normal(size=10)
    labels = np.array([0, 0, 1, 1, 1, 2, 3, 4, 5, 6])
    assert icc(g, labels) == pytest.approx(anova_icc([g[:2], g[2:5]]), rel=1e-12)


def test_identical_clusters_give_one():
    assert icc(np.array([1.0, 1.0, 2.0, 2.0]), np.array([0, 0, 1, 1])) == 1.0


def test_independent_values_near_zero(rng):
    labels = np.repeat(np.arange(500), 4)
    assert abs(icc(rng.normal(size=2000), labels)) < 0.06


def test_undefined():
    with pytest.raises(ICCUndefinedError):
        icc(np.arange(4.0), np.array([0, 1, 2, 3]))
    with pytest.raises(ICCUndefinedError):
        icc(np.arange(4.0), np.array([0, 0, 1, 2]))
