"""Intra-class correlation of a particle summary across resampling clusters."""
from __future__ import annotations

import numpy as np


class ICCUndefinedError(ValueError):
    """Fewer than two clusters with at least two members."""


def icc(g_values, cluster_labels) -> float:
    """One-way ANOVA intra-class correlation ``r_A`` of ``g`` grouped by cluster.

    Singleton clusters carry no within-cluster information and are dropped.
    ``r_A = 1`` when every cluster is internally constant.
    """
    g = np.asarray(g_values, dtype=float)
    labels = np.asarray(cluster_labels)
    uniq, inv, sizes = np.unique(labels, return_inverse=True, return_counts=True)
    keep = sizes[inv] >= 2
    if np.count_nonzero(sizes >= 2) < 2:
        raise ICCUndefinedError("need at least two clusters with two or more members")
    g, inv = g[keep], inv[keep]
    _, inv = np.unique(inv, return_inverse=True)
    d_i = np.bincount(inv).astype(float)
    I = d_i.size
    d = d_i.sum()
    means = np.bincount(inv, weights=g) / d_i
    grand = g.mean()
    ms_a = np.sum(d_i * (means - grand) ** 2) / (I - 1)
    ms_w = np.sum((g - means[inv]) ** 2) / (d - I)
    d_bar = d / I
    d0 = d_bar - np.sum((d_i - d_bar) ** 2) / (d * (I - 1))
    between = (ms_a - ms_w) / d0
    if ms_w == 0.0:
        return 1.0
    return float(between / (between + ms_w))
