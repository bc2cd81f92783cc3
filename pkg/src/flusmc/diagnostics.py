"""Posterior comparison and forecast calibration.

* :func:`gaussian_kl` compares two samples through their Gaussian
  approximations.
* :func:`rps`, :func:`rps_null_moments` and :func:`z_rps` score count
  forecasts with the ranked probability score and test its mean.
* :func:`pit_histogram` builds the non-randomised PIT histogram for counts.
* :func:`forecast` turns a weighted particle set into predictive bands.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numba as nb
import numpy as np
from scipy import linalg, stats
from scipy.special import logsumexp

from .smc.kernels import regularise, weighted_moments
from .smc.weights import DegenerateWeightsError


class DiagnosticUndefinedError(ValueError):
    pass


# ----------------------------------------------------------------------------
# Gaussian KL


@dataclass
class GaussianSummary:
    mean: np.ndarray
    cov: np.ndarray

    @classmethod
    def from_sample(cls, x, weights=None) -> "GaussianSummary":
        x = np.asarray(x, dtype=float)
        if x.ndim == 1:
            x = x[:, None]
        m, c = weighted_moments(x, weights)
        return cls(m, regularise(c))


def _drop(summary: GaussianSummary, keep) -> GaussianSummary:
    return GaussianSummary(summary.mean[keep], summary.cov[np.ix_(keep, keep)])


def gaussian_kl(sample0, sample1, weights0=None, weights1=None, exclude=None, names=None) -> float:
    """KL divergence of ``N(mu1, S1)`` from ``N(mu0, S0)``, i.e. ``KL(0 || 1)``.

    ``exclude`` lists columns (indices, or names when ``names`` labels the
    columns; a name prefix such as ``"beta_B"`` drops the whole block).
    Samples may also be :class:`GaussianSummary` objects.
    """
    s0 = sample0 if isinstance(sample0, GaussianSummary) else GaussianSummary.from_sample(sample0, weights0)
    s1 = sample1 if isinstance(sample1, GaussianSummary) else GaussianSummary.from_sample(sample1, weights1)
    d = s0.mean.size
    if s1.mean.size != d:
        raise ValueError("samples have different dimensions")
    if exclude:
        drop = set()
        for e in exclude:
            if isinstance(e, str):
                if names is None:
                    raise ValueError("names are needed to exclude by name")
                drop |= {i for i, n in enumerate(names) if n == e or n.startswith(e)}
            else:
                drop.add(int(e))
        keep = np.array([i for i in range(d) if i not in drop], dtype=np.int64)
        s0, s1 = _drop(s0, keep), _drop(s1, keep)
        d = keep.size
    try:
        c1 = linalg.cho_factor(s1.cov, lower=True)
        c0 = linalg.cho_factor(s0.cov, lower=True)
    except linalg.LinAlgError as exc:
        raise DiagnosticUndefinedError("covariance is singular after regularisation") from exc
    diff = s1.mean - s0.mean
    tr = np.trace(linalg.cho_solve(c1, s0.cov))
    quad = diff @ linalg.cho_solve(c1, diff)
    logdet = 2 * (np.sum(np.log(np.diag(c1[0]))) - np.sum(np.log(np.diag(c0[0]))))
    return float(max(0.5 * (tr + quad - d + logdet), 0.0))


# ----------------------------------------------------------------------------
# predictive count distributions


@nb.njit(cache=True)
def _negbin_mixture_pmf(mu, eta, w, k_max):
    # pmf by the ratio recursion p(k+1) = p(k) (k + r) q / (k + 1), walked out
    # from the mode.  Terms are kept relative to the mode in ``buf``; when the
    # walk ends inside the grid the component is normalised by its own sum,
    # which removes the lgamma rounding that grows with the mean.
    out = np.zeros(k_max + 1)
    buf = np.zeros(k_max + 1)
    for j in range(mu.size):
        if w[j] == 0.0:
            continue
        if mu[j] <= 0.0:
            out[0] += w[j]
            continue
        r = mu[j] / eta[j]
        q = eta[j] / (1.0 + eta[j])
        mode = int(max(0.0, math.floor((r - 1.0) * q / (1.0 - q))))
        if mode > k_max:
            mode = k_max
        buf[mode] = 1.0
        total = 1.0
        p = 1.0
        hi = mode
        complete = False
        for k in range(mode, k_max):
            p *= (k + r) * q / (k + 1.0)
            buf[k + 1] = p
            total += p
            hi = k + 1
            if p < 1e-17:
                complete = True
                break
        if mode == k_max and p * (k_max + r) * q / (k_max + 1.0) < 1e-17:
            complete = True
        p = 1.0
        lo = mode
        for k in range(mode, 0, -1):
            p *= k / ((k - 1.0 + r) * q)
            buf[k - 1] = p
            total += p
            lo = k - 1
            if p < 1e-17:
                break
        if complete:
            scale = w[j] / total
        else:
            logm = (math.lgamma(mode + r) - math.lgamma(r) - math.lgamma(mode + 1.0) + mode * math.log(q)
                    - r * math.log1p(eta[j]))
            scale = w[j] * math.exp(logm)
        for k in range(lo, hi + 1):
            out[k] += scale * buf[k]
    return out


def mixture_cdf(kind: str, weights, k_max: int, mu=None, eta=None, n=None, p=None) -> np.ndarray:
    """CDF on ``0..k_max`` of a weighted mixture of count distributions.

    ``kind="negbin"`` takes means ``mu`` and dispersions ``eta`` (variance
    ``mu (1 + eta)``); ``kind="binom"`` takes a common size ``n`` and
    probabilities ``p``.
    """
    w = np.asarray(weights, dtype=float)
    w = w / w.sum()
    if kind == "negbin":
        mu = np.ascontiguousarray(mu, dtype=float)
        eta = np.ascontiguousarray(np.broadcast_to(np.asarray(eta, dtype=float), mu.shape))
        return np.clip(np.cumsum(_negbin_mixture_pmf(mu, eta, w, int(k_max))), 0.0, 1.0)
    if kind == "binom":
        k = np.arange(k_max + 1)
        p = np.asarray(p, dtype=float)
        return np.clip(w @ stats.binom.cdf(k[None, :], int(n), p[:, None]), 0.0, 1.0)
    raise ValueError(f"unknown kind {kind!r}")


def adaptive_mixture_cdf(kind: str, weights, y=0, tail: float = 1e-10, **kw) -> np.ndarray:
    """:func:`mixture_cdf` on a grid widened until ``1 - F < tail`` and covering ``y``."""
    if kind == "binom":
        return mixture_cdf(kind, weights, int(kw["n"]), **kw)
    mu = np.asarray(kw["mu"], dtype=float)
    eta = np.broadcast_to(np.asarray(kw["eta"], dtype=float), mu.shape)
    sd = np.sqrt(np.max(mu * (1 + eta))) if mu.size else 0.0
    k_max = int(max(y, np.max(mu) + 10 * sd, 10)) + 1
    for _ in range(20):
        F = mixture_cdf(kind, weights, k_max, mu=mu, eta=eta)
        if 1.0 - F[-1] < tail:
            return F
        k_max *= 2
    raise DiagnosticUndefinedError("predictive tail did not converge")


# ----------------------------------------------------------------------------
# ranked probability score


def rps(predictive_cdf, y) -> float:
    """``sum_k (F_k - 1{y <= k})^2`` over the support ``k = 0..K`` of ``F``.

    ``predictive_cdf`` is an array of CDF values at ``0..K``; it must have
    reached 1 (within 1e-8) by ``K`` and cover ``y``, or it can be a
    callable ``k_max -> cdf array`` which is widened until it does.
    """
    if callable(predictive_cdf):
        k_max = max(int(y), 16)
        while True:
            F = np.asarray(predictive_cdf(k_max), dtype=float)
            if 1.0 - F[-1] <= 1e-8 and F.size > y:
                break
            k_max *= 2
    else:
        F = np.asarray(predictive_cdf, dtype=float)
        if 1.0 - F[-1] > 1e-8:
            raise ValueError("predictive CDF truncated with more than 1e-8 mass beyond the grid")
        if y >= F.size:
            F = np.concatenate([F, np.ones(int(y) - F.size + 1)])
    ind = (np.arange(F.size) >= y).astype(float)
    return float(np.sum((F - ind) ** 2))


def rps_null_moments(predictive_cdf) -> tuple[float, float]:
    """Mean and variance of the RPS when ``y`` is drawn from the predictive itself."""
    F = np.asarray(predictive_cdf, dtype=float)
    pmf = np.diff(np.concatenate([[0.0], F]))
    # s(y) = sum_{k<y} F_k^2 + sum_{k>=y} (1 - F_k)^2 for each y on the grid
    lower = np.concatenate([[0.0], np.cumsum(F**2)[:-1]])
    upper = np.cumsum(((1.0 - F) ** 2)[::-1])[::-1]
    s = lower + upper
    mean = float(np.sum(F * (1.0 - F)))
    var = float(max(np.dot(pmf, s**2) - mean**2, 0.0))
    return mean, var


def z_rps(scores, null_means, null_vars) -> float:
    """Standardised mean score under independent null predictions."""
    s = np.asarray(scores, dtype=float)
    m = np.asarray(null_means, dtype=float)
    v = np.asarray(null_vars, dtype=float)
    n = s.size
    total_var = v.sum() / n**2
    if not total_var > 0:
        raise DiagnosticUndefinedError("zero null variance")
    return float((s.mean() - m.mean()) / np.sqrt(total_var))


# ----------------------------------------------------------------------------
# PIT


def pit_bounds(predictive_cdf, y) -> tuple[float, float]:
    """``(F(y-1), F(y))`` for a count observation."""
    F = np.asarray(predictive_cdf, dtype=float)
    y = int(y)
    hi = 1.0 if y >= F.size else float(F[y])
    lo = 0.0 if y <= 0 else (1.0 if y - 1 >= F.size else float(F[y - 1]))
    return lo, hi


def pit_histogram(lower, upper, bins: int = 10) -> np.ndarray:
    """Mean non-randomised PIT histogram; heights sum to one.

    Each observation spreads unit mass uniformly over ``[F(y-1), F(y)]``
    (a point mass when the interval is empty).
    """
    lo = np.atleast_1d(np.asarray(lower, dtype=float))
    hi = np.atleast_1d(np.asarray(upper, dtype=float))
    edges = np.linspace(0.0, 1.0, bins + 1)
    width = hi - lo
    flat = width <= 1e-15
    u = edges[None, :]
    with np.errstate(divide="ignore", invalid="ignore"):
        cdf = np.clip((u - lo[:, None]) / width[:, None], 0.0, 1.0)
    # point masses: the whole unit sits in the bin containing F(y)
    cdf[flat] = (u >= hi[flat, None]).astype(float)
    cdf[flat, -1] = 1.0
    cdf[:, 0] = np.where(flat & (hi <= 0.0), 1.0, 0.0)
    heights = np.diff(cdf, axis=1)
    if flat.any():
        zero = flat & (hi <= 0.0)
        heights[zero] = 0.0
        heights[zero, 0] = 1.0
    return heights.mean(axis=0)


def pit_chi2(lower, upper, bins: int = 10) -> tuple[float, float]:
    """Chi-squared uniformity statistic and p-value of the PIT histogram."""
    n = np.size(lower)
    h = pit_histogram(lower, upper, bins)
    counts = h * n
    stat = float(np.sum((counts - n / bins) ** 2 / (n / bins)))
    return stat, float(stats.chi2.sf(stat, bins - 1))


# ----------------------------------------------------------------------------
# log score


def log_score_from_weights(pre_weights, post_weights, log_scale: bool = False) -> float:
    """``log(sum pre / sum post)`` for unnormalised weights before and after a batch.

    With ``post = pre * L`` this is minus the log predictive probability of
    the batch.  ``log_scale=True`` accepts log-weights.
    """
    if log_scale:
        a = logsumexp(np.asarray(pre_weights, dtype=float))
        b = logsumexp(np.asarray(post_weights, dtype=float))
        if not np.isfinite(b):
            raise DegenerateWeightsError("post-batch weights sum to zero")
        return float(a - b)
    pre = float(np.sum(pre_weights))
    post = float(np.sum(post_weights))
    if not post > 0:
        raise DegenerateWeightsError("post-batch weights sum to zero")
    return float(np.log(pre) - np.log(post))


# ----------------------------------------------------------------------------
# forecasting


def weighted_quantile(x, w, probs) -> np.ndarray:
    from .smc.sampler import weighted_quantile as wq

    return wq(x, w, probs)


def mixture_quantiles(F, probs) -> np.ndarray:
    """Smallest ``k`` with ``F(k) >= p`` for each probability."""
    F = np.asarray(F, dtype=float)
    return np.searchsorted(F, np.asarray(probs, dtype=float) - 1e-12, side="left").astype(float)


def forecast(thetas, weights, engine, first_day: int, horizon: int = 20, streams=("confirmed",),
             probs=(0.025, 0.5, 0.975), max_particles: int = 2000, rng=None, denominators=None) -> dict:
    """Predictive quantile bands for days ``first_day .. first_day + horizon - 1``.

    For every (day, age, stream) the predictive is the exact weighted
    mixture, over particles, of the observation distributions implied by
    each particle's trajectory; its quantiles are read off the mixture CDF.
    When the set is larger than ``max_particles`` a weighted subsample
    (with replacement, uniform weights) stands in for it.  Binomial streams
    need sample sizes in ``denominators[stream]`` with shape ``(horizon, A)``.

    Returns ``{stream: array (horizon, A, len(probs))}``.
    """
    thetas = np.atleast_2d(thetas)
    w = np.asarray(weights, dtype=float)
    w = w / w.sum()
    if horizon < 1:
        raise ValueError("horizon must be at least 1")
    if thetas.shape[0] > max_particles:
        rng = rng or np.random.default_rng(0)
        idx = rng.choice(thetas.shape[0], size=max_particles, replace=True, p=w)
        thetas = thetas[idx]
        w = np.full(max_particles, 1.0 / max_particles)
    last = first_day + horizon - 1
    ex = engine.expected(thetas, last)
    A = engine.pops.size
    out = {}
    for s in streams:
        bands = np.full((horizon, A, len(probs)), np.nan)
        for h in range(horizon):
            d = first_day - 1 + h
            eta = ex["eta"][:, d]
            for a in range(A):
                if s in ("confirmed", "gp"):
                    mu = ex[s][:, d, a] + (ex["background"][:, d, a] if s == "gp" else 0.0)
                    F = adaptive_mixture_cdf("negbin", w, mu=mu, eta=eta)
                else:
                    n = 0 if denominators is None else int(denominators[s][h, a])
                    if n <= 0:
                        continue
                    if s == "virology":
                        p = ex["gp"][:, d, a] / (ex["gp"][:, d, a] + ex["background"][:, d, a])
                    else:
                        p = 1.0 - ex["susceptibles"][:, d, a] / engine.pops[a]
                    F = mixture_cdf("binom", w, n, n=n, p=p)
                bands[h, a] = mixture_quantiles(F, probs)
        out[s] = bands
    return out


# ----------------------------------------------------------------------------
# one-step-ahead scores from a particle set


@dataclass
class ScoreRecord:
    day: int
    age: int
    stream: str
    y: float
    rps: float
    null_mean: float
    null_var: float
    pit_lower: float
    pit_upper: float


def one_step_scores(engine, thetas, cache, weights, day: int, streams=None) -> list[ScoreRecord]:
    """Score day ``day`` under the predictive mixture of a particle set.

    ``cache`` holds each particle's expected streams (engine layout), so the
    predictive costs no model runs; it must be the particle set *before*
    the day is assimilated.
    """
    from .engine import CACHE_ROWS

    w = np.asarray(weights, dtype=float)
    keep = w > 0
    w = w[keep]
    thetas = np.atleast_2d(thetas)[keep]
    cache = cache[:, keep]
    pk = engine._packed
    d = day - 1
    eta = thetas[:, engine_eta_index(engine, day)]
    rows = dict(zip(CACHE_ROWS, engine.rows))
    out = []
    for s in streams or engine.data.streams_present():
        for a in range(engine.pops.size):
            if s in ("confirmed", "gp"):
                y = pk[s][d, a]
                if y < 0:
                    continue
                mu = cache[rows[s], :, d, a]
                if s == "gp":
                    mu = mu + cache[rows["background"], :, d, a]
                F = adaptive_mixture_cdf("negbin", w, y=int(y), mu=mu, eta=eta)
            else:
                n = pk[s + "_n"][d, a]
                if n <= 0:
                    continue
                y = pk[s][d, a]
                if s == "virology":
                    mu, B = cache[rows["gp"], :, d, a], cache[rows["background"], :, d, a]
                    p = mu / (mu + B)
                else:
                    p = 1.0 - cache[rows["susceptibles"], :, d, a] / engine.pops[a]
                F = mixture_cdf("binom", w, int(n), n=int(n), p=p)
            m, v = rps_null_moments(F)
            lo, hi = pit_bounds(F, y)
            out.append(ScoreRecord(day, a, s, float(y), rps(F, y), m, v, lo, hi))
    return out


def engine_eta_index(engine, day: int) -> int:
    from .params import INDEX

    return INDEX["eta1"] if day <= engine.obs.intervention_day else INDEX["eta2"]


def summarise_scores(records, bins: int = 10) -> tuple[list[dict], list[dict]]:
    """Per-stream z statistics and PIT histograms from :class:`ScoreRecord` rows.

    Returns ``(scores, pit)`` as lists of plain dicts ready for CSV output.
    """
    by = {}
    for r in records:
        by.setdefault(r.stream, []).append(r)
    scores, pit = [], []
    for s in sorted(by):
        rs = by[s]
        sc = np.array([r.rps for r in rs])
        m = np.array([r.null_mean for r in rs])
        v = np.array([r.null_var for r in rs])
        try:
            z = z_rps(sc, m, v)
        except DiagnosticUndefinedError:
            z = float("nan")
        lo = np.array([r.pit_lower for r in rs])
        hi = np.array([r.pit_upper for r in rs])
        stat, pval = pit_chi2(lo, hi, bins)
        scores.append({"stream": s, "n": len(rs), "mean_rps": float(sc.mean()), "null_mean": float(m.mean()),
                       "null_var_of_mean": float(v.sum() / len(rs) ** 2), "z_rps": z, "pit_chi2": stat, "pit_p": pval})
        h = pit_histogram(lo, hi, bins)
        for j in range(bins):
            pit.append({"stream": s, "bin": j + 1, "lower": j / bins, "upper": (j + 1) / bins, "height": float(h[j])})
    return scores, pit
