"""Importance-weight bookkeeping: ESS, tempered reweighting, residual resampling."""
from __future__ import annotations

import numpy as np
from scipy.special import logsumexp


class DegenerateWeightsError(FloatingPointError):
    """No particle carries positive weight."""


def normalise_log_weights(log_w) -> np.ndarray:
    log_w = np.asarray(log_w, dtype=float)
    top = np.max(log_w) if log_w.size else -np.inf
    if not np.isfinite(top):
        raise DegenerateWeightsError("all weights are zero")
    w = np.exp(log_w - top)
    return w / w.sum()


def ess(weights) -> float:
    """Effective sample size ``(sum w)^2 / sum w^2`` of unnormalised weights."""
    w = np.asarray(weights, dtype=float)
    s = w.sum()
    if not s > 0:
        raise DegenerateWeightsError("ESS undefined for all-zero weights")
    w = w / s
    return float(1.0 / np.dot(w, w))


def ess_from_log(log_w) -> float:
    return ess(normalise_log_weights(log_w))


def reweight(log_w, batch_loglik, delta_increment: float) -> np.ndarray:
    """Multiply weights by ``L ** delta_increment``, on the log scale.

    Particles with ``-inf`` log-likelihood drop out; if every particle does,
    the set is degenerate.
    """
    if not 0.0 < delta_increment <= 1.0:
        raise ValueError(f"delta increment must lie in (0, 1], got {delta_increment}")
    ll = np.asarray(batch_loglik, dtype=float)
    with np.errstate(invalid="ignore"):
        new = np.asarray(log_w, dtype=float) + delta_increment * ll
    new[np.isnan(new)] = -np.inf
    if not np.any(np.isfinite(new)):
        raise DegenerateWeightsError("every particle has zero likelihood for this batch")
    return new


def log_mean_increment(log_w, batch_loglik, delta_increment: float) -> float:
    """``log sum_j W_j L_j^delta`` with ``W`` the normalised current weights."""
    new = reweight(log_w, batch_loglik, delta_increment)
    return float(logsumexp(new) - logsumexp(np.asarray(log_w, dtype=float)))


def residual_resample(weights, rng: np.random.Generator) -> np.ndarray:
    """Ancestor indices: ``floor(n w_j)`` copies of each, the rest multinomial on residuals."""
    w = np.asarray(weights, dtype=float)
    w = w / w.sum()
    n = w.size
    nw = n * w
    copies = np.floor(nw).astype(np.int64)
    # guard against n*w landing a hair below an integer
    copies += np.isclose(nw, copies + 1, rtol=0, atol=1e-9)
    rest = n - copies.sum()
    if rest > 0:
        resid = np.clip(nw - copies, 0.0, None)
        copies += rng.multinomial(rest, resid / resid.sum())
    elif rest < 0:
        raise AssertionError("residual resampling drew too many copies")
    return np.repeat(np.arange(n), copies)


def solve_next_temperature(log_w, batch_loglik, epsilon_L: float, delta0: float = 0.0,
                           min_step: float = 1e-6, tol: float = 0.5) -> tuple[float, bool]:
    """Next tempering exponent for the current batch.

    Returns ``(delta, severe)``.  ``delta = 1`` when the full batch keeps the
    ESS at or above ``epsilon_L n``.  Otherwise bisection finds ``delta`` on
    the safe side of the threshold with ``0 <= ESS(delta) - epsilon_L n <=
    tol``.  ``severe`` flags a batch so informative that even the smallest
    step ``min_step`` drops the ESS below threshold; ``delta0 + min_step`` is
    returned then.
    """
    log_w = np.asarray(log_w, dtype=float)
    ll = np.asarray(batch_loglik, dtype=float)
    target = epsilon_L * log_w.size

    def ess_at(delta):
        return ess_from_log(reweight(log_w, ll, delta - delta0))

    full = ess_at(1.0)
    # a batch that does not lower the ESS (e.g. one without information)
    # is taken whole even when the set already sits below the threshold
    if full >= target or full >= ess_from_log(log_w) * (1 - 1e-12):
        return 1.0, False
    lo = delta0 + min_step
    if lo >= 1.0 or ess_at(lo) < target:
        return min(lo, 1.0), True
    hi = 1.0
    for _ in range(200):
        mid = 0.5 * (lo + hi)
        e = ess_at(mid)
        if e >= target:
            lo = mid
            if e - target <= tol:
                break
        else:
            hi = mid
        if hi - lo < 1e-15:
            break
    return lo, False
