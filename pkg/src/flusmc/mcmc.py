"""Adaptive random-walk Metropolis reference sampler.

The proposal covariance is learnt during burn-in (diagonal first, then full)
with the global scale steered towards 23.4% acceptance; it is frozen
afterwards so the retained draws come from a fixed, reversible kernel.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable

import numpy as np
from scipy import optimize

from .engine import LikelihoodEngine
from .params import ParameterSpace


class InitialisationError(ValueError):
    pass


@dataclass
class McmcConfig:
    iterations: int = 100_000
    burn_in: int = 20_000
    thin: int = 10
    seed: int = 0
    target_accept: float = 0.234
    # iteration at which the full covariance replaces the diagonal one
    full_cov_after: int | None = None
    adapt_every: int = 100
    landmark_days: tuple = (50, 70, 83, 120, 164, 245)

    def __post_init__(self):
        if not self.iterations > self.burn_in >= 0:
            raise ValueError("need iterations > burn_in >= 0")
        if self.thin < 1:
            raise ValueError("thin must be at least 1")
        if self.full_cov_after is None:
            self.full_cov_after = self.burn_in // 4


@dataclass
class McmcResult:
    samples: np.ndarray
    log_post: np.ndarray
    accept_rate: float
    accept_trace: np.ndarray
    n_evals: int
    scale: float
    proposal_cov: np.ndarray
    info: dict = field(default_factory=dict)


class EpidemicPosterior:
    """Log-posterior of the unconstrained free parameters given days ``1..day``."""

    def __init__(self, engine: LikelihoodEngine, space: ParameterSpace, day: int):
        self.engine = engine
        self.space = space
        self.day = int(day)

    def __call__(self, z) -> float:
        z = np.asarray(z, dtype=float)
        lp = float(self.space.log_prior(z[None])[0])
        if not math.isfinite(lp):
            return -math.inf
        ll = float(self.engine.evaluate(self.space.to_natural(z[None]), self.day).loglik()[0])
        return lp + ll if math.isfinite(ll) else -math.inf

    def batch(self, z) -> np.ndarray:
        z = np.atleast_2d(z)
        return self.space.log_prior(z) + self.engine.evaluate(self.space.to_natural(z), self.day).loglik()


def run_mcmc(log_target: Callable, z0, config: McmcConfig, init_cov=None) -> McmcResult:
    """Adaptive random-walk Metropolis from ``z0``.

    ``log_target`` maps a 1-d array to a log density (``-inf`` outside the
    support).  ``init_cov`` seeds the proposal covariance (identity times
    0.01 otherwise).
    """
    rng = np.random.default_rng(np.random.SeedSequence([int(config.seed), 0x4D43]))
    z = np.array(z0, dtype=float)
    d = z.size
    lp = log_target(z)
    if not math.isfinite(lp):
        raise InitialisationError("log posterior is not finite at the initial point")
    cov = np.eye(d) * 0.01 if init_cov is None else np.array(init_cov, dtype=float)
    chol = np.linalg.cholesky(cov + 1e-12 * np.eye(d))
    log_s = math.log(2.38 / math.sqrt(d))
    # running moments of the burn-in chain
    m_mean = z.copy()
    m_ss = np.zeros((d, d))
    m_n = 1
    n_keep = (config.iterations - config.burn_in) // config.thin
    samples = np.empty((n_keep, d))
    logs = np.empty(n_keep)
    n_acc = 0
    n_acc_kept = 0
    trace = []
    block_acc = 0
    evals = 0
    k = 0
    for it in range(1, config.iterations + 1):
        prop = z + math.exp(log_s) * (chol @ rng.standard_normal(d))
        lp_new = log_target(prop)
        evals += 1
        accepted = math.log(rng.uniform()) < lp_new - lp
        if accepted:
            z, lp = prop, lp_new
            n_acc += 1
            block_acc += 1
        if it <= config.burn_in:
            # Robbins-Monro scale update and covariance learning
            log_s += ((1.0 if accepted else 0.0) - config.target_accept) / it**0.6
            m_n += 1
            delta = z - m_mean
            m_mean += delta / m_n
            m_ss += np.outer(delta, z - m_mean)
            if it % config.adapt_every == 0 and m_n > 2 * d + 10:
                emp = m_ss / (m_n - 1)
                if it < config.full_cov_after:
                    emp = np.diag(np.diag(emp))
                try:
                    chol = np.linalg.cholesky(emp + 1e-10 * np.diag(np.diag(emp)) + 1e-12 * np.eye(d))
                except np.linalg.LinAlgError:
                    pass
        else:
            n_acc_kept += accepted
            if (it - config.burn_in) % config.thin == 0 and k < n_keep:
                samples[k] = z
                logs[k] = lp
                k += 1
        if it % 1000 == 0:
            trace.append(block_acc / 1000.0)
            block_acc = 0
    kept_iters = config.iterations - config.burn_in
    return McmcResult(
        samples=samples[:k],
        log_post=logs[:k],
        accept_rate=n_acc_kept / kept_iters if kept_iters else n_acc / config.iterations,
        accept_trace=np.array(trace),
        n_evals=evals,
        scale=math.exp(log_s),
        proposal_cov=chol @ chol.T,
    )


def numerical_hessian(f: Callable, x, step: float = 1e-3) -> np.ndarray:
    """Central-difference Hessian of a scalar function."""
    x = np.asarray(x, dtype=float)
    d = x.size
    H = np.empty((d, d))
    f0 = f(x)
    e = np.eye(d) * step
    for i in range(d):
        H[i, i] = (f(x + e[i]) - 2 * f0 + f(x - e[i])) / step**2
        for j in range(i):
            v = (f(x + e[i] + e[j]) - f(x + e[i] - e[j]) - f(x - e[i] + e[j]) + f(x - e[i] - e[j])) / (4 * step**2)
            H[i, j] = H[j, i] = v
    return H


def find_map(log_target: Callable, starts, maxiter: int = 2000) -> tuple[np.ndarray, float, np.ndarray]:
    """Posterior mode by L-BFGS-B from several starts, plus a Laplace covariance.

    Returns ``(z_map, log_post, cov)``; ``cov`` falls back to a diagonal guess
    when the numerical Hessian is not negative definite.
    """
    def neg(z):
        v = log_target(z)
        return 1e300 if not math.isfinite(v) else -v

    best = None
    for s in np.atleast_2d(starts):
        if not math.isfinite(log_target(s)):
            continue
        res = optimize.minimize(neg, s, method="L-BFGS-B", options={"maxiter": maxiter})
        # a second pass from the first optimum polishes flat valleys
        res = optimize.minimize(neg, res.x, method="L-BFGS-B", options={"maxiter": maxiter})
        if best is None or res.fun < best.fun:
            best = res
    if best is None:
        raise InitialisationError("no starting point has finite posterior density")
    H = numerical_hessian(log_target, best.x)
    cov = None
    if np.all(np.isfinite(H)):
        try:
            cov = np.linalg.inv(-H)
            np.linalg.cholesky(cov)
        except np.linalg.LinAlgError:
            cov = None
    if cov is None:
        diag = np.abs(np.diag(H))
        cov = np.diag(1.0 / np.where(diag > 1e-8, diag, 1.0))
    return best.x, -best.fun, cov


def posterior_mcmc(engine: LikelihoodEngine, space: ParameterSpace, day: int, config: McmcConfig,
                   z0=None, init_cov=None, starts=None) -> McmcResult:
    """Reference posterior for data up to ``day``; starts at the posterior mode unless ``z0`` is given."""
    target = EpidemicPosterior(engine, space, day)
    before = engine.n_evals
    info = {}
    if z0 is None:
        if starts is None:
            c = space.prior_centre()
            rng = np.random.default_rng(np.random.SeedSequence([int(config.seed), 0x4D4150]))
            starts = np.vstack([c, c + 0.2 * rng.standard_normal((3, c.size))])
        z0, lp_map, cov_map = find_map(target, starts)
        info["map"] = z0.copy()
        info["map_log_post"] = lp_map
        if init_cov is None:
            init_cov = cov_map
    res = run_mcmc(target, z0, config, init_cov)
    res.n_evals = engine.n_evals - before
    res.info.update(info)
    res.info["day"] = int(day)
    return res


def kl_reference_distribution(base: McmcResult, replicates, exclude=None) -> np.ndarray:
    """Gaussian KL of each replicate posterior from the base chain.

    ``replicates`` is a list of :class:`McmcResult` (or sample arrays) run
    with other seeds and starting points.
    """
    from .diagnostics import gaussian_kl

    out = []
    for r in replicates:
        s = r.samples if isinstance(r, McmcResult) else np.asarray(r)
        out.append(gaussian_kl(base.samples, s, exclude=exclude))
    return np.array(out)


def replicate_chains(engine: LikelihoodEngine, space: ParameterSpace, day: int, config: McmcConfig,
                     base: McmcResult, n_replicates: int) -> list[McmcResult]:
    """Re-run the reference sampler from dispersed points of ``base`` with fresh seeds."""
    rng = np.random.default_rng(np.random.SeedSequence([int(config.seed), 0x5245]))
    picks = rng.choice(base.samples.shape[0], size=n_replicates, replace=False)
    out = []
    for r, i in enumerate(picks, start=1):
        cfg = McmcConfig(**{**config.__dict__, "seed": int(config.seed) * 1000 + r})
        out.append(posterior_mcmc(engine, space, day, cfg, z0=base.samples[i], init_cov=base.proposal_cov))
    return out
