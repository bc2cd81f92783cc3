"""Gaussian proposal machinery for the rejuvenation moves.

All proposals act on the unconstrained parameter vector.  Kernel statistics
(mean and covariance) are weighted moments of the particle set taken just
before resampling.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy import linalg

KERNELS = ("correlated_rw", "gibbs_block", "gibbs_componentwise", "hybrid", "hybrid_reduced")
RIDGE = 1e-8


class KernelDegeneracyError(np.linalg.LinAlgError):
    pass


def weighted_moments(x, weights=None) -> tuple[np.ndarray, np.ndarray]:
    """Weighted mean and (reliability-weighted, unbiased) covariance of the rows of ``x``."""
    x = np.asarray(x, dtype=float)
    n = x.shape[0]
    w = np.full(n, 1.0 / n) if weights is None else np.asarray(weights, dtype=float) / np.sum(weights)
    mean = w @ x
    dev = x - mean
    cov = (dev * w[:, None]).T @ dev
    denom = 1.0 - np.dot(w, w)
    if denom > 0:
        cov = cov / denom
    return mean, cov


def regularise(cov, ridge: float = RIDGE) -> np.ndarray:
    cov = np.atleast_2d(np.asarray(cov, dtype=float))
    cov = 0.5 * (cov + cov.T)
    return cov + ridge * np.diag(np.diag(cov))


def cholesky(cov) -> np.ndarray:
    try:
        return linalg.cholesky(regularise(cov), lower=True)
    except linalg.LinAlgError as exc:
        raise KernelDegeneracyError("kernel covariance is singular after regularisation") from exc


def mvn_logpdf(x, mean, chol) -> np.ndarray:
    """Gaussian log-density from a lower Cholesky factor; rows of ``x`` are points."""
    x = np.atleast_2d(x)
    sol = linalg.solve_triangular(chol, (x - mean).T, lower=True)
    d = chol.shape[0]
    return -0.5 * np.sum(sol * sol, axis=0) - np.sum(np.log(np.diag(chol))) - 0.5 * d * np.log(2 * np.pi)


@dataclass
class ConditionalGaussian:
    """``z_G | z_rest`` for a joint ``N(mean, cov)``: mean ``mean_G + A (z_rest - mean_rest)``."""

    idx: np.ndarray
    rest: np.ndarray
    mean: np.ndarray
    gain: np.ndarray
    cov: np.ndarray
    chol: np.ndarray

    def mean_given(self, z) -> np.ndarray:
        z = np.atleast_2d(z)
        out = np.broadcast_to(self.mean[self.idx], (z.shape[0], self.idx.size)).copy()
        if self.rest.size:
            out += (z[:, self.rest] - self.mean[self.rest]) @ self.gain.T
        return out


def conditional_gaussian(mean, cov, idx) -> ConditionalGaussian:
    mean = np.asarray(mean, dtype=float)
    cov = regularise(cov)
    idx = np.asarray(idx, dtype=np.int64)
    rest = np.setdiff1d(np.arange(mean.size), idx)
    s_gg = cov[np.ix_(idx, idx)]
    if rest.size:
        s_gr = cov[np.ix_(idx, rest)]
        s_rr = cov[np.ix_(rest, rest)]
        gain = linalg.solve(s_rr, s_gr.T, assume_a="pos").T
        c = s_gg - gain @ s_gr.T
    else:
        gain = np.zeros((idx.size, 0))
        c = s_gg
    c = 0.5 * (c + c.T)
    try:
        chol = linalg.cholesky(c, lower=True)
    except linalg.LinAlgError as exc:
        raise KernelDegeneracyError("conditional covariance is not positive definite") from exc
    return ConditionalGaussian(idx, rest, mean, gain, c, chol)


@dataclass
class KernelStats:
    """Weighted particle moments used by every proposal in one rejuvenation."""

    mean: np.ndarray
    cov: np.ndarray
    chol: np.ndarray = field(init=False)
    _memo: dict = field(init=False, repr=False, default_factory=dict)

    def __post_init__(self):
        self.mean = np.asarray(self.mean, dtype=float)
        self.cov = regularise(self.cov)
        self.chol = cholesky(self.cov)

    def conditional(self, idx) -> ConditionalGaussian:
        key = ("c", tuple(int(i) for i in idx))
        if key not in self._memo:
            self._memo[key] = conditional_gaussian(self.mean, self.cov, idx)
        return self._memo[key]

    def marginal_chol(self, idx) -> np.ndarray:
        key = ("m", tuple(int(i) for i in idx))
        if key not in self._memo:
            self._memo[key] = linalg.cholesky(self.cov[np.ix_(idx, idx)], lower=True)
        return self._memo[key]

    @classmethod
    def from_particles(cls, z, weights=None) -> "KernelStats":
        return cls(*weighted_moments(z, weights))


def propose_correlated_rw(z, stats: KernelStats, gamma: float, rng: np.random.Generator) -> np.ndarray:
    """``z* ~ N(z, gamma Sigma)``; symmetric, so no proposal-density correction."""
    z = np.atleast_2d(z)
    eps = rng.standard_normal(z.shape)
    return z + np.sqrt(gamma) * eps @ stats.chol.T


def propose_approx_gibbs(stats: KernelStats, rng: np.random.Generator, z=None, component_group=None):
    """Independence proposal from the particle Gaussian approximation.

    Without ``component_group`` the whole vector is drawn from ``N(mean,
    cov)``.  With a group, only those components are drawn, from their
    Gaussian conditional given the current values of the others (``z``).
    Returns ``(z_star, log_q_ratio)`` where ``log_q_ratio = log q(z) - log
    q(z*)`` enters the MH acceptance ratio.
    """
    if component_group is None:
        n = 1 if z is None else np.atleast_2d(z).shape[0]
        eps = rng.standard_normal((n, stats.mean.size))
        zs = stats.mean + eps @ stats.chol.T
        if z is None:
            return zs, np.zeros(n)
        ratio = mvn_logpdf(z, stats.mean, stats.chol) - mvn_logpdf(zs, stats.mean, stats.chol)
        return zs, ratio
    z = np.atleast_2d(z)
    cond = stats.conditional(component_group)
    m = cond.mean_given(z)
    eps = rng.standard_normal(m.shape)
    draw = m + eps @ cond.chol.T
    zs = z.copy()
    zs[:, cond.idx] = draw
    ratio = _centred_logpdf(z[:, cond.idx] - m, cond.chol) - _centred_logpdf(draw - m, cond.chol)
    return zs, ratio


def propose_componentwise_rw(z, stats: KernelStats, group, rng: np.random.Generator, gamma: float | None = None):
    """Random-walk move of one component group scaled by its conditional covariance."""
    z = np.atleast_2d(z)
    cond = stats.conditional(group)
    g = 2.38**2 / cond.idx.size if gamma is None else gamma
    zs = z.copy()
    zs[:, cond.idx] += np.sqrt(g) * rng.standard_normal((z.shape[0], cond.idx.size)) @ cond.chol.T
    return zs


def propose_marginal_block(z, stats: KernelStats, keep, rng: np.random.Generator):
    """Independence draw of all components except ``keep`` from their joint marginal.

    The excluded components stay where they are.  Returns ``(z_star, log_q_ratio)``.
    """
    z = np.atleast_2d(z)
    keep = np.asarray(keep, dtype=np.int64)
    move = np.setdiff1d(np.arange(stats.mean.size), keep)
    mu = stats.mean[move]
    chol = stats.marginal_chol(move)
    draw = mu + rng.standard_normal((z.shape[0], move.size)) @ chol.T
    zs = z.copy()
    zs[:, move] = draw
    ratio = mvn_logpdf(z[:, move], mu, chol) - mvn_logpdf(draw, mu, chol)
    return zs, ratio


def _centred_logpdf(dev, chol) -> np.ndarray:
    sol = linalg.solve_triangular(chol, np.atleast_2d(dev).T, lower=True)
    return -0.5 * np.sum(sol * sol, axis=0) - np.sum(np.log(np.diag(chol)))


@dataclass
class KernelConfig:
    """Rejuvenation settings.

    ``stopping="icc"`` repeats MH iterations until the intra-class
    correlation of the attack rate drops to ``r_A_star``; ``"fixed"`` runs
    exactly ``fixed_iters`` iterations.
    """

    kind: str = "hybrid"
    gamma: float | None = None
    epsilon_L: float = 0.5
    r_A_star: float = 0.1
    max_mh_iters: int = 500
    stopping: str = "icc"
    fixed_iters: int = 1
    component_groups: tuple | None = None
    reduced_exclusions: tuple = ("eta1", "eta2")

    def __post_init__(self):
        if self.kind not in KERNELS:
            raise ValueError(f"unknown kernel {self.kind!r}; choose from {KERNELS}")
        if not 0 < self.epsilon_L < 1:
            raise ValueError("epsilon_L must lie in (0, 1)")
        if not 0 < self.r_A_star < 1:
            raise ValueError("r_A_star must lie in (0, 1)")
        if self.gamma is not None and not self.gamma > 0:
            raise ValueError("gamma must be positive")
        if self.stopping not in ("icc", "fixed"):
            raise ValueError("stopping must be 'icc' or 'fixed'")
        if self.max_mh_iters < 1 or self.fixed_iters < 1:
            raise ValueError("iteration counts must be positive")

    def rw_scale(self, dim: int) -> float:
        return 2.38**2 / dim if self.gamma is None else self.gamma


class MHKernel:
    """The sweep sequence of one kernel type over given component groups.

    One MH *iteration* is the list returned by :meth:`sweeps`; each sweep
    is a single proposal-and-accept step for every chain.

    Parameters
    ----------
    config : KernelConfig
    groups : list of index arrays
        Component groups for the componentwise sweeps.
    excluded : index array
        Components left out of the block move by ``hybrid_reduced``.
    """

    def __init__(self, config: KernelConfig, groups, excluded=()):
        self.config = config
        self.groups = [np.asarray(g, dtype=np.int64) for g in groups]
        self.excluded = np.asarray(excluded, dtype=np.int64)

    def sweeps(self) -> list[tuple[str, int | None]]:
        kind = self.config.kind
        if kind == "correlated_rw":
            return [("rw", None)]
        if kind == "gibbs_block":
            return [("block", None)]
        if kind == "gibbs_componentwise":
            return [("cgibbs", k) for k in range(len(self.groups))]
        first = ("block", None) if kind == "hybrid" or self.excluded.size == 0 else ("mblock", None)
        return [first] + [("crw", k) for k in range(len(self.groups))]

    def propose(self, label: str, k, z, stats: KernelStats, rng: np.random.Generator):
        """``(z_star, log_q_ratio)`` for one sweep."""
        if label == "rw":
            return propose_correlated_rw(z, stats, self.config.rw_scale(z.shape[1]), rng), np.zeros(z.shape[0])
        if label == "block":
            return propose_approx_gibbs(stats, rng, z)
        if label == "mblock":
            return propose_marginal_block(z, stats, self.excluded, rng)
        if label == "cgibbs":
            return propose_approx_gibbs(stats, rng, z, self.groups[k])
        return propose_componentwise_rw(z, stats, self.groups[k], rng, self.config.gamma), np.zeros(z.shape[0])


def run_kernel_chain(kernel: MHKernel, log_target, stats: KernelStats, z0, iterations: int,
                     rng: np.random.Generator) -> tuple[np.ndarray, float]:
    """Plain MCMC with a fixed kernel: ``iterations`` full iterations from ``z0``.

    ``log_target`` maps an ``(m, d)`` array to ``m`` log densities; ``z0``
    holds one row per independent chain.  Returns the states after every
    iteration, shape ``(iterations, m, d)``, and the acceptance rate.
    """
    z = np.array(np.atleast_2d(z0), dtype=float)
    lp = log_target(z)
    out = np.empty((iterations,) + z.shape)
    acc = tot = 0
    sweeps = kernel.sweeps()
    for it in range(iterations):
        for label, k in sweeps:
            zs, log_q = kernel.propose(label, k, z, stats, rng)
            lps = log_target(zs)
            ok = np.log(rng.uniform(size=z.shape[0])) < lps - lp + log_q
            z[ok] = zs[ok]
            lp[ok] = lps[ok]
            acc += int(ok.sum())
            tot += z.shape[0]
        out[it] = z
    return out, acc / tot
