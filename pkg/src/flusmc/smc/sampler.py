"""Resample-move SMC over daily data batches.

Each particle carries its parameter vector together with the expected
streams of its (deterministic) epidemic over the analysis window, so that
reweighting by a new day's data costs no model runs.  Model runs happen only
inside the MH rejuvenation moves and are counted as full-likelihood
evaluations.
"""
from __future__ import annotations

import logging
import warnings
from dataclasses import dataclass, field

import numpy as np

from ..engine import LikelihoodEngine
from ..params import ParameterSpace
from .icc import ICCUndefinedError, icc
from .kernels import (
    KernelConfig,
    KernelStats,
    MHKernel,
)
from .weights import (
    DegenerateWeightsError,
    ess_from_log,
    log_mean_increment,
    normalise_log_weights,
    residual_resample,
    reweight,
    solve_next_temperature,
)

log = logging.getLogger(__name__)


class StaleSampleWarning(RuntimeWarning):
    """Rejuvenation hit the iteration cap before the ICC threshold."""


def substream(seed: int, *keys: int) -> np.random.Generator:
    """Generator for one (day, cycle, iteration, sweep) slot of a run."""
    return np.random.default_rng(np.random.SeedSequence([int(seed), *(int(k) for k in keys)]))


@dataclass
class ParticleSet:
    """Weighted particles on the unconstrained scale plus per-particle caches.

    ``hist_ll`` is the log-likelihood of days ``1..t_index``; ``cache`` holds
    expected streams per particle (engine layout) for scoring later days.
    """

    z: np.ndarray
    theta: np.ndarray
    log_w: np.ndarray
    parent: np.ndarray
    log_prior: np.ndarray
    hist_ll: np.ndarray
    g: np.ndarray
    cache: np.ndarray
    t_index: int = 0
    delta0: float = 0.0

    @property
    def n(self) -> int:
        return self.z.shape[0]

    def weights(self) -> np.ndarray:
        return normalise_log_weights(self.log_w)

    def ess(self) -> float:
        return ess_from_log(self.log_w)

    def take(self, idx) -> "ParticleSet":
        idx = np.asarray(idx, dtype=np.int64)
        return ParticleSet(self.z[idx], self.theta[idx], np.zeros(idx.size), idx.copy(), self.log_prior[idx],
                           self.hist_ll[idx], self.g[idx], self.cache[:, idx], self.t_index, self.delta0)


@dataclass
class RejuvenationRecord:
    day: int
    delta: float
    iterations: int = 0
    r_A: list = field(default_factory=list)
    proposals: dict = field(default_factory=dict)
    accepted: dict = field(default_factory=dict)
    moved_fraction: float = 0.0
    stale: bool = False
    unique_before: int = 0


@dataclass
class StepReport:
    day: int
    mode: str
    ess: list = field(default_factory=list)
    deltas: list = field(default_factory=list)
    rejuvenations: list = field(default_factory=list)
    n_evals: int = 0
    log_evidence: float = 0.0
    severe: bool = False
    warnings: list = field(default_factory=list)

    @property
    def n_rejuvenations(self) -> int:
        return len(self.rejuvenations)

    def totals(self) -> tuple[int, int]:
        prop = sum(sum(r.proposals.values()) for r in self.rejuvenations)
        acc = sum(sum(r.accepted.values()) for r in self.rejuvenations)
        return prop, acc


class SMCSampler:
    """Static-parameter resample-move SMC with optional within-day tempering.

    Parameters
    ----------
    engine : LikelihoodEngine
        Shared likelihood with the full data set; only days up to the one
        being assimilated are ever scored.
    space : ParameterSpace
    kernel : KernelConfig
    mode : {"discrete", "continuous"}
        ``discrete`` reweights by each whole day and rejuvenates when the ESS
        falls below ``epsilon_L n``; ``continuous`` tempers the day's
        likelihood and rejuvenates each time the ESS reaches the threshold.
    seed : int
    """

    def __init__(self, engine: LikelihoodEngine, space: ParameterSpace, kernel: KernelConfig | None = None,
                 mode: str = "continuous", seed: int = 0):
        if mode not in ("discrete", "continuous"):
            raise ValueError(f"mode must be 'discrete' or 'continuous', got {mode!r}")
        self.engine = engine
        self.space = space
        self.kernel = kernel or KernelConfig()
        self.mode = mode
        self.seed = int(seed)
        self.particles: ParticleSet | None = None
        names = self.kernel.component_groups
        if names is None:
            self.groups = space.group_indices()
        else:
            self.groups = [space.indices(g) for g in names if space.indices(g).size]
        self.group_labels = [",".join(space.free[i] for i in g) for g in self.groups]
        self.excluded = space.indices(self.kernel.reduced_exclusions)
        self.mh = MHKernel(self.kernel, self.groups, self.excluded)

    # ------------------------------------------------------------------ setup
    def initialise(self, z, day: int = 0) -> ParticleSet:
        """Start from an unweighted sample of ``z`` given data up to ``day``."""
        z = np.atleast_2d(np.asarray(z, dtype=float))
        theta = self.space.to_natural(z)
        lp = self.space.log_prior(z)
        if day > 0:
            res = self.engine.evaluate(theta, day, store=True)
            hist = res.loglik()
        else:
            res = self.engine.evaluate(theta, 0, store=True)
            hist = np.zeros(z.shape[0])
        good = np.isfinite(lp + hist)
        if not np.any(good):
            raise DegenerateWeightsError("no starting particle has positive posterior density")
        # particles outside the model's support keep zero weight
        log_w = np.where(good, 0.0, -np.inf)
        self.particles = ParticleSet(z, theta, log_w, np.arange(z.shape[0]), lp, hist, res.g, res.cache, day, 0.0)
        return self.particles

    def initialise_from_prior(self, n: int, rng: np.random.Generator | None = None) -> ParticleSet:
        rng = rng or substream(self.seed, 0, 0, 0, 0)
        z = self.space.sample_prior(rng, n)
        return self.initialise(z, 0)

    # ------------------------------------------------------------ the moves
    def _sweep_name(self, label, k) -> str:
        return label if k is None else f"{label}:{self.group_labels[k]}"

    def rejuvenate(self, ps: ParticleSet, batch_ll, day: int, delta: float, stats: KernelStats,
                   cycle: int, record: RejuvenationRecord) -> np.ndarray:
        """MH moves targeting prior x L(days < day) x L(day)^delta; returns the updated batch log-likelihoods."""
        kc = self.kernel
        batch_ll = batch_ll.copy()
        target = ps.log_prior + ps.hist_ll + _tempered(batch_ll, delta)
        moved = np.zeros(ps.n, dtype=bool)
        sweeps = self.mh.sweeps()
        n_iters = kc.fixed_iters if kc.stopping == "fixed" else kc.max_mh_iters
        for it in range(1, n_iters + 1):
            for s, (label, k) in enumerate(sweeps, start=1):
                rng = substream(self.seed, day, cycle, it, s)
                zs, log_q = self.mh.propose(label, k, ps.z, stats, rng)
                lps = self.space.log_prior(zs)
                ok = np.isfinite(lps)
                tgt = np.full(ps.n, -np.inf)
                idx = np.flatnonzero(ok)
                res = None
                if idx.size:
                    ths = self.space.to_natural(zs[idx])
                    res = self.engine.evaluate(ths, day, store=True)
                    hist = res.ll_days[:, : day - 1].sum(axis=1)
                    bl = res.ll_days[:, day - 1]
                    with np.errstate(invalid="ignore"):
                        tgt[idx] = lps[idx] + hist + _tempered(bl, delta)
                log_u = np.log(rng.uniform(size=ps.n))
                with np.errstate(invalid="ignore"):
                    acc = log_u < tgt - target + log_q
                acc &= np.isfinite(tgt)
                name = self._sweep_name(label, k)
                record.proposals[name] = record.proposals.get(name, 0) + ps.n
                record.accepted[name] = record.accepted.get(name, 0) + int(acc.sum())
                if acc.any():
                    pos = np.searchsorted(idx, np.flatnonzero(acc))
                    a = np.flatnonzero(acc)
                    ps.z[a] = zs[a]
                    ps.theta[a] = ths[pos]
                    ps.log_prior[a] = lps[a]
                    ps.hist_ll[a] = hist[pos]
                    batch_ll[a] = bl[pos]
                    ps.g[a] = res.g[pos]
                    ps.cache[:, a] = res.cache[:, pos]
                    target[a] = tgt[a]
                    moved |= acc
            record.iterations = it
            try:
                r = icc(ps.g, ps.parent)
            except ICCUndefinedError:
                r = float("nan")
            record.r_A.append(r)
            if kc.stopping == "icc" and r <= kc.r_A_star:
                break
        else:
            if kc.stopping == "icc":
                record.stale = True
        record.moved_fraction = float(moved.mean())
        return batch_ll

    def _resample_and_move(self, batch_ll, day, delta, cycle, report: StepReport):
        ps = self.particles
        w = ps.weights()
        stats = KernelStats.from_particles(ps.z, w)
        idx = residual_resample(w, substream(self.seed, day, cycle, 0, 0))
        new = ps.take(idx)
        rec = RejuvenationRecord(day, delta, unique_before=int(np.unique(idx).size))
        self.particles = new
        batch_ll = self.rejuvenate(new, batch_ll[idx], day, delta, stats, cycle, rec)
        new.delta0 = delta
        report.rejuvenations.append(rec)
        if rec.stale:
            msg = f"day {day}: rejuvenation stopped at {rec.iterations} iterations with r_A={rec.r_A[-1]:.3g}"
            report.warnings.append("stale-sample: " + msg)
            warnings.warn(msg, StaleSampleWarning, stacklevel=3)
        return batch_ll

    # ------------------------------------------------------------- stepping
    def assimilate(self, day: int | None = None) -> StepReport:
        """Absorb the next day's data (``t_index + 1``)."""
        ps = self.particles
        if ps is None:
            raise RuntimeError("sampler not initialised")
        day = ps.t_index + 1 if day is None else int(day)
        if day != ps.t_index + 1:
            raise ValueError(f"expected day {ps.t_index + 1}, got {day}")
        evals0 = self.engine.n_evals
        report = StepReport(day, self.mode)
        L = self.engine.cached_loglik(ps.theta, ps.cache, day)
        target = self.kernel.epsilon_L * ps.n
        if self.mode == "discrete":
            report.log_evidence = log_mean_increment(ps.log_w, L, 1.0)
            ps.log_w = reweight(ps.log_w, L, 1.0)
            e = ps.ess()
            report.ess.append(e)
            report.deltas.append(1.0)
            if e < target:
                L = self._resample_and_move(L, day, 1.0, 1, report)
        else:
            delta0, cycle = 0.0, 0
            if ps.ess() < target:
                # e.g. a start with many invalid particles: restore the set first
                cycle += 1
                L = self._resample_and_move(L, day, 0.0, cycle, report)
                ps = self.particles
            while True:
                delta, severe = solve_next_temperature(ps.log_w, L, self.kernel.epsilon_L, delta0)
                report.severe |= severe
                report.log_evidence += log_mean_increment(ps.log_w, L, delta - delta0)
                ps.log_w = reweight(ps.log_w, L, delta - delta0)
                e = ps.ess()
                report.ess.append(e)
                report.deltas.append(delta)
                if delta >= 1.0 and e >= target:
                    break
                cycle += 1
                L = self._resample_and_move(L, day, delta, cycle, report)
                ps = self.particles
                delta0 = delta
                if delta >= 1.0:
                    break
        ps = self.particles
        ps.hist_ll = ps.hist_ll + L
        ps.t_index = day
        ps.delta0 = 0.0
        report.n_evals = self.engine.n_evals - evals0
        return report

    def run(self, last_day: int, callback=None) -> list[StepReport]:
        reports = []
        while self.particles.t_index < last_day:
            rep = self.assimilate()
            reports.append(rep)
            if callback is not None:
                callback(self, rep)
        return reports

    # ------------------------------------------------------------ summaries
    def summary(self, probs=(0.025, 0.5, 0.975)) -> dict:
        ps = self.particles
        w = ps.weights()
        out = {}
        for j, name in enumerate(self.space.free):
            x = ps.theta[:, self.space.free_index[j]]
            out[name] = {"mean": float(w @ x), **{f"q{p:g}": float(v) for p, v in zip(probs, weighted_quantile(x, w, probs))}}
        return out


def _tempered(ll, delta: float) -> np.ndarray:
    # L^0 is 1 even where L vanishes
    return delta * ll if delta > 0 else np.zeros_like(ll)


def weighted_quantile(x, w, probs) -> np.ndarray:
    """Quantiles of the discrete distribution putting mass ``w`` on ``x`` (inverse CDF)."""
    x = np.asarray(x, dtype=float)
    w = np.asarray(w, dtype=float)
    order = np.argsort(x, kind="stable")
    cw = np.cumsum(w[order])
    cw /= cw[-1]
    pos = np.searchsorted(cw, np.asarray(probs, dtype=float) * (1 - 1e-12), side="left")
    return x[order][np.minimum(pos, x.size - 1)]


__all__ = [
    "DegenerateWeightsError",
    "ParticleSet",
    "RejuvenationRecord",
    "SMCSampler",
    "StaleSampleWarning",
    "StepReport",
    "substream",
    "weighted_quantile",
]
