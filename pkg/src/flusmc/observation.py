"""Surveillance streams: expected counts, background consultations and likelihoods.

Four streams are modelled per day and age group:

* ``confirmed``: laboratory-confirmed cases, negative binomial;
* ``gp``: primary-care ILI consultations, negative binomial on pandemic plus
  background consultations;
* ``virology``: positive swabs among those tested, binomial;
* ``serology``: seropositive sera among those tested, binomial.

Days are 1-based throughout; arrays indexed by day use row ``day - 1``.
"""
from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy import stats
from scipy.special import gammaln, xlog1py, xlogy

from .config import STREAMS, SettingConfig
from .model import Trajectory
from .params import INDEX

COUNT_STREAMS = ("confirmed", "gp")
BINOMIAL_STREAMS = ("virology", "serology")


class ObservationError(ValueError):
    pass


# ----------------------------------------------------------------------------
# delays and expected counts


@dataclass(frozen=True)
class DelayPmf:
    mass: np.ndarray

    def __post_init__(self):
        mass = np.asarray(self.mass, dtype=float)
        if np.any(mass < 0) or abs(mass.sum() - 1.0) > 1e-12:
            raise ObservationError("delay mass must be non-negative and sum to one")
        object.__setattr__(self, "mass", mass)

    @property
    def l_max(self) -> int:
        return self.mass.size - 1

    def mean(self) -> float:
        return float(np.arange(self.mass.size) @ self.mass)


def delay_pmf(zeta: float, sigma2: float, l_max: int, tol: float = 1e-6) -> DelayPmf:
    """Gamma delay with mean ``zeta`` and variance ``sigma2`` on integer lags.

    Lag ``l`` collects the continuous mass on ``[l - 1/2, l + 1/2)`` so that
    the discrete mean matches ``zeta`` and a vanishing variance concentrates
    everything on the nearest integer.
    """
    if not (zeta > 0 and sigma2 > 0 and l_max >= 1):
        raise ObservationError("zeta > 0, sigma2 > 0 and l_max >= 1 required")
    shape = zeta * zeta / sigma2
    scale = sigma2 / zeta
    edges = np.concatenate([[0.0], np.arange(l_max + 1) + 0.5])
    cdf = stats.gamma.cdf(edges, shape, scale=scale)
    lost = stats.gamma.sf(edges[-1], shape, scale=scale)
    if lost > tol:
        raise ObservationError(f"l_max={l_max} truncates {lost:.3g} of the delay mass")
    mass = np.diff(cdf)
    return DelayPmf(mass / mass.sum())


def convolve_delay(daily, pmf: DelayPmf) -> np.ndarray:
    """``out[d] = sum_l daily[d - l] f(l)`` along axis 0 (no wrap-around)."""
    daily = np.asarray(daily, dtype=float)
    out = np.zeros_like(daily)
    for lag, f in enumerate(pmf.mass):
        if lag >= daily.shape[0]:
            break
        out[lag:] += f * daily[: daily.shape[0] - lag]
    return out


def expected_counts(trajectory: Trajectory, phi: float, p_e: float, pmf: DelayPmf, t_index: int, a: int) -> float:
    """Expected count on day ``t_index`` for age ``a``: ``phi p sum_l Delta_{t-l,a} f(l)``."""
    daily = trajectory.daily_infections()[:, a]
    lags = np.arange(min(t_index - 1, pmf.l_max) + 1)
    return float(phi * p_e * np.sum(daily[t_index - 1 - lags] * pmf.mass[lags]))


def reporting_matrix(p, n_days: int, is_child, intervention_day: int) -> np.ndarray:
    """Day-by-age reporting probabilities with the post-intervention step."""
    p1, p2, p3, p4 = (float(v) for v in p)
    is_child = np.asarray(is_child, dtype=bool)
    before = np.where(is_child, p1, p2)
    after = np.where(is_child, p3 * p1, p4 * p2)
    days = np.arange(1, n_days + 1)[:, None]
    return np.where(days <= intervention_day, before, after)


def dispersion_vector(eta, n_days: int, intervention_day: int) -> np.ndarray:
    days = np.arange(1, n_days + 1)
    return np.where(days <= intervention_day, float(eta[0]), float(eta[1]))


# ----------------------------------------------------------------------------
# background consultation rates


def _hat_weights(day: float, knots) -> np.ndarray:
    eye = np.eye(len(knots))
    return np.array([np.interp(day, knots, eye[k]) for k in range(len(knots))])


def background_design(n_days: int, is_child, pre_knots=(1, 42, 83), post_knots=(84, 128, 176, 245)) -> np.ndarray:
    """Design tensor ``X`` with ``log B_{d,a} = X[d-1, a] @ beta_B`` (before population scaling).

    Coefficient layout: ``mu, alpha_1 .. alpha_{K-1}, beta_child`` for the
    post-intervention segment (last knot ``alpha_K = -sum alpha``, adults get
    ``-beta_child``), then one level per pre-intervention knot and a separate
    child effect.  The two segments are unlinked, so the curve may jump
    between them.
    """
    is_child = np.asarray(is_child, dtype=bool)
    sign = np.where(is_child, 1.0, -1.0)
    kpost, kpre = len(post_knots), len(pre_knots)
    n_coef = 1 + (kpost - 1) + 1 + kpre + 1
    X = np.zeros((n_days, is_child.size, n_coef))
    for d in range(1, n_days + 1):
        row = np.zeros((is_child.size, n_coef))
        if d < post_knots[0]:
            w = _hat_weights(d, pre_knots)
            row[:, 2 + kpost - 1 : 2 + kpost - 1 + kpre] = w
            row[:, -1] = sign
        else:
            w = _hat_weights(d, post_knots)
            row[:, 0] = 1.0
            row[:, 1:kpost] = w[:-1] - w[-1]
            row[:, kpost] = sign
        X[d - 1] = row
    return X


def background_matrix(beta_B, design, populations, per_population: float = 1e5) -> np.ndarray:
    scale = np.asarray(populations, dtype=float) / per_population
    return scale * np.exp(design @ np.asarray(beta_B, dtype=float))


def background_rate(beta_B, t_index: int, a: int, is_child, populations=None, per_population: float = 1e5,
                    pre_knots=(1, 42, 83), post_knots=(84, 128, 176, 245)) -> float:
    """Background consultations on one day for one age group.

    Without ``populations`` the rate is per ``per_population`` people.
    """
    X = background_design(t_index, is_child, pre_knots, post_knots)[t_index - 1, a]
    scale = 1.0 if populations is None else populations[a] / per_population
    return float(scale * math.exp(X @ np.asarray(beta_B, dtype=float)))


# ----------------------------------------------------------------------------
# log-likelihoods


def _stirlerr(z):
    z2 = z * z
    return (1.0 / 12.0 - (1.0 / 360.0 - (1.0 / 1260.0 - 1.0 / (1680.0 * z2)) / z2) / z2) / z


def nbinom_logpmf(x, mu, eta):
    """Negative binomial log-pmf with mean ``mu`` and variance ``mu (1 + eta)``.

    Stable as ``eta -> 0`` (Poisson limit), where the textbook ``lgamma``
    form cancels catastrophically.
    """
    x, mu, eta = np.broadcast_arrays(*(np.asarray(v, dtype=float) for v in (x, mu, eta)))
    out = np.empty(x.shape)
    zero_mu = mu <= 0
    out[zero_mu] = np.where(x[zero_mu] == 0, 0.0, -np.inf)
    ok = ~zero_mu
    xs, ms, es = x[ok], mu[ok], eta[ok]
    r = ms / es
    l1e = np.log1p(es)
    big = r >= 10.0
    with np.errstate(divide="ignore", invalid="ignore"):
        q = xs / r
        lq = np.log1p(q)
        dev_big = r * (lq - q) + (xs - 0.5) * lq + _stirlerr(r + xs) - _stirlerr(r)
        dev_small = gammaln(xs + r) - gammaln(r) - xs * np.log(r)
    dev = np.where(big, dev_big, dev_small)
    out[ok] = dev - gammaln(xs + 1) + xlogy(xs, ms) - r * l1e - xs * l1e
    return out if out.ndim else float(out)


def loglik_confirmed(x, mu, eta):
    return nbinom_logpmf(x, mu, eta)


def loglik_gp(x, mu_doc, B, eta):
    return nbinom_logpmf(x, np.asarray(mu_doc) + np.asarray(B), eta)


def binom_logpmf(k, n, p):
    k, n, p = (np.asarray(v, dtype=float) for v in (k, n, p))
    out = gammaln(n + 1) - gammaln(k + 1) - gammaln(n - k + 1) + xlogy(k, p) + xlog1py(n - k, -p)
    return out if out.ndim else float(out)


def loglik_virology(w, v, mu_doc, B):
    """Positive swabs ``w`` of ``v`` with positivity ``mu_doc / (mu_doc + B)``."""
    w, v, mu_doc, B = np.broadcast_arrays(*(np.asarray(a, dtype=float) for a in (w, v, mu_doc, B)))
    total = mu_doc + B
    if np.any((v > 0) & (total <= 0)):
        raise ObservationError("positivity undefined: no consultations expected but swabs taken")
    with np.errstate(divide="ignore", invalid="ignore"):
        prob = np.where(total > 0, mu_doc / total, 0.0)
    return binom_logpmf(w, v, prob)


def loglik_serology(z, v, S_ta, N_a):
    return binom_logpmf(z, v, 1.0 - np.asarray(S_ta, dtype=float) / np.asarray(N_a, dtype=float))


# ----------------------------------------------------------------------------
# data containers


@dataclass
class SurveillanceBatch:
    """One day's observations; ``streams[name] = (count, denominator)`` per age.

    ``count`` is NaN for ages without an observation; ``denominator`` is
    ``None`` for the count streams.
    """

    day: int
    streams: dict = field(default_factory=dict)

    def __post_init__(self):
        for name, (cnt, den) in self.streams.items():
            if name not in STREAMS:
                raise ObservationError(f"unknown stream {name!r}")
            cnt = np.asarray(cnt, dtype=float)
            seen = ~np.isnan(cnt)
            if np.any(cnt[seen] < 0):
                raise ObservationError("negative count")
            if den is not None:
                den = np.asarray(den, dtype=float)
                if np.any(cnt[seen] > den[seen]):
                    raise ObservationError(f"{name}: positives exceed sample size on day {self.day}")

    def is_empty(self) -> bool:
        return not any(np.any(~np.isnan(np.asarray(c, dtype=float))) for c, _ in self.streams.values())


class SurveillanceData:
    """Dense day-by-age arrays for every stream, NaN marking absent entries."""

    def __init__(self, n_days: int, n_ages: int):
        self.n_days = int(n_days)
        self.n_ages = int(n_ages)
        self.count = {s: np.full((n_days, n_ages), np.nan) for s in STREAMS}
        self.denom = {s: np.full((n_days, n_ages), np.nan) for s in BINOMIAL_STREAMS}

    def streams_present(self) -> tuple[str, ...]:
        return tuple(s for s in STREAMS if np.any(~np.isnan(self.count[s])))

    def set(self, stream: str, day: int, counts, denominators=None):
        self.count[stream][day - 1] = counts
        if stream in BINOMIAL_STREAMS:
            if denominators is None:
                raise ObservationError(f"{stream} needs denominators")
            self.denom[stream][day - 1] = denominators

    def batch(self, day: int, streams=None) -> SurveillanceBatch:
        out = {}
        for s in streams or STREAMS:
            cnt = self.count[s][day - 1]
            if np.all(np.isnan(cnt)):
                continue
            out[s] = (cnt.copy(), self.denom[s][day - 1].copy() if s in self.denom else None)
        return SurveillanceBatch(day, out)

    def truncated(self, last_day: int) -> "SurveillanceData":
        out = SurveillanceData(last_day, self.n_ages)
        for s in STREAMS:
            out.count[s][:] = self.count[s][:last_day]
        for s in BINOMIAL_STREAMS:
            out.denom[s][:] = self.denom[s][:last_day]
        return out

    def restricted(self, streams) -> "SurveillanceData":
        out = SurveillanceData(self.n_days, self.n_ages)
        for s in streams:
            out.count[s][:] = self.count[s]
            if s in self.denom:
                out.denom[s][:] = self.denom[s]
        return out

    def packed(self) -> dict:
        """Engine layout: counts with -1 for absent and zero denominators where unused."""
        out = {}
        for s in STREAMS:
            out[s] = np.where(np.isnan(self.count[s]), -1.0, self.count[s])
        for s in BINOMIAL_STREAMS:
            out[s + "_n"] = np.where(np.isnan(self.denom[s]), 0.0, self.denom[s])
        return out

    # csv -------------------------------------------------------------------
    def to_csv(self, path):
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["day", "age_group", "stream", "count", "denominator"])
            for d in range(1, self.n_days + 1):
                for s in STREAMS:
                    for a in range(self.n_ages):
                        c = self.count[s][d - 1, a]
                        if np.isnan(c):
                            continue
                        den = "" if s in COUNT_STREAMS else str(int(self.denom[s][d - 1, a]))
                        w.writerow([d, a, s, int(c), den])

    @classmethod
    def from_csv(cls, path, n_ages: int | None = None, n_days: int | None = None) -> "SurveillanceData":
        rows = []
        with open(path, newline="") as fh:
            for rec in csv.DictReader(fh):
                rows.append(rec)
        if not rows and (n_ages is None or n_days is None):
            raise ObservationError(f"{path} holds no observations")
        n_days = n_days or max(int(r["day"]) for r in rows)
        n_ages = n_ages or max(int(r["age_group"]) for r in rows) + 1
        out = cls(n_days, n_ages)
        for r in rows:
            d, a, s = int(r["day"]), int(r["age_group"]), r["stream"]
            if s not in STREAMS:
                raise ObservationError(f"unknown stream {s!r} in {path}")
            if d > n_days:
                continue
            out.count[s][d - 1, a] = float(r["count"])
            if s in BINOMIAL_STREAMS:
                if r["denominator"] in ("", None):
                    raise ObservationError(f"{s} row without denominator in {path}")
                out.denom[s][d - 1, a] = float(r["denominator"])
        return out


# ----------------------------------------------------------------------------
# the full observation model


@dataclass
class ObservationModel:
    """Static pieces of the observation model for one setting."""

    populations: np.ndarray
    is_child: np.ndarray
    intervention_day: int
    pmf_confirmed: DelayPmf
    pmf_gp: DelayPmf
    design: np.ndarray
    per_population: float = 1e5

    @classmethod
    def from_config(cls, cfg: SettingConfig, n_days: int | None = None) -> "ObservationModel":
        n_days = n_days or cfg.horizon_days
        bg = cfg.background()
        pmfs = [delay_pmf(float(d["mean"]), float(d["variance"]), int(d["l_max"])) for d in (cfg.delay("confirmed"), cfg.delay("gp"))]
        design = background_design(n_days, cfg.is_child, bg["pre_knots"], bg["post_knots"])
        if design.shape[2] != 9:
            raise ObservationError(f"background model has {design.shape[2]} coefficients, expected 9")
        return cls(cfg.populations, cfg.is_child, cfg.intervention_day, pmfs[0], pmfs[1], design, float(bg["per_population"]))

    def expected(self, theta, trajectory: Trajectory, n_days: int) -> dict:
        """Expected stream quantities for days ``1..n_days``."""
        theta = np.asarray(theta, dtype=float)
        daily = trajectory.daily_infections()[:n_days]
        sus = trajectory.daily_susceptibles()[:n_days]
        phi = theta[INDEX["phi"]]
        p = reporting_matrix(theta[INDEX["p1"] : INDEX["p4"] + 1], n_days, self.is_child, self.intervention_day)
        return {
            "confirmed": phi * p * convolve_delay(daily, self.pmf_confirmed),
            "gp": phi * p * convolve_delay(daily, self.pmf_gp),
            "background": background_matrix(theta[INDEX["beta_B1"] :], self.design[:n_days], self.populations, self.per_population),
            "seroprevalence": 1.0 - sus / self.populations,
            "susceptibles": sus,
            "eta": dispersion_vector(theta[INDEX["eta1"] : INDEX["eta2"] + 1], n_days, self.intervention_day),
        }


def _stream_loglik(name: str, cnt, den, ex: dict, d: int, populations) -> float:
    seen = ~np.isnan(cnt)
    if not np.any(seen):
        return 0.0
    i = d - 1
    eta = ex["eta"][i]
    if name == "confirmed":
        ll = loglik_confirmed(cnt[seen], ex["confirmed"][i][seen], eta)
    elif name == "gp":
        ll = loglik_gp(cnt[seen], ex["gp"][i][seen], ex["background"][i][seen], eta)
    elif name == "virology":
        ll = loglik_virology(cnt[seen], den[seen], ex["gp"][i][seen], ex["background"][i][seen])
    else:
        ll = loglik_serology(cnt[seen], den[seen], ex["susceptibles"][i][seen], np.asarray(populations)[seen])
    return float(np.sum(ll))


def batch_loglik(theta, trajectory: Trajectory, batch: SurveillanceBatch, streams, model: ObservationModel) -> float:
    """Sum of the log-likelihoods of the listed streams present in ``batch``."""
    if batch.is_empty():
        return 0.0
    ex = model.expected(theta, trajectory, batch.day)
    total = 0.0
    for name in streams:
        if name in batch.streams:
            cnt, den = batch.streams[name]
            total += _stream_loglik(name, np.asarray(cnt, dtype=float), den, ex, batch.day, model.populations)
    return total
