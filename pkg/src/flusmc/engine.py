"""Compiled batch evaluator of the full model for many parameter vectors.

One pass per parameter vector simulates the transmission model over the
whole horizon, forms the expected streams and accumulates per-day
log-likelihood contributions.  It repeats the arithmetic of
:mod:`flusmc.model` and :mod:`flusmc.observation` in numba so that SMC and
MCMC share a single fast log-posterior; the test-suite checks it against
those reference functions.
"""
from __future__ import annotations

import math
import os
from dataclasses import dataclass

import numba as nb
import numpy as np

from .config import SettingConfig
from .model import dominant_eigenvector, steps_per_day
from .observation import ObservationModel, SurveillanceData
from .params import INDEX

if "NUMBA_THREADING_LAYER" not in os.environ:
    # the TBB build shipped with some wheels is too old and only warns
    nb.config.THREADING_LAYER = "workqueue"

# status codes returned per parameter vector
OK, BAD_PARAMETER, BAD_CONTACT, BAD_SEED, BAD_STEP = 0, 1, 2, 3, 4

_PSI, _NU, _DI = INDEX["psi"], INDEX["nu"], INDEX["d_I"]
_M1, _PHI, _P1, _ETA1, _B1 = INDEX["m1"], INDEX["phi"], INDEX["p1"], INDEX["eta1"], INDEX["beta_B1"]


@nb.njit(cache=True)
def _stirlerr(z):
    z2 = z * z
    return (1.0 / 12.0 - (1.0 / 360.0 - (1.0 / 1260.0 - 1.0 / (1680.0 * z2)) / z2) / z2) / z


@nb.njit(cache=True)
def nb_logpmf(x, mu, eta):
    if mu <= 0.0:
        return 0.0 if x == 0.0 else -np.inf
    r = mu / eta
    l1e = math.log1p(eta)
    if r >= 10.0:
        q = x / r
        lq = math.log1p(q)
        dev = r * (lq - q) + (x - 0.5) * lq + _stirlerr(r + x) - _stirlerr(r)
    else:
        dev = math.lgamma(x + r) - math.lgamma(r) - x * math.log(r)
    xlogmu = 0.0 if x == 0.0 else x * math.log(mu)
    return dev - math.lgamma(x + 1.0) + xlogmu - r * l1e - x * l1e


@nb.njit(cache=True)
def binom_logpmf(k, n, p):
    if p <= 0.0:
        return 0.0 if k == 0.0 else -np.inf
    if p >= 1.0:
        return 0.0 if k == n else -np.inf
    return (math.lgamma(n + 1.0) - math.lgamma(k + 1.0) - math.lgamma(n - k + 1.0)
            + k * math.log(p) + (n - k) * math.log1p(-p))


@nb.njit(cache=True)
def _check_theta(th):
    for k in range(th.size):
        if not math.isfinite(th[k]):
            # nu = -inf (no seed) is the single allowed non-finite value
            if not (k == _NU and th[k] == -np.inf):
                return False
    if th[_PSI] < 0.0 or th[_DI] <= 0.0:
        return False
    for j in range(5):
        if th[_M1 + j] < 0.0:
            return False
    if not 0.0 <= th[_PHI] <= 1.0:
        return False
    for j in range(4):
        if not 0.0 <= th[_P1 + j] <= 1.0:
            return False
    if th[_P1 + 2] * th[_P1] > 1.0 or th[_P1 + 3] * th[_P1 + 1] > 1.0:
        return False
    if th[_ETA1] <= 0.0 or th[_ETA1 + 1] <= 0.0:
        return False
    return True


@nb.njit(cache=True)
def _simulate(th, pops, base, widx, ages, dt, d_L, per_day, daily, sus_day):
    """Fill ``daily`` (infections) and ``sus_day`` (end-of-day S); return (status, total infected)."""
    A = pops.size
    n_steps = widx.size
    psi, d_I = th[_PSI], th[_DI]
    a = 2.0 * dt / d_L
    b = 2.0 * dt / d_I
    if a > 1.0 or b > 1.0:
        return BAD_STEP, 0.0
    u = math.expm1(psi * dt)
    R0 = d_I / dt * (u + a) ** 2 * (u + b) ** 2 / (a * a * (u + 2.0 * b))
    # log escape probabilities per window: slot 0 is the reference matrix
    logq = np.empty((6, A, A))
    for w in range(6):
        mult = 1.0 if w == 0 else th[_M1 + w - 1]
        for i in range(A):
            for j in range(A):
                q = base[i, j] * mult * R0 / d_I
                if q >= 1.0:
                    return BAD_CONTACT, 0.0
                logq[w, i, j] = math.log1p(-q)
    ntot = 0.0
    nmin = pops[0]
    for i in range(A):
        ntot += pops[i]
        nmin = min(nmin, pops[i])
    i0 = math.exp(th[_NU]) * ntot
    if not i0 < nmin:
        return BAD_SEED, 0.0
    e1 = (1.0 + u) / (u + a)
    e2 = a * e1 / (u + a)
    i1 = a * e2 / (u + b)
    i2 = b * i1 / (u + b)
    wsum = e1 + e2 + i1 + i2
    S = np.empty(A)
    E1 = np.empty(A)
    E2 = np.empty(A)
    I1 = np.empty(A)
    I2 = np.empty(A)
    for i in range(A):
        s = i0 * ages[i]
        E1[i] = s * (e1 / wsum)
        E2[i] = s * (e2 / wsum)
        I1[i] = s * (i1 / wsum)
        I2[i] = s * (i2 / wsum)
        S[i] = pops[i] - (E1[i] + E2[i] + I1[i] + I2[i])
    n_days = daily.shape[0]
    daily[:, :] = 0.0
    lam = np.empty(A)
    total = 0.0
    for k in range(n_steps):
        w = widx[k] + 1
        for i in range(A):
            acc = 0.0
            for j in range(A):
                acc += logq[w, i, j] * (I1[j] + I2[j])
            lam[i] = -math.expm1(acc) * dt
        d = k // per_day
        for i in range(A):
            new = S[i] * lam[i]
            o1 = a * E1[i]
            o2 = a * E2[i]
            o3 = b * I1[i]
            o4 = b * I2[i]
            S[i] = S[i] - new
            E1[i] = E1[i] + new - o1
            E2[i] = E2[i] + o1 - o2
            I1[i] = I1[i] + o2 - o3
            I2[i] = I2[i] + o3 - o4
            total += new
            if d < n_days:
                daily[d, i] += new
                if (k + 1) % per_day == 0:
                    sus_day[d, i] = S[i]
    return OK, total / ntot


@nb.njit(cache=True)
def _p_at(th, day, child, interv):
    if day <= interv:
        return th[_P1] if child else th[_P1 + 1]
    return th[_P1 + 2] * th[_P1] if child else th[_P1 + 3] * th[_P1 + 1]


@nb.njit(cache=True)
def _expected_day(th, daily, pmf, d, i, child, interv):
    """phi p sum_l daily[d-l] f(l) for 0-based day row ``d``."""
    acc = 0.0
    L = min(d, pmf.size - 1)
    for l in range(L + 1):
        acc += daily[d - l, i] * pmf[l]
    return th[_PHI] * _p_at(th, d + 1, child, interv) * acc


@nb.njit(cache=True)
def _background(th, design, scale, d, i):
    acc = 0.0
    for c in range(design.shape[2]):
        acc += design[d, i, c] * th[_B1 + c]
    return scale[i] * math.exp(acc)


@nb.njit(cache=True)
def _one(th, pops, base, widx, ages, dt, d_L, per_day, child, interv, pmf_c, pmf_g,
         design, scale, conf, gp, vir, vir_n, ser, ser_n, n_sim_days, ll_out, cache, rows):
    A = pops.size
    daily = np.empty((n_sim_days, A))
    sus = np.empty((n_sim_days, A))
    status, g = _simulate(th, pops, base, widx, ages, dt, d_L, per_day, daily, sus)
    if status != OK:
        return status, g
    # cache rows (compacted through ``rows``): confirmed mean, gp mean,
    # background, susceptibles
    for d in range(cache.shape[1]):
        for i in range(A):
            if rows[0] >= 0:
                cache[rows[0], d, i] = _expected_day(th, daily, pmf_c, d, i, child[i], interv)
            if rows[1] >= 0:
                cache[rows[1], d, i] = _expected_day(th, daily, pmf_g, d, i, child[i], interv)
            if rows[2] >= 0:
                cache[rows[2], d, i] = _background(th, design, scale, d, i)
            if rows[3] >= 0:
                cache[rows[3], d, i] = sus[d, i]
    D = ll_out.size
    for d in range(D):
        eta = th[_ETA1] if d + 1 <= interv else th[_ETA1 + 1]
        tot = 0.0
        for i in range(A):
            if conf[d, i] >= 0.0:
                mu = _expected_day(th, daily, pmf_c, d, i, child[i], interv)
                tot += nb_logpmf(conf[d, i], mu, eta)
            if gp[d, i] >= 0.0 or vir_n[d, i] > 0.0:
                mu = _expected_day(th, daily, pmf_g, d, i, child[i], interv)
                B = _background(th, design, scale, d, i)
                if gp[d, i] >= 0.0:
                    tot += nb_logpmf(gp[d, i], mu + B, eta)
                if vir_n[d, i] > 0.0:
                    tot += binom_logpmf(vir[d, i], vir_n[d, i], mu / (mu + B))
            if ser_n[d, i] > 0.0:
                tot += binom_logpmf(ser[d, i], ser_n[d, i], 1.0 - sus[d, i] / pops[i])
        ll_out[d] = tot
    return OK, g


@nb.njit(cache=True, parallel=True)
def _evaluate(thetas, pops, base, widx, ages, dt, d_L, per_day, child, interv, pmf_c, pmf_g,
              design, scale, conf, gp, vir, vir_n, ser, ser_n, n_sim_days, ll, g, status, cache, rows):
    for j in nb.prange(thetas.shape[0]):
        th = thetas[j]
        if not _check_theta(th):
            status[j] = BAD_PARAMETER
            g[j] = np.nan
            ll[j, :] = -np.inf
            continue
        s, gj = _one(th, pops, base, widx, ages, dt, d_L, per_day, child, interv, pmf_c, pmf_g,
                     design, scale, conf, gp, vir, vir_n, ser, ser_n, n_sim_days, ll[j], cache[:, j], rows)
        status[j] = s
        g[j] = gj
        if s != OK:
            g[j] = np.nan
            ll[j, :] = -np.inf


@nb.njit(cache=True, parallel=True)
def _expected_batch(thetas, pops, base, widx, ages, dt, d_L, per_day, child, interv, pmf_c, pmf_g,
                    design, scale, n_days, mu_c, mu_g, bg, sus_out, status):
    A = pops.size
    for j in nb.prange(thetas.shape[0]):
        th = thetas[j]
        daily = np.empty((n_days, A))
        sus = np.empty((n_days, A))
        if not _check_theta(th):
            status[j] = BAD_PARAMETER
            continue
        s, _ = _simulate(th, pops, base, widx, ages, dt, d_L, per_day, daily, sus)
        status[j] = s
        if s != OK:
            continue
        for d in range(n_days):
            for i in range(A):
                mu_c[j, d, i] = _expected_day(th, daily, pmf_c, d, i, child[i], interv)
                mu_g[j, d, i] = _expected_day(th, daily, pmf_g, d, i, child[i], interv)
                bg[j, d, i] = _background(th, design, scale, d, i)
                sus_out[j, d, i] = sus[d, i]


@nb.njit(cache=True, parallel=True)
def _cached_day(thetas, cache, rows, pops, interv, conf, gp, vir, vir_n, ser, ser_n, d, out):
    """Log-likelihood of day row ``d`` from cached expected streams."""
    A = pops.size
    for j in nb.prange(thetas.shape[0]):
        th = thetas[j]
        eta = th[_ETA1] if d + 1 <= interv else th[_ETA1 + 1]
        tot = 0.0
        for i in range(A):
            if conf[d, i] >= 0.0:
                tot += nb_logpmf(conf[d, i], cache[rows[0], j, d, i], eta)
            if gp[d, i] >= 0.0 or vir_n[d, i] > 0.0:
                mu = cache[rows[1], j, d, i]
                B = cache[rows[2], j, d, i]
                if gp[d, i] >= 0.0:
                    tot += nb_logpmf(gp[d, i], mu + B, eta)
                if vir_n[d, i] > 0.0:
                    tot += binom_logpmf(vir[d, i], vir_n[d, i], mu / (mu + B))
            if ser_n[d, i] > 0.0:
                tot += binom_logpmf(ser[d, i], ser_n[d, i], 1.0 - cache[rows[3], j, d, i] / pops[i])
        out[j] = tot


CACHE_ROWS = ("confirmed", "gp", "background", "susceptibles")


@dataclass
class EvalResult:
    ll_days: np.ndarray
    g: np.ndarray
    status: np.ndarray
    cache: np.ndarray | None = None

    def loglik(self, first_day: int = 1, last_day: int | None = None) -> np.ndarray:
        last_day = self.ll_days.shape[1] if last_day is None else last_day
        return self.ll_days[:, first_day - 1 : last_day].sum(axis=1)


class LikelihoodEngine:
    """Batch log-likelihood for one setting, data set and stream selection.

    ``n_evals`` counts full-likelihood evaluations, i.e. parameter vectors
    for which the transmission model was run, and is the run-time proxy
    reported by the samplers.  Evaluations can also return the expected
    streams over the whole horizon (``store=True``); since the model is
    deterministic in ``theta`` these let :meth:`cached_loglik` score newly
    arrived days without re-running the model.
    """

    def __init__(self, cfg: SettingConfig, data: SurveillanceData | None = None, streams=None, horizon_days: int | None = None):
        self.cfg = cfg
        self.horizon_days = horizon_days or cfg.horizon_days
        self.per_day = steps_per_day(cfg.dt)
        sched = cfg.schedule()
        n_steps = self.horizon_days * self.per_day
        idx = sched.window_index()
        if idx.size < n_steps:
            # hold the final window beyond the configured calendar
            idx = np.concatenate([idx, np.full(n_steps - idx.size, idx[-1])])
        self.widx = np.ascontiguousarray(idx[:n_steps])
        self.base = np.ascontiguousarray(sched.baseline_matrix)
        self.pops = np.ascontiguousarray(cfg.populations)
        self.ages = dominant_eigenvector(self.base, self.pops)
        self.obs = ObservationModel.from_config(cfg, max(self.horizon_days, cfg.horizon_days))
        self.child = np.ascontiguousarray(cfg.is_child)
        self.scale = self.pops / self.obs.per_population
        self.streams = tuple(streams) if streams is not None else None
        self.n_evals = 0
        # days covered by stored expected streams; lower it to save memory
        self.cache_days = self.horizon_days
        self.set_data(data)

    def set_data(self, data: SurveillanceData | None):
        A = self.pops.size
        if data is None:
            data = SurveillanceData(0, A)
        if self.streams is not None:
            data = data.restricted(self.streams)
        if data.n_ages != A:
            raise ValueError(f"data has {data.n_ages} age groups, setting has {A}")
        if data.n_days > self.horizon_days:
            raise ValueError(f"data run to day {data.n_days}, beyond the {self.horizon_days}-day horizon")
        self.data = data
        self._packed = {k: np.ascontiguousarray(v) for k, v in data.packed().items()}
        present = set(self.streams if self.streams is not None else data.streams_present())
        want = ["confirmed" in present, bool(present & {"gp", "virology"}), bool(present & {"gp", "virology"}),
                "serology" in present]
        self.rows = np.where(want, np.cumsum(want) - 1, -1).astype(np.int64)
        self.n_rows = int(np.sum(want))

    @property
    def n_days(self) -> int:
        return self.data.n_days

    def _data_args(self):
        pk = self._packed
        return pk["confirmed"], pk["gp"], pk["virology"], pk["virology_n"], pk["serology"], pk["serology_n"]

    def evaluate(self, thetas, last_day: int | None = None, store: bool = False) -> EvalResult:
        """Per-day log-likelihood for days ``1..last_day`` and attack rate over the horizon."""
        thetas = np.ascontiguousarray(np.atleast_2d(thetas), dtype=float)
        last_day = self.n_days if last_day is None else int(last_day)
        if last_day > self.n_days:
            raise ValueError(f"no data beyond day {self.n_days}")
        n, A = thetas.shape[0], self.pops.size
        ll = np.zeros((n, last_day))
        g = np.zeros(n)
        status = np.zeros(n, dtype=np.int64)
        cache = np.full((self.n_rows, n, self.cache_days if store else 0, A), np.nan)
        _evaluate(thetas, self.pops, self.base, self.widx, self.ages, self.cfg.dt, self.cfg.d_L, self.per_day,
                  self.child, self.obs.intervention_day, self.obs.pmf_confirmed.mass, self.obs.pmf_gp.mass,
                  self.obs.design, self.scale, *self._data_args(), self.horizon_days, ll, g, status, cache, self.rows)
        self.n_evals += n
        return EvalResult(ll, g, status, cache if store else None)

    def cached_loglik(self, thetas, cache, day: int) -> np.ndarray:
        """Log-likelihood of one day from cached expected streams (no model run)."""
        thetas = np.ascontiguousarray(np.atleast_2d(thetas), dtype=float)
        out = np.empty(thetas.shape[0])
        if day > cache.shape[2]:
            raise ValueError(f"cache covers days 1..{cache.shape[2]}, asked for day {day}")
        _cached_day(thetas, cache, self.rows, self.pops, self.obs.intervention_day, *self._data_args(), int(day) - 1, out)
        # particles outside the support carry NaN caches
        out[np.isnan(out)] = -np.inf
        return out

    def expected(self, thetas, n_days: int | None = None) -> dict:
        """Expected streams per parameter vector, each of shape ``(n, n_days, A)``."""
        thetas = np.ascontiguousarray(np.atleast_2d(thetas), dtype=float)
        n_days = self.horizon_days if n_days is None else int(n_days)
        if n_days > self.horizon_days:
            raise ValueError("expected streams requested beyond the simulated horizon")
        n, A = thetas.shape[0], self.pops.size
        out = {k: np.full((n, n_days, A), np.nan) for k in CACHE_ROWS}
        status = np.zeros(n, dtype=np.int64)
        _expected_batch(thetas, self.pops, self.base, self.widx[: n_days * self.per_day], self.ages, self.cfg.dt,
                        self.cfg.d_L, self.per_day, self.child, self.obs.intervention_day, self.obs.pmf_confirmed.mass,
                        self.obs.pmf_gp.mass, self.obs.design, self.scale, n_days, out["confirmed"], out["gp"],
                        out["background"], out["susceptibles"], status)
        out["status"] = status
        days = np.arange(1, n_days + 1)
        eta = thetas[:, _ETA1 : _ETA1 + 2]
        out["eta"] = np.where(days[None, :] <= self.obs.intervention_day, eta[:, :1], eta[:, 1:])
        return out
