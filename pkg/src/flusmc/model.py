"""Deterministic age-structured SEIR transmission model.

Latent and infectious periods are each split into two stages (E1, E2, I1, I2)
so that sojourn times are Erlang(2) distributed.  The system is advanced with
a forward Euler scheme on a half-day grid; transmission uses a Reed-Frost
style force of infection built from a time-varying contact matrix.

These functions are the readable reference implementation.  The vectorised
evaluator in :mod:`flusmc.engine` runs the same recursion for many parameter
vectors at once and is tested against this module.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np


class ModelError(ValueError):
    """Base class for transmission-model errors."""


class InvalidParameterError(ModelError):
    pass


class StepSizeError(ModelError):
    """An Euler step would drive a compartment negative."""


class DomainError(ModelError):
    """Per-contact infection probability is outside [0, 1)."""


class ScheduleRangeError(ModelError):
    pass


N_MULTIPLIERS = 5
COMPARTMENTS = ("S", "E1", "E2", "I1", "I2", "R")


@dataclass(frozen=True)
class TransmissionParams:
    psi: float
    nu: float
    d_I: float
    m: tuple[float, ...] = (1.0,) * N_MULTIPLIERS
    d_L: float = 2.0

    def __post_init__(self):
        values = (self.psi, self.d_I, self.d_L, *self.m)
        # nu = -inf is allowed and means no initial infections
        if not all(math.isfinite(v) for v in values) or math.isnan(self.nu) or self.nu == math.inf:
            raise InvalidParameterError(f"non-finite transmission parameter in {self}")
        if self.psi < 0 or self.d_I <= 0 or self.d_L <= 0:
            raise InvalidParameterError(f"psi >= 0, d_I > 0, d_L > 0 required, got {self}")
        if any(v < 0 for v in self.m):
            raise InvalidParameterError(f"contact multipliers must be non-negative, got {self.m}")


@dataclass
class EpidemicState:
    """Compartment occupancies per age group at one step.

    ``R`` is the cumulative recovered count; it is carried so that per-age
    conservation ``S + E1 + E2 + I1 + I2 + R == N`` can be checked.
    """

    t_index: int
    S: np.ndarray
    E1: np.ndarray
    E2: np.ndarray
    I1: np.ndarray
    I2: np.ndarray
    R: np.ndarray = field(default=None)

    def __post_init__(self):
        for name in COMPARTMENTS[:-1]:
            setattr(self, name, np.asarray(getattr(self, name), dtype=float))
        if self.R is None:
            self.R = np.zeros_like(self.S)
        else:
            self.R = np.asarray(self.R, dtype=float)

    def total(self) -> np.ndarray:
        return self.S + self.E1 + self.E2 + self.I1 + self.I2 + self.R

    def infectious(self) -> np.ndarray:
        return self.I1 + self.I2

    def as_array(self) -> np.ndarray:
        return np.stack([getattr(self, c) for c in COMPARTMENTS])


@dataclass(frozen=True)
class ContactSchedule:
    """Normalised baseline contact matrix plus calendar of multiplier windows.

    ``periods`` holds ``(start_step, end_step, multiplier_index)`` triples over
    half-open step ranges ``[start, end)``; ``multiplier_index`` is a 0-based
    index into ``m`` or ``None`` for the reference (unscaled) matrix.
    """

    baseline_matrix: np.ndarray
    periods: tuple[tuple[int, int, int | None], ...]

    def __post_init__(self):
        mat = np.asarray(self.baseline_matrix, dtype=float)
        if mat.ndim != 2 or mat.shape[0] != mat.shape[1]:
            raise ValueError("baseline matrix must be square")
        if np.any(mat < 0):
            raise ValueError("contact rates must be non-negative")
        object.__setattr__(self, "baseline_matrix", mat)
        periods = tuple(sorted((int(s), int(e), None if j is None else int(j)) for s, e, j in self.periods))
        if not periods or periods[0][0] != 0:
            raise ValueError("multiplier windows must start at step 0")
        for (s0, e0, _), (s1, _, _) in zip(periods, periods[1:]):
            if e0 != s1:
                raise ValueError(f"multiplier windows overlap or leave a gap at step {e0}")
        for s, e, j in periods:
            if e <= s:
                raise ValueError(f"empty multiplier window [{s}, {e})")
            if j is not None and not 0 <= j < N_MULTIPLIERS:
                raise ValueError(f"multiplier index {j} out of range")
        object.__setattr__(self, "periods", periods)

    @property
    def n_steps(self) -> int:
        return self.periods[-1][1]

    def window_index(self) -> np.ndarray:
        """Per-step multiplier index, ``-1`` marking reference windows."""
        idx = np.empty(self.n_steps, dtype=np.int64)
        for s, e, j in self.periods:
            idx[s:e] = -1 if j is None else j
        return idx

    def multiplier_at(self, t_index: int, m: Sequence[float]) -> float:
        if not 0 <= t_index < self.n_steps:
            raise ScheduleRangeError(f"step {t_index} outside schedule [0, {self.n_steps})")
        for s, e, j in self.periods:
            if s <= t_index < e:
                return 1.0 if j is None else float(m[j])
        raise AssertionError("unreachable")


def reciprocal_contact_matrix(contacts, populations) -> np.ndarray:
    """Per-pair transmission weights from a raw contact survey matrix.

    ``contacts[a, b]`` is the mean daily number of contacts a person in group
    ``a`` has with people in group ``b``.  Total contacts are symmetrised
    (``N_a C_ab == N_b C_ba``) and divided by both group sizes, giving a
    symmetric per-pair rate.
    """
    c = np.asarray(contacts, dtype=float)
    n = np.asarray(populations, dtype=float)
    total = n[:, None] * c
    total = 0.5 * (total + total.T)
    return total / np.outer(n, n)


def normalise_contact_matrix(pair_rates, populations) -> np.ndarray:
    """Scale so the next-generation operator ``diag(N) M`` has spectral radius 1."""
    m = np.asarray(pair_rates, dtype=float)
    ngm = np.asarray(populations, dtype=float)[:, None] * m
    rho = np.max(np.abs(np.linalg.eigvals(ngm)))
    if rho <= 0:
        raise ValueError("contact matrix has zero spectral radius")
    return m / rho


def dominant_eigenvector(matrix, populations) -> np.ndarray:
    """Age distribution of new infections in the linear growth phase (sums to 1)."""
    ngm = np.asarray(populations, dtype=float)[:, None] * np.asarray(matrix, dtype=float)
    vals, vecs = np.linalg.eig(ngm)
    v = np.real(vecs[:, np.argmax(np.real(vals))])
    v = np.abs(v)
    return v / v.sum()


def build_schedule(contacts, populations, windows, dt: float = 0.5) -> ContactSchedule:
    """Schedule from a raw contact matrix and day-based ``(start, end, index)`` windows.

    Window indices in ``windows`` are 1-based (matching ``m1..m5``) or ``None``.
    """
    per_day = steps_per_day(dt)
    base = normalise_contact_matrix(reciprocal_contact_matrix(contacts, populations), populations)
    periods = tuple(
        (int(s) * per_day, int(e) * per_day, None if j is None else int(j) - 1) for s, e, j in windows
    )
    return ContactSchedule(base, periods)


def steps_per_day(dt: float) -> int:
    k = round(1.0 / dt)
    if k < 1 or abs(k * dt - 1.0) > 1e-12:
        raise ValueError(f"dt must divide one day exactly, got {dt}")
    return k


def r0_from_growth_rate(psi: float, d_L: float, d_I: float, dt: float | None = 0.5) -> float:
    """Basic reproduction number implied by an initial exponential growth rate.

    Solves the characteristic equation of the linearised two-stage SEIR
    system.  With ``dt`` given, the equation is that of the forward-Euler
    recursion actually simulated, so that simulated incidence grows at
    exactly ``exp(psi * dt)`` per step.  ``dt=None`` gives the ODE version

        R0 = psi d_I (1 + psi d_L / 2)^2 / (1 - (1 + psi d_I / 2)^-2),

    which is the ``dt -> 0`` limit of the discrete one.
    """
    for v in (psi, d_L, d_I):
        if not math.isfinite(v):
            raise InvalidParameterError("non-finite input to r0_from_growth_rate")
    if psi < 0 or d_L <= 0 or d_I <= 0:
        raise InvalidParameterError("psi >= 0, d_L > 0 and d_I > 0 required")
    if dt is None:
        if psi == 0:
            return 1.0
        x = psi * d_I / 2.0
        return 2.0 * (1.0 + psi * d_L / 2.0) ** 2 * (1.0 + x) ** 2 / (2.0 + x)
    u = math.expm1(psi * dt)
    a = 2.0 * dt / d_L
    b = 2.0 * dt / d_I
    return d_I / dt * (u + a) ** 2 * (u + b) ** 2 / (a * a * (u + 2.0 * b))


def stage_proportions(psi: float, d_L: float, d_I: float, dt: float = 0.5) -> np.ndarray:
    """Shares of (E1, E2, I1, I2) in the exponentially growing linear regime."""
    u = math.expm1(psi * dt)
    a = 2.0 * dt / d_L
    b = 2.0 * dt / d_I
    e1 = (1.0 + u) / (u + a)
    e2 = a * e1 / (u + a)
    i1 = a * e2 / (u + b)
    i2 = b * i1 / (u + b)
    w = np.array([e1, e2, i1, i2])
    return w / w.sum()


def contact_matrix_at(t_index: int, m: Sequence[float], schedule: ContactSchedule) -> np.ndarray:
    return schedule.multiplier_at(t_index, m) * schedule.baseline_matrix


def force_of_infection(state: EpidemicState, M_t, R0: float, d_I: float, dt: float) -> np.ndarray:
    """Per-age probability of infection over one step of length ``dt``.

    ``lambda_a = [1 - prod_b (1 - M_ab R0 / d_I) ** (I1_b + I2_b)] * dt``
    """
    q = np.asarray(M_t, dtype=float) * (R0 / d_I)
    if np.any(q >= 1.0) or np.any(q < 0.0):
        raise DomainError("per-contact infection probability outside [0, 1)")
    log_escape = np.log1p(-q) @ state.infectious()
    return -np.expm1(log_escape) * dt


def euler_step(state: EpidemicState, lam, d_L: float, d_I: float, dt: float) -> EpidemicState:
    """Advance one Euler step; ``lam`` already includes the factor ``dt``."""
    lam = np.asarray(lam, dtype=float)
    a = 2.0 * dt / d_L
    b = 2.0 * dt / d_I
    new_inf = state.S * lam
    e1_out = a * state.E1
    e2_out = a * state.E2
    i1_out = b * state.I1
    i2_out = b * state.I2
    nxt = EpidemicState(
        t_index=state.t_index + 1,
        S=state.S - new_inf,
        E1=state.E1 + new_inf - e1_out,
        E2=state.E2 + e1_out - e2_out,
        I1=state.I1 + e2_out - i1_out,
        I2=state.I2 + i1_out - i2_out,
        R=state.R + i2_out,
    )
    if any(np.any(getattr(nxt, c) < 0) for c in COMPARTMENTS):
        raise StepSizeError(f"negative compartment after step {nxt.t_index}; dt={dt} too large")
    return nxt


def initial_state(params: TransmissionParams, populations, matrix=None, dt: float = 0.5) -> EpidemicState:
    """Seed ``exp(nu) * sum(N)`` infected individuals in growth balance.

    The total is split across ages by the dominant eigenvector of the
    next-generation matrix (uniform mixing if ``matrix`` is omitted) and across
    E1, E2, I1, I2 in the proportions of the growing linearised system.
    """
    n = np.asarray(populations, dtype=float)
    i0 = math.exp(params.nu) * n.sum()
    if not i0 < n.min():
        raise InvalidParameterError(f"initial infections {i0:.4g} exceed smallest age group")
    if matrix is None:
        matrix = np.ones((n.size, n.size))
    ages = dominant_eigenvector(matrix, n)
    stages = stage_proportions(params.psi, params.d_L, params.d_I, dt)
    seeded = i0 * np.outer(stages, ages)
    return EpidemicState(0, S=n - seeded.sum(axis=0), E1=seeded[0], E2=seeded[1], I1=seeded[2], I2=seeded[3])


@dataclass
class Trajectory:
    """Per-step new infections and susceptibles, shape ``(n_steps, A)``.

    Row ``k`` describes step ``k + 1``: infections during ``(t_k, t_{k+1}]`` and
    susceptibles at ``t_{k+1}``.
    """

    delta: np.ndarray
    susceptibles: np.ndarray
    dt: float = 0.5

    def daily_infections(self) -> np.ndarray:
        k = steps_per_day(self.dt)
        n_days = self.delta.shape[0] // k
        return self.delta[: n_days * k].reshape(n_days, k, -1).sum(axis=1)

    def daily_susceptibles(self) -> np.ndarray:
        k = steps_per_day(self.dt)
        return self.susceptibles[k - 1 :: k]


def simulate_epidemic(
    params: TransmissionParams,
    schedule: ContactSchedule,
    populations,
    n_steps: int | None = None,
    dt: float = 0.5,
) -> Trajectory:
    n_steps = schedule.n_steps if n_steps is None else n_steps
    R0 = r0_from_growth_rate(params.psi, params.d_L, params.d_I, dt)
    state = initial_state(params, populations, schedule.baseline_matrix, dt)
    A = state.S.size
    delta = np.empty((n_steps, A))
    sus = np.empty((n_steps, A))
    for k in range(n_steps):
        lam = force_of_infection(state, contact_matrix_at(k, params.m, schedule), R0, params.d_I, dt)
        nxt = euler_step(state, lam, params.d_L, params.d_I, dt)
        delta[k] = state.S * lam
        sus[k] = nxt.S
        state = nxt
    return Trajectory(delta, sus, dt)


def attack_rate(
    params: TransmissionParams,
    schedule: ContactSchedule,
    populations,
    horizon: int | None = None,
    dt: float = 0.5,
) -> float:
    """Cumulative fraction infected over ``horizon`` steps (default: whole schedule)."""
    traj = simulate_epidemic(params, schedule, populations, horizon, dt)
    return float(traj.delta.sum() / np.sum(populations))
