"""Parameter vector layout, unconstrained transforms and priors.

Every sampler in the package works on an unconstrained vector ``z`` holding
the *free* components only; :class:`ParameterSpace` maps it to the full
natural-scale vector consumed by the likelihood engine.
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Mapping, Sequence

import numpy as np
from scipy.special import expit, gammaln, logit

TRANSMISSION = ("psi", "nu", "d_I", "m1", "m2", "m3", "m4", "m5")
OBSERVATION = ("phi", "p1", "p2", "p3", "p4", "eta1", "eta2")
BACKGROUND = tuple(f"beta_B{i}" for i in range(1, 10))
NAMES = TRANSMISSION + OBSERVATION + BACKGROUND
INDEX = {name: i for i, name in enumerate(NAMES)}

# Lower bound on the infectious period: an Euler step with dt = 0.5 needs
# 2 dt / d_I <= 1.
D_I_FLOOR = 1.0

# Component groups for componentwise moves, one per row of the parameter table.
GROUPS = {
    "eta": ("eta1", "eta2"),
    "d_I": ("d_I",),
    "phi": ("phi",),
    "m": ("m1", "m2", "m3", "m4", "m5"),
    "psi": ("psi",),
    "nu": ("nu",),
    "p": ("p1", "p2", "p3", "p4"),
    "beta_B": BACKGROUND,
}


@dataclass(frozen=True)
class Component:
    """One scalar parameter: its transform and prior on the unconstrained scale.

    ``prior`` is ``("normal", mean, sd)`` for a Gaussian on ``z`` or
    ``("gamma", shape, rate)`` for a Gamma prior on the natural scale of a
    log-transformed positive parameter.
    """

    name: str
    transform: str
    prior: tuple

    def to_natural(self, z):
        if self.transform == "log":
            return np.exp(z)
        if self.transform == "logit":
            return expit(z)
        if self.transform == "shifted_log":
            return D_I_FLOOR + np.exp(z)
        return np.asarray(z, dtype=float)

    def to_unconstrained(self, x):
        x = np.asarray(x, dtype=float)
        with np.errstate(divide="ignore"):
            if self.transform == "log":
                return np.log(x)
            if self.transform == "logit":
                return logit(x)
            if self.transform == "shifted_log":
                return np.log(x - D_I_FLOOR)
        return x

    def log_prior(self, z):
        kind, a, b = self.prior
        if kind == "normal":
            return -0.5 * ((z - a) / b) ** 2 - math.log(b) - 0.5 * math.log(2 * math.pi)
        if kind == "gamma":
            # density of z = log(x), x ~ Gamma(shape=a, rate=b)
            return a * z - b * np.exp(z) + a * math.log(b) - gammaln(a)
        raise ValueError(f"unknown prior {kind!r}")

    def sample(self, rng: np.random.Generator, n: int):
        kind, a, b = self.prior
        if kind == "normal":
            return rng.normal(a, b, size=n)
        # log of a Gamma(a) variate without underflow for small shapes
        g = np.log(rng.gamma(a + 1.0, size=n))
        return g + np.log(rng.uniform(size=n)) / a - math.log(b)


DEFAULT_PRIORS = {
    "psi": ("log", ("normal", math.log(0.15), 0.75)),
    "nu": ("identity", ("normal", -14.0, 2.0)),
    "d_I": ("shifted_log", ("normal", math.log(2.5), 0.4)),
    **{f"m{i}": ("log", ("normal", math.log(0.5), 1.0)) for i in range(1, 6)},
    "phi": ("logit", ("normal", float(logit(0.3)), 0.3)),
    "p1": ("logit", ("normal", float(logit(0.2)), 1.5)),
    "p2": ("logit", ("normal", float(logit(0.2)), 1.5)),
    "p3": ("logit", ("normal", 0.0, 1.5)),
    "p4": ("logit", ("normal", 0.0, 1.5)),
    "eta1": ("log", ("gamma", 0.01, 0.01)),
    "eta2": ("log", ("gamma", 0.01, 0.01)),
    "beta_B1": ("identity", ("normal", 1.0, 2.0)),
    **{f"beta_B{i}": ("identity", ("normal", 0.0, 1.0)) for i in range(2, 10)},
}


def truth_vector(truth: Mapping) -> np.ndarray:
    """Full natural-scale vector from a ``{psi, nu, d_I, m, phi, p, eta, beta_B}`` mapping."""
    theta = np.zeros(len(NAMES))
    theta[INDEX["psi"]] = truth["psi"]
    theta[INDEX["nu"]] = truth["nu"]
    theta[INDEX["d_I"]] = truth["d_I"]
    theta[INDEX["m1"] : INDEX["m5"] + 1] = truth.get("m", (1.0,) * 5)
    theta[INDEX["phi"]] = truth["phi"]
    theta[INDEX["p1"] : INDEX["p4"] + 1] = truth["p"]
    theta[INDEX["eta1"] : INDEX["eta2"] + 1] = truth["eta"]
    theta[INDEX["beta_B1"] :] = truth.get("beta_B", (0.0,) * 9)
    return theta


def truth_dict(theta) -> dict:
    theta = np.asarray(theta, dtype=float)
    return {name: float(theta[i]) for i, name in enumerate(NAMES)}


class ParameterSpace:
    """Free/fixed split of the full parameter vector.

    Parameters
    ----------
    free : sequence of str
        Names of sampled components, in sampling order.
    fixed : mapping or array
        Natural-scale values for every component; free entries are ignored.
    priors : mapping, optional
        Per-name overrides of ``(transform, prior)`` pairs.
    """

    def __init__(self, free: Sequence[str], fixed, priors: Mapping | None = None):
        unknown = [n for n in free if n not in INDEX]
        if unknown:
            raise KeyError(f"unknown parameters {unknown}")
        self.free = tuple(free)
        base = fixed if isinstance(fixed, np.ndarray) else truth_vector(fixed)
        self.base = np.asarray(base, dtype=float).copy()
        spec = dict(DEFAULT_PRIORS)
        spec.update(priors or {})
        self.components = tuple(Component(n, *spec[n]) for n in self.free)
        self.free_index = np.array([INDEX[n] for n in self.free], dtype=np.int64)

    @property
    def dim(self) -> int:
        return len(self.free)

    def group_indices(self, groups: Mapping[str, Sequence[str]] = GROUPS) -> list[np.ndarray]:
        """Positions in ``z`` of each non-empty component group."""
        out = []
        for members in groups.values():
            idx = [self.free.index(n) for n in members if n in self.free]
            if idx:
                out.append(np.array(idx, dtype=np.int64))
        return out

    def indices(self, names: Sequence[str]) -> np.ndarray:
        return np.array([i for i, n in enumerate(self.free) if n in names], dtype=np.int64)

    def _masks(self):
        if not hasattr(self, "_cached_masks"):
            kinds = np.array([c.transform for c in self.components])
            normal = np.array([c.prior[0] == "normal" for c in self.components])
            a = np.array([c.prior[1] for c in self.components], dtype=float)
            b = np.array([c.prior[2] for c in self.components], dtype=float)
            const = np.where(normal, -np.log(b) - 0.5 * math.log(2 * math.pi), a * np.log(b) - gammaln(a))
            self._cached_masks = (kinds == "log", kinds == "logit", kinds == "shifted_log", normal, a, b, const)
        return self._cached_masks

    def to_natural(self, z) -> np.ndarray:
        z = np.atleast_2d(np.asarray(z, dtype=float))
        is_log, is_logit, is_shift, *_ = self._masks()
        x = z.copy()
        x[:, is_log] = np.exp(z[:, is_log])
        x[:, is_logit] = expit(z[:, is_logit])
        x[:, is_shift] = D_I_FLOOR + np.exp(z[:, is_shift])
        theta = np.tile(self.base, (z.shape[0], 1))
        theta[:, self.free_index] = x
        return theta

    def to_unconstrained(self, theta) -> np.ndarray:
        theta = np.atleast_2d(np.asarray(theta, dtype=float))
        return np.column_stack(
            [comp.to_unconstrained(theta[:, self.free_index[j]]) for j, comp in enumerate(self.components)]
        )

    def log_prior(self, z) -> np.ndarray:
        z = np.atleast_2d(np.asarray(z, dtype=float))
        *_, normal, a, b, const = self._masks()
        with np.errstate(over="ignore", invalid="ignore"):
            dens = np.where(normal, -0.5 * ((z - a) / b) ** 2, a * z - b * np.exp(np.where(normal, 0.0, z)))
        out = (dens + const).sum(axis=1)
        out[np.isnan(out)] = -np.inf
        return out

    def sample_prior(self, rng: np.random.Generator, n: int) -> np.ndarray:
        return np.column_stack([comp.sample(rng, n) for comp in self.components])

    def prior_centre(self) -> np.ndarray:
        """Prior mean of ``z`` where defined, mode of the log-Gamma otherwise."""
        out = []
        for comp in self.components:
            kind, a, b = comp.prior
            out.append(a if kind == "normal" else math.log(a / b))
        return np.array(out)


def scenario_space(config, scenario: str, priors: Mapping | None = None) -> ParameterSpace:
    """Free parameters for a scenario: background coefficients only when GP data are used."""
    streams = config.streams(scenario)
    free = [n for n in NAMES if n not in config.fixed]
    if "gp" not in streams:
        free = [n for n in free if not n.startswith("beta_B")]
    return ParameterSpace(free, config.truth, priors)


def transmission_from_vector(theta, d_L: float = 2.0):
    """:class:`~flusmc.model.TransmissionParams` view of a full natural-scale vector."""
    from .model import TransmissionParams

    theta = np.asarray(theta, dtype=float)
    return TransmissionParams(
        psi=float(theta[INDEX["psi"]]),
        nu=float(theta[INDEX["nu"]]),
        d_I=float(theta[INDEX["d_I"]]),
        m=tuple(float(v) for v in theta[INDEX["m1"] : INDEX["m5"] + 1]),
        d_L=d_L,
    )
