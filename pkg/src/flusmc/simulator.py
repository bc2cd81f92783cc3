"""Synthetic surveillance data sets drawn from a known parameter vector."""
from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .config import SettingConfig
from .model import simulate_epidemic
from .observation import ObservationModel, SurveillanceData
from .params import NAMES, transmission_from_vector, truth_vector

# fixed substream keys so every stream has its own generator; scenarios that
# share a stream (serology) therefore share its draws under one seed
_STREAM_KEYS = {"confirmed": 1, "gp": 2, "virology": 3, "serology": 4}


@dataclass
class ScenarioConfig:
    setting: SettingConfig
    scenario: str = "1"
    theta_true: np.ndarray | None = None
    seed: int = 0
    horizon: int | None = None
    sampling: dict = field(default_factory=dict)

    def __post_init__(self):
        self.scenario = str(self.scenario)
        if self.theta_true is None:
            self.theta_true = truth_vector(self.setting.truth)
        self.theta_true = np.asarray(self.theta_true, dtype=float)
        if self.horizon is None:
            self.horizon = self.setting.horizon_days
        merged = dict(self.setting.sampling())
        merged.update(self.sampling)
        self.sampling = merged

    @property
    def streams(self) -> tuple[str, ...]:
        return self.setting.streams(self.scenario)


def sampling_calendar(kind: str, sampling: dict, horizon: int, populations) -> dict[int, np.ndarray]:
    """Sample sizes per age group keyed by day.

    Serology takes ``serology_size`` sera per age group on each listed day.
    Virology runs weekly from ``virology_start``; the total number of swabs
    rises from ``virology_min`` towards ``virology_max`` around each epidemic
    peak and is split across ages by population share.
    """
    pops = np.asarray(populations, dtype=float)
    if kind == "serology":
        size = int(sampling.get("serology_size", 500))
        return {int(d): np.full(pops.size, float(size)) for d in sampling.get("serology_days", []) if 1 <= int(d) <= horizon}
    if kind == "virology":
        start = int(sampling.get("virology_start", 7))
        step = int(sampling.get("virology_interval", 7))
        lo, hi = float(sampling.get("virology_min", 100)), float(sampling.get("virology_max", 600))
        peaks = np.asarray(sampling.get("virology_peaks", []), dtype=float)
        width = float(sampling.get("virology_width", 25.0))
        out = {}
        for d in range(start, horizon + 1, step):
            bump = np.max(np.exp(-0.5 * ((d - peaks) / width) ** 2)) if peaks.size else 0.0
            total = round(lo + (hi - lo) * bump)
            out[d] = np.round(total * pops / pops.sum())
        return out
    raise ValueError(f"unknown sampling kind {kind!r}")


def _rng(seed: int, stream: str) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence([int(seed), _STREAM_KEYS[stream]]))


def draw_negbin(rng: np.random.Generator, mu, eta) -> np.ndarray:
    """Counts with mean ``mu`` and variance ``mu (1 + eta)``."""
    mu, eta = np.broadcast_arrays(np.asarray(mu, dtype=float), np.asarray(eta, dtype=float))
    out = np.zeros(mu.shape)
    pos = mu > 0
    out[pos] = rng.negative_binomial(mu[pos] / eta[pos], 1.0 / (1.0 + eta[pos]))
    return out


def simulate_dataset(config: ScenarioConfig) -> tuple[SurveillanceData, dict]:
    """Draw one data set; returns the data and a JSON-ready truth summary."""
    setting = config.setting
    D = int(config.horizon)
    theta = config.theta_true
    traj = simulate_epidemic(transmission_from_vector(theta, setting.d_L), setting.schedule(), setting.populations,
                             D * round(1 / setting.dt), setting.dt)
    obs = ObservationModel.from_config(setting, D)
    ex = obs.expected(theta, traj, D)
    eta = ex["eta"][:, None]
    data = SurveillanceData(D, setting.n_ages)
    streams = config.streams
    if "confirmed" in streams:
        x = draw_negbin(_rng(config.seed, "confirmed"), ex["confirmed"], eta)
        for d in range(1, D + 1):
            data.set("confirmed", d, x[d - 1])
    if "gp" in streams:
        x = draw_negbin(_rng(config.seed, "gp"), ex["gp"] + ex["background"], eta)
        for d in range(1, D + 1):
            data.set("gp", d, x[d - 1])
    if "virology" in streams:
        rng = _rng(config.seed, "virology")
        for d, v in sampling_calendar("virology", config.sampling, D, setting.populations).items():
            prob = ex["gp"][d - 1] / (ex["gp"][d - 1] + ex["background"][d - 1])
            data.set("virology", d, rng.binomial(v.astype(np.int64), prob), v)
    if "serology" in streams:
        rng = _rng(config.seed, "serology")
        for d, v in sampling_calendar("serology", config.sampling, D, setting.populations).items():
            data.set("serology", d, rng.binomial(v.astype(np.int64), ex["seroprevalence"][d - 1]), v)
    daily = traj.daily_infections()
    total = daily.sum(axis=1)
    truth = {
        "scenario": config.scenario,
        "seed": int(config.seed),
        "horizon": D,
        "theta_true": {n: float(theta[i]) for i, n in enumerate(NAMES)},
        "attack_rate": float(daily.sum() / setting.populations.sum()),
        "peak_day": int(np.argmax(total) + 1),
        "daily_infections": [float(v) for v in total],
        "final_susceptible_fraction": [float(v) for v in traj.daily_susceptibles()[-1] / setting.populations],
    }
    return data, truth


def write_dataset(data: SurveillanceData, truth: dict, out_dir) -> list[Path]:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    data.to_csv(out / "data.csv")
    with open(out / "truth.json", "w") as fh:
        json.dump(truth, fh, indent=2, sort_keys=True)
        fh.write("\n")
    return [out / "data.csv", out / "truth.json"]
