"""YAML configuration for a simulated surveillance setting."""
from __future__ import annotations

import copy
import hashlib
import json
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path

import numpy as np
import yaml

from .model import ContactSchedule, build_schedule, steps_per_day

STREAMS = ("confirmed", "gp", "virology", "serology")


class ConfigError(ValueError):
    pass


def builtin_config_path(name: str) -> Path:
    return Path(str(resources.files("flusmc") / "data" / f"{name}.yaml"))


@dataclass
class SettingConfig:
    """Populations, contacts, calendar and ground truth of one setting.

    Build with :func:`load_config`; ``raw`` keeps the parsed mapping so a run
    can be hashed and written back out unchanged.
    """

    raw: dict
    populations: np.ndarray = field(init=False)
    contacts: np.ndarray = field(init=False)

    def __post_init__(self):
        r = self.raw
        missing = [k for k in ("populations", "contact_matrix", "multiplier_windows", "dt", "horizon_days", "truth") if k not in r]
        if missing:
            raise ConfigError(f"config missing keys {missing}")
        self.populations = np.asarray(r["populations"], dtype=float)
        self.contacts = np.asarray(r["contact_matrix"], dtype=float)
        A = self.populations.size
        if self.contacts.shape != (A, A):
            raise ConfigError(f"contact matrix shape {self.contacts.shape} does not match {A} age groups")
        if np.any(self.populations <= 0):
            raise ConfigError("populations must be positive")
        if not 0 <= self.child_groups <= A:
            raise ConfigError("child_groups out of range")
        windows = r["multiplier_windows"]
        if windows[-1][1] < self.horizon_days:
            raise ConfigError("multiplier windows end before the horizon")
        steps_per_day(self.dt)
        for s in self.raw.get("scenarios", {}).values():
            bad = set(s["streams"]) - set(STREAMS)
            if bad:
                raise ConfigError(f"unknown streams {sorted(bad)}")

    # simple accessors -------------------------------------------------
    @property
    def name(self) -> str:
        return self.raw.get("name", "custom")

    @property
    def n_ages(self) -> int:
        return self.populations.size

    @property
    def child_groups(self) -> int:
        return int(self.raw.get("child_groups", 1))

    @property
    def is_child(self) -> np.ndarray:
        return np.arange(self.n_ages) < self.child_groups

    @property
    def dt(self) -> float:
        return float(self.raw["dt"])

    @property
    def horizon_days(self) -> int:
        return int(self.raw["horizon_days"])

    @property
    def d_L(self) -> float:
        return float(self.raw.get("d_L", 2.0))

    @property
    def intervention_day(self) -> int:
        return int(self.raw.get("intervention_day", 83))

    @property
    def truth(self) -> dict:
        return self.raw["truth"]

    @property
    def fixed(self) -> tuple[str, ...]:
        return tuple(self.raw.get("fixed", ()))

    @property
    def landmarks(self) -> list[int]:
        return [int(d) for d in self.raw.get("landmarks", [50, 70, 83, 120, 164, 245])]

    @property
    def kl_days(self) -> list[int]:
        return [int(d) for d in self.raw.get("kl_days", [84, 85, 86, 87, 90, 100, 110, 120])]

    def delay(self, stream: str) -> dict:
        return self.raw.get("delay", {}).get(stream, {"mean": 5.0, "variance": 8.0, "l_max": 40})

    def background(self) -> dict:
        b = {"per_population": 1e5, "pre_knots": [1, 42, 83], "post_knots": [84, 128, 176, 245]}
        b.update(self.raw.get("background", {}))
        return b

    def sampling(self) -> dict:
        return self.raw.get("sampling", {})

    def streams(self, scenario) -> tuple[str, ...]:
        try:
            return tuple(self.raw["scenarios"][str(scenario)]["streams"])
        except KeyError as exc:
            raise ConfigError(f"unknown scenario {scenario!r}") from exc

    def schedule(self) -> ContactSchedule:
        windows = [(s, e, j) for s, e, j in self.raw["multiplier_windows"]]
        return build_schedule(self.contacts, self.populations, windows, self.dt)

    def with_overrides(self, **kv) -> "SettingConfig":
        raw = copy.deepcopy(self.raw)
        for k, v in kv.items():
            raw[k] = v
        return SettingConfig(raw)

    def digest(self) -> str:
        blob = json.dumps(self.raw, sort_keys=True, separators=(",", ":")).encode()
        return hashlib.sha256(blob).hexdigest()


def load_config(source="reduced") -> SettingConfig:
    """Load a setting by built-in name (``"england"``, ``"reduced"``) or file path."""
    if isinstance(source, SettingConfig):
        return source
    if isinstance(source, dict):
        return SettingConfig(copy.deepcopy(source))
    path = Path(source)
    if not path.suffix:
        path = builtin_config_path(str(source))
    if not path.exists():
        raise ConfigError(f"config file {path} not found")
    with open(path) as fh:
        raw = yaml.safe_load(fh)
    if not isinstance(raw, dict):
        raise ConfigError(f"{path} does not hold a mapping")
    return SettingConfig(raw)
