"""Sequential Monte Carlo and reference MCMC for an age-structured pandemic model."""
from __future__ import annotations

__version__ = "0.1.0"

from .config import SettingConfig, load_config
from .engine import LikelihoodEngine
from .params import NAMES, ParameterSpace, scenario_space

__all__ = ["LikelihoodEngine", "NAMES", "ParameterSpace", "SettingConfig", "__version__", "load_config", "scenario_space"]
