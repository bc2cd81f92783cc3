from __future__ import annotations

import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from flusmc import LikelihoodEngine, load_config, scenario_space
from flusmc.simulator import ScenarioConfig, simulate_dataset

settings.register_profile("default", max_examples=40, deadline=None,
                          suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("default")


@pytest.fixture(scope="session")
def reduced():
    return load_config("reduced")


@pytest.fixture(scope="session")
def dataset1(reduced):
    return simulate_dataset(ScenarioConfig(reduced, "1", seed=1))


@pytest.fixture(scope="session")
def dataset2(reduced):
    return simulate_dataset(ScenarioConfig(reduced, "2", seed=1))


@pytest.fixture
def engine1(reduced, dataset1):
    return LikelihoodEngine(reduced, dataset1[0], streams=reduced.streams("1"))


@pytest.fixture(scope="session")
def space1(reduced):
    return scenario_space(reduced, "1")


@pytest.fixture
def rng():
    return np.random.default_rng(20240611)


def pytest_terminal_summary(terminalreporter):
    import sys

    mod = sys.modules.get("test_acceptance")
    results = getattr(mod, "RESULTS", None)
    if not results:
        return
    terminalreporter.section("acceptance criteria")
    for k in sorted(results):
        terminalreporter.write_line(f"criterion {k}: {results[k][1]}")
