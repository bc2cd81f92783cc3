from __future__ import annotations

import json

import numpy as np
import pytest

from flusmc.observation import SurveillanceData
from flusmc.simulator import ScenarioConfig, draw_negbin, sampling_calendar, simulate_dataset, write_dataset


def test_deterministic_under_seed(reduced):
    a, ta = simulate_dataset(ScenarioConfig(reduced, "1", seed=3))
    b, tb = simulate_dataset(ScenarioConfig(reduced, "1", seed=3))
    c, _ = simulate_dataset(ScenarioConfig(reduced, "1", seed=4))
    assert ta == tb
    assert np.array_equal(a.count["confirmed"], b.count["confirmed"])
    assert not np.array_equal(a.count["confirmed"], c.count["confirmed"])


def test_scenarios_share_serology_draws(dataset1, dataset2):
    s1, s2 = dataset1[0], dataset2[0]
    assert np.array_equal(s1.count["serology"], s2.count["serology"], equal_nan=True)
    assert s1.streams_present() == ("confirmed", "serology")
    assert set(s2.streams_present()) == {"gp", "virology", "serology"}


def test_truth_summary(dataset1, reduced):
    truth = dataset1[1]
    assert truth["horizon"] == reduced.horizon_days
    assert len(truth["daily_infections"]) == reduced.horizon_days
    assert 0 < truth["attack_rate"] < 1
    assert truth["daily_infections"][truth["peak_day"] - 1] == max(truth["daily_infections"])
    assert truth["theta_true"]["psi"] == pytest.approx(reduced.truth["psi"])


def test_write_and_read_back(tmp_path, dataset2, reduced):
    files = write_dataset(*dataset2, tmp_path)
    back = SurveillanceData.from_csv(files[0], n_ages=reduced.n_ages, n_days=reduced.horizon_days)
    for s in ("gp", "virology", "serology"):
        assert np.array_equal(back.count[s], dataset2[0].count[s], equal_nan=True)
    assert json.loads(files[1].read_text()) == json.loads(json.dumps(dataset2[1]))


def test_counts_are_integer_and_bounded(dataset2):
    d = dataset2[0]
    for s in ("virology", "serology"):
        k, n = d.count[s], d.denom[s]
        m = ~np.isnan(k)
        assert m.any()
        assert np.all(k[m] == np.round(k[m])) and np.all((0 <= k[m]) & (k[m] <= n[m]))


def test_sampling_calendar(reduced):
    pops = reduced.populations
    vir = sampling_calendar("virology", {"virology_start": 7, "virology_interval": 7, "virology_min": 100,
                                         "virology_max": 600, "virology_peaks": [70]}, 100, pops)
    assert sorted(vir) == list(range(7, 101, 7))
    assert vir[70].sum() == pytest.approx(600, abs=pops.size)
    assert vir[7].sum() < vir[70].sum()
    ser = sampling_calendar("serology", {"serology_size": 50, "serology_days": [10, 500]}, 100, pops)
    assert list(ser) == [10] and np.all(ser[10] == 50)
    with pytest.raises(ValueError):
        sampling_calendar("sputum", {}, 10, pops)


def test_negbin_moments():
    rng = np.random.default_rng(0)
    x = draw_negbin(rng, np.full(200_000, 40.0), 3.0)
    assert x.mean() == pytest.approx(40, rel=0.01)
    assert x.var() == pytest.approx(160, rel=0.03)
    assert np.all(draw_negbin(rng, np.zeros(5), 1.0) == 0)
