import json
from collections import Counter

import numpy as np
import pytest

from stormuq import simstudy
from stormuq.errors import DataError
from stormuq.hier import DesignSpec
from stormuq.simstudy import (
    B_TRUE,
    FIXED_THETA,
    coverage_report,
    load_geometry,
    simulate_training_set,
    write_geometry,
)


def test_bundled_geometry_is_reproducible(tmp_path):
    write_geometry(tmp_path)
    data = simstudy._data_dir()
    for name in ("domain.asc", "buffers.json"):
        assert (tmp_path / name).read_bytes() == (data / name).read_bytes()


def test_geometry_sizes():
    _, train = load_geometry("train")
    _, test = load_geometry("test")
    _, desk = load_geometry("desk")
    assert len(train) == 47 and len(test) == 6 and len(desk) == 12
    assert Counter(g.region for g in train) == {"Atlantic": 9, "Florida": 21, "Gulf": 17}
    assert Counter(g.region for g in desk) == {"Atlantic": 4, "Florida": 4, "Gulf": 4}
    assert all(100 <= g.buffer.n <= 600 for g in train + test)
    assert len(train) * simstudy.FULL_REPS == 2350


def test_unknown_buffer_set():
    with pytest.raises(DataError):
        load_geometry("validation")


def test_zero_sigma_gives_the_regression_mean():
    _, geo = load_geometry("desk")
    sims = simulate_training_set(geo[:6], 2, seed=1, Sigma_true=np.zeros((2, 2)))
    d = DesignSpec(1)
    for s in sims:
        region = s.field.region_label
        assert np.array_equal(s.theta_true, B_TRUE @ d.regressors(region))
    assert len(sims) == 12


def test_fixed_theta_mode_records_the_fixed_values():
    _, geo = load_geometry("desk")
    sims = simulate_training_set(geo[:3], 2, seed=1, fixed_theta=FIXED_THETA)
    assert all(np.allclose(np.round(s.theta_true, 3), [0.981, 1.386]) for s in sims)


def test_simulation_is_deterministic_and_storm_keyed():
    _, geo = load_geometry("desk")
    a = simulate_training_set(geo[:4], 1, seed=5)
    b = simulate_training_set(geo[:4][::-1], 1, seed=5)
    by_id = {s.field.storm_id: s.field.y for s in b}
    assert all(np.array_equal(s.field.y, by_id[s.field.storm_id]) for s in a)


def test_bad_truth_is_rejected():
    _, geo = load_geometry("desk")
    with pytest.raises(DataError):
        simulate_training_set(geo[:1], 1, 0, Sigma_true=np.array([[1.0, 2.0], [2.0, 1.0]]))
    with pytest.raises(DataError):
        simulate_training_set(geo[:1], 1, 0, B_true=np.ones((2, 1)))


def test_oracle_intervals_cover_everything():
    _, geo = load_geometry("desk")
    sims = simulate_training_set(geo[:3], 1, seed=2)
    rep = coverage_report(sims, gibbs=False, oracle=True)
    assert rep.wald_coverage == [1.0, 1.0]


def test_report_is_deterministic_and_serialisable():
    _, geo = load_geometry("desk")
    sims = simulate_training_set(geo, 1, seed=3)
    a = coverage_report(sims, G=300, burn_in=50, seed=3)
    b = coverage_report(simulate_training_set(geo, 1, seed=3), G=300, burn_in=50, seed=3)
    assert a.to_json() == b.to_json()
    assert all(0 <= v <= 1 for v in a.wald_coverage + a.gibbs_theta_coverage)
    json.dumps(a.to_json())
    assert "Wald coverage theta1" in a.table()


def test_theta2_wald_coverage_is_the_lower_one():
    _, geo = load_geometry("train")
    sims = simulate_training_set(geo, 10, seed=11, fixed_theta=FIXED_THETA)
    rep = coverage_report(sims, gibbs=False)
    assert rep.wald_coverage[1] <= rep.wald_coverage[0]
