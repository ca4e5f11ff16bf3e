import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from brsdr import dgp
from brsdr.datamodel import ConfigError


def test_sim1_outcome_mean_near_210():
    g = dgp.gen_sim1(1000, seed=3)
    assert abs(g.data.outcomes.mean() - 210) < 2.2
    assert g.true_ate == 0.0


def test_sim1_origin_substitution():
    u = np.zeros((1, 4))
    # X2 = U2 / (1 + e^U1) + 10 is exactly 10 at the origin
    np.testing.assert_allclose(dgp.kang_schafer_covariates(u), [[1.0, 10.0, 0.216, 400.0]])
    assert dgp.kang_schafer_outcome_mean(u)[0] == 210


def test_sim1_mean_over_seeds():
    means = [dgp.gen_sim1(1000, seed=s).data.outcomes.mean() for s in range(20)]
    sd_mean = math.sqrt(27.4**2 + 3 * 13.7**2 + 1) / math.sqrt(1000 * 20)
    assert abs(np.mean(means) - 210) < 3 * sd_mean


def test_sim2_hand_substitution():
    x = np.array([[1.0, 1.0, -1.0, -1.0, 0.0]])
    assert dgp.sim2_outcome_mean(x, 1)[0] == pytest.approx(3.25)


def test_sim2_true_ate_and_omission():
    full = dgp.gen_sim2(300, 5, False, seed=9)
    omit = dgp.gen_sim2(300, 5, True, seed=9)
    assert full.true_ate == omit.true_ate == 3.0
    assert omit.data.q == 4 and full.data.q == 5
    np.testing.assert_array_equal(omit.hidden[:, 0], full.data.covariates[:, 2])
    np.testing.assert_array_equal(omit.data.outcomes, full.data.outcomes)
    np.testing.assert_array_equal(omit.data.treatments, full.data.treatments)
    assert "X3" not in omit.data.column_names


def test_sim3_half_normal_mean():
    g = dgp.gen_sim3(100_000, 1, seed=1)
    u1 = g.hidden[:, 0]
    mean = math.sqrt(2 / math.pi) / math.sqrt(1 - 2 / math.pi)
    assert mean == pytest.approx(1.3236, abs=1e-4)
    assert abs(u1.mean() - mean) < 3 * u1.std() / math.sqrt(u1.size)
    # |X1| / sqrt(1 - 2/pi) has variance exactly one
    assert u1.var() == pytest.approx(1.0, abs=0.02)
    np.testing.assert_allclose(u1, np.abs(g.data.covariates[:, 0]) / dgp.HALF_NORMAL_SCALE)


def test_sim3_scenarios_and_features():
    assert dgp.gen_sim3(200, 2, seed=0).true_ate == 1.0
    f1 = dgp.sim3_features(1)
    assert f1["M1"].propensity[0] == ("exp", 0)
    assert f1["M2"].outcome[0] == ("cube", 0)
    assert f1["M3"].propensity == (("halfnorm", 0), ("id", 1), ("id", 2), ("id", 3))
    f2 = dgp.sim3_features(2)["M3"]
    assert f2.propensity == (("halfnorm", 0), ("id", 1), ("id", 2))
    assert f2.outcome == (("id", 0), ("id", 1), ("id", 3))
    f3 = dgp.sim3_features(3)["M3"]
    assert f3.propensity == (("id", 0), ("id", 1), ("id", 2))
    assert f3.outcome == (("halfnorm", 0), ("id", 1), ("id", 3))
    with pytest.raises(ConfigError):
        dgp.gen_sim3(200, 5, seed=0)


def test_sim4_pieces():
    x = np.zeros((3, 5))
    x[:, 4] = [1, 2, 3]
    np.testing.assert_allclose(dgp.sim4_effect(x), 1.0)
    x1 = np.zeros((2, 5))
    x1[:, 4] = 1
    x1[:, 2] = [0.0, 0.5]
    np.testing.assert_allclose(dgp.sim4_baseline(x1), [-7.0, -4.0])


def test_sim4_true_ate_selfcheck():
    assert abs(dgp.sim4_ate_selfcheck() - 1.5) < 0.01
    g = dgp.gen_sim4(500, 5, seed=2)
    assert g.true_ate == 1.5
    assert set(np.unique(g.data.covariates[:, 4])) <= {1.0, 2.0, 3.0}
    assert set(np.unique(g.data.covariates[:, 3])) <= {0.0, 1.0}


def test_bad_sizes_rejected():
    with pytest.raises(ConfigError):
        dgp.gen_sim1(5, seed=0)
    with pytest.raises(ConfigError):
        dgp.gen_sim2(100, 3, False, seed=0)
    with pytest.raises(ConfigError):
        dgp.gen_sim4(100, 4, seed=0)


@settings(max_examples=10)
@given(st.sampled_from(["Sim1", "Sim2", "Sim3", "Sim4"]), st.integers(0, 2**63))
def test_generators_are_deterministic(study, seed):
    q = 5 if study == "Sim4" else 4
    a = dgp.generate(study, 200, seed, q=q, scenario=2)
    b = dgp.generate(study, 200, seed, q=q, scenario=2)
    np.testing.assert_array_equal(a.data.outcomes, b.data.outcomes)
    np.testing.assert_array_equal(a.data.covariates, b.data.covariates)
    np.testing.assert_array_equal(a.data.treatments, b.data.treatments)


@pytest.mark.parametrize("study", ["Sim1", "Sim2", "Sim3", "Sim4"])
def test_positivity_sanity(study):
    q = 5 if study == "Sim4" else 4
    for seed in range(5):
        frac = dgp.generate(study, 200, seed, q=q).data.treatments.mean()
        assert 0.05 < frac < 0.95
