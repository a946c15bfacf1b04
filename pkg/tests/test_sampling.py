"""Tests for day-to-day observation synthesis and its CSV round trip."""

import numpy as np
import pytest

from odflow.assignment import DemandDistribution, RouteChoice
from odflow.network import generate_paths
from odflow.sampling import (
    ObservationSet,
    SynthesisConfig,
    perturb,
    read_observations_csv,
    sample_day,
    sample_demand,
    synthesize,
    write_observations_csv,
)


def test_synthesis_config_validation():
    with pytest.raises(ValueError):
        SynthesisConfig(n_days=0)
    with pytest.raises(ValueError):
        SynthesisConfig(epsilon=-0.1)
    with pytest.raises(ValueError):
        SynthesisConfig(epsilon=1.0)


def test_observation_set_validation(parallel_pair):
    obs = parallel_pair.obs
    with pytest.raises(ValueError):
        ObservationSet(counts=np.ones(5), observed=obs, link_ids=("1", "2"))
    with pytest.raises(ValueError):
        ObservationSet(counts=np.ones((5, 3)), observed=obs,
                       link_ids=("1", "2", "3"))
    with pytest.raises(ValueError):
        ObservationSet(counts=-np.ones((5, 2)), observed=obs,
                       link_ids=("1", "2"))


def test_sample_demand_integer_nonnegative():
    demand = DemandDistribution(q=np.array([0.4, 3.0]),
                                sigma_q=np.diag([4.0, 4.0]))
    draws = sample_demand(demand, 200, seed=0)
    assert draws.shape == (200, 2)
    assert draws.dtype == np.int64
    assert np.all(draws >= 0)


def test_sample_demand_long_run_moments():
    demand = DemandDistribution(q=np.array([50.0]), sigma_q=np.array([[100.0]]))
    draws = sample_demand(demand, 10000, seed=1).astype(float)
    se_mean = 10.0 / np.sqrt(10000)
    assert abs(draws.mean() - 50.0) < 3 * se_mean
    se_var = 100.0 * np.sqrt(2.0 / 9999)
    # rounding adds ~1/12 of extra variance, inside this band
    assert abs(draws.var(ddof=1) - 100.0) < 4 * se_var


def test_sample_day_conserves_demand_per_od(triangle):
    rc = RouteChoice(triangle.path_set, np.array([0.7, 0.3, 1.0]))
    f, x = sample_day(np.array([600, 400]), rc, seed=5)
    assert f[0] + f[1] == pytest.approx(600)
    assert f[2] == pytest.approx(400)
    assert f == pytest.approx(np.rint(f))  # integer path counts
    assert x == pytest.approx(triangle.path_set.delta @ f)


def test_sample_day_validation(triangle):
    rc = RouteChoice(triangle.path_set, np.array([0.7, 0.3, 1.0]))
    with pytest.raises(ValueError):
        sample_day(np.array([600.0]), rc, seed=0)
    with pytest.raises(ValueError):
        sample_day(np.array([600.0, -1.0]), rc, seed=0)


def test_perturb_zero_epsilon_is_identity():
    x = np.array([10.0, 0.0, 3.5])
    out = perturb(x, 0.0, seed=3)
    assert np.array_equal(out, x)
    assert out is not x


def test_perturb_stays_within_relative_band():
    x = np.full(2000, 100.0)
    out = perturb(x, 0.3, seed=4)
    assert np.all(out >= 70.0 - 1e-9)
    assert np.all(out <= 130.0 + 1e-9)
    assert out.std() > 0
    again = perturb(x, 0.3, seed=4)
    assert np.array_equal(out, again)


def test_synthesize_shape_and_determinism(parallel_pair):
    cfg = SynthesisConfig(n_days=20, epsilon=0.1, seed=9)
    a = synthesize(parallel_pair.net, parallel_pair.path_set,
                   parallel_pair.demand, parallel_pair.rc, cfg)
    b = synthesize(parallel_pair.net, parallel_pair.path_set,
                   parallel_pair.demand, parallel_pair.rc, cfg)
    assert a.counts.shape == (20, 2)
    assert a.link_ids == ("1", "2")
    assert np.array_equal(a.counts, b.counts)
    other = synthesize(parallel_pair.net, parallel_pair.path_set,
                       parallel_pair.demand, parallel_pair.rc,
                       SynthesisConfig(n_days=20, epsilon=0.1, seed=10))
    assert not np.array_equal(a.counts, other.counts)


def test_synthesize_days_are_independent_substreams(parallel_pair):
    # extending the horizon must not change the earlier days
    short = synthesize(parallel_pair.net, parallel_pair.path_set,
                       parallel_pair.demand, parallel_pair.rc,
                       SynthesisConfig(n_days=3, seed=11))
    long = synthesize(parallel_pair.net, parallel_pair.path_set,
                      parallel_pair.demand, parallel_pair.rc,
                      SynthesisConfig(n_days=8, seed=11))
    assert np.array_equal(long.counts[:3], short.counts)


def test_synthesize_requires_observed_links(parallel_pair):
    bare = generate_paths(parallel_pair.net, k=2)
    with pytest.raises(ValueError, match="observed"):
        synthesize(parallel_pair.net, bare, parallel_pair.demand,
                   parallel_pair.rc, SynthesisConfig(n_days=2))


def test_synthesize_long_run_moments(parallel_pair):
    # empirical moments of the synthetic days against the model moments:
    # x = (50, 50), Var(X_a) = 25 + 75 = 100, Cov(X_1, X_2) = -25 + 75 = 50
    n = 10000
    data = synthesize(parallel_pair.net, parallel_pair.path_set,
                      parallel_pair.demand, parallel_pair.rc,
                      SynthesisConfig(n_days=n, epsilon=0.0, seed=12))
    mean = data.counts.mean(axis=0)
    cov = np.cov(data.counts, rowvar=False)
    se_mean = np.sqrt(100.0 / n)
    assert np.all(np.abs(mean - 50.0) < 3 * se_mean)
    se_var = 100.0 * np.sqrt(2.0 / (n - 1))
    assert abs(cov[0, 0] - 100.0) < 3 * se_var
    assert abs(cov[1, 1] - 100.0) < 3 * se_var
    assert abs(cov[0, 1] - 50.0) < 3 * se_var


def test_observations_csv_round_trip(tmp_path, parallel_pair):
    cfg = SynthesisConfig(n_days=6, epsilon=0.2, seed=13)
    data = synthesize(parallel_pair.net, parallel_pair.path_set,
                      parallel_pair.demand, parallel_pair.rc, cfg)
    p = tmp_path / "obs.csv"
    write_observations_csv(data, p)
    back = read_observations_csv(p, parallel_pair.net)
    assert back.link_ids == data.link_ids
    assert back.observed.indices == data.observed.indices
    np.testing.assert_allclose(back.counts, data.counts, rtol=1e-10)


def test_read_observations_rejects_bad_header(tmp_path, parallel_pair):
    p = tmp_path / "obs.csv"
    p.write_text("day,flow_1\n0,5\n")
    with pytest.raises(ValueError, match="link_"):
        read_observations_csv(p, parallel_pair.net)


def test_read_observations_rejects_unknown_link(tmp_path, parallel_pair):
    p = tmp_path / "obs.csv"
    p.write_text("day,link_99\n0,5\n")
    with pytest.raises(ValueError, match="99"):
        read_observations_csv(p, parallel_pair.net)


def test_read_observations_missing_file(tmp_path, parallel_pair):
    with pytest.raises(ValueError):
        read_observations_csv(tmp_path / "nope.csv", parallel_pair.net)
