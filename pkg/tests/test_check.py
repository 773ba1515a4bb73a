import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from dendrorecon import check, models
from dendrorecon.mcmc import SamplerConfig, run


def test_make_plan_halves():
    obs = np.array([False] * 4 + [True] * 7)
    first = check.make_plan(obs, "first")
    second = check.make_plan(obs, "second_half")
    assert first.held.tolist() == [4, 5, 6] and first.retained.tolist() == [7, 8, 9, 10]
    assert second.held.tolist() == [7, 8, 9, 10] and second.retained.tolist() == [4, 5, 6]
    assert first.held_mask(11).sum() == 3
    with pytest.raises(ValueError):
        check.make_plan(obs, "middle")
    with pytest.raises(ValueError):
        check.make_plan(np.array([False, True]), "first")


def test_rmse_and_slope():
    assert check.rmse([1.0, 3.0], [2.0, 2.0]) == pytest.approx(1.0)
    with pytest.raises(ValueError):
        check.rmse([], [])
    with pytest.raises(ValueError):
        check.rmse([1.0], [1.0, 2.0])
    truth = np.array([8.0, 9.0, 11.0, 12.0])
    assert check.conservatism_slope(10 + 0.5 * (truth - 10), truth, 10.0) == pytest.approx(0.5)


@settings(max_examples=60, deadline=None)
@given(st.lists(st.floats(-5, 5), min_size=2, max_size=30), st.floats(-3, 3), st.floats(-10, 10))
def test_slope_is_through_origin(t, k, c):
    t = np.asarray(t)
    if np.sum(t * t) < 1e-6:
        return
    # an exact proportional shrink recovers its factor whatever the centre
    assert check.conservatism_slope(c + k * t, c + t, c) == pytest.approx(k, abs=1e-9)


@pytest.mark.parametrize("method", check.MULTISTEP_METHODS)
def test_multistep_holdout(method, micro_sim):
    climate = micro_sim.climate_full.with_missing(np.isnan(micro_sim.climate.values))
    plan = check.make_plan(climate.observed, "first")
    res = check.holdout_run(method, micro_sim.dataset, climate, plan)
    assert res.truth.size == plan.held.size == 15
    np.testing.assert_array_equal(res.truth, micro_sim.x_true[plan.held])
    s = res.summary()
    assert s["n_held"] == 15 and np.isfinite(s["rmse"])
    assert 0.0 <= s["coverage95"] <= 1.0
    assert s["width95"] > s["width50"] > 0
    assert res.x_bar == pytest.approx(np.mean(micro_sim.x_true[plan.retained]))


def test_bayesian_holdout_reports_convergence(micro_sim):
    plan = check.make_plan(micro_sim.climate.observed, "second")
    cfg = SamplerConfig(chains=2, iterations=400, burn_in=200, thin=2, seed=3)
    res = check.holdout_run("M_TS_const", micro_sim.dataset, micro_sim.climate, plan, cfg)
    assert isinstance(res.converged, bool)
    assert res.point.shape == res.truth.shape
    lo, hi = res.intervals[0.95]
    assert np.all(lo <= res.point) and np.all(res.point <= hi)


def test_averaged_residuals(micro_sim):
    spec = models.make_spec("M_TS_const")
    data = models.prepare_data(spec, micro_sim.dataset, micro_sim.climate)
    draws = run(spec, data, SamplerConfig(chains=2, iterations=400, burn_in=200, thin=2, seed=3))
    res = check.averaged_residuals(draws, data)
    b0, b1, eta = draws.mean("beta0"), draws.mean("beta1"), draws.mean("eta")
    delta = data.logy - b0[data.tree] - b1[data.tree] * data.age - eta[data.t]
    for i in (0, 17, data.n - 1):
        if res.count[i]:
            assert res.residual[i] == pytest.approx(delta[data.t == i].mean(), rel=1e-10, abs=1e-12)
    np.testing.assert_array_equal(res.count, data.depth())
    assert np.isfinite(res.smooth[res.count > 0]).all()
    assert len(list(res.rows())) == data.n


def test_longest_exceedance():
    smooth = np.array([0.0, 0.5, 0.5, 0.5, 0.0, 0.5, np.nan])
    res = check.ResidualSeries(np.arange(7), smooth.copy(), np.array([4, 4, 4, 4, 4, 4, 0]),
                               np.ones(7, bool), smooth)
    # bound is 2 * 0.2 / 2 = 0.2
    assert check.longest_exceedance(res, 0.2) == 3
    assert check.longest_exceedance(res, 1.0) == 0
