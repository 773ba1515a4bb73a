import numpy as np
import pytest
from scipy import stats

from dendrorecon import simulate


def test_scenarios_and_overrides():
    assert set(simulate.SCENARIOS) == {"flat", "trend", "sine", "curse", "micro"}
    s = simulate.scenario("flat", n=100, obs_years=20)
    assert s.n == 100 and s.name == "flat"
    with pytest.raises(ValueError):
        simulate.scenario("tropical")
    with pytest.raises(ValueError):
        simulate.scenario("flat", climate="walk")
    with pytest.raises(ValueError):
        simulate.scenario("flat", obs_years=0)
    with pytest.raises(ValueError):
        simulate.scenario("flat", segment_min=50, segment_max=40)


def test_climate_paths():
    trend = simulate.climate_path(simulate.scenario("trend"))
    assert trend[0] == pytest.approx(9.0) and trend[-1] == pytest.approx(11.0)
    sine = simulate.climate_path(simulate.scenario("sine", n=400))
    assert sine.max() == pytest.approx(11.0, abs=1e-3) and sine[200] == pytest.approx(10.0)


def test_deterministic_per_seed():
    a = simulate.simulate_dataset(simulate.scenario("micro"), 7)
    b = simulate.simulate_dataset(simulate.scenario("micro"), 7)
    c = simulate.simulate_dataset(simulate.scenario("micro"), 8)
    np.testing.assert_array_equal(a.x_true, b.x_true)
    for wa, wb in zip(a.dataset.widths, b.dataset.widths):
        np.testing.assert_array_equal(wa, wb)
    assert not np.array_equal(a.x_true, c.x_true)


def test_layout(micro_sim):
    spec = micro_sim.scenario
    ds, cl = micro_sim.dataset, micro_sim.climate
    assert len(ds.tree_ids) == spec.n_trees
    assert ds.year_min == spec.start_year and ds.year_max == spec.start_year + spec.n - 1
    assert np.isnan(cl.values[: spec.n - spec.obs_years]).all()
    np.testing.assert_array_equal(cl.values[-spec.obs_years:], micro_sim.x_true[-spec.obs_years:])
    seg = ds.last_year - ds.first_year + 1
    assert seg.min() >= spec.segment_min and seg.max() <= spec.segment_max
    np.testing.assert_array_equal(micro_sim.truth["depth"], ds.depth())


def test_generative_moments():
    # large draw: residual structure matches the stated noise scales
    spec = simulate.scenario("flat", n=3000, n_trees=300, obs_years=100)
    sim = simulate.simulate_dataset(spec, 11)
    x, eta = sim.truth["x"], sim.truth["eta"]
    assert np.std(x - 10.0, ddof=1) == pytest.approx(1.0, rel=0.05)
    assert np.std(eta - 0.1 * x, ddof=1) == pytest.approx(0.05, rel=0.05)
    start = sim.dataset.first_year - spec.start_year
    resid = []
    for i, w in enumerate(sim.dataset.widths):
        age = np.arange(1, w.size + 1)
        ti = start[i] + age - 1
        resid.append(np.log(w) - sim.truth["beta0"][i] - sim.truth["beta1"][i] * age - eta[ti])
    resid = np.concatenate(resid)
    assert np.std(resid) == pytest.approx(0.25, rel=0.02)
    assert stats.kstest(resid / 0.25, "norm").statistic < 0.01


def test_score_reconstruction():
    t = np.linspace(9, 11, 50)
    s = simulate.score_reconstruction(t, t + 0.1)
    assert s["rmse"] == pytest.approx(0.1)
    assert s["correlation"] == pytest.approx(1.0)
    assert s["slope_error"] == pytest.approx(0.0, abs=1e-12)
    flat = simulate.score_reconstruction(t, np.full(50, 10.0))
    assert np.isnan(flat["correlation"])
    assert flat["slope_error"] == pytest.approx(-2 / 49)
    with pytest.raises(ValueError):
        simulate.score_reconstruction(t, t[:-1])
