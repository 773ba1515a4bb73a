"""Synthetic ring-width and climate data drawn from the joint model.

Climate follows a chosen path plus white noise, year effects respond
linearly to climate, and log widths are linear in age per tree::

    x_t    = path_t + N(0, sigma_x^2)
    eta_t  ~ N(beta2 * x_t, sigma_eta^2)
    log y  ~ N(beta0_i + beta1_i * a_it + eta_t, sigma_y^2)

Only the last ``obs_years`` of climate are released as observed; the full
path is kept in the returned truth for scoring.
"""
from __future__ import annotations

import warnings
from dataclasses import dataclass, field, replace

import numpy as np

from .ingest import ClimateSeries, RingWidthDataset

__all__ = ["ScenarioSpec", "Simulation", "SCENARIOS", "scenario", "simulate_dataset",
           "score_reconstruction"]


@dataclass(frozen=True)
class ScenarioSpec:
    """Generator settings.

    ``climate`` is ``"constant"`` (mean plus noise), ``"trend"`` (linear rise
    of ``amplitude`` over the whole period, centred on ``climate_mean``) or
    ``"sine"`` (``amplitude`` times a sine of period ``period``).
    """

    name: str = "flat"
    n: int = 500
    start_year: int = 1496
    n_trees: int = 60
    segment_min: int = 40
    segment_max: int = 120
    living_fraction: float = 0.2
    obs_years: int = 83
    climate: str = "constant"
    climate_mean: float = 10.0
    amplitude: float = 0.0
    period: float = 200.0
    sigma_x: float = 1.0
    beta2: float = 0.1
    sigma_eta: float = 0.05
    sigma_y: float = 0.25
    mu_beta0: float = 0.5
    sigma_beta0: float = 0.25
    mu_beta1: float = -0.008
    sigma_beta1: float = 0.002

    def __post_init__(self):
        if self.climate not in ("constant", "trend", "sine"):
            raise ValueError(f"unknown climate path {self.climate!r}")
        if not 1 <= self.segment_min <= self.segment_max:
            raise ValueError("need 1 <= segment_min <= segment_max")
        if not 0 < self.obs_years <= self.n:
            raise ValueError("obs_years must be in (0, n]")
        if not 0.0 <= self.living_fraction <= 1.0:
            raise ValueError("living_fraction must be in [0, 1]")
        if min(self.sigma_x, self.sigma_eta, self.sigma_y, self.sigma_beta0, self.sigma_beta1) < 0:
            raise ValueError("noise scales must be non-negative")


SCENARIOS = {
    "flat": ScenarioSpec(name="flat"),
    "trend": ScenarioSpec(name="trend", climate="trend", amplitude=2.0, sigma_x=0.5),
    "sine": ScenarioSpec(name="sine", climate="sine", amplitude=1.0, period=200.0, sigma_x=0.5),
    "curse": ScenarioSpec(name="curse", climate="trend", amplitude=2.0, sigma_x=0.5),
    "micro": ScenarioSpec(name="micro", n=60, start_year=1941, n_trees=5, segment_min=40,
                          segment_max=60, living_fraction=0.4, obs_years=30),
}


def scenario(name: str, **overrides) -> ScenarioSpec:
    try:
        base = SCENARIOS[name]
    except KeyError:
        raise ValueError(f"unknown scenario {name!r}; choose from {', '.join(SCENARIOS)}") from None
    return replace(base, **overrides) if overrides else base


@dataclass
class Simulation:
    dataset: RingWidthDataset
    climate: ClimateSeries
    truth: dict = field(repr=False)
    scenario: ScenarioSpec = None

    @property
    def x_true(self) -> np.ndarray:
        return self.truth["x"]

    @property
    def climate_full(self) -> ClimateSeries:
        return ClimateSeries(years=self.climate.years.copy(), values=self.truth["x"].copy())


def climate_path(spec: ScenarioSpec) -> np.ndarray:
    t = np.arange(spec.n, dtype=np.float64)
    if spec.climate == "constant":
        return np.full(spec.n, spec.climate_mean)
    if spec.climate == "trend":
        frac = t / max(spec.n - 1, 1) - 0.5
        return spec.climate_mean + spec.amplitude * frac
    return spec.climate_mean + spec.amplitude * np.sin(2.0 * np.pi * t / spec.period)


def simulate_dataset(spec: ScenarioSpec, seed: int) -> Simulation:
    """Draw one dataset; every tree is one series, aged from 1 at its first ring."""
    rng = np.random.default_rng(seed)
    n, k = spec.n, spec.n_trees
    path = climate_path(spec)
    x = path + spec.sigma_x * rng.standard_normal(n)
    eta = spec.beta2 * x + spec.sigma_eta * rng.standard_normal(n)

    seg = rng.integers(spec.segment_min, spec.segment_max + 1, size=k)
    seg = np.minimum(seg, n)
    living = rng.random(k) < spec.living_fraction
    last_idx = np.where(living, n - 1, 0)
    dead = ~living
    # dead trees end uniformly anywhere their whole segment still fits
    last_idx[dead] = seg[dead] - 1 + rng.integers(0, n - seg[dead] + 1)
    first_idx = last_idx - seg + 1
    # anchor the calendar: one tree starts in the first year, one is alive in the last
    if k > 1:
        first_idx[0], last_idx[0] = 0, seg[0] - 1
        first_idx[-1], last_idx[-1] = n - seg[-1], n - 1

    beta0 = spec.mu_beta0 + spec.sigma_beta0 * rng.standard_normal(k)
    beta1 = spec.mu_beta1 + spec.sigma_beta1 * rng.standard_normal(k)
    widths = []
    for i in range(k):
        ti = np.arange(first_idx[i], last_idx[i] + 1)
        age = np.arange(1, seg[i] + 1, dtype=np.float64)
        logy = beta0[i] + beta1[i] * age + eta[ti] + spec.sigma_y * rng.standard_normal(seg[i])
        widths.append(np.exp(logy))

    order = np.lexsort((np.arange(k), first_idx))
    ids = tuple(f"T{j + 1:03d}" for j in range(k))
    dataset = RingWidthDataset(
        tree_ids=ids,
        first_year=(spec.start_year + first_idx[order]).astype(np.int64),
        last_year=(spec.start_year + last_idx[order]).astype(np.int64),
        widths=tuple(widths[i] for i in order),
    )
    # pad to the full calendar so the climate and ring spans coincide
    years = np.arange(spec.start_year, spec.start_year + n, dtype=np.int64)
    if dataset.year_min != years[0] or dataset.year_max != years[-1]:
        warnings.warn("simulated trees do not span the full calendar", RuntimeWarning, stacklevel=2)
    values = x.copy()
    values[: n - spec.obs_years] = np.nan
    climate = ClimateSeries(years=years, values=values)
    depth = np.zeros(n, dtype=int)
    for i in range(k):
        depth[first_idx[i]: last_idx[i] + 1] += 1
    if depth[n - spec.obs_years:].sum() == 0:
        warnings.warn("no simulated tree overlaps the observed climate span", RuntimeWarning,
                      stacklevel=2)
    truth = {
        "x": x,
        "path": path,
        "eta": eta,
        "beta0": beta0[order],
        "beta1": beta1[order],
        "beta2": spec.beta2,
        "sigma_y": spec.sigma_y,
        "sigma_eta": spec.sigma_eta,
        "sigma_x": spec.sigma_x,
        "mu_x": spec.climate_mean,
        "depth": depth,
    }
    return Simulation(dataset=dataset, climate=climate, truth=truth, scenario=spec)


def _slope(y) -> float:
    t = np.arange(len(y), dtype=np.float64)
    return float(np.polyfit(t, y, 1)[0])


def score_reconstruction(truth, predicted) -> dict:
    """RMSE, Pearson correlation, and fitted slope of prediction minus slope of truth."""
    truth = np.asarray(truth, dtype=np.float64)
    predicted = np.asarray(predicted, dtype=np.float64)
    if truth.shape != predicted.shape or truth.ndim != 1:
        raise ValueError("truth and prediction must be aligned 1-D series")
    err = predicted - truth
    if truth.size > 1 and np.std(truth) > 0 and np.std(predicted) > 0:
        corr = float(np.corrcoef(truth, predicted)[0, 1])
    else:
        corr = float("nan")
    slope_error = _slope(predicted) - _slope(truth) if truth.size > 1 else float("nan")
    return {"rmse": float(np.sqrt(np.mean(err * err))), "correlation": corr,
            "slope_error": slope_error}
