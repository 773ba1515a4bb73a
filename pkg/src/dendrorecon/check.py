"""Model checking: two-block hold-out refits and averaged residuals."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from statsmodels.nonparametric.smoothers_lowess import lowess

from . import calibrate, standardize
from .ingest import ClimateSeries, RingWidthDataset
from .mcmc import PosteriorDraws, SamplerConfig, run
from .models import ModelData, ModelSpec, make_spec, prepare_data

__all__ = [
    "MULTISTEP_METHODS",
    "HoldoutPlan",
    "HoldoutResult",
    "ResidualSeries",
    "make_plan",
    "holdout_run",
    "rmse",
    "conservatism_slope",
    "averaged_residuals",
    "longest_exceedance",
]

MULTISTEP_METHODS = ("ts_inverse", "ts_classical", "rcs_inverse", "rcs_classical")


@dataclass(frozen=True)
class HoldoutPlan:
    """Which observed years to withhold.

    ``held`` and ``retained`` are year indices on the series calendar and
    partition the observed years; ``first_half`` holds the earliest
    ``n_obs // 2`` of them, ``second_half`` the rest.
    """

    which: str
    held: np.ndarray
    retained: np.ndarray

    def held_mask(self, n: int) -> np.ndarray:
        mask = np.zeros(n, dtype=bool)
        mask[self.held] = True
        return mask


def make_plan(observed, which: str) -> HoldoutPlan:
    which = {"first": "first_half", "second": "second_half"}.get(which, which)
    if which not in ("first_half", "second_half"):
        raise ValueError(f"unknown hold-out block {which!r}")
    obs = np.flatnonzero(np.asarray(observed, dtype=bool))
    if obs.size < 2:
        raise ValueError("need at least two observed years to hold out half")
    cut = obs.size // 2
    first, second = obs[:cut], obs[cut:]
    if which == "first_half":
        return HoldoutPlan(which, first, second)
    return HoldoutPlan(which, second, first)


@dataclass
class HoldoutResult:
    method: str
    plan: HoldoutPlan
    years: np.ndarray
    truth: np.ndarray
    point: np.ndarray
    intervals: dict
    x_bar: float
    converged: bool | None = None
    draws: PosteriorDraws | None = field(default=None, repr=False)

    def rmse(self) -> float:
        return rmse(self.point, self.truth)

    def coverage(self, level: float) -> float:
        lo, hi = self.intervals[level]
        return float(np.mean((lo <= self.truth) & (self.truth <= hi)))

    def mean_width(self, level: float) -> float:
        lo, hi = self.intervals[level]
        return float(np.mean(hi - lo))

    def conservatism_slope(self) -> float:
        return conservatism_slope(self.point, self.truth, self.x_bar)

    def summary(self) -> dict:
        out = {"method": self.method, "holdout": self.plan.which, "n_held": int(self.truth.size),
               "rmse": self.rmse(), "conservatism_slope": self.conservatism_slope()}
        for level in sorted(self.intervals):
            tag = f"{round(level * 100)}"
            out[f"coverage{tag}"] = self.coverage(level)
            out[f"width{tag}"] = self.mean_width(level)
        if self.converged is not None:
            out["converged"] = self.converged
        return out


def rmse(predictions, truths) -> float:
    p = np.asarray(predictions, dtype=np.float64)
    t = np.asarray(truths, dtype=np.float64)
    if p.shape != t.shape:
        raise ValueError("predictions and truths must be aligned")
    if p.size == 0:
        raise ValueError("rmse of an empty set is undefined")
    return float(np.sqrt(np.mean((p - t) ** 2)))


def conservatism_slope(predictions, truths, center: float) -> float:
    """Least-squares slope through the origin of (prediction - center) on (truth - center).

    Values below 1 mean predictions are pulled toward ``center``.
    """
    p = np.asarray(predictions, dtype=np.float64) - center
    t = np.asarray(truths, dtype=np.float64) - center
    return float(p @ t / (t @ t))


def holdout_run(method, dataset: RingWidthDataset, climate: ClimateSeries, plan: HoldoutPlan,
                config: SamplerConfig | None = None, bin_width: int = 10,
                mean_fn: str = "arithmetic") -> HoldoutResult:
    """Refit ``method`` with the held years treated as missing and predict them.

    ``method`` is a ``ModelSpec``, a model name, or one of
    ``MULTISTEP_METHODS``.  Bayesian fits report posterior medians and
    central intervals without enforcing the R-hat gate; ``converged``
    records whether it passed.
    """
    held = plan.held_mask(climate.n)
    truth = climate.values[plan.held].copy()
    x_bar = float(np.mean(climate.values[plan.retained]))
    reduced = climate.with_missing(held)
    years = climate.years[plan.held]

    if isinstance(method, str) and method.lower() in MULTISTEP_METHODS:
        std, cal = method.lower().split("_")
        chron = standardize.standardize(dataset, std, bin_width, mean_fn)
        rec = calibrate.reconstruct(chron.z, reduced.values, cal)
        pos = np.searchsorted(rec["index"], plan.held)
        if np.any(pos >= rec["index"].size) or np.any(rec["index"][np.minimum(pos, rec["index"].size - 1)] != plan.held):
            raise ValueError("chronology undefined in some held-out years")
        intervals = {lv: (lo[pos], hi[pos]) for lv, (lo, hi) in rec["intervals"].items()}
        return HoldoutResult(method.lower(), plan, years, truth, rec["xhat"][pos], intervals, x_bar)

    spec = method if isinstance(method, ModelSpec) else make_spec(method)
    data = prepare_data(spec, dataset, reduced)
    draws = run(spec, data, config or SamplerConfig())
    # columns of x_mis that correspond to held years
    mis_idx = np.flatnonzero(data.missing)
    cols = np.searchsorted(mis_idx, plan.held)
    x = draws.pooled("x_mis")[:, cols]
    q = np.quantile(x, [0.5, 0.25, 0.75, 0.025, 0.975], axis=0)
    intervals = {0.5: (q[1], q[2]), 0.95: (q[3], q[4])}
    return HoldoutResult(spec.name, plan, years, truth, q[0], intervals, x_bar,
                         converged=draws.converged, draws=draws)


@dataclass
class ResidualSeries:
    """Per-year mean log-scale residual at posterior means (NaN where no tree grows)."""

    years: np.ndarray
    residual: np.ndarray
    count: np.ndarray
    observed: np.ndarray
    smooth: np.ndarray

    def rows(self):
        for i in range(self.years.size):
            yield (int(self.years[i]), self.residual[i], int(self.count[i]), bool(self.observed[i]),
                   self.smooth[i])


def averaged_residuals(draws: PosteriorDraws, data: ModelData, spec: ModelSpec | None = None,
                       frac: float = 0.3) -> ResidualSeries:
    """Average residuals across trees per year, with a loess smooth (span ``frac``)."""
    spec = spec or draws.spec
    eta = draws.mean("eta")
    if spec.is_rcs:
        fitted = draws.mean("zeta")[data.bin] + eta[data.t]
    else:
        b0, b1 = draws.mean("beta0"), draws.mean("beta1")
        fitted = b0[data.tree] + b1[data.tree] * data.age + eta[data.t]
    delta = data.logy - fitted
    count = np.bincount(data.t, minlength=data.n)
    total = np.bincount(data.t, weights=delta, minlength=data.n)
    resid = np.full(data.n, np.nan)
    have = count > 0
    resid[have] = total[have] / count[have]
    smooth = np.full(data.n, np.nan)
    if have.sum() >= 3:
        smooth[have] = lowess(resid[have], data.years[have].astype(float), frac=frac,
                              return_sorted=False)
    return ResidualSeries(data.years.copy(), resid, count, data.observed.copy(), smooth)


def longest_exceedance(res: ResidualSeries, sigma_y: float, k: float = 2.0) -> int:
    """Longest run of consecutive years where |smooth| exceeds ``k * sigma_y / sqrt(depth)``."""
    with np.errstate(divide="ignore", invalid="ignore"):
        bound = k * sigma_y / np.sqrt(res.count)
        hit = np.abs(res.smooth) > bound
    best = cur = 0
    for h in hit:
        cur = cur + 1 if h else 0
        best = max(best, cur)
    return best
