"""Joint hierarchical models for ring widths and climate.

Five named models combine three switches:

* growth: linear-in-age per tree on the log scale (``ts``) or a shared
  growth level per age bin (``rcs``);
* climate mean: a constant ``mu_x`` or a cubic B-spline in time;
* response of the common year effect to climate: linear, or piecewise
  linear with no growth below ``x_min`` and saturation above ``x_max``.

All models share::

    log y_it ~ N(growth_it + eta_t, sigma_y^2)
    eta_t    ~ N(beta2 * g(x_t), sigma_eta^2)
    x_t      ~ N(alpha_t, sigma_x^2)

where ``g`` is the identity for the linear response.
"""
from __future__ import annotations

import json
import math
from dataclasses import dataclass, field, fields, replace
from pathlib import Path

import numpy as np
from scipy import special

from .ingest import ClimateSeries, RingWidthDataset, ValidationError
from .spline import SplineBasis, build_basis

__all__ = [
    "MODEL_NAMES",
    "Normal",
    "HalfT",
    "PriorSet",
    "SOFT_PRIORS",
    "ModelSpec",
    "LatentState",
    "ModelData",
    "make_spec",
    "spec_from_config",
    "load_config",
    "prepare_data",
    "response_mean",
    "climate_mean",
    "log_joint",
    "log_joint_terms",
    "prior_predictive_climate",
    "soft_prior_probabilities",
]

MODEL_NAMES = ("M_TS_const", "M_RCS_const", "M_TS_spl", "M_TS_spl_soft", "M_TS_spl_hard")
_LOG2PI = math.log(2.0 * math.pi)


@dataclass(frozen=True)
class Normal:
    mean: float = 0.0
    sd: float = 100.0

    def __post_init__(self):
        if not self.sd > 0:
            raise ValueError("normal prior sd must be positive")

    def logpdf(self, v) -> float:
        z = (np.asarray(v, dtype=np.float64) - self.mean) / self.sd
        return float(np.sum(-0.5 * z * z - math.log(self.sd) - 0.5 * _LOG2PI))


@dataclass(frozen=True)
class HalfT:
    """Half-t prior on a standard deviation."""

    df: float = 3.0
    scale: float = 5.0

    def __post_init__(self):
        if not (self.df > 0 and self.scale > 0):
            raise ValueError("half-t df and scale must be positive")

    def logpdf(self, sigma: float) -> float:
        if not sigma > 0:
            return -math.inf
        nu, z = self.df, sigma / self.scale
        return (math.log(2.0) + math.lgamma(0.5 * (nu + 1.0)) - math.lgamma(0.5 * nu)
                - 0.5 * math.log(nu * math.pi) - 0.5 * (nu + 1.0) * math.log1p(z * z / nu) - math.log(self.scale))

    def sample(self, rng, size=None):
        return np.abs(self.scale * rng.standard_t(self.df, size=size))


_SCALE_NAMES = ("sigma_y", "sigma_eta", "sigma_x", "sigma_beta0", "sigma_beta1", "sigma_gamma")
_LOCATION_NAMES = ("mu_beta0", "mu_beta1", "mu_x", "mu_gamma", "beta2", "zeta")


@dataclass(frozen=True)
class PriorSet:
    """Hyperpriors.  Locations are normal, standard deviations half-t.

    ``scale_family="inv_gamma"`` replaces every half-t by an
    inverse-gamma(``ig_shape``, ``ig_rate``) prior on the variance.
    """

    mu_beta0: Normal = Normal()
    mu_beta1: Normal = Normal()
    mu_x: Normal = Normal()
    mu_gamma: Normal = Normal()
    beta2: Normal = Normal()
    zeta: Normal = Normal()
    sigma_y: HalfT = HalfT()
    sigma_eta: HalfT = HalfT()
    sigma_x: HalfT = HalfT()
    sigma_beta0: HalfT = HalfT()
    sigma_beta1: HalfT = HalfT()
    sigma_gamma: HalfT = HalfT()
    scale_family: str = "half_t"
    ig_shape: float = 0.001
    ig_rate: float = 0.001

    def __post_init__(self):
        if self.scale_family not in ("half_t", "inv_gamma"):
            raise ValueError(f"unknown scale family {self.scale_family!r}")
        if not (self.ig_shape > 0 and self.ig_rate > 0):
            raise ValueError("inverse-gamma hyperparameters must be positive")

    def scale_logpdf(self, name: str, sigma: float) -> float:
        """Log prior density of a standard deviation (density over sigma)."""
        if self.scale_family == "half_t":
            return getattr(self, name).logpdf(sigma)
        if not sigma > 0:
            return -math.inf
        v = sigma * sigma
        a, b = self.ig_shape, self.ig_rate
        return (a * math.log(b) - math.lgamma(a) - (a + 1.0) * math.log(v) - b / v
                + math.log(2.0 * sigma))

    def with_overrides(self, overrides: dict) -> "PriorSet":
        kw = {}
        for key, val in overrides.items():
            if key in _LOCATION_NAMES:
                kw[key] = Normal(**val) if isinstance(val, dict) else Normal(*val)
            elif key in _SCALE_NAMES:
                kw[key] = HalfT(**val) if isinstance(val, dict) else HalfT(*val)
            elif key in ("scale_family", "ig_shape", "ig_rate"):
                kw[key] = val
            else:
                raise ValueError(f"unknown prior {key!r}")
        return replace(self, **kw)


# Informative climate priors for M_TS_spl_soft.  Tuned with
# scripts/calibrate_soft_priors.py so the prior predictive of x_t gives
# Pr(8 < x < 12) = 0.81, Pr(x > 6) = 0.97, Pr(x > 4) = 0.99 on the default
# 500-year, 25-year-knot basis.
SOFT_PRIORS = {
    "mu_gamma": Normal(10.0, 0.44),
    "sigma_x": HalfT(3.0, 0.44),
    "sigma_gamma": HalfT(3.0, 1.79),
}


@dataclass(frozen=True)
class ModelSpec:
    name: str
    growth: str = "ts"
    bin_width: int = 10
    climate_mean: str = "constant"
    knot_spacing: int = 25
    response: str = "linear"
    x_min: float = 4.0
    x_max: float = 20.0
    priors: PriorSet = field(default_factory=PriorSet)
    beta2_positive: bool = False
    freeze_gamma: bool = False

    def __post_init__(self):
        if self.growth not in ("ts", "rcs"):
            raise ValueError(
                f"growth {self.growth!r} not supported; only linear-age (ts) or binned (rcs) "
                "growth keep the model identifiable"
            )
        if self.climate_mean not in ("constant", "spline"):
            raise ValueError(f"unknown climate mean {self.climate_mean!r}")
        if self.response not in ("linear", "piecewise"):
            raise ValueError(f"unknown response {self.response!r}")
        if self.bin_width < 1:
            raise ValueError("bin_width must be >= 1")
        if self.knot_spacing < 1:
            raise ValueError("knot_spacing must be >= 1")
        if self.response == "piecewise":
            if not self.x_min < self.x_max:
                raise ValueError("x_min must be below x_max")
            if not self.beta2_positive:
                raise ValueError("piecewise response requires beta2 constrained positive")
        if self.freeze_gamma and self.climate_mean != "spline":
            raise ValueError("freeze_gamma only applies to spline climate means")

    @property
    def is_spline(self) -> bool:
        return self.climate_mean == "spline"

    @property
    def is_rcs(self) -> bool:
        return self.growth == "rcs"

    @property
    def is_piecewise(self) -> bool:
        return self.response == "piecewise"

    def to_dict(self) -> dict:
        d = {f.name: getattr(self, f.name) for f in fields(self) if f.name != "priors"}
        pri = {}
        for f in fields(self.priors):
            v = getattr(self.priors, f.name)
            pri[f.name] = {"mean": v.mean, "sd": v.sd} if isinstance(v, Normal) else (
                {"df": v.df, "scale": v.scale} if isinstance(v, HalfT) else v)
        d["priors"] = pri
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ModelSpec":
        d = dict(d)
        pri = {}
        for key, val in d.pop("priors", {}).items():
            if isinstance(val, dict):
                pri[key] = Normal(**val) if "mean" in val else HalfT(**val)
            else:
                pri[key] = val
        return cls(priors=PriorSet(**pri), **d)


_CANONICAL = {n.lower(): n for n in MODEL_NAMES}


def _canonical_name(name: str) -> str:
    try:
        return _CANONICAL[name.lower()]
    except KeyError:
        raise ValueError(f"unknown model {name!r}; choose from {', '.join(MODEL_NAMES)}") from None


def make_spec(name: str, **options) -> ModelSpec:
    """Build one of the named models.

    Options: ``bin_width`` (RCS only), ``knot_spacing`` (spline models),
    ``x_min``/``x_max`` (hard-constraint model), ``priors`` (dict of
    overrides), ``scale_family``, ``freeze_gamma`` (spline models).
    Options that do not apply to ``name`` raise ``ValueError``.
    """
    name = _canonical_name(name)
    rcs = name == "M_RCS_const"
    spline = name.startswith("M_TS_spl")
    hard = name == "M_TS_spl_hard"
    allowed = {"priors", "scale_family"}
    if rcs:
        allowed.add("bin_width")
    if spline:
        allowed |= {"knot_spacing", "freeze_gamma"}
    if hard:
        allowed |= {"x_min", "x_max"}
    extra = set(options) - allowed
    if extra:
        raise ValueError(f"options {sorted(extra)} do not apply to {name}")

    priors = PriorSet()
    if name == "M_TS_spl_soft":
        priors = replace(priors, **SOFT_PRIORS)
    if options.get("priors"):
        priors = priors.with_overrides(options["priors"])
    if "scale_family" in options:
        priors = replace(priors, scale_family=options["scale_family"])

    return ModelSpec(
        name=name,
        growth="rcs" if rcs else "ts",
        bin_width=int(options.get("bin_width", 10)),
        climate_mean="spline" if spline else "constant",
        knot_spacing=int(options.get("knot_spacing", 25)),
        response="piecewise" if hard else "linear",
        x_min=float(options.get("x_min", 4.0)),
        x_max=float(options.get("x_max", 20.0)),
        priors=priors,
        beta2_positive=spline,
        freeze_gamma=bool(options.get("freeze_gamma", False)),
    )


def load_config(path) -> dict:
    """Read a JSON model configuration file."""
    with open(path, encoding="utf-8") as fh:
        cfg = json.load(fh)
    if not isinstance(cfg, dict):
        raise ValueError("model configuration must be a JSON object")
    return cfg


def spec_from_config(cfg: dict, default_model: str | None = None) -> ModelSpec:
    cfg = dict(cfg)
    name = cfg.pop("model", default_model)
    if name is None:
        raise ValueError("configuration does not name a model")
    cfg.pop("sampler", None)
    return make_spec(name, **cfg)


@dataclass
class LatentState:
    """Every unknown of a model, in model coordinates.

    ``x`` has length n and carries the observed climate as well; ``aux``
    holds the parameter-expansion auxiliaries of half-t scale priors.
    """

    beta0: np.ndarray
    beta1: np.ndarray
    zeta: np.ndarray
    beta2: float
    eta: np.ndarray
    x: np.ndarray
    gamma: np.ndarray
    mu_x: float
    mu_gamma: float
    mu_beta0: float
    mu_beta1: float
    sigma_y: float
    sigma_eta: float
    sigma_x: float
    sigma_beta0: float
    sigma_beta1: float
    sigma_gamma: float
    aux: dict = field(default_factory=dict)

    def copy(self) -> "LatentState":
        kw = {}
        for f in fields(self):
            v = getattr(self, f.name)
            kw[f.name] = v.copy() if isinstance(v, (np.ndarray, dict)) else v
        return LatentState(**kw)


@dataclass(frozen=True)
class ModelData:
    """Long-format arrays the samplers and densities work on.

    Indices are 0-based: ``t`` is the year index, ``tree`` the tree index,
    ``bin`` the index of the occupied age bin (``bin_labels`` maps back to
    the 1-based age class).
    """

    years: np.ndarray
    tree: np.ndarray
    t: np.ndarray
    age: np.ndarray
    logy: np.ndarray
    first_idx: np.ndarray
    x_obs: np.ndarray
    observed: np.ndarray
    bin: np.ndarray
    bin_labels: np.ndarray
    basis: SplineBasis | None
    tree_ids: tuple

    @property
    def n(self) -> int:
        return int(self.years.size)

    @property
    def k(self) -> int:
        return int(self.first_idx.size)

    @property
    def n_obs(self) -> int:
        return int(self.logy.size)

    @property
    def n_bins(self) -> int:
        return int(self.bin_labels.size)

    @property
    def missing(self) -> np.ndarray:
        return ~self.observed

    def depth(self) -> np.ndarray:
        return np.bincount(self.t, minlength=self.n)

    def with_observed(self, observed: np.ndarray) -> "ModelData":
        observed = np.asarray(observed, dtype=bool)
        x = self.x_obs.copy()
        x[~observed] = np.nan
        return replace(self, x_obs=x, observed=observed & ~np.isnan(self.x_obs))


def prepare_data(spec: ModelSpec, dataset: RingWidthDataset, climate: ClimateSeries) -> ModelData:
    """Flatten a dataset and an aligned climate series for ``spec``."""
    if climate.n != dataset.n or climate.years[0] != dataset.year_min:
        raise ValidationError("climate series must be aligned to the ring-width calendar")
    tree, year, width = dataset.to_long()
    t = year - dataset.year_min
    age = (year - dataset.first_year[tree] + 1).astype(np.float64)
    observed = climate.observed.copy()
    if not observed.any():
        raise ValidationError("no observed climate values to calibrate against")
    x_obs = climate.values.copy()
    if spec.is_piecewise and np.any(x_obs[observed] < spec.x_min):
        raise ValidationError(
            f"observed climate below x_min={spec.x_min} is impossible under the piecewise response"
        )
    raw_bin = ((age.astype(np.int64) + spec.bin_width - 1) // spec.bin_width)
    labels, bin_idx = np.unique(raw_bin, return_inverse=True)
    basis = build_basis(dataset.n, spec.knot_spacing) if spec.is_spline else None
    return ModelData(
        years=dataset.years,
        tree=tree.astype(np.int64),
        t=t.astype(np.int64),
        age=age,
        logy=np.log(width),
        first_idx=(dataset.first_year - dataset.year_min).astype(np.int64),
        x_obs=x_obs,
        observed=observed,
        bin=bin_idx.astype(np.int64),
        bin_labels=labels.astype(np.int64),
        basis=basis,
        tree_ids=dataset.tree_ids,
    )


def response_mean(spec: ModelSpec, x, beta2: float):
    """Mean of the year effect given climate: ``beta2 * x`` or the piecewise form."""
    x = np.asarray(x, dtype=np.float64)
    if not spec.is_piecewise:
        out = beta2 * x
    else:
        out = np.where(x < spec.x_min, -np.inf, beta2 * np.minimum(x, spec.x_max))
    return out if out.ndim else float(out)


def climate_mean(spec: ModelSpec, state: LatentState, data: ModelData) -> np.ndarray:
    if spec.is_spline:
        return data.basis.matrix @ state.gamma
    return np.full(data.n, state.mu_x)


def _norm_logpdf(v, mean, sd) -> float:
    z = (v - mean) / sd
    return float(np.sum(-0.5 * z * z) - np.size(z) * (math.log(sd) + 0.5 * _LOG2PI))


def log_joint_terms(spec: ModelSpec, state: LatentState, data: ModelData) -> dict:
    """Log joint density split into ``likelihood``, ``latent`` and ``prior``.

    ``likelihood`` is the ring-width term; ``latent`` holds the year
    effects, climate, tree growth parameters and spline coefficients given
    their hyperparameters; ``prior`` holds the hyperpriors.  Constraint
    violations give ``-inf`` rather than raising.
    """
    pri = spec.priors
    neg = {"likelihood": -math.inf, "latent": -math.inf, "prior": -math.inf}
    x = np.asarray(state.x, dtype=np.float64)
    obs = data.observed
    if not np.allclose(x[obs], data.x_obs[obs], rtol=0, atol=0):
        raise ValueError("state.x disagrees with the observed climate")
    scales = [state.sigma_y, state.sigma_eta, state.sigma_x]
    if not spec.is_rcs:
        scales += [state.sigma_beta0, state.sigma_beta1]
    if spec.is_spline and not spec.freeze_gamma:
        scales.append(state.sigma_gamma)
    if not all(s > 0 for s in scales):
        return neg
    if spec.beta2_positive and not state.beta2 > 0:
        return neg

    if spec.is_rcs:
        growth = state.zeta[data.bin]
    else:
        growth = state.beta0[data.tree] + state.beta1[data.tree] * data.age
    lik = _norm_logpdf(data.logy, growth + state.eta[data.t], state.sigma_y)

    mu_eta = response_mean(spec, x, state.beta2)
    if np.isneginf(mu_eta).any():
        return {"likelihood": lik, "latent": -math.inf, "prior": -math.inf}
    latent = _norm_logpdf(state.eta, mu_eta, state.sigma_eta)
    alpha = climate_mean(spec, state, data)
    latent += _norm_logpdf(x, alpha, state.sigma_x)
    if not spec.is_rcs:
        latent += _norm_logpdf(state.beta0, state.mu_beta0, state.sigma_beta0)
        latent += _norm_logpdf(state.beta1, state.mu_beta1, state.sigma_beta1)
    if spec.is_spline and not spec.freeze_gamma:
        latent += _norm_logpdf(state.gamma, state.mu_gamma, state.sigma_gamma)

    prior = pri.scale_logpdf("sigma_y", state.sigma_y) + pri.scale_logpdf("sigma_eta", state.sigma_eta)
    prior += pri.scale_logpdf("sigma_x", state.sigma_x)
    b2 = pri.beta2.logpdf(state.beta2)
    if spec.beta2_positive:
        b2 -= float(special.log_ndtr(pri.beta2.mean / pri.beta2.sd))
    prior += b2
    if spec.is_rcs:
        prior += pri.zeta.logpdf(state.zeta)
    else:
        prior += pri.mu_beta0.logpdf(state.mu_beta0) + pri.mu_beta1.logpdf(state.mu_beta1)
        prior += pri.scale_logpdf("sigma_beta0", state.sigma_beta0)
        prior += pri.scale_logpdf("sigma_beta1", state.sigma_beta1)
    if spec.is_spline:
        prior += pri.mu_gamma.logpdf(state.mu_gamma)
        if not spec.freeze_gamma:
            prior += pri.scale_logpdf("sigma_gamma", state.sigma_gamma)
    else:
        prior += pri.mu_x.logpdf(state.mu_x)
    return {"likelihood": lik, "latent": latent, "prior": prior}


def log_joint(spec: ModelSpec, state: LatentState, data: ModelData) -> float:
    """Log density of (ring widths, year effects, climate, parameters)."""
    terms = log_joint_terms(spec, state, data)
    return terms["likelihood"] + terms["latent"] + terms["prior"]


def prior_predictive_climate(priors: PriorSet, basis: SplineBasis, n_draws: int, rng) -> np.ndarray:
    """Draw ``x_t`` at a uniformly random year from the spline-model prior."""
    mu = priors.mu_gamma.mean + priors.mu_gamma.sd * rng.standard_normal(n_draws)
    if priors.scale_family == "half_t":
        s_gamma = priors.sigma_gamma.sample(rng, n_draws)
        s_x = priors.sigma_x.sample(rng, n_draws)
    else:
        a, b = priors.ig_shape, priors.ig_rate
        s_gamma = np.sqrt(b / rng.standard_gamma(a, n_draws))
        s_x = np.sqrt(b / rng.standard_gamma(a, n_draws))
    t = rng.integers(0, basis.n, n_draws)
    rows = basis.matrix[t]
    gamma = mu[:, None] + s_gamma[:, None] * rng.standard_normal((n_draws, basis.H))
    alpha = np.einsum("ij,ij->i", rows, gamma)
    return alpha + s_x * rng.standard_normal(n_draws)


def soft_prior_probabilities(priors: PriorSet, basis: SplineBasis | None = None,
                             n_draws: int = 100_000, seed: int = 0) -> dict:
    """Monte Carlo prior-predictive probabilities checked for the soft model."""
    basis = basis or build_basis(500, 25)
    x = prior_predictive_climate(priors, basis, n_draws, np.random.default_rng(seed))
    return {
        "p_8_12": float(np.mean((x > 8) & (x < 12))),
        "p_gt_6": float(np.mean(x > 6)),
        "p_gt_4": float(np.mean(x > 4)),
    }
