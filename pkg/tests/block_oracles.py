"""Grid oracles for single sampler blocks on a 2-tree, 3-year instance.

A block is iterated on its own, so its draws must follow the conditional
distribution of whatever it moves given everything else.  Each case reads a
scalar after every update and maps a value of that scalar back to a full
model-coordinate state; the oracle density of the scalar is
``exp(log_joint(state(v)))`` on a grid, times a Jacobian factor for the
moves that act by scaling.  Only ``models.log_joint`` supplies densities, so
none of the sampler's conditional algebra is reused.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from typing import Callable

import numpy as np
from scipy import integrate, stats

from dendrorecon import models
from dendrorecon.ingest import ClimateSeries, RingWidthDataset
from dendrorecon.mcmc.sampler import ChainState, SamplerConfig

N_GRID = 2_000
N_GRID_2D = 120


def tiny_inputs(x=(np.nan, 10.5, 9.0)):
    ds = RingWidthDataset(
        tree_ids=("A", "B"),
        first_year=np.array([2000, 2000]),
        last_year=np.array([2002, 2002]),
        widths=(np.array([1.3, 1.1, 1.0]), np.array([0.9, 1.0, 0.8])),
    )
    cl = ClimateSeries(np.arange(2000, 2003), np.array(x, dtype=float))
    return ds, cl


def base_state(spec: models.ModelSpec, data: models.ModelData) -> models.LatentState:
    H = data.basis.H if data.basis is not None else 0
    gamma = np.linspace(9.6, 10.1, H) if H else np.zeros(0)
    if spec.freeze_gamma:
        gamma = np.full(H, 9.8)
    x = data.x_obs.copy()
    x[~data.observed] = 9.8
    return models.LatentState(
        beta0=np.array([-2.6, -2.9]) if not spec.is_rcs else np.zeros(0),
        beta1=np.array([-0.05, -0.02]) if not spec.is_rcs else np.zeros(0),
        zeta=np.array([-2.7, -2.8, -2.9]) if spec.is_rcs else np.zeros(0),
        beta2=0.3,
        eta=np.array([2.9, 3.2, 2.8]),
        x=x,
        gamma=gamma,
        mu_x=9.9,
        mu_gamma=9.8,
        mu_beta0=-2.75,
        mu_beta1=-0.03,
        sigma_y=0.15,
        sigma_eta=0.2,
        sigma_x=0.6,
        sigma_beta0=0.3,
        sigma_beta1=0.05,
        sigma_gamma=0.4,
    )


@dataclass
class Frame:
    """The instance one case runs on, plus the base state in both coordinate systems."""

    spec: models.ModelSpec
    data: models.ModelData
    base: models.LatentState
    c0: float

    def logp(self, state) -> float:
        return models.log_joint(self.spec, state, self.data)

    def shifted(self, state, beta2):
        """Move beta2 with the centred coordinates (eta - beta2 c0 and so on) held fixed."""
        d = (beta2 - state.beta2) * self.c0
        return replace(state, beta2=beta2, eta=state.eta + d, beta0=state.beta0 - d,
                       mu_beta0=state.mu_beta0 - d, zeta=state.zeta - d)


def make_frame(model, x=(np.nan, 10.5, 9.0), **options) -> Frame:
    opts = dict(options)
    if model.startswith("M_TS_spl"):
        opts.setdefault("knot_spacing", 1)
    if model == "M_RCS_const":
        opts.setdefault("bin_width", 1)
    spec = models.make_spec(model, **opts)
    ds, cl = tiny_inputs(x)
    data = models.prepare_data(spec, ds, cl)
    g = data.x_obs[data.observed]
    if spec.is_piecewise:
        g = np.minimum(g, spec.x_max)
    return Frame(spec, data, base_state(spec, data), float(g.mean()))


@dataclass
class Case:
    """One block check.

    ``read`` maps the chain to the checked scalar (or pair for 2-D cases);
    ``state`` maps a value back to a model-coordinate state; ``log_jac``
    adds the Jacobian term for scaling moves.
    """

    name: str
    frame: Frame
    block: str
    read: Callable
    state: Callable
    log_jac: Callable = staticmethod(lambda v: 0.0)
    metropolis: bool = False
    two_d: bool = False
    setup: Callable | None = None
    lower: float = -math.inf
    draws: int = 100_000
    seed: int = 1
    result: dict = field(default_factory=dict)


def run_chain(case: Case) -> np.ndarray:
    fr = case.frame
    rng = np.random.Generator(np.random.Philox(case.seed))
    ch = ChainState(fr.spec, fr.data, rng, SamplerConfig(chains=1, iterations=2, burn_in=1))
    ch.load(fr.base)
    if case.setup is not None:
        case.setup(ch)
    thin = 2 if case.metropolis else 1
    if case.metropolis:
        for _ in range(3000):
            ch.update(case.block, adapt=True)
    out = []
    for i in range(case.draws * thin):
        ch.update(case.block)
        if i % thin == thin - 1:
            out.append(case.read(ch))
    return np.asarray(out, dtype=np.float64)


def _grid(s, lower, n):
    """Uniform points over the padded sample range plus sample quantiles, so heavy tails stay resolved."""
    lo, hi = np.min(s), np.max(s)
    pad = 0.5 * (hi - lo) + 1e-12
    lo, hi = max(lo - pad, lower), hi + pad
    return np.unique(np.concatenate([np.linspace(lo, hi, n), np.quantile(s, np.linspace(0, 1, n))]))


def _cdf(grid, logd):
    logd = np.where(np.isfinite(logd), logd, -np.inf)
    w = np.exp(logd - np.max(logd))
    c = np.concatenate([[0.0], np.cumsum(0.5 * (w[1:] + w[:-1]) * np.diff(grid))])
    return c / c[-1]


def ks_against(samples, grid, cdf) -> float:
    return float(stats.kstest(samples, lambda v: np.interp(v, grid, cdf)).statistic)


def evaluate(case: Case) -> dict:
    s = run_chain(case)
    if case.two_d:
        res = {}
        g0 = _grid(s[:, 0], case.lower, N_GRID_2D // 2)
        g1 = _grid(s[:, 1], case.lower, N_GRID_2D // 2)
        ld = np.array([[case.frame.logp(case.state((a, b))) + case.log_jac((a, b)) for b in g1]
                       for a in g0])
        ld = np.where(np.isfinite(ld), ld, -np.inf)
        w = np.exp(ld - ld.max())
        m0 = np.log(integrate.trapezoid(w, g1, axis=1) + 1e-300)
        m1 = np.log(integrate.trapezoid(w, g0, axis=0) + 1e-300)
        res["ks"] = max(ks_against(s[:, 0], g0, _cdf(g0, m0)), ks_against(s[:, 1], g1, _cdf(g1, m1)))
        case.result = res
        return res
    grid = _grid(s, case.lower, N_GRID // 2)
    ld = np.array([case.frame.logp(case.state(v)) + case.log_jac(v) for v in grid])
    case.result = {"ks": ks_against(s, grid, _cdf(grid, ld))}
    return case.result


def gaussian_ks(frame: Frame, block: str, coord: int, draws: int = 100_000, seed: int = 1) -> float:
    """KS of one spline coefficient against the exact Gaussian conditional of all of them.

    The conditional mean and precision come from finite differences of the
    log joint, which is exactly quadratic in the coefficients.
    """
    base = frame.base
    H = base.gamma.size

    def f(g):
        return frame.logp(replace(base, gamma=g))

    g0 = base.gamma.copy()
    eps = 1e-2
    grad = np.zeros(H)
    hess = np.zeros((H, H))
    for i in range(H):
        ei = np.zeros(H)
        ei[i] = eps
        grad[i] = (f(g0 + ei) - f(g0 - ei)) / (2 * eps)
        for j in range(H):
            ej = np.zeros(H)
            ej[j] = eps
            hess[i, j] = (f(g0 + ei + ej) - f(g0 + ei - ej) - f(g0 - ei + ej) + f(g0 - ei - ej)) / (4 * eps * eps)
    prec = -hess
    cov = np.linalg.inv(prec)
    mean = g0 + cov @ grad
    rng = np.random.Generator(np.random.Philox(seed))
    ch = ChainState(frame.spec, frame.data, rng)
    ch.load(base)
    out = np.empty(draws)
    for i in range(draws):
        ch.update(block)
        out[i] = ch.gamma[coord]
    return float(stats.kstest(out, stats.norm(mean[coord], math.sqrt(cov[coord, coord])).cdf).statistic)


# -- the case list ---------------------------------------------------------------

def _model_eta(ch, t):
    return ch.eta[t] + ch.b2 * ch.c0


def build_cases() -> list[Case]:
    cases = []
    ts = make_frame("M_TS_const")
    rcs = make_frame("M_RCS_const")
    spl = make_frame("M_TS_spl")
    frozen = make_frame("M_TS_spl", freeze_gamma=True)
    hard = make_frame("M_TS_spl_hard", x=(np.nan, 10.5, 9.6), x_min=9.0, x_max=10.0)
    ts_ig = make_frame("M_TS_const", priors={"scale_family": "inv_gamma", "ig_shape": 2.0, "ig_rate": 0.1})
    spl_ig = make_frame("M_TS_spl", priors={"scale_family": "inv_gamma", "ig_shape": 2.0, "ig_rate": 0.1})
    m = 1  # missing years in the instance

    # tree lines: bivariate block, both marginals against a 2-D grid
    b = ts.base
    cases.append(Case("growth (tree 1 intercept, slope)", ts, "growth",
                      lambda ch: (ch.b0[0] - ch.b2 * ch.c0, ch.b1[0]),
                      lambda v: replace(b, beta0=np.array([v[0], b.beta0[1]]),
                                        beta1=np.array([v[1], b.beta1[1]])), two_d=True))
    r = rcs.base
    cases.append(Case("growth (RCS bin 1)", rcs, "growth", lambda ch: ch.zeta[0] - ch.b2 * ch.c0,
                      lambda v: replace(r, zeta=np.array([v, *r.zeta[1:]]))))
    cases.append(Case("eta (year 2)", ts, "eta", lambda ch: _model_eta(ch, 1),
                      lambda v: replace(b, eta=np.array([b.eta[0], v, b.eta[2]]))))
    h = hard.base
    cases.append(Case("eta (piecewise, missing year)", hard, "eta", lambda ch: _model_eta(ch, 0),
                      lambda v: replace(h, eta=np.array([v, *h.eta[1:]]))))
    cases.append(Case("beta2", ts, "beta2", lambda ch: ch.b2, lambda v: ts.shifted(b, v)))
    cases.append(Case("beta2 (positive, piecewise)", hard, "beta2", lambda ch: ch.b2,
                      lambda v: hard.shifted(h, v), lower=0.0))

    def nc_state(fr, st):
        g = st.x if not fr.spec.is_piecewise else np.minimum(st.x, fr.spec.x_max)
        dev = st.eta - st.beta2 * g

        def at(v):
            s2 = fr.shifted(st, v)
            return replace(s2, eta=dev + v * g)
        return at

    cases.append(Case("beta2 (standardized)", ts, "beta2_nc", lambda ch: ch.b2, nc_state(ts, b)))
    cases.append(Case("x_mis (linear)", ts, "x_mis", lambda ch: ch.x[0],
                      lambda v: replace(b, x=np.array([v, *b.x[1:]]))))
    cases.append(Case("x_mis (piecewise)", hard, "x_mis", lambda ch: ch.x[0],
                      lambda v: replace(h, x=np.array([v, *h.x[1:]])), metropolis=True,
                      lower=hard.spec.x_min - 0.5))
    s = spl.base
    cases.append(Case("spline shift", spl, "spline_shift", lambda ch: ch.mu_gamma - s.mu_gamma,
                      lambda v: replace(s, gamma=s.gamma + v, mu_gamma=s.mu_gamma + v)))
    cases.append(Case("mu_x", ts, "mu_climate", lambda ch: ch.mu_x, lambda v: replace(b, mu_x=v)))
    cases.append(Case("mu_gamma", spl, "mu_climate", lambda ch: ch.mu_gamma,
                      lambda v: replace(s, mu_gamma=v)))
    fz = frozen.base
    cases.append(Case("mu_gamma (frozen spline)", frozen, "mu_climate", lambda ch: ch.mu_gamma,
                      lambda v: replace(fz, mu_gamma=v, gamma=np.full(fz.gamma.size, v))))
    cases.append(Case("mu_beta0", ts, "mu_beta", lambda ch: ch.mb0 - ch.b2 * ch.c0,
                      lambda v: replace(b, mu_beta0=v)))
    cases.append(Case("mu_beta1", ts, "mu_beta", lambda ch: ch.mb1, lambda v: replace(b, mu_beta1=v)))

    # translation moves: position along the line relative to the base state
    cases.append(Case("level", ts, "level", lambda ch: _model_eta(ch, 0) - b.eta[0],
                      lambda v: replace(b, eta=b.eta + v, beta0=b.beta0 - v, mu_beta0=b.mu_beta0 - v)))
    cases.append(Case("level (RCS)", rcs, "level", lambda ch: _model_eta(ch, 0) - r.eta[0],
                      lambda v: replace(r, eta=r.eta + v, zeta=r.zeta - v)))

    def trend_case(fr, st, name):
        ch0 = ChainState(fr.spec, fr.data, np.random.default_rng(0))
        u = ch0.u.copy()
        if fr.spec.is_rcs:
            w = ch0.bin_ramp.copy()
            return Case(name, fr, "trend", lambda ch: (_model_eta(ch, 0) - st.eta[0]) / u[0],
                        lambda v: replace(st, eta=st.eta + v * u, zeta=st.zeta - v * w))
        vv = ch0.v.copy()
        return Case(name, fr, "trend", lambda ch: (_model_eta(ch, 0) - st.eta[0]) / u[0],
                    lambda v: replace(st, eta=st.eta + v * u, beta1=st.beta1 - v, mu_beta1=st.mu_beta1 - v,
                                      beta0=st.beta0 + v * vv))

    cases.append(trend_case(ts, b, "trend"))
    cases.append(trend_case(rcs, r, "trend (RCS)"))

    def drift_case(fr, st, name, metropolis):
        ch0 = ChainState(fr.spec, fr.data, np.random.default_rng(0))
        u, vv = ch0.u.copy(), ch0.v.copy()
        mis = ~fr.data.observed

        def at(p):
            dl, dt = p
            move = dl + dt * u
            x = st.x.copy()
            x[mis] += move[mis] / st.beta2
            return replace(st, eta=st.eta + move, x=x, beta0=st.beta0 - dl + dt * vv,
                           mu_beta0=st.mu_beta0 - dl, beta1=st.beta1 - dt, mu_beta1=st.mu_beta1 - dt)

        def read(ch):
            off = np.array([_model_eta(ch, 0), _model_eta(ch, 1)]) - st.eta[:2]
            dt = (off[1] - off[0]) / (u[1] - u[0])
            return (off[1] - dt * u[1], dt)
        return Case(name, fr, "drift", read, at, two_d=True, metropolis=metropolis)

    cases.append(drift_case(ts, b, "drift (level, trend)", False))
    cases.append(drift_case(hard, h, "drift (piecewise)", True))

    def bump_case(fr, st, name, metropolis):
        # keep only the first direction so the move is one-dimensional
        col = 0

        def setup(ch):
            ch.bump_dirs = np.ascontiguousarray(ch.bump_dirs[:, :1])
            ch.bump_c = np.ascontiguousarray(ch.bump_c[:, :1])
            ch.bump_p = np.ascontiguousarray(ch.bump_p[:, :1])
            ch.bump_q = np.ascontiguousarray(ch.bump_q[:, :1])
            ch.bump_css = ch.bump_css[:1].copy()

        ch0 = ChainState(fr.spec, fr.data, np.random.default_rng(0))
        f = ch0.bump_dirs[:, col].copy()
        p, q = ch0.bump_p[:, col].copy(), ch0.bump_q[:, col].copy()
        mis = ~fr.data.observed

        def at(d):
            x = st.x.copy()
            x[mis] += d * f[mis] / st.beta2
            g = st.gamma.copy()
            g[col] += d / st.beta2
            return replace(st, eta=st.eta + d * f, x=x, gamma=g, beta0=st.beta0 - d * p, beta1=st.beta1 - d * q)

        def read(ch):
            return (_model_eta(ch, 0) - st.eta[0]) / f[0]
        return Case(name, fr, "bumps", read, at, setup=setup, metropolis=metropolis)

    cases.append(bump_case(spl, s, "bumps (one direction)", False))
    cases.append(bump_case(hard, h, "bumps (piecewise)", True))

    def scale_case(fr, st, name):
        mis = ~fr.data.observed

        def at(u):
            lam = math.exp(u)
            x = st.x.copy()
            x[mis] = fr.c0 + (x[mis] - fr.c0) / lam
            return replace(fr.shifted(st, st.beta2 * lam), x=x)
        return Case(name, fr, "scale", lambda ch: math.log(ch.b2 / st.beta2), at,
                    log_jac=lambda u: (1 - m) * u, metropolis=True)

    cases.append(scale_case(ts, b, "scale"))

    for key, fr, st in [("y", ts, b), ("eta", ts, b), ("x", ts, b), ("beta0", ts, b), ("beta1", ts, b),
                        ("gamma", spl, s), ("y", ts_ig, ts_ig.base), ("x", spl_ig, spl_ig.base)]:
        tag = " (inverse gamma)" if fr.spec.priors.scale_family == "inv_gamma" else ""
        cases.append(Case(f"sigma_{key}{tag}", fr, f"sigma_{key}",
                          (lambda k: lambda ch: math.sqrt(ch.s2[k]))(key),
                          (lambda k, st_: lambda v: replace(st_, **{f"sigma_{k}": v}))(key, st), lower=1e-9))

    # standardized scale moves; the scale prior is inverse gamma so no auxiliary variable is involved
    bi = ts_ig.base
    mean_eta = bi.beta2 * bi.x
    e = (bi.eta - mean_eta) / bi.sigma_eta
    n = bi.eta.size
    cases.append(Case("sigma_eta (standardized)", ts_ig, "sigma_eta_nc", lambda ch: math.log(math.sqrt(ch.s2["eta"])),
                      lambda u: replace(bi, sigma_eta=math.exp(u), eta=mean_eta + math.exp(u) * e),
                      log_jac=lambda u: (n + 1) * u, metropolis=True))
    si = spl_ig.base
    eg = (si.gamma - si.mu_gamma) / si.sigma_gamma
    H = si.gamma.size
    cases.append(Case("sigma_gamma (standardized)", spl_ig, "sigma_gamma_nc",
                      lambda ch: math.log(math.sqrt(ch.s2["gamma"])),
                      lambda u: replace(si, sigma_gamma=math.exp(u), gamma=si.mu_gamma + math.exp(u) * eg),
                      log_jac=lambda u: (H + 1) * u, metropolis=True))
    for i, c in enumerate(cases):
        c.seed = 100 + i
    return cases

