"""Block Gibbs sampler with Metropolis-within-Gibbs for the joint models.

The chain runs in shifted coordinates: with ``c0`` the mean of ``g(x)``
over the observed climate,

    eta~    = eta - beta2 * c0
    beta0~  = beta0 + beta2 * c0      mu_beta0~ = mu_beta0 + beta2 * c0
    zeta~   = zeta + beta2 * c0

which leaves the likelihood unchanged (unit Jacobian) and removes the
strong posterior ridge between ``beta2`` and the overall growth level.
Draws are stored in model coordinates.

Besides the plain conditional draws, the sweep adds moves along
directions in which the posterior is strongly correlated:

- ``level`` and ``trend``: shift the year effects by a constant or a linear
  time trend and take it back out of the growth terms (exact Gaussian).
- ``drift``: the same shifts applied jointly to year effects and missing
  climate, so the reconstruction level and trend can move.
- ``bumps``: one local smooth direction at a time (the spline basis
  columns), moving year effects, missing climate, spline coefficients and
  tree lines together.
- ``spline_shift``: every spline coefficient and their mean by a constant.
- ``scale``: beta2 up and missing-climate deviations from ``c0`` down by the
  same factor (Metropolis).
- ``beta2_nc``, ``sigma_eta_nc``, ``sigma_gamma_nc``: updates with the
  standardized deviations held fixed, which avoid the funnel between a scale
  and the effects it governs.

Exact moves draw the shift from its Gaussian conditional; under the
piecewise response they are corrected by a Metropolis step.

Half-t scale priors are handled by parameter expansion,
``s^2 | a ~ IG(nu/2, nu/a)``, ``a ~ IG(1/2, 1/A^2)``, so every block is
conjugate except climate under the piecewise response, which uses
per-year random-walk Metropolis with step sizes tuned toward an acceptance
rate of 0.44 during burn-in only.
"""
from __future__ import annotations

import math
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass

import numpy as np
from scipy import linalg, special

from .. import _kernels
from ..models import LatentState, ModelData, ModelSpec
from ..spline import build_basis
from .draws import PosteriorDraws

__all__ = [
    "SamplerConfig",
    "SamplerError",
    "BLOCKS",
    "ChainState",
    "gibbs_update_block",
    "initial_state",
    "run",
]

BLOCKS = (
    "growth", "level", "trend", "drift", "bumps", "eta", "beta2", "scale", "x_mis", "gamma", "spline_shift",
    "mu_climate", "mu_beta",
    "sigma_y", "sigma_eta", "beta2_nc", "sigma_eta_nc", "sigma_x", "sigma_beta0", "sigma_beta1", "sigma_gamma",
    "sigma_gamma_nc",
)
_BUMP_SPACING = 25
_VAR_KEYS = ("y", "eta", "x", "beta0", "beta1", "gamma")


class SamplerError(RuntimeError):
    """Non-finite state; ``state`` holds a scalar dump of the chain."""

    def __init__(self, message, iteration=None, chain=None, state=None):
        super().__init__(message)
        self.iteration = iteration
        self.chain = chain
        self.state = state or {}


@dataclass(frozen=True)
class SamplerConfig:
    chains: int = 4
    iterations: int = 20000
    burn_in: int = 10000
    thin: int = 5
    seed: int = 0
    adapt_window: int = 50
    target_accept: float = 0.44
    init_jitter: float = 1.0
    rhat_threshold: float = 1.05
    threads: int | None = None

    def __post_init__(self):
        if self.chains < 1:
            raise ValueError("need at least one chain")
        if not 0 <= self.burn_in < self.iterations:
            raise ValueError("burn_in must be in [0, iterations)")
        if self.thin < 1:
            raise ValueError("thin must be >= 1")
        if self.adapt_window < 1:
            raise ValueError("adapt_window must be >= 1")
        if not 0 <= self.seed < 2 ** 64:
            raise ValueError("seed must be a 64-bit unsigned integer")

    @property
    def saved(self) -> int:
        return (self.iterations - self.burn_in) // self.thin


def _threads(config: SamplerConfig) -> int:
    if config.threads is not None:
        return max(1, int(config.threads))
    env = os.environ.get("DENDRORECON_THREADS")
    if env:
        return max(1, int(env))
    return 1


def _normal(prec, lin, z):
    return lin / prec + z / np.sqrt(prec)


class ChainState:
    """One chain: data-derived constants plus the state in shifted coordinates."""

    def __init__(self, spec: ModelSpec, data: ModelData, rng: np.random.Generator,
                 config: SamplerConfig | None = None):
        self.spec = spec
        self.data = data
        self.rng = rng
        self.config = config or SamplerConfig(chains=1, iterations=2, burn_in=1)
        n, k, J = data.n, data.k, data.n_bins
        self.n, self.k, self.J = n, k, J
        self.rcs = spec.is_rcs
        self.spline = spec.is_spline
        self.frozen = spec.freeze_gamma
        self.piecewise = spec.is_piecewise
        self.logy = np.ascontiguousarray(data.logy)
        self.t = np.ascontiguousarray(data.t)
        self.tree = np.ascontiguousarray(data.tree)
        self.age = np.ascontiguousarray(data.age)
        self.g = np.ascontiguousarray(data.bin if self.rcs else data.tree)
        self.n_groups = J if self.rcs else k
        self.depth = np.bincount(data.t, minlength=n).astype(np.float64)
        self.count_g = np.bincount(self.g, minlength=self.n_groups).astype(np.float64)
        self.sum_a = np.bincount(data.tree, weights=data.age, minlength=k)
        self.sum_aa = np.bincount(data.tree, weights=data.age ** 2, minlength=k)
        self.observed = data.observed.copy()
        self.mis = np.flatnonzero(~data.observed)
        self.c0 = float(np.mean(self._g_of(data.x_obs[data.observed])))
        tbar = (n - 1) / 2.0
        self.u = np.arange(n, dtype=np.float64) - tbar
        self.v = tbar - data.first_idx.astype(np.float64) + 1.0
        if self.spline:
            self.B = data.basis.matrix
            self.H = self.B.shape[1]
            self.BtB = self.B.T @ self.B
            self.row_sum = self.B.sum(axis=1)
        else:
            self.B = None
            self.H = 0
            self.row_sum = np.ones(n)
        self.zeros_g = np.zeros(self.n_groups)
        self.ones = np.ones(n)
        self._init_bumps()
        if self.rcs:
            # ramp over bins at their mean age; the residual trend it leaves is ramp_dev
            mean_age = np.bincount(self.g, weights=self.age, minlength=J) / self.count_g
            self.bin_ramp = mean_age - np.average(mean_age, weights=self.count_g)
            self.ramp_dev = self.u[self.t] - self.bin_ramp[self.g]
            self.ramp_ss = float(self.ramp_dev @ self.ramp_dev)
        self.log_step = np.zeros(self.mis.size)
        self.accepts = np.zeros(self.mis.size)
        self.proposals = 0
        self.batches = 0
        self.accept_total = np.zeros(self.mis.size)
        self.proposal_total = 0
        self.step_ready = False
        # random-walk state for the scalar Metropolis moves: log step, accepts, proposals, batches
        self.rw = {"eta_nc": [math.log(0.5), 0, 0, 0], "gamma_nc": [math.log(0.5), 0, 0, 0],
                   "scale": [math.log(0.05), 0, 0, 0]}

    # -- coordinates -------------------------------------------------------

    def _g_of(self, x):
        if self.spec.is_piecewise:
            return np.minimum(x, self.spec.x_max)
        return x

    def h(self):
        """Centred response covariate ``g(x_t) - c0``."""
        return self._g_of(self.x) - self.c0

    def alpha(self):
        if self.spline:
            return self.B @ self.gamma
        return np.full(self.n, self.mu_x)

    def growth_coefs(self):
        if self.rcs:
            return self.zeta, self.zeros_g
        return self.b0, self.b1

    def load(self, s: LatentState):
        shift = s.beta2 * self.c0
        self.b2 = float(s.beta2)
        self.eta = np.array(s.eta, dtype=np.float64) - shift
        self.x = np.array(s.x, dtype=np.float64)
        if self.rcs:
            self.zeta = np.array(s.zeta, dtype=np.float64) + shift
            self.b0 = np.zeros(0)
            self.b1 = np.zeros(0)
        else:
            self.b0 = np.array(s.beta0, dtype=np.float64) + shift
            self.b1 = np.array(s.beta1, dtype=np.float64)
            self.zeta = np.zeros(0)
        self.mb0 = float(s.mu_beta0) + shift
        self.mb1 = float(s.mu_beta1)
        self.gamma = np.array(s.gamma, dtype=np.float64)
        self.mu_x = float(s.mu_x)
        self.mu_gamma = float(s.mu_gamma)
        self.s2 = {
            "y": s.sigma_y ** 2, "eta": s.sigma_eta ** 2, "x": s.sigma_x ** 2,
            "beta0": s.sigma_beta0 ** 2, "beta1": s.sigma_beta1 ** 2, "gamma": s.sigma_gamma ** 2,
        }
        self.aux = {}
        for key in _VAR_KEYS:
            if key in s.aux:
                self.aux[key] = float(s.aux[key])
            else:
                ht = getattr(self.spec.priors, "sigma_" + key)
                nu, A = ht.df, ht.scale
                self.aux[key] = (nu / self.s2[key] + 1.0 / A ** 2) / (0.5 * (nu + 1.0))
        if self.spline and self.frozen:
            self.gamma = np.full(self.H, self.mu_gamma)

    def export(self) -> LatentState:
        shift = self.b2 * self.c0
        return LatentState(
            beta0=self.b0 - shift if not self.rcs else np.zeros(0),
            beta1=self.b1.copy(),
            zeta=self.zeta - shift if self.rcs else np.zeros(0),
            beta2=self.b2,
            eta=self.eta + shift,
            x=self.x.copy(),
            gamma=self.gamma.copy(),
            mu_x=self.mu_x,
            mu_gamma=self.mu_gamma,
            mu_beta0=self.mb0 - shift,
            mu_beta1=self.mb1,
            sigma_y=math.sqrt(self.s2["y"]),
            sigma_eta=math.sqrt(self.s2["eta"]),
            sigma_x=math.sqrt(self.s2["x"]),
            sigma_beta0=math.sqrt(self.s2["beta0"]),
            sigma_beta1=math.sqrt(self.s2["beta1"]),
            sigma_gamma=math.sqrt(self.s2["gamma"]),
            aux=dict(self.aux),
        )

    # -- conjugate blocks ----------------------------------------------------

    def update_growth(self):
        pri = self.spec.priors
        sy2 = self.s2["y"]
        s0, s1 = _kernels.group_sums(self.logy, self.g, self.t, self.age, self.eta, self.n_groups)
        if self.rcs:
            z = self.rng.standard_normal(self.J)
            m_z = pri.zeta.mean + self.b2 * self.c0
            prec = self.count_g / sy2 + 1.0 / pri.zeta.sd ** 2
            lin = s0 / sy2 + m_z / pri.zeta.sd ** 2
            self.zeta = _normal(prec, lin, z)
            return
        z = self.rng.standard_normal((2, self.k))
        d0, d1 = 1.0 / self.s2["beta0"], 1.0 / self.s2["beta1"]
        p00 = self.count_g / sy2 + d0
        p01 = self.sum_a / sy2
        p11 = self.sum_aa / sy2 + d1
        l0 = s0 / sy2 + d0 * self.mb0
        l1 = s1 / sy2 + d1 * self.mb1
        det = p00 * p11 - p01 * p01
        m0 = (p11 * l0 - p01 * l1) / det
        m1 = (p00 * l1 - p01 * l0) / det
        # P = L L^T; draw m + L^{-T} z
        c00 = np.sqrt(p00)
        c10 = p01 / c00
        c11 = np.sqrt(p11 - c10 * c10)
        e1 = z[1] / c11
        e0 = (z[0] - c10 * e1) / c00
        self.b0 = m0 + e0
        self.b1 = m1 + e1

    def update_level(self):
        """Shift eta~ by +c and every growth level by -c."""
        pri = self.spec.priors
        se2 = self.s2["eta"]
        mu_eta = self.b2 * self.h()
        prec = self.n / se2
        lin = np.sum(mu_eta - self.eta) / se2
        if self.rcs:
            sz2 = pri.zeta.sd ** 2
            prec += self.J / sz2
            lin += np.sum(self.zeta - self.b2 * self.c0 - pri.zeta.mean) / sz2
        else:
            s02 = pri.mu_beta0.sd ** 2
            prec += 1.0 / s02
            lin += (self.mb0 - self.b2 * self.c0 - pri.mu_beta0.mean) / s02
        c = _normal(prec, lin, self.rng.standard_normal())
        self.eta = self.eta + c
        if self.rcs:
            self.zeta = self.zeta - c
        else:
            self.b0 = self.b0 - c
            self.mb0 -= c

    def update_trend(self):
        """Add ``d * (t - tbar)`` to eta~ and take the same trend out of growth.

        Linear-age growth absorbs it exactly through the tree slopes and
        intercepts.  Binned growth can only absorb it approximately, through
        a linear ramp over the bins, so the ring-width term enters the
        conditional for ``d``.
        """
        pri = self.spec.priors
        se2 = self.s2["eta"]
        mu_eta = self.b2 * self.h()
        prec = self.u @ self.u / se2
        lin = self.u @ (mu_eta - self.eta) / se2
        if self.rcs:
            w = self.bin_ramp
            sz2 = pri.zeta.sd ** 2
            r = self.logy - self.zeta[self.g] - self.eta[self.t]
            prec += self.ramp_ss / self.s2["y"] + w @ w / sz2
            lin += self.ramp_dev @ r / self.s2["y"] + w @ (self.zeta - self.b2 * self.c0 - pri.zeta.mean) / sz2
            d = _normal(prec, lin, self.rng.standard_normal())
            self.eta = self.eta + d * self.u
            self.zeta = self.zeta - d * w
            return
        sb02 = self.s2["beta0"]
        s12 = pri.mu_beta1.sd ** 2
        prec += 1.0 / s12 + self.v @ self.v / sb02
        lin += (self.mb1 - pri.mu_beta1.mean) / s12 + self.v @ (self.mb0 - self.b0) / sb02
        d = _normal(prec, lin, self.rng.standard_normal())
        self.eta = self.eta + d * self.u
        self.b1 = self.b1 - d
        self.mb1 -= d
        self.b0 = self.b0 + d * self.v

    def _piecewise_excess(self, x_mis, eta_mis):
        """Piecewise minus linear log density of missing-year effects, -inf below x_min."""
        if x_mis.size and x_mis.min() < self.spec.x_min:
            return -math.inf
        lin = eta_mis - self.b2 * (x_mis - self.c0)
        pw = eta_mis - self.b2 * (np.minimum(x_mis, self.spec.x_max) - self.c0)
        return -0.5 * (pw @ pw - lin @ lin) / self.s2["eta"]

    def _drift(self, direction, kind):
        """Shift eta~ by ``d * direction`` and missing climate by ``d * direction / beta2``.

        Year effects in missing years keep their fit to climate, so the shift
        is only checked against the observed climate, the climate mean, and
        the growth terms that absorb it (``kind`` is ``level`` or ``trend``).
        """
        pri = self.spec.priors
        se2, sx2 = self.s2["eta"], self.s2["x"]
        obs, mis = self.observed, self.mis
        r = self.eta - self.b2 * self.h()
        uo = direction[obs]
        prec = uo @ uo / se2
        lin = -(uo @ r[obs]) / se2
        um = direction[mis] / self.b2
        ra = self.x[mis] - self.alpha()[mis]
        prec += um @ um / sx2
        lin -= um @ ra / sx2
        if kind == "level":
            if self.rcs:
                sz2 = pri.zeta.sd ** 2
                prec += self.J / sz2
                lin += np.sum(self.zeta - self.b2 * self.c0 - pri.zeta.mean) / sz2
            else:
                s02 = pri.mu_beta0.sd ** 2
                prec += 1.0 / s02
                lin += (self.mb0 - self.b2 * self.c0 - pri.mu_beta0.mean) / s02
        elif self.rcs:
            w = self.bin_ramp
            sz2 = pri.zeta.sd ** 2
            ry = self.logy - self.zeta[self.g] - self.eta[self.t]
            prec += self.ramp_ss / self.s2["y"] + w @ w / sz2
            lin += self.ramp_dev @ ry / self.s2["y"] + w @ (self.zeta - self.b2 * self.c0 - pri.zeta.mean) / sz2
        else:
            s12, sb02 = pri.mu_beta1.sd ** 2, self.s2["beta0"]
            prec += 1.0 / s12 + self.v @ self.v / sb02
            lin += (self.mb1 - pri.mu_beta1.mean) / s12 + self.v @ (self.mb0 - self.b0) / sb02
        d = _normal(prec, lin, self.rng.standard_normal())
        x_new = self.x[mis] + d * um
        if self.piecewise:
            logu = math.log(self.rng.random())
            eta_new = self.eta[mis] + d * direction[mis]
            ratio = (self._piecewise_excess(x_new, eta_new)
                     - self._piecewise_excess(self.x[mis], self.eta[mis]))
            if not logu < ratio:
                return
        self.eta = self.eta + d * direction
        self.x[mis] = x_new
        if kind == "level":
            if self.rcs:
                self.zeta = self.zeta - d
            else:
                self.b0 = self.b0 - d
                self.mb0 -= d
        elif self.rcs:
            self.zeta = self.zeta - d * self.bin_ramp
        else:
            self.b1 = self.b1 - d
            self.mb1 -= d
            self.b0 = self.b0 + d * self.v

    def update_drift(self):
        if self.mis.size == 0 or self.b2 == 0:
            return
        self._drift(self.ones, "level")
        self._drift(self.u, "trend")

    def _init_bumps(self):
        """Local smooth directions for the year effects and the tree lines that absorb them."""
        self.bump_dirs = None
        if self.rcs:
            return
        if self.spline:
            dirs = self.B
        elif self.n >= 2 * _BUMP_SPACING:
            dirs = build_basis(self.n, _BUMP_SPACING).matrix
        else:
            return
        k = self.k
        tree, age = self.data.tree, self.age
        cnt = self.count_g
        ma = self.sum_a / cnt
        da = age - ma[tree]
        saa = np.bincount(tree, weights=da * da, minlength=k)
        p = np.empty((k, dirs.shape[1]))
        q = np.empty((k, dirs.shape[1]))
        c = np.empty((self.logy.size, dirs.shape[1]))
        for h in range(dirs.shape[1]):
            f = dirs[self.t, h]
            mf = np.bincount(tree, weights=f, minlength=k) / cnt
            sf = np.bincount(tree, weights=da * (f - mf[tree]), minlength=k)
            q[:, h] = np.where(saa > 0, sf / np.where(saa > 0, saa, 1.0), 0.0)
            p[:, h] = mf - q[:, h] * ma
            c[:, h] = f - p[tree, h] - q[tree, h] * age
        self.bump_p = p
        self.bump_q = q
        self.bump_dirs = np.ascontiguousarray(dirs)
        self.bump_c = np.ascontiguousarray(c)
        self.bump_css = np.einsum("ij,ij->j", c, c)

    def update_bumps(self):
        """Move year effects along each smooth direction together with missing climate.

        For direction ``f``: eta~ += d f, missing climate += d f / beta2, the
        matching spline coefficient += d / beta2 when the spline is free, and
        every tree line gives up its least-squares fit of ``f``.
        """
        if self.mis.size == 0 or self.b2 == 0:
            return
        H = self.bump_dirs.shape[1]
        z = self.rng.standard_normal(H)
        logu = np.log(self.rng.random(H)) if self.piecewise else np.zeros(H)
        free = self.spline and not self.frozen
        s2 = self.s2
        par = np.array([self.b2, self.c0, s2["y"], s2["eta"], s2["x"], s2["beta0"], s2["beta1"],
                        s2.get("gamma", 1.0), self.mb0, self.mb1, self.mu_gamma if free else 0.0, self.spec.x_min,
                        self.spec.x_max])
        # the kernel works in place on these
        self.b0 = self.b0.copy()
        self.b1 = self.b1.copy()
        self.eta = self.eta.copy()
        self.x = self.x.copy()
        gamma = np.zeros(0)
        if free:
            gamma = self.gamma = self.gamma.copy()
        _kernels.bump_sweep(self.bump_dirs, self.bump_c, self.bump_p, self.bump_q, self.bump_css,
                            self.observed, self.mis, self.tree, self.t, self.age, self.logy,
                            self.alpha(), self.eta, self.x, self.b0, self.b1, gamma, par,
                            free, self.piecewise, z, logu)

    def update_eta(self):
        c0, c1 = self.growth_coefs()
        sy2, se2 = self.s2["y"], self.s2["eta"]
        r = _kernels.year_sums(self.logy, self.g, self.t, self.age, c0, c1, self.n)
        prec = self.depth / sy2 + 1.0 / se2
        lin = r / sy2 + self.b2 * self.h() / se2
        self.eta = _normal(prec, lin, self.rng.standard_normal(self.n))

    def update_beta2(self, standardized: bool = False):
        """Draw beta2 given everything else.

        With ``standardized`` the year-effect deviations ``(eta~ - beta2 h) /
        sigma_eta`` are held fixed instead of eta~, so the ring widths inform
        beta2 directly and the year effects move with it.
        """
        pri = self.spec.priors
        h = self.h()
        c0 = self.c0
        if standardized:
            sy2 = self.s2["y"]
            dev = self.eta - self.b2 * h
            cg0, cg1 = self.growth_coefs()
            r = _kernels.year_sums(self.logy, self.g, self.t, self.age, cg0, cg1, self.n) - self.depth * dev
            prec = (self.depth * h) @ h / sy2 + 1.0 / pri.beta2.sd ** 2
            lin = h @ r / sy2 + pri.beta2.mean / pri.beta2.sd ** 2
        else:
            se2 = self.s2["eta"]
            prec = h @ h / se2 + 1.0 / pri.beta2.sd ** 2
            lin = h @ self.eta / se2 + pri.beta2.mean / pri.beta2.sd ** 2
        if self.rcs:
            sz2 = pri.zeta.sd ** 2
            prec += self.J * c0 * c0 / sz2
            lin += c0 * np.sum(self.zeta - pri.zeta.mean) / sz2
        else:
            s02 = pri.mu_beta0.sd ** 2
            prec += c0 * c0 / s02
            lin += c0 * (self.mb0 - pri.mu_beta0.mean) / s02
        mean, sd = lin / prec, 1.0 / math.sqrt(prec)
        u = self.rng.random()
        # X >= a has survival S(x) = ndtr(-x) / ndtr(-a); invert with one uniform
        upper = special.ndtr(mean / sd) if self.spec.beta2_positive else 1.0
        q = min(max((1.0 - u) * upper, 1e-300), 1.0 - 1e-16)
        self.b2 = mean - sd * special.ndtri(q)
        if self.spec.beta2_positive and not self.b2 > 0:
            self.b2 = max(self.b2, np.nextafter(0.0, 1.0))
        if standardized:
            self.eta = dev + self.b2 * h

    def _x_logp(self, x, alpha, eta):
        sx2, se2 = self.s2["x"], self.s2["eta"]
        g = np.minimum(x, self.spec.x_max) - self.c0
        lp = -0.5 * (x - alpha) ** 2 / sx2 - 0.5 * (eta - self.b2 * g) ** 2 / se2
        return np.where(x < self.spec.x_min, -np.inf, lp)

    def update_x(self, adapt: bool = False):
        if self.mis.size == 0:
            return
        idx = self.mis
        alpha = self.alpha()[idx]
        eta = self.eta[idx]
        sx2, se2 = self.s2["x"], self.s2["eta"]
        if not self.piecewise:
            prec = 1.0 / sx2 + self.b2 ** 2 / se2
            lin = alpha / sx2 + self.b2 * (eta + self.b2 * self.c0) / se2
            self.x[idx] = _normal(prec, lin, self.rng.standard_normal(idx.size))
            return
        z = self.rng.standard_normal(idx.size)
        logu = np.log(self.rng.random(idx.size))
        cur = self.x[idx]
        if not self.step_ready:
            # start from the scale of the linear-response conditional
            base = 1.0 / math.sqrt(1.0 / sx2 + self.b2 ** 2 / se2)
            self.log_step[:] = math.log(2.4 * base)
            self.step_ready = True
        prop = cur + np.exp(self.log_step) * z
        with np.errstate(invalid="ignore"):
            ratio = self._x_logp(prop, alpha, eta) - self._x_logp(cur, alpha, eta)
        acc = logu < ratio
        self.x[idx] = np.where(acc, prop, cur)
        self.accept_total += acc
        self.proposal_total += 1
        if adapt:
            self.accepts += acc
            self.proposals += 1
            if self.proposals == self.config.adapt_window:
                self.batches += 1
                rate = self.accepts / self.proposals
                delta = min(0.1, 1.0 / math.sqrt(self.batches))
                self.log_step += np.where(rate > self.config.target_accept, delta, -delta)
                self.accepts[:] = 0.0
                self.proposals = 0

    def update_gamma(self):
        sx2, sg2 = self.s2["x"], self.s2["gamma"]
        prec = self.BtB / sx2 + np.eye(self.H) / sg2
        lin = self.B.T @ self.x / sx2 + self.mu_gamma / sg2
        chol = linalg.cholesky(prec, lower=True)
        mean = linalg.cho_solve((chol, True), lin)
        z = self.rng.standard_normal(self.H)
        self.gamma = mean + linalg.solve_triangular(chol.T, z, lower=False)

    def update_spline_shift(self):
        """Move ``mu_gamma`` and every coefficient by a common shift.

        With a small ``sigma_gamma`` the coefficients and their mean are
        tightly coupled; the shift slides both along the ridge at once.
        """
        p = self.spec.priors.mu_gamma
        r = self.x - self.B @ self.gamma
        prec = self.row_sum @ self.row_sum / self.s2["x"] + 1.0 / p.sd ** 2
        lin = self.row_sum @ r / self.s2["x"] + (p.mean - self.mu_gamma) / p.sd ** 2
        c = _normal(prec, lin, self.rng.standard_normal())
        self.gamma = self.gamma + c
        self.mu_gamma += c

    def update_mu_climate(self):
        pri = self.spec.priors
        z = self.rng.standard_normal()
        sx2 = self.s2["x"]
        if self.spline and not self.frozen:
            sg2 = self.s2["gamma"]
            p = pri.mu_gamma
            prec = self.H / sg2 + 1.0 / p.sd ** 2
            lin = self.gamma.sum() / sg2 + p.mean / p.sd ** 2
            self.mu_gamma = _normal(prec, lin, z)
            return
        # x_t ~ N(mu * w_t, sigma_x^2) with w_t the basis row sums (1 for a constant mean)
        w = self.row_sum
        p = pri.mu_gamma if self.spline else pri.mu_x
        prec = w @ w / sx2 + 1.0 / p.sd ** 2
        lin = w @ self.x / sx2 + p.mean / p.sd ** 2
        mu = _normal(prec, lin, z)
        if self.spline:
            self.mu_gamma = mu
            self.gamma = np.full(self.H, mu)
        else:
            self.mu_x = mu

    def update_mu_beta(self):
        if self.rcs:
            return
        pri = self.spec.priors
        z = self.rng.standard_normal(2)
        p0 = pri.mu_beta0
        prec = self.k / self.s2["beta0"] + 1.0 / p0.sd ** 2
        lin = self.b0.sum() / self.s2["beta0"] + (p0.mean + self.b2 * self.c0) / p0.sd ** 2
        self.mb0 = _normal(prec, lin, z[0])
        p1 = pri.mu_beta1
        prec = self.k / self.s2["beta1"] + 1.0 / p1.sd ** 2
        lin = self.b1.sum() / self.s2["beta1"] + p1.mean / p1.sd ** 2
        self.mb1 = _normal(prec, lin, z[1])

    def _update_variance(self, key, ss, count):
        pri = self.spec.priors
        rng = self.rng
        if pri.scale_family == "inv_gamma":
            self.s2[key] = (pri.ig_rate + 0.5 * ss) / rng.standard_gamma(pri.ig_shape + 0.5 * count)
            return
        ht = getattr(pri, "sigma_" + key)
        nu, A = ht.df, ht.scale
        s2 = (nu / self.aux[key] + 0.5 * ss) / rng.standard_gamma(0.5 * (nu + count))
        self.aux[key] = (nu / s2 + 1.0 / (A * A)) / rng.standard_gamma(0.5 * (nu + 1.0))
        self.s2[key] = s2

    def _nc_shape_rate(self, key):
        pri = self.spec.priors
        if pri.scale_family == "inv_gamma":
            return pri.ig_shape, pri.ig_rate
        nu = getattr(pri, "sigma_" + key).df
        return 0.5 * nu, nu / self.aux[key]

    def _nc_scale_step(self, key, s, a, b, adapt):
        """Random-walk Metropolis on log s for a target ``-a s^2/2 + b s`` times the scale prior.

        Returns the new scale.  The scale prior is the inverse-gamma on
        ``s^2`` (given the expansion auxiliary under half-t priors).
        """
        z = self.rng.standard_normal()
        logu = math.log(self.rng.random())
        shape, rate = self._nc_shape_rate(key)

        def logp(ls):
            sc = math.exp(ls)
            return -0.5 * a * sc * sc + b * sc - 2.0 * shape * ls - rate / (sc * sc)

        cur = math.log(s)
        prop = cur + math.exp(self.rw[key + "_nc"][0]) * z
        acc = logu < logp(prop) - logp(cur)
        if adapt:
            self._adapt_rw(key + "_nc", acc)
        return math.exp(prop) if acc else s

    def update_sigma_eta_nc(self, adapt: bool = False):
        """Move sigma_eta with standardized year effects held fixed.

        Holding ``e = (eta~ - beta2 h) / sigma_eta`` fixed moves every year
        effect with the scale, which escapes the funnel the centred update
        gets stuck in when sigma_eta is small.
        """
        c0, c1 = self.growth_coefs()
        sy2 = self.s2["y"]
        mean_eta = self.b2 * self.h()
        s = math.sqrt(self.s2["eta"])
        e = (self.eta - mean_eta) / s
        r = _kernels.year_sums(self.logy, self.g, self.t, self.age, c0, c1, self.n) - self.depth * mean_eta
        s_new = self._nc_scale_step("eta", s, (self.depth * e) @ e / sy2, e @ r / sy2, adapt)
        if s_new != s:
            self.s2["eta"] = s_new * s_new
            self.eta = mean_eta + s_new * e

    def update_sigma_gamma_nc(self, adapt: bool = False):
        """Move sigma_gamma with standardized spline coefficients held fixed."""
        s = math.sqrt(self.s2["gamma"])
        e = (self.gamma - self.mu_gamma) / s
        be = self.B @ e
        r = self.x - self.mu_gamma * self.row_sum
        sx2 = self.s2["x"]
        s_new = self._nc_scale_step("gamma", s, be @ be / sx2, be @ r / sx2, adapt)
        if s_new != s:
            self.s2["gamma"] = s_new * s_new
            self.gamma = self.mu_gamma + s_new * e

    def _adapt_rw(self, key, accepted):
        st = self.rw[key]
        st[1] += accepted
        st[2] += 1
        if st[2] == self.config.adapt_window:
            st[3] += 1
            delta = min(0.1, 1.0 / math.sqrt(st[3]))
            st[0] += delta if st[1] / st[2] > self.config.target_accept else -delta
            st[1] = st[2] = 0

    def _scale_logp(self, b2, xm):
        """Log density terms touched by the ``scale`` move, or -inf off support."""
        pri = self.spec.priors
        x = self.x.copy()
        x[self.mis] = xm
        if self.piecewise and xm.size and xm.min() < self.spec.x_min:
            return -math.inf
        r = self.eta - b2 * (self._g_of(x) - self.c0)
        ra = xm - self.alpha()[self.mis]
        lp = -0.5 * (r @ r) / self.s2["eta"] - 0.5 * (ra @ ra) / self.s2["x"]
        lp -= 0.5 * ((b2 - pri.beta2.mean) / pri.beta2.sd) ** 2
        if self.rcs:
            d = self.zeta - b2 * self.c0 - pri.zeta.mean
            lp -= 0.5 * (d @ d) / pri.zeta.sd ** 2
        else:
            lp -= 0.5 * ((self.mb0 - b2 * self.c0 - pri.mu_beta0.mean) / pri.mu_beta0.sd) ** 2
        return lp

    def update_scale(self, adapt: bool = False):
        """Multiply beta2 by ``lam`` and divide missing-climate deviations from c0 by it.

        Keeps the year-effect means in missing years roughly fixed, so the
        climate level and beta2 can move together.  Random-walk Metropolis on
        log ``lam`` with Jacobian ``lam^(1 - m)``.
        """
        z = self.rng.standard_normal()
        logu = math.log(self.rng.random())
        m = self.mis.size
        loglam = math.exp(self.rw["scale"][0]) * z
        lam = math.exp(loglam)
        xm = self.x[self.mis]
        b2_new = self.b2 * lam
        xm_new = self.c0 + (xm - self.c0) / lam
        ratio = (self._scale_logp(b2_new, xm_new) - self._scale_logp(self.b2, xm)
                 + (1.0 - m) * loglam)
        acc = logu < ratio
        if acc:
            self.b2 = b2_new
            self.x[self.mis] = xm_new
        if adapt:
            self._adapt_rw("scale", acc)

    def update_sigma(self, key):
        if key == "y":
            c0, c1 = self.growth_coefs()
            ss = _kernels.sse(self.logy, self.g, self.t, self.age, c0, c1, self.eta)
            self._update_variance("y", ss, self.logy.size)
        elif key == "eta":
            r = self.eta - self.b2 * self.h()
            self._update_variance("eta", r @ r, self.n)
        elif key == "x":
            r = self.x - self.alpha()
            self._update_variance("x", r @ r, self.n)
        elif key == "beta0":
            r = self.b0 - self.mb0
            self._update_variance("beta0", r @ r, self.k)
        elif key == "beta1":
            r = self.b1 - self.mb1
            self._update_variance("beta1", r @ r, self.k)
        elif key == "gamma":
            r = self.gamma - self.mu_gamma
            self._update_variance("gamma", r @ r, self.H)
        else:
            raise KeyError(key)

    # -- schedule --------------------------------------------------------------

    def active_blocks(self):
        out = ["growth", "level", "trend", "drift"]
        if not self.rcs and self.bump_dirs is not None:
            out.append("bumps")
        out += ["eta", "beta2", "scale", "x_mis"]
        if self.spline and not self.frozen:
            out += ["gamma", "spline_shift"]
        out.append("mu_climate")
        if not self.rcs:
            out.append("mu_beta")
        out += ["sigma_y", "sigma_eta", "beta2_nc", "sigma_eta_nc", "sigma_x"]
        if not self.rcs:
            out += ["sigma_beta0", "sigma_beta1"]
        if self.spline and not self.frozen:
            out += ["sigma_gamma", "sigma_gamma_nc"]
        return out

    def update(self, block: str, adapt: bool = False):
        if block == "growth":
            self.update_growth()
        elif block == "level":
            self.update_level()
        elif block == "trend":
            self.update_trend()
        elif block == "drift":
            self.update_drift()
        elif block == "bumps":
            self.update_bumps()
        elif block == "eta":
            self.update_eta()
        elif block == "beta2":
            self.update_beta2()
        elif block == "x_mis":
            self.update_x(adapt)
        elif block == "gamma":
            if self.spline and not self.frozen:
                self.update_gamma()
        elif block == "spline_shift":
            if self.spline and not self.frozen:
                self.update_spline_shift()
        elif block == "mu_climate":
            self.update_mu_climate()
        elif block == "mu_beta":
            self.update_mu_beta()
        elif block == "scale":
            self.update_scale(adapt)
        elif block == "beta2_nc":
            self.update_beta2(standardized=True)
        elif block == "sigma_eta_nc":
            self.update_sigma_eta_nc(adapt)
        elif block == "sigma_gamma_nc":
            if self.spline and not self.frozen:
                self.update_sigma_gamma_nc(adapt)
        elif block.startswith("sigma_"):
            self.update_sigma(block[len("sigma_"):])
        else:
            raise ValueError(f"unknown block {block!r}")

    def sweep(self, adapt: bool = False):
        for block in self._schedule:
            self.update(block, adapt)

    @property
    def _schedule(self):
        sched = getattr(self, "_sched_cache", None)
        if sched is None:
            sched = self._sched_cache = tuple(self.active_blocks())
        return sched

    def finite(self) -> bool:
        scalars = [self.b2, self.mb0, self.mb1, self.mu_x, self.mu_gamma, *self.s2.values()]
        if not all(math.isfinite(v) for v in scalars):
            return False
        return bool(np.isfinite(self.eta).all() and np.isfinite(self.x).all()
                     and np.isfinite(self.b0).all() and np.isfinite(self.zeta).all()
                     and np.isfinite(self.gamma).all())

    def dump(self) -> dict:
        return {"beta2": self.b2, "mu_beta0~": self.mb0, "mu_beta1": self.mb1, "mu_x": self.mu_x,
                "mu_gamma": self.mu_gamma, **{f"sigma2_{k}": v for k, v in self.s2.items()}}

    def record(self) -> dict:
        shift = self.b2 * self.c0
        out = {
            "beta2": self.b2,
            "sigma_y": math.sqrt(self.s2["y"]),
            "sigma_eta": math.sqrt(self.s2["eta"]),
            "sigma_x": math.sqrt(self.s2["x"]),
            "eta": self.eta + shift,
            "x_mis": self.x[self.mis].copy(),
        }
        if self.rcs:
            out["zeta"] = self.zeta - shift
        else:
            out.update(beta0=self.b0 - shift, beta1=self.b1.copy(), mu_beta0=self.mb0 - shift,
                       mu_beta1=self.mb1, sigma_beta0=math.sqrt(self.s2["beta0"]),
                       sigma_beta1=math.sqrt(self.s2["beta1"]))
        if self.spline:
            out["mu_gamma"] = self.mu_gamma
            out["gamma"] = self.gamma.copy()
            if not self.frozen:
                out["sigma_gamma"] = math.sqrt(self.s2["gamma"])
        else:
            out["mu_x"] = self.mu_x
        return out


def _safe_sd(v, floor):
    v = np.asarray(v, dtype=np.float64)
    if v.size < 2:
        return floor
    return max(float(np.std(v, ddof=1)), floor)


def initial_state(spec: ModelSpec, data: ModelData, rng: np.random.Generator,
                  jitter: float = 1.0) -> LatentState:
    """Crude moment-based starting point, randomly dispersed by ``jitter``.

    Uses the same number of random draws for constant-mean models and
    spline models with frozen coefficients.
    """
    n, k = data.n, data.k
    logy, t, age, tree = data.logy, data.t, data.age, data.tree
    obs = data.observed
    x_obs = data.x_obs[obs]
    x_bar = float(x_obs.mean())
    x_sd = _safe_sd(x_obs, 0.1)
    g = np.minimum(x_obs, spec.x_max) if spec.is_piecewise else x_obs
    c0 = float(g.mean())

    if spec.is_rcs:
        cnt = np.bincount(data.bin, minlength=data.n_bins)
        zeta = np.bincount(data.bin, weights=logy, minlength=data.n_bins) / cnt
        resid = logy - zeta[data.bin]
        beta0 = beta1 = np.zeros(0)
    else:
        cnt = np.bincount(tree, minlength=k).astype(float)
        sa = np.bincount(tree, weights=age, minlength=k)
        sy = np.bincount(tree, weights=logy, minlength=k)
        am, ym = sa / cnt, sy / cnt
        da = age - am[tree]
        sxx = np.bincount(tree, weights=da * da, minlength=k)
        sxy = np.bincount(tree, weights=da * (logy - ym[tree]), minlength=k)
        pooled = float(np.sum(sxy) / np.sum(sxx)) if np.sum(sxx) > 0 else 0.0
        beta1 = np.where(sxx > 0, sxy / np.where(sxx > 0, sxx, 1.0), pooled)
        beta0 = ym - beta1 * am
        resid = logy - beta0[tree] - beta1[tree] * age
        zeta = np.zeros(0)
    depth = np.bincount(t, minlength=n)
    eta = np.bincount(t, weights=resid, minlength=n) / np.maximum(depth, 1)

    use = obs & (depth > 0)
    gx = np.minimum(data.x_obs[use], spec.x_max) if spec.is_piecewise else data.x_obs[use]
    hx = gx - c0
    b2 = float(hx @ (eta[use] - eta[use].mean()) / (hx @ hx)) if hx @ hx > 0 else 0.1
    if spec.beta2_positive:
        b2 = abs(b2) if b2 != 0 else 0.05

    j = rng.standard_normal(10)
    zx = rng.standard_normal(n)
    spread = 0.3 * jitter
    b2 *= math.exp(spread * j[0])
    sigma_y = _safe_sd(resid, 1e-3) * math.exp(spread * j[1])
    x = data.x_obs.copy()
    mis = ~obs
    x[mis] = x_bar + jitter * x_sd * zx[mis]
    if spec.is_piecewise:
        lo = spec.x_min
        x[mis] = np.where(x[mis] < lo, lo + np.abs(x[mis] - lo) + 1e-3, x[mis])
    gfull = np.minimum(x, spec.x_max) if spec.is_piecewise else x
    eta_full = np.where(depth > 0, eta, b2 * (gfull - c0))
    sigma_eta = _safe_sd(eta_full[depth > 0] - b2 * (gfull[depth > 0] - c0), 1e-2) * math.exp(spread * j[2])
    sigma_x = x_sd * math.exp(spread * j[3])
    sigma_beta0 = _safe_sd(beta0, 0.05) * math.exp(spread * j[4])
    sigma_beta1 = _safe_sd(beta1, 1e-4) * math.exp(spread * j[5])
    sigma_gamma = x_sd * math.exp(spread * j[6])
    mu = x_bar + jitter * x_sd * j[7] / math.sqrt(max(obs.sum(), 1))

    H = data.basis.H if spec.is_spline else 0
    if spec.is_spline and not spec.freeze_gamma:
        zg = rng.standard_normal(H)
        coef, *_ = np.linalg.lstsq(data.basis.matrix, x, rcond=None)
        gamma = coef + spread * x_sd * zg
        mu_gamma = float(gamma.mean())
    else:
        gamma = np.full(H, mu)
        mu_gamma = mu

    # shifted coordinates -> model coordinates
    shift = b2 * c0
    return LatentState(
        beta0=beta0 - shift if not spec.is_rcs else beta0,
        beta1=beta1,
        zeta=zeta - shift if spec.is_rcs else zeta,
        beta2=b2,
        eta=eta_full + shift,
        x=x,
        gamma=gamma,
        mu_x=mu,
        mu_gamma=mu_gamma,
        mu_beta0=(float(beta0.mean()) - shift) if not spec.is_rcs else 0.0,
        mu_beta1=float(beta1.mean()) if not spec.is_rcs else 0.0,
        sigma_y=sigma_y,
        sigma_eta=sigma_eta,
        sigma_x=sigma_x,
        sigma_beta0=sigma_beta0,
        sigma_beta1=sigma_beta1,
        sigma_gamma=sigma_gamma,
    )


def gibbs_update_block(block: str, state: LatentState, spec: ModelSpec, data: ModelData,
                       rng: np.random.Generator) -> LatentState:
    """Apply one block update to ``state`` and return the new state.

    ``level``, ``trend`` and ``beta2`` act in the shifted coordinates, so
    they move several model-coordinate quantities jointly.
    """
    if block not in BLOCKS:
        raise ValueError(f"unknown block {block!r}")
    ch = ChainState(spec, data, rng)
    ch.load(state)
    ch.update(block)
    if not ch.finite():
        raise SamplerError(f"non-finite state after block {block}", state=ch.dump())
    return ch.export()


def _run_chain(spec, data, config, chain_idx, seed_seq):
    rng = np.random.Generator(np.random.Philox(seed_seq))
    init = initial_state(spec, data, rng, config.init_jitter)
    ch = ChainState(spec, data, rng, config)
    ch.load(init)
    store = {}
    s = 0
    first = ch.record()
    for name, v in first.items():
        store[name] = np.empty((config.saved,) + np.shape(v))
    for it in range(config.iterations):
        ch.sweep(adapt=it < config.burn_in)
        if not ch.finite():
            raise SamplerError(f"chain {chain_idx} diverged at iteration {it}", iteration=it,
                               chain=chain_idx, state=ch.dump())
        if it >= config.burn_in and (it - config.burn_in) % config.thin == config.thin - 1:
            for name, v in ch.record().items():
                store[name][s] = v
            s += 1
    accept = None
    if ch.piecewise and ch.proposal_total:
        accept = ch.accept_total / ch.proposal_total
    return store, accept


def run(spec: ModelSpec, data: ModelData, config: SamplerConfig | None = None) -> PosteriorDraws:
    """Run ``config.chains`` independent chains; deterministic given ``config.seed``."""
    config = config or SamplerConfig()
    seqs = np.random.SeedSequence(config.seed).spawn(config.chains)
    jobs = [(spec, data, config, c, seqs[c]) for c in range(config.chains)]
    workers = min(_threads(config), config.chains)
    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as ex:
            results = list(ex.map(lambda a: _run_chain(*a), jobs))
    else:
        results = [_run_chain(*a) for a in jobs]
    names = results[0][0].keys()
    draws = {name: np.stack([r[0][name] for r in results]) for name in names}
    accept = None
    if results[0][1] is not None:
        accept = np.stack([r[1] for r in results])
    return PosteriorDraws(
        model=spec.name,
        years=data.years.copy(),
        missing=~data.observed,
        draws=draws,
        config=config,
        spec=spec,
        acceptance=accept,
    )
