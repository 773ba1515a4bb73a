"""Scatter-reduction kernels for the Gibbs sweeps.

Every Gibbs block needs per-tree, per-bin or per-year sums of residuals over
all measured rings, which dominates the sweep cost.  Each kernel exists as a
numba-compiled loop and as a vectorised numpy (``bincount``) fallback.

The active backend is chosen at import time: numba when it is importable and
``DENDRORECON_DISABLE_NUMBA`` is unset or false, numpy otherwise.
:func:`set_backend` switches at runtime (benchmarks and tests use it).

Growth means are written generically as ``c0[g] + c1[g] * age`` where ``g``
is the tree index (linear-age growth) or the age-bin index (binned growth,
with ``c1`` all zero).
"""
from __future__ import annotations

import os

import numpy as np

try:
    import numba
except ImportError:  # pragma: no cover - numba is a declared dependency
    numba = None

HAS_NUMBA = numba is not None


def _env_disabled() -> bool:
    return os.environ.get("DENDRORECON_DISABLE_NUMBA", "").strip().lower() in {"1", "true", "yes", "on"}


# ---------------------------------------------------------------------------
# numpy implementations
# ---------------------------------------------------------------------------

def group_sums_numpy(logy, g, t, age, eta, size):
    r = logy - eta[t]
    return (np.bincount(g, weights=r, minlength=size),
            np.bincount(g, weights=age * r, minlength=size))


def year_sums_numpy(logy, g, t, age, c0, c1, n):
    r = logy - c0[g] - c1[g] * age
    return np.bincount(t, weights=r, minlength=n)


def sse_numpy(logy, g, t, age, c0, c1, eta):
    r = logy - c0[g] - c1[g] * age - eta[t]
    return float(r @ r)


# Scalars passed to ``bump_sweep`` in ``par``, in this order.
BUMP_PARAMS = ("beta2", "c0", "sy2", "se2", "sx2", "sb02", "sb12", "sg2", "mu_beta0", "mu_beta1",
               "mu_gamma", "x_min", "x_max")


def _excess_numpy(xm, em, b2, c0, se2, x_min, x_max):
    if xm.size and xm.min() < x_min:
        return -np.inf
    lin = em - b2 * (xm - c0)
    pw = em - b2 * (np.minimum(xm, x_max) - c0)
    return -0.5 * (pw @ pw - lin @ lin) / se2


def bump_sweep_numpy(dirs, c, p, q, css, observed, mis, tree, t, age, logy, alpha,
                     eta, x, b0, b1, gamma, par, free, piecewise, z, logu):
    """Sequential Gaussian moves of the year effects along each column of ``dirs``.

    Updates ``eta``, ``x`` (missing entries), ``b0``, ``b1`` and, when
    ``free``, ``gamma`` in place.
    """
    b2, c0, sy2, se2, sx2, sb02, sb12, sg2, mb0, mb1, mug, x_min, x_max = par
    obs = observed
    r = logy - b0[tree] - b1[tree] * age - eta[t]
    gx = np.minimum(x, x_max) if piecewise else x
    re = eta - b2 * (gx - c0)
    ra = x - alpha
    inv = 1.0 / b2
    for h in range(dirs.shape[1]):
        f = dirs[:, h]
        ch = c[:, h]
        ph, qh = p[:, h], q[:, h]
        fo = f[obs]
        prec = css[h] / sy2 + fo @ fo / se2 + ph @ ph / sb02 + qh @ qh / sb12
        lin = ch @ r / sy2 - fo @ re[obs] / se2
        lin += ph @ (b0 - mb0) / sb02 + qh @ (b1 - mb1) / sb12
        fm = f[mis] * inv
        if free:
            prec += inv * inv * (fo @ fo) / sx2 + inv * inv / sg2
            lin += inv * (fo @ ra[obs]) / sx2 - inv * (gamma[h] - mug) / sg2
        else:
            prec += fm @ fm / sx2
            lin -= fm @ ra[mis] / sx2
        d = lin / prec + z[h] / np.sqrt(prec)
        xm_new = x[mis] + d * fm
        if piecewise:
            ratio = (_excess_numpy(xm_new, eta[mis] + d * f[mis], b2, c0, se2, x_min, x_max)
                     - _excess_numpy(x[mis], eta[mis], b2, c0, se2, x_min, x_max))
            if not logu[h] < ratio:
                continue
        eta += d * f
        x[mis] = xm_new
        b0 -= d * ph
        b1 -= d * qh
        r -= d * ch
        re[obs] += d * fo
        if free:
            gamma[h] += d * inv
            ra[obs] -= d * fo * inv
        else:
            ra[mis] += d * fm


# ---------------------------------------------------------------------------
# numba implementations
# ---------------------------------------------------------------------------

if HAS_NUMBA:

    @numba.njit(cache=True, nogil=True)
    def group_sums_numba(logy, g, t, age, eta, size):
        s0 = np.zeros(size)
        s1 = np.zeros(size)
        for j in range(logy.shape[0]):
            r = logy[j] - eta[t[j]]
            s0[g[j]] += r
            s1[g[j]] += age[j] * r
        return s0, s1

    @numba.njit(cache=True, nogil=True)
    def year_sums_numba(logy, g, t, age, c0, c1, n):
        out = np.zeros(n)
        for j in range(logy.shape[0]):
            gj = g[j]
            out[t[j]] += logy[j] - c0[gj] - c1[gj] * age[j]
        return out

    @numba.njit(cache=True, nogil=True)
    def sse_numba(logy, g, t, age, c0, c1, eta):
        acc = 0.0
        for j in range(logy.shape[0]):
            gj = g[j]
            r = logy[j] - c0[gj] - c1[gj] * age[j] - eta[t[j]]
            acc += r * r
        return acc

    @numba.njit(cache=True, nogil=True)
    def _excess_numba(x, eta, mis, shift, f, b2, c0, se2, x_min, x_max):
        acc = 0.0
        for j in range(mis.shape[0]):
            tt = mis[j]
            xv = x[tt] + shift * f[tt] / b2
            if xv < x_min:
                return -np.inf
            ev = eta[tt] + shift * f[tt]
            lin = ev - b2 * (xv - c0)
            pw = ev - b2 * (min(xv, x_max) - c0)
            acc += pw * pw - lin * lin
        return -0.5 * acc / se2

    @numba.njit(cache=True, nogil=True)
    def bump_sweep_numba(dirs, c, p, q, css, observed, mis, tree, t, age, logy, alpha,
                         eta, x, b0, b1, gamma, par, free, piecewise, z, logu):
        b2, c0, sy2, se2, sx2 = par[0], par[1], par[2], par[3], par[4]
        sb02, sb12, sg2, mb0, mb1 = par[5], par[6], par[7], par[8], par[9]
        mug, x_min, x_max = par[10], par[11], par[12]
        n, H = dirs.shape
        k = b0.shape[0]
        nobs = logy.shape[0]
        r = np.empty(nobs)
        for j in range(nobs):
            i = tree[j]
            r[j] = logy[j] - b0[i] - b1[i] * age[j] - eta[t[j]]
        re = np.empty(n)
        ra = np.empty(n)
        for tt in range(n):
            gx = min(x[tt], x_max) if piecewise else x[tt]
            re[tt] = eta[tt] - b2 * (gx - c0)
            ra[tt] = x[tt] - alpha[tt]
        inv = 1.0 / b2
        for h in range(H):
            prec = css[h] / sy2
            lin = 0.0
            for j in range(nobs):
                lin += c[j, h] * r[j]
            lin /= sy2
            so = 0.0
            sre = 0.0
            sra_o = 0.0
            sm = 0.0
            sra_m = 0.0
            for tt in range(n):
                f = dirs[tt, h]
                if observed[tt]:
                    so += f * f
                    sre += f * re[tt]
                    sra_o += f * ra[tt]
                else:
                    sm += f * f
                    sra_m += f * ra[tt]
            prec += so / se2
            lin -= sre / se2
            spp = 0.0
            sqq = 0.0
            sp = 0.0
            sq = 0.0
            for i in range(k):
                spp += p[i, h] * p[i, h]
                sqq += q[i, h] * q[i, h]
                sp += p[i, h] * (b0[i] - mb0)
                sq += q[i, h] * (b1[i] - mb1)
            prec += spp / sb02 + sqq / sb12
            lin += sp / sb02 + sq / sb12
            if free:
                prec += inv * inv * so / sx2 + inv * inv / sg2
                lin += inv * sra_o / sx2 - inv * (gamma[h] - mug) / sg2
            else:
                prec += inv * inv * sm / sx2
                lin -= inv * sra_m / sx2
            d = lin / prec + z[h] / np.sqrt(prec)
            if piecewise:
                f_col = dirs[:, h]
                ratio = (_excess_numba(x, eta, mis, d, f_col, b2, c0, se2, x_min, x_max)
                         - _excess_numba(x, eta, mis, 0.0, f_col, b2, c0, se2, x_min, x_max))
                if not logu[h] < ratio:
                    continue
            for tt in range(n):
                f = dirs[tt, h]
                eta[tt] += d * f
                if observed[tt]:
                    re[tt] += d * f
                    if free:
                        ra[tt] -= d * f * inv
                else:
                    x[tt] += d * f * inv
                    if not free:
                        ra[tt] += d * f * inv
            for i in range(k):
                b0[i] -= d * p[i, h]
                b1[i] -= d * q[i, h]
            for j in range(nobs):
                r[j] -= d * c[j, h]
            if free:
                gamma[h] += d * inv

else:  # pragma: no cover
    group_sums_numba = year_sums_numba = sse_numba = bump_sweep_numba = None


_BACKENDS = {
    "numpy": (group_sums_numpy, year_sums_numpy, sse_numpy, bump_sweep_numpy),
    "numba": (group_sums_numba, year_sums_numba, sse_numba, bump_sweep_numba),
}

BACKEND = "numba" if HAS_NUMBA and not _env_disabled() else "numpy"
group_sums, year_sums, sse, bump_sweep = _BACKENDS[BACKEND]


def set_backend(name: str) -> None:
    """Select ``"numba"`` or ``"numpy"`` kernels for subsequent calls."""
    global BACKEND, group_sums, year_sums, sse, bump_sweep
    if name not in _BACKENDS:
        raise ValueError(f"unknown backend {name!r}")
    if name == "numba" and not HAS_NUMBA:
        raise RuntimeError("numba is not installed")
    BACKEND = name
    group_sums, year_sums, sse, bump_sweep = _BACKENDS[name]


def get_backend() -> str:
    return BACKEND
