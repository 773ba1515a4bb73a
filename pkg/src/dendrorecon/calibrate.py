"""Univariate linear calibration of climate against a chronology.

Classical calibration regresses the chronology on climate and inverts the
line; inverse calibration regresses climate on the chronology directly.
Inverse predictions are the classical ones shrunk toward the calibration
mean by the factor r^2.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy import stats

__all__ = [
    "CalibrationError",
    "CalibrationFit",
    "Prediction",
    "fit_classical",
    "fit_inverse",
    "fit",
    "predict",
    "reconstruct",
]

SLOPE_TOL = 1e-10


class CalibrationError(ValueError):
    pass


@dataclass(frozen=True)
class CalibrationFit:
    """Fitted calibration line plus the calibration-period statistics.

    For ``classical`` the line is ``z = intercept + slope * x``; for
    ``inverse`` it is ``x = intercept + slope * z``.  ``residual_sd`` is in
    the units of the response of that regression.
    """

    method: str
    slope: float
    intercept: float
    residual_sd: float
    n_cal: int
    x_mean: float
    z_mean: float
    sxx: float
    szz: float
    sxz: float
    p_value: float

    @property
    def r2(self) -> float:
        return self.sxz ** 2 / (self.sxx * self.szz)

    def point(self, z) -> np.ndarray:
        z = np.asarray(z, dtype=np.float64)
        if self.method == "classical":
            return (z - self.intercept) / self.slope
        return self.intercept + self.slope * z


@dataclass(frozen=True)
class Prediction:
    xhat: np.ndarray
    lo: np.ndarray
    hi: np.ndarray
    level: float


def _moments(z_obs, x_obs):
    z = np.asarray(z_obs, dtype=np.float64)
    x = np.asarray(x_obs, dtype=np.float64)
    if z.shape != x.shape or z.ndim != 1:
        raise CalibrationError("z_obs and x_obs must be 1-D and aligned")
    if not (np.isfinite(z).all() and np.isfinite(x).all()):
        raise CalibrationError("calibration pairs must be finite")
    n = z.size
    if n < 3:
        raise CalibrationError(f"need at least 3 calibration pairs, got {n}")
    xm, zm = x.mean(), z.mean()
    dx, dz = x - xm, z - zm
    return n, xm, zm, float(dx @ dx), float(dz @ dz), float(dx @ dz)


def _slope_pvalue(sxz, sxx, szz, n) -> float:
    # identical for either regression direction
    r2 = min(sxz ** 2 / (sxx * szz), 1.0)
    if r2 >= 1.0:
        return 0.0
    tstat = np.sqrt(r2 * (n - 2) / (1.0 - r2))
    return float(2.0 * stats.t.sf(tstat, n - 2))


def fit_classical(z_obs, x_obs) -> CalibrationFit:
    n, xm, zm, sxx, szz, sxz = _moments(z_obs, x_obs)
    if sxx == 0:
        raise CalibrationError("climate has zero variance in the calibration period")
    b1 = sxz / sxx
    # slope tolerance is applied in standardized units
    if szz == 0 or abs(b1) * np.sqrt(sxx / szz) < SLOPE_TOL:
        raise CalibrationError("chronology slope on climate is ~0; classical inversion is ill-conditioned")
    b0 = zm - b1 * xm
    rss = max(szz - b1 * sxz, 0.0)
    s = np.sqrt(rss / (n - 2))
    return CalibrationFit("classical", b1, b0, float(s), n, xm, zm, sxx, szz, sxz,
                          _slope_pvalue(sxz, sxx, szz, n))


def fit_inverse(z_obs, x_obs) -> CalibrationFit:
    n, xm, zm, sxx, szz, sxz = _moments(z_obs, x_obs)
    if szz == 0:
        raise CalibrationError("chronology has zero variance in the calibration period")
    c1 = sxz / szz
    c0 = xm - c1 * zm
    rss = max(sxx - c1 * sxz, 0.0)
    s = np.sqrt(rss / (n - 2))
    p = _slope_pvalue(sxz, sxx, szz, n) if sxx > 0 else 1.0
    return CalibrationFit("inverse", c1, c0, float(s), n, xm, zm, sxx, szz, sxz, p)


def fit(method: str, z_obs, x_obs) -> CalibrationFit:
    if method == "classical":
        return fit_classical(z_obs, x_obs)
    if method == "inverse":
        return fit_inverse(z_obs, x_obs)
    raise ValueError(f"unknown calibration method {method!r}")


def predict(cal: CalibrationFit, z_mis, level: float = 0.95) -> Prediction:
    """Point predictions and ``level`` prediction intervals for new chronology values.

    Inverse: the usual regression prediction interval.  Classical: the set
    of climate values whose prediction band contains ``z`` (Fieller-type
    inversion); infinite endpoints when the slope is not significant at
    ``level``.
    """
    z = np.atleast_1d(np.asarray(z_mis, dtype=np.float64))
    tq = stats.t.ppf(0.5 + level / 2.0, cal.n_cal - 2)
    xhat = cal.point(z)
    if cal.method == "inverse":
        half = tq * cal.residual_sd * np.sqrt(1.0 + 1.0 / cal.n_cal + (z - cal.z_mean) ** 2 / cal.szz)
        return Prediction(xhat, xhat - half, xhat + half, level)

    b1, s = cal.slope, cal.residual_sd
    d = z - cal.z_mean
    g = (tq * s) ** 2 / cal.sxx
    a = b1 * b1 - g
    c = d * d - (tq * s) ** 2 * (1.0 + 1.0 / cal.n_cal)
    lo = np.full(z.shape, -np.inf)
    hi = np.full(z.shape, np.inf)
    if a > 0:
        disc = np.maximum(b1 * b1 * d * d - a * c, 0.0)
        root = np.sqrt(disc)
        u1 = (b1 * d - root) / a
        u2 = (b1 * d + root) / a
        lo = cal.x_mean + np.minimum(u1, u2)
        hi = cal.x_mean + np.maximum(u1, u2)
    return Prediction(xhat, lo, hi, level)


def reconstruct(z, x, method: str = "inverse", levels=(0.5, 0.95)) -> dict:
    """Calibrate on years where both ``z`` and ``x`` are finite; predict the rest.

    Returns the predicted positions (indices into ``z``), point predictions
    and one ``(lo, hi)`` pair per level.  Years without a chronology value
    are skipped.
    """
    z = np.asarray(z, dtype=np.float64)
    x = np.asarray(x, dtype=np.float64)
    both = np.isfinite(z) & np.isfinite(x)
    target = np.isnan(x) & np.isfinite(z)
    cal = fit(method, z[both], x[both])
    idx = np.flatnonzero(target)
    out = {"index": idx, "fit": cal, "xhat": cal.point(z[idx]), "intervals": {}}
    for level in levels:
        p = predict(cal, z[idx], level)
        out["intervals"][level] = (p.lo, p.hi)
    return out
