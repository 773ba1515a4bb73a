"""Multi-step standardization: per-tree (TS) and regional-curve (RCS) indices.

Both paths turn raw widths into dimensionless indices ``w = y / fitted`` and
average them per year into a chronology.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .ingest import RingWidthDataset

__all__ = [
    "NegExpFit",
    "Chronology",
    "fit_negexp",
    "ts_index",
    "rcs_curve",
    "rcs_index",
    "age_bin",
    "tukey_biweight",
    "build_chronology",
    "standardize",
]


@dataclass(frozen=True)
class NegExpFit:
    """Fitted growth curve ``exp(c0 + c1 * age)`` or a flat mean fallback."""

    c0: float
    c1: float
    fallback: bool
    mean: float

    def __call__(self, age) -> np.ndarray:
        age = np.asarray(age, dtype=np.float64)
        if self.fallback:
            return np.full(age.shape, self.mean)
        return np.exp(self.c0 + self.c1 * age)


def fit_negexp(widths, ages) -> NegExpFit:
    """Least-squares fit of log width on age.

    An increasing fitted trend is replaced by the horizontal line at the
    mean width.  NaN widths are ignored.
    """
    widths = np.asarray(widths, dtype=np.float64)
    ages = np.asarray(ages, dtype=np.float64)
    keep = ~np.isnan(widths)
    y, a = widths[keep], ages[keep]
    if y.size < 3:
        raise ValueError(f"need at least 3 rings to fit a growth curve, got {y.size}")
    if np.ptp(a) == 0:
        raise ValueError("degenerate growth-curve fit: all ages equal")
    if np.any(y <= 0):
        raise ValueError("widths must be positive")
    ly = np.log(y)
    am = a.mean()
    c1 = float(np.dot(a - am, ly - ly.mean()) / np.dot(a - am, a - am))
    c0 = float(ly.mean() - c1 * am)
    mean = float(y.mean())
    return NegExpFit(c0=c0, c1=c1, fallback=c1 > 0, mean=mean)


def ts_index(dataset: RingWidthDataset):
    """Per-tree indices ``w_it = y_it / yhat_it`` with negative-exponential curves.

    Returns ``(indices, fits)``; ``indices[i]`` is aligned with
    ``dataset.widths[i]`` (NaN where the ring is missing).
    """
    indices, fits = [], []
    for w in dataset.widths:
        ages = np.arange(1, w.size + 1, dtype=np.float64)
        fit = fit_negexp(w, ages)
        fits.append(fit)
        indices.append(w / fit(ages))
    return indices, fits


def age_bin(ages, bin_width: int) -> np.ndarray:
    """1-based bin ``ceil(age / b)``."""
    if bin_width < 1:
        raise ValueError("bin width must be >= 1")
    ages = np.asarray(ages)
    return (ages + bin_width - 1) // bin_width


def rcs_curve(dataset: RingWidthDataset, bin_width: int = 10) -> dict[int, float]:
    """Mean raw width per age bin over all trees; empty bins are absent."""
    if bin_width < 1:
        raise ValueError("bin width must be >= 1")
    sums: dict[int, float] = {}
    counts: dict[int, int] = {}
    for w in dataset.widths:
        ages = np.arange(1, w.size + 1)
        keep = ~np.isnan(w)
        bins = age_bin(ages[keep], bin_width)
        for j, total, cnt in zip(*_grouped(bins, w[keep])):
            sums[j] = sums.get(j, 0.0) + total
            counts[j] = counts.get(j, 0) + cnt
    return {j: sums[j] / counts[j] for j in sorted(sums)}


def _grouped(keys, values):
    uniq, inv = np.unique(keys, return_inverse=True)
    return (uniq.tolist(),
            np.bincount(inv, weights=values).tolist(),
            np.bincount(inv).tolist())


def rcs_index(dataset: RingWidthDataset, bin_width: int = 10):
    """Per-tree indices ``w_it = y_it / G_bin(a_it)``; returns ``(indices, curve)``."""
    curve = rcs_curve(dataset, bin_width)
    indices = []
    for w in dataset.widths:
        bins = age_bin(np.arange(1, w.size + 1), bin_width)
        g = np.array([curve.get(int(b), np.nan) for b in bins])
        indices.append(w / g)
    return indices, curve


def tukey_biweight(values, c: float = 9.0, eps: float = 1e-6) -> float:
    """One-step Tukey biweight robust mean (median/MAD start)."""
    x = np.asarray(values, dtype=np.float64)
    x = x[~np.isnan(x)]
    if x.size == 0:
        return np.nan
    med = np.median(x)
    mad = np.median(np.abs(x - med))
    u = (x - med) / (c * mad + eps)
    w = np.where(np.abs(u) < 1.0, (1.0 - u * u) ** 2, 0.0)
    if w.sum() == 0:
        return float(med)
    return float(np.sum(w * x) / np.sum(w))


@dataclass(frozen=True)
class Chronology:
    """Site chronology ``z`` on the dataset calendar (NaN where depth is 0)."""

    years: np.ndarray
    z: np.ndarray
    sample_depth: np.ndarray
    method: str
    mean_fn: str = "arithmetic"
    curves: object = field(default=None, repr=False, compare=False)

    @property
    def n(self) -> int:
        return int(self.years.size)


def build_chronology(dataset: RingWidthDataset, indices, mean_fn: str = "arithmetic",
                     method: str = "TS", curves=None) -> Chronology:
    """Average per-tree indices across trees present in each year."""
    if mean_fn not in ("arithmetic", "tukey_biweight", "biweight"):
        raise ValueError(f"unknown mean function {mean_fn!r}")
    n, y0 = dataset.n, dataset.year_min
    mat = np.full((dataset.k, n), np.nan)
    for i, w in enumerate(indices):
        lo = dataset.first_year[i] - y0
        mat[i, lo:lo + w.size] = w
    depth = np.sum(~np.isnan(mat), axis=0)
    z = np.full(n, np.nan)
    have = depth > 0
    if mean_fn == "arithmetic":
        z[have] = np.nanmean(mat[:, have], axis=0)
    else:
        for t in np.flatnonzero(have):
            z[t] = tukey_biweight(mat[:, t])
        mean_fn = "tukey_biweight"
    return Chronology(dataset.years, z, depth, method, mean_fn, curves)


def standardize(dataset: RingWidthDataset, method: str = "ts", bin_width: int = 10,
                mean_fn: str = "arithmetic") -> Chronology:
    method = method.lower()
    if method == "ts":
        idx, fits = ts_index(dataset)
        return build_chronology(dataset, idx, mean_fn, "TS", fits)
    if method == "rcs":
        idx, curve = rcs_index(dataset, bin_width)
        return build_chronology(dataset, idx, mean_fn, "RCS", curve)
    raise ValueError(f"unknown standardization method {method!r}")
