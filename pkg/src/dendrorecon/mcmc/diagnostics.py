"""Split-chain R-hat and autocorrelation-based effective sample size."""
from __future__ import annotations

import warnings

import numpy as np

__all__ = ["split_rhat", "effective_sample_size", "autocovariance"]


def _as_chains(x) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    if x.ndim == 1:
        x = x[None, :]
    if x.ndim != 2:
        raise ValueError("expected draws shaped (chains, draws)")
    return x


def split_rhat(x) -> float:
    """Potential scale reduction on chains split in half.

    Returns NaN (with a warning) when only one chain is supplied.
    """
    x = _as_chains(x)
    m, n = x.shape
    if m < 2:
        warnings.warn("R-hat needs at least two chains", RuntimeWarning, stacklevel=2)
        return float("nan")
    half = n // 2
    if half < 2:
        return float("nan")
    parts = np.concatenate([x[:, :half], x[:, n - half:]], axis=0)
    means = parts.mean(axis=1)
    w = parts.var(axis=1, ddof=1).mean()
    b = half * means.var(ddof=1)
    if w == 0:
        return 1.0 if b == 0 else float("inf")
    var_plus = (half - 1) / half * w + b / half
    return float(np.sqrt(var_plus / w))


def autocovariance(x) -> np.ndarray:
    """Biased autocovariance of a 1-D series via FFT."""
    x = np.asarray(x, dtype=np.float64)
    n = x.size
    size = 1 << (2 * n - 1).bit_length()
    f = np.fft.rfft(x - x.mean(), size)
    acov = np.fft.irfft(f * np.conjugate(f), size)[:n]
    return acov / n


def effective_sample_size(x) -> float:
    """Multi-chain ESS with Geyer's initial monotone sequence estimator."""
    x = _as_chains(x)
    m, n = x.shape
    if n < 4:
        return float("nan")
    acov = np.array([autocovariance(c) for c in x])
    chain_var = acov[:, 0] * n / (n - 1.0)
    mean_var = chain_var.mean()
    var_plus = mean_var * (n - 1.0) / n
    if m > 1:
        var_plus += x.mean(axis=1).var(ddof=1)
    if var_plus <= 0:
        return float(m * n)
    rho = 1.0 - (mean_var - acov.mean(axis=0)) / var_plus
    rho[0] = 1.0
    # pair sums rho[2k] + rho[2k+1], truncated at the first non-positive pair
    n_pairs = n // 2
    pairs = rho[: 2 * n_pairs].reshape(n_pairs, 2).sum(axis=1)
    stop = np.flatnonzero(pairs <= 0)
    k = stop[0] if stop.size else n_pairs
    pairs = np.minimum.accumulate(pairs[:k]) if k > 0 else pairs[:0]
    tau = -1.0 + 2.0 * pairs.sum()
    tau = max(tau, 1.0 / np.log10(m * n))
    return float(m * n / tau)
