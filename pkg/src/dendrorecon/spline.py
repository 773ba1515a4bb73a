"""Clamped cubic B-spline basis over the time index for a smooth climate mean."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.interpolate import BSpline

__all__ = ["SplineBasis", "build_basis", "evaluate_mean", "interior_knots"]


@dataclass(frozen=True)
class SplineBasis:
    """Basis matrix ``B`` (n x H) with ``B[t, h] = B_h(t + 1)``."""

    n: int
    knot_spacing: int
    order: int
    knots: np.ndarray
    matrix: np.ndarray = field(repr=False)

    @property
    def H(self) -> int:
        return int(self.matrix.shape[1])

    @property
    def degree(self) -> int:
        return self.order - 1


def interior_knots(n: int, knot_spacing: int) -> np.ndarray:
    """Knots at ``1 + j * spacing`` strictly inside ``[1, n]``."""
    return np.arange(1 + knot_spacing, n, knot_spacing, dtype=np.float64)


def build_basis(n: int, knot_spacing: int = 25, order: int = 4) -> SplineBasis:
    """Clamped B-spline basis on time points ``1..n``.

    Boundary knots at 1 and n are repeated ``order`` times; the last
    interior interval may be shorter than ``knot_spacing``.
    """
    if knot_spacing < 1:
        raise ValueError("knot spacing must be >= 1 year")
    if n < 2 * knot_spacing:
        raise ValueError(
            f"series of {n} years is too short for knots every {knot_spacing} years; "
            f"use a spacing of at most {n // 2}"
        )
    deg = order - 1
    inner = interior_knots(n, knot_spacing)
    knots = np.concatenate([np.full(order, 1.0), inner, np.full(order, float(n))])
    t = np.arange(1, n + 1, dtype=np.float64)
    mat = BSpline.design_matrix(t, knots, deg).toarray()
    mat.setflags(write=False)
    knots.setflags(write=False)
    return SplineBasis(n=n, knot_spacing=knot_spacing, order=order, knots=knots, matrix=mat)


def evaluate_mean(basis: SplineBasis, gamma) -> np.ndarray:
    gamma = np.asarray(gamma, dtype=np.float64)
    if gamma.shape != (basis.H,):
        raise ValueError(f"expected {basis.H} coefficients, got shape {gamma.shape}")
    return basis.matrix @ gamma
