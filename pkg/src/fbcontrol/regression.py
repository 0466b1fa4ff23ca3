"""Least-squares conditional expectations on a polynomial basis in X.

Used by the Picard FBSDE solver and the adjoint solvers.  The regressor is
standardized (centered and scaled) before building the Vandermonde basis;
when the sample has no spread (e.g. every path starts at the same point) the
basis collapses to the constant and the regression is the sample mean.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import RegressionRankDeficiency

SPREAD_FLOOR = 1e-12
CONDITION_CAP = 1e12


@dataclass(frozen=True)
class Regressor:
    """A fitted design for one time step; ``project`` applies it to any target."""

    basis: np.ndarray
    pinv: np.ndarray
    condition: float

    def project(self, target: np.ndarray) -> np.ndarray:
        """Fitted values of E[target | X] on the sample."""
        return self.basis @ (self.pinv @ target)

    def coefficients(self, target: np.ndarray) -> np.ndarray:
        return self.pinv @ target


def make_regressor(x: np.ndarray, degree: int, multiplier: np.ndarray | None = None) -> Regressor:
    """Build the standardized polynomial design of the given degree.

    With ``multiplier`` the basis is {X^i} ∪ {multiplier·X^i}.  Raises
    ``RegressionRankDeficiency`` when the design is numerically singular (condition number above 1e12 or rank below the basis size).
    """
    x = np.asarray(x, dtype=float)
    sd = float(np.std(x))
    if sd < SPREAD_FLOOR * (1.0 + abs(float(np.mean(x)))) or degree == 0:
        basis = np.ones((x.size, 1))
    else:
        basis = np.vander((x - np.mean(x)) / sd, degree + 1, increasing=True)
    if multiplier is not None:
        basis = np.hstack([basis, np.asarray(multiplier, dtype=float)[:, None] * basis])
    if basis.shape[0] < basis.shape[1]:
        raise RegressionRankDeficiency(f"{basis.shape[0]} samples for {basis.shape[1]} basis functions")
    sv = np.linalg.svd(basis, compute_uv=False)
    cond = float(sv[0] / sv[-1]) if sv[-1] > 0 else float("inf")
    if not np.isfinite(cond) or cond > CONDITION_CAP:
        raise RegressionRankDeficiency(f"regression basis degenerate (condition number {cond:.3g})")
    return Regressor(basis, np.linalg.pinv(basis), cond)


def conditional_expectation(x: np.ndarray, target: np.ndarray, degree: int) -> np.ndarray:
    """One-shot E[target | x] on the sample."""
    return make_regressor(x, degree).project(np.asarray(target, dtype=float))
