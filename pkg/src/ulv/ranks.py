"""Rank and U-statistic primitives.

Midranks with ties, the Mann-Whitney U statistic, the probabilistic index
between two samples of cell-level measurements, and its logit transform.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
import scipy.stats


@dataclass(frozen=True)
class PIEstimate:
    """Estimated probabilistic index P(case > control) + 0.5 P(case = control).

    The estimate is the Mann-Whitney U statistic rescaled by the number of
    cell pairs, so it always lies on the grid k / (2 K1 K0) and equals the
    AUC of classifying the two cell populations by their measured values.
    """

    value: float
    n_case_cells: int
    n_control_cells: int

    def __post_init__(self) -> None:
        if self.n_case_cells <= 0 or self.n_control_cells <= 0:
            raise ValueError("cell counts must be positive")
        if not 0.0 <= self.value <= 1.0:
            raise ValueError(f"probabilistic index {self.value!r} outside [0, 1]")

    @property
    def resolution(self) -> float:
        """Smallest nonzero increment of the estimator, 1 / (2 K1 K0)."""
        return 0.5 / (self.n_case_cells * self.n_control_cells)


def _as_finite_1d(values, name: str) -> np.ndarray:
    arr = np.asarray(values, dtype=float).ravel()
    if arr.size == 0:
        raise ValueError(f"{name} must be non-empty")
    if not np.all(np.isfinite(arr)):
        raise ValueError(f"{name} contains non-finite values")
    return arr


def midranks(values) -> np.ndarray:
    """Ascending ranks, with tied values sharing the mean of the ranks they span.

    The output always sums to L(L+1)/2 for an input of length L.

    Parameters
    ----------
    values : sequence of float
        Non-empty, finite values.

    Returns
    -------
    numpy.ndarray
        Midrank of each input element.
    """
    arr = _as_finite_1d(values, "values")
    return scipy.stats.rankdata(arr, method="average")


def mann_whitney_u(case, control) -> float:
    """Mann-Whitney U statistic with ties counted as one half.

    Equals the pair count sum over all (case, control) pairs of
    I(case > control) + 0.5 I(case = control), computed in
    O((K1 + K0) log(K1 + K0)) from pooled midranks as U = W - m(m+1)/2,
    where W is the rank sum of the case sample and m its size.
    """
    case = _as_finite_1d(case, "case")
    control = _as_finite_1d(control, "control")
    m = case.size
    ranks = midranks(np.concatenate([case, control]))
    w = float(ranks[:m].sum())
    return w - m * (m + 1) / 2.0


def probabilistic_index(case, control) -> PIEstimate:
    """Probabilistic index of the case sample against the control sample.

    Rescales the Mann-Whitney U by the number of cell pairs; the result is
    the AUC of using the measured values to discriminate case cells from
    control cells.
    """
    case = _as_finite_1d(case, "case")
    control = _as_finite_1d(control, "control")
    u = mann_whitney_u(case, control)
    return PIEstimate(
        value=u / (case.size * control.size),
        n_case_cells=case.size,
        n_control_cells=control.size,
    )


def logit_pi(pi: PIEstimate, clamp_epsilon: float | None = None) -> float:
    """Log-odds of a probabilistic index, clamped away from 0 and 1.

    The default clamp is the estimator's own resolution 1 / (2 K1 K0), the
    smallest nonzero increment of the estimate, so clamping never reorders
    distinct estimates. On the logit scale the null center is 0.
    """
    eps = pi.resolution if clamp_epsilon is None else clamp_epsilon
    if not 0.0 < eps < 0.5:
        raise ValueError("clamp_epsilon must lie in (0, 0.5)")
    p = min(max(pi.value, eps), 1.0 - eps)
    return math.log(p / (1.0 - p))
