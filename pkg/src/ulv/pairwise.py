"""Per-gene pairwise difference matrices between case and control subjects."""

from __future__ import annotations

from dataclasses import dataclass
from enum import Enum
from typing import Mapping, Sequence

import numpy as np

from .ranks import logit_pi, probabilistic_index


class DifferenceMetric(Enum):
    """How to compare one case subject's cells with one control subject's."""

    PI = "pi"
    LOGIT_PI = "logit-pi"
    MEAN_DIFF = "mean"
    MEDIAN_DIFF = "median"
    MEAN_GREATER_INDICATOR = "mean-greater"

    @property
    def null_center(self) -> float:
        """Value a difference takes when the two groups do not differ."""
        if self in (DifferenceMetric.PI, DifferenceMetric.MEAN_GREATER_INDICATOR):
            return 0.5
        return 0.0

    @property
    def separable(self) -> bool:
        """True when the difference factors as g(case) - g(control)."""
        return self in (DifferenceMetric.MEAN_DIFF, DifferenceMetric.MEDIAN_DIFF)


@dataclass(frozen=True)
class DifferenceMatrix:
    """m x n matrix of pairwise case-vs-control differences for one gene.

    Rows index case subjects, columns control subjects. Cluster sizes are
    the per-subject cell counts, kept for the weighted analysis.
    """

    values: np.ndarray
    case_ids: tuple[str, ...]
    control_ids: tuple[str, ...]
    case_sizes: np.ndarray
    control_sizes: np.ndarray
    metric: DifferenceMetric
    null_center: float

    def __post_init__(self) -> None:
        m, n = self.values.shape
        if m < 2 or n < 2:
            raise ValueError("insufficient subjects: need at least 2 per group")
        if len(self.case_ids) != m or len(self.control_ids) != n:
            raise ValueError("subject id lists inconsistent with matrix shape")
        if len(self.case_sizes) != m or len(self.control_sizes) != n:
            raise ValueError("cluster size lists inconsistent with matrix shape")
        if self.metric is DifferenceMetric.PI and (
            self.values.min() < 0.0 or self.values.max() > 1.0
        ):
            raise ValueError("probabilistic-index entries must lie in [0, 1]")

    @property
    def n_case(self) -> int:
        return self.values.shape[0]

    @property
    def n_control(self) -> int:
        return self.values.shape[1]

    def u_cluster(self) -> float:
        """Clustered U statistic: the plain sum of the difference entries.

        Diagnostic only. For the probabilistic-index metric each entry is a
        per-pair U rescaled by its K1i * K0j cell pairs, so multiplying the
        entries back by those products recovers the raw pair counts.
        """
        return float(self.values.sum())


def _subject_values(
    values_by_subject: Mapping[str, object], subject: str
) -> np.ndarray:
    try:
        raw = values_by_subject[subject]
    except KeyError:
        raise ValueError(f"no cell values supplied for subject {subject!r}") from None
    arr = np.asarray(raw, dtype=float).ravel()
    if arr.size == 0:
        raise ValueError(f"subject {subject!r} has 0 cells")
    if not np.all(np.isfinite(arr)):
        raise ValueError(f"subject {subject!r} has non-finite cell values")
    return arr


def build_difference_matrix(
    values_by_subject: Mapping[str, object],
    case_ids: Sequence[str],
    control_ids: Sequence[str],
    metric: DifferenceMetric,
    logit_clamp: float | None = None,
) -> DifferenceMatrix:
    """Build the m x n difference matrix for one gene under a chosen metric.

    Parameters
    ----------
    values_by_subject : mapping
        Per-subject sequences of cell-level values (raw or normalized).
    case_ids, control_ids : sequence of str
        Subject identifiers per group; at least 2 subjects each.
    metric : DifferenceMetric
        Pairwise difference to compute.
    logit_clamp : float, optional
        Clamp epsilon for the logit metric; defaults to each pair's
        estimator resolution.
    """
    if len(case_ids) < 2 or len(control_ids) < 2:
        raise ValueError("insufficient subjects: need at least 2 per group")
    case_vals = [_subject_values(values_by_subject, s) for s in case_ids]
    control_vals = [_subject_values(values_by_subject, s) for s in control_ids]
    m, n = len(case_vals), len(control_vals)
    out = np.empty((m, n), dtype=float)

    if metric in (DifferenceMetric.PI, DifferenceMetric.LOGIT_PI):
        for i, cv in enumerate(case_vals):
            for j, gv in enumerate(control_vals):
                pi = probabilistic_index(cv, gv)
                if metric is DifferenceMetric.PI:
                    out[i, j] = pi.value
                else:
                    out[i, j] = logit_pi(pi, logit_clamp)
    elif metric.separable:
        summarize = np.mean if metric is DifferenceMetric.MEAN_DIFF else np.median
        g_case = np.array([summarize(v) for v in case_vals])
        g_control = np.array([summarize(v) for v in control_vals])
        out = g_case[:, None] - g_control[None, :]
    elif metric is DifferenceMetric.MEAN_GREATER_INDICATOR:
        mc = np.array([v.mean() for v in case_vals])
        mg = np.array([v.mean() for v in control_vals])
        # half weight for exact ties, matching the rank-based convention
        out = (mc[:, None] > mg[None, :]) + 0.5 * (mc[:, None] == mg[None, :])
        out = out.astype(float)
    else:  # pragma: no cover - enum is exhaustive
        raise ValueError(f"unknown metric {metric!r}")

    return DifferenceMatrix(
        values=out,
        case_ids=tuple(case_ids),
        control_ids=tuple(control_ids),
        case_sizes=np.array([v.size for v in case_vals], dtype=int),
        control_sizes=np.array([v.size for v in control_vals], dtype=int),
        metric=metric,
        null_center=metric.null_center,
    )
