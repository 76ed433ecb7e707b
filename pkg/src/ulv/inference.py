"""Multiple-testing adjustment, DE calling, rank-sum baselines, calibration."""

from __future__ import annotations

import itertools
import math
from dataclasses import dataclass, replace
from typing import Callable, Mapping, Sequence

import numpy as np
from scipy import stats as sps

from .lvm import (
    LatentModelConfig,
    TestResult,
    closed_form_test,
    fit_latent_model,
    wald_test,
)
from .pairwise import DifferenceMetric, build_difference_matrix
from .ranks import mann_whitney_u, midranks
from .simulate import (
    ParameterGrid,
    SimDesign,
    ZinbParams,
    builtin_parameter_table,
    resample_parameters,
    simulate_dataset,
)

_MASK64 = (1 << 64) - 1
_REPLICATE_SALT = 0xD1B54A32D192ED03
_GRID_SALT = 0x2545F4914F6CDD1D

EXACT_ENUMERATION_LIMIT = 14

KNOWN_METHODS = ("ulv", "ulv-adj", "ulv-wt", "wilcoxon-pseudobulk", "wilcoxon-sc")


@dataclass(frozen=True)
class DECallRule:
    """Differential-expression call: FDR cut plus a probabilistic-index band."""

    fdr_threshold: float = 0.1
    pi_lower: float = 0.45
    pi_upper: float = 0.55

    def __post_init__(self) -> None:
        if not 0.0 < self.fdr_threshold < 1.0:
            raise ValueError("fdr_threshold must lie in (0, 1)")
        if not 0.0 < self.pi_lower < self.pi_upper < 1.0:
            raise ValueError("need 0 < pi_lower < pi_upper < 1")


def bh_adjust(p_values) -> np.ndarray:
    """Benjamini-Hochberg step-up adjusted p-values, in input order."""
    p = np.asarray(p_values, dtype=float)
    if p.size == 0:
        return p.copy()
    if np.any((p < 0) | (p > 1) | ~np.isfinite(p)):
        raise ValueError("p-values must lie in [0, 1]")
    n = p.size
    order = np.argsort(p, kind="stable")
    ranked = p[order] * n / np.arange(1, n + 1)
    adjusted = np.minimum.accumulate(ranked[::-1])[::-1]
    out = np.empty(n)
    out[order] = np.minimum(adjusted, 1.0)
    return out


def call_de(
    results: Sequence[TestResult], adjusted_p, rule: DECallRule | None = None
) -> np.ndarray:
    """Flag genes whose FDR-adjusted p and PI-scale effect both qualify.

    Effects must already be on the probabilistic-index scale; logit-scale
    effects are inverse-transformed by the caller before this step.
    """
    rule = rule or DECallRule()
    adjusted = np.asarray(adjusted_p, dtype=float)
    if adjusted.size != len(results):
        raise ValueError("adjusted_p length must match results")
    effects = np.array([r.effect for r in results])
    outside = (effects < rule.pi_lower) | (effects > rule.pi_upper)
    return (adjusted < rule.fdr_threshold) & outside


def pi_scale_effect(effect: float, metric: DifferenceMetric) -> float:
    """Map a test effect back to the probabilistic-index scale when possible.

    Logit effects invert through the logistic function; PI-like metrics pass
    through; separable mean/median differences have no PI-scale counterpart
    and are reported unchanged.
    """
    if metric is DifferenceMetric.LOGIT_PI:
        return 1.0 / (1.0 + math.exp(-effect))
    return effect


# ---------------------------------------------------------------------------
# Rank-sum baselines
# ---------------------------------------------------------------------------


def _exact_tail_probs(pooled: np.ndarray, m: int, u_obs: float) -> tuple[float, float]:
    ranks = midranks(pooled)
    total = pooled.size
    shift = m * (m + 1) / 2.0
    greater = 0
    less = 0
    count = 0
    for combo in itertools.combinations(range(total), m):
        u = ranks[list(combo)].sum() - shift
        if u >= u_obs - 1e-9:
            greater += 1
        if u <= u_obs + 1e-9:
            less += 1
        count += 1
    return greater / count, less / count


def _normal_tail_probs(
    case: np.ndarray, control: np.ndarray, u_obs: float
) -> tuple[float, float]:
    m, n = case.size, control.size
    total = m + n
    pooled = np.concatenate([case, control])
    _, tie_counts = np.unique(pooled, return_counts=True)
    tie_term = float((tie_counts**3 - tie_counts).sum())
    var = m * n / 12.0 * ((total + 1) - tie_term / (total * (total - 1)))
    if var <= 0:
        return 1.0, 1.0
    sd = math.sqrt(var)
    mean = m * n / 2.0
    # continuity correction toward the null in both directions
    p_greater = float(sps.norm.sf((u_obs - mean - 0.5) / sd))
    p_less = float(sps.norm.cdf((u_obs - mean + 0.5) / sd))
    return p_greater, p_less


def exact_rank_sum_pvalue(
    case_summaries,
    control_summaries,
    alternative: str = "two-sided",
    enumeration_limit: int = EXACT_ENUMERATION_LIMIT,
) -> float:
    """Rank-sum p-value on subject-level summaries.

    With m + n up to the enumeration limit, every group assignment of the
    pooled summaries is enumerated and assignments at least as extreme as
    the observed U are counted, so one-sided p-values are never below
    1 / C(m + n, m). Larger samples fall back to the normal approximation
    with tie and continuity corrections. Two-sided p-values double the
    smaller one-sided value, capped at 1.
    """
    case = np.asarray(case_summaries, dtype=float)
    control = np.asarray(control_summaries, dtype=float)
    u_obs = mann_whitney_u(case, control)
    m, n = case.size, control.size
    if m + n <= enumeration_limit:
        p_greater, p_less = _exact_tail_probs(
            np.concatenate([case, control]), m, u_obs
        )
    else:
        p_greater, p_less = _normal_tail_probs(case, control, u_obs)
    if alternative == "greater":
        return p_greater
    if alternative == "less":
        return p_less
    if alternative == "two-sided":
        return min(1.0, 2.0 * min(p_greater, p_less))
    raise ValueError(f"unknown alternative {alternative!r}")


def cell_level_rank_sum_pvalue(
    case_cells, control_cells, alternative: str = "two-sided"
) -> float:
    """Rank-sum p-value treating pooled cells as independent units.

    Known-invalid baseline for clustered data; kept for calibration
    demonstrations. Normal approximation with tie and continuity
    corrections.
    """
    case = np.asarray(case_cells, dtype=float)
    control = np.asarray(control_cells, dtype=float)
    u_obs = mann_whitney_u(case, control)
    p_greater, p_less = _normal_tail_probs(case, control, u_obs)
    if alternative == "greater":
        return p_greater
    if alternative == "less":
        return p_less
    if alternative == "two-sided":
        return min(1.0, 2.0 * min(p_greater, p_less))
    raise ValueError(f"unknown alternative {alternative!r}")


def subject_summaries(
    values_by_subject: Mapping[str, np.ndarray],
    subjects: Sequence[str],
    summary: str = "mean",
) -> np.ndarray:
    """Per-subject summary values: mean, median, or nonzero proportion."""
    if summary == "mean":
        return np.array([np.mean(values_by_subject[s]) for s in subjects])
    if summary == "median":
        return np.array([np.median(values_by_subject[s]) for s in subjects])
    if summary == "nonzero":
        return np.array(
            [np.count_nonzero(values_by_subject[s]) / len(values_by_subject[s]) for s in subjects]
        )
    raise ValueError(f"unknown summary {summary!r}")


# ---------------------------------------------------------------------------
# Method registry
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class GeneData:
    """One gene's cell values grouped by subject, plus the study layout."""

    values_by_subject: Mapping[str, np.ndarray]
    case_ids: tuple[str, ...]
    control_ids: tuple[str, ...]
    covariates: np.ndarray | None = None  # (m + n, p), cases then controls


def run_method(
    method: str,
    data: GeneData,
    metric: DifferenceMetric = DifferenceMetric.PI,
    normal_approx: bool = False,
    pseudobulk_summary: str = "mean",
    gene_id: str = "",
) -> TestResult:
    """Run one registered method on one gene and return its test result."""
    if method == "ulv":
        D = build_difference_matrix(
            data.values_by_subject, data.case_ids, data.control_ids, metric
        )
        return closed_form_test(
            D, normal_approx=normal_approx, gene_id=gene_id, method="ulv-closed-form"
        )
    if method in ("ulv-adj", "ulv-wt", "ulv-adj-wt"):
        D = build_difference_matrix(
            data.values_by_subject, data.case_ids, data.control_ids, metric
        )
        weighted = method in ("ulv-wt", "ulv-adj-wt")
        adjusted = method in ("ulv-adj", "ulv-adj-wt")
        if adjusted and data.covariates is None:
            raise ValueError(f"method {method!r} needs covariates")
        config = LatentModelConfig(
            covariates=data.covariates if adjusted else None, weighted=weighted
        )
        fit = fit_latent_model(D, config)
        return wald_test(fit, normal_approx=normal_approx, gene_id=gene_id, method=method)
    if method == "wilcoxon-pseudobulk":
        case = subject_summaries(data.values_by_subject, data.case_ids, pseudobulk_summary)
        control = subject_summaries(
            data.values_by_subject, data.control_ids, pseudobulk_summary
        )
        p = exact_rank_sum_pvalue(case, control)
        u = mann_whitney_u(case, control)
        effect = u / (case.size * control.size)
        stat = u - case.size * control.size / 2.0
        return TestResult(
            gene_id, effect, stat, float("nan"), p, "wilcoxon-pseudobulk"
        )
    if method == "wilcoxon-sc":
        case = np.concatenate([data.values_by_subject[s] for s in data.case_ids])
        control = np.concatenate([data.values_by_subject[s] for s in data.control_ids])
        p = cell_level_rank_sum_pvalue(case, control)
        u = mann_whitney_u(case, control)
        effect = u / (case.size * control.size)
        stat = u - case.size * control.size / 2.0
        return TestResult(gene_id, effect, stat, float("nan"), p, "wilcoxon-sc")
    raise ValueError(f"unknown method {method!r}; known: {KNOWN_METHODS}")


# ---------------------------------------------------------------------------
# Calibration harness
# ---------------------------------------------------------------------------


@dataclass
class CalibrationSummary:
    """Per-replicate rejection rates for each method and significance level."""

    alpha_levels: tuple[float, ...]
    methods: tuple[str, ...]
    n_replicates: int
    n_genes: int
    type1: dict[str, np.ndarray]  # method -> (n_replicates, n_alphas)
    power: dict[str, np.ndarray] | None = None

    def mean_type1(self, method: str) -> np.ndarray:
        return self.type1[method].mean(axis=0)

    def mean_power(self, method: str) -> np.ndarray:
        if self.power is None:
            raise ValueError("no differential genes were simulated")
        return self.power[method].mean(axis=0)

    def rows(self, kind: str = "type1"):
        """Long-form (method, alpha, replicate, rejection_rate) records."""
        table = self.type1 if kind == "type1" else self.power
        if table is None:
            return
        for method in self.methods:
            rates = table[method]
            for rep in range(self.n_replicates):
                for a, alpha in enumerate(self.alpha_levels):
                    yield method, alpha, rep, float(rates[rep, a])


def replicate_seed(seed: int, replicate: int) -> int:
    return (seed ^ (_REPLICATE_SALT * (replicate + 1))) & _MASK64


def _calibrate_replicate(task):
    """One calibration replicate; a pure function of its argument tuple."""
    design, methods, metric, pseudobulk_summary, alphas, reference, rep_seed = task
    grid = resample_parameters(
        reference,
        design.n_genes,
        design.n_subjects,
        np.random.default_rng((rep_seed ^ _GRID_SALT) & _MASK64),
    )
    ds = simulate_dataset(replace(design, seed=rep_seed), grid)
    p_by_method = _replicate_pvalues(ds, methods, metric, pseudobulk_summary)
    null_mask = np.array([not t.is_de for t in ds.truth])
    de_mask = ~null_mask
    t1 = {m: np.zeros(len(alphas)) for m in methods}
    pw = {m: np.zeros(len(alphas)) for m in methods}
    for method in methods:
        p = p_by_method[method]
        for a, alpha in enumerate(alphas):
            if null_mask.any():
                t1[method][a] = float(np.mean(p[null_mask] <= alpha))
            if de_mask.any():
                pw[method][a] = float(np.mean(p[de_mask] <= alpha))
    return t1, pw, bool(de_mask.any())


def calibrate(
    methods: Sequence[str],
    design: SimDesign,
    alpha_levels: Sequence[float] = (0.001, 0.01, 0.05, 0.2),
    n_replicates: int = 100,
    seed: int = 0,
    reference: Sequence[ZinbParams] | None = None,
    metric: DifferenceMetric = DifferenceMetric.PI,
    pseudobulk_summary: str = "mean",
    n_threads: int = 1,
) -> CalibrationSummary:
    """Simulate replicates and record per-replicate rejection rates.

    Every replicate resamples a fresh parameter grid, simulates a dataset
    from the design, runs each method over all genes, and records the
    rejection fraction at each significance level separately for true-null
    and true-differential genes. Replicate seeds derive deterministically
    from the base seed and replicates are evaluated independently, so
    results are identical across runs and across any parallel schedule.
    """
    for method in methods:
        if method not in KNOWN_METHODS:
            raise ValueError(f"unknown method {method!r}; known: {KNOWN_METHODS}")
    reference = reference if reference is not None else builtin_parameter_table()
    alphas = tuple(float(a) for a in alpha_levels)
    tasks = [
        (design, tuple(methods), metric, pseudobulk_summary, alphas, reference,
         replicate_seed(seed, rep))
        for rep in range(n_replicates)
    ]
    if n_threads > 1:
        from concurrent.futures import ProcessPoolExecutor

        with ProcessPoolExecutor(max_workers=n_threads) as pool:
            outcomes = list(pool.map(_calibrate_replicate, tasks))
    else:
        outcomes = [_calibrate_replicate(t) for t in tasks]

    t1 = {m: np.zeros((n_replicates, len(alphas))) for m in methods}
    pw = {m: np.zeros((n_replicates, len(alphas))) for m in methods}
    any_de = False
    for rep, (rep_t1, rep_pw, rep_de) in enumerate(outcomes):
        any_de = any_de or rep_de
        for method in methods:
            t1[method][rep] = rep_t1[method]
            pw[method][rep] = rep_pw[method]

    return CalibrationSummary(
        alpha_levels=alphas,
        methods=tuple(methods),
        n_replicates=n_replicates,
        n_genes=design.n_genes,
        type1=t1,
        power=pw if any_de else None,
    )


def _replicate_pvalues(
    ds,
    methods: Sequence[str],
    metric: DifferenceMetric,
    pseudobulk_summary: str,
) -> dict[str, np.ndarray]:
    from .io import subject_column_indices

    groups = ds.metadata.subjects_by_condition()
    case_ids = tuple(groups["case"])
    control_ids = tuple(groups["control"])
    columns = subject_column_indices(ds.counts, ds.metadata)
    ordered = case_ids + control_ids
    covariates = ds.metadata.covariate_matrix(ordered, ds.metadata.covariate_names)

    out = {m: np.empty(ds.counts.n_genes) for m in methods}
    for g in range(ds.counts.n_genes):
        row = ds.counts.gene_row(g)
        values = {s: row[columns[s]] for s in ordered}
        data = GeneData(values, case_ids, control_ids, covariates)
        for method in methods:
            out[method][g] = run_method(
                method,
                data,
                metric=metric,
                pseudobulk_summary=pseudobulk_summary,
                gene_id=ds.counts.gene_ids[g],
            ).p_value
    return out


def write_calibration_rows(summary: CalibrationSummary, path, kind: str = "type1") -> None:
    """Write long-form calibration rates: method, alpha, replicate, rejection_rate."""
    with open(path, "wt", encoding="utf-8") as fh:
        fh.write("method\talpha\treplicate\trejection_rate\n")
        for method, alpha, rep, rate in summary.rows(kind):
            fh.write(f"{method}\t{alpha:g}\t{rep}\t{rate:.6g}\n")


def plot_calibration(summary: CalibrationSummary, path, kind: str = "type1") -> None:
    """Boxplots of per-replicate rates by method and significance level."""
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    table = summary.type1 if kind == "type1" else summary.power
    if table is None:
        raise ValueError("no differential genes were simulated")
    n_alpha = len(summary.alpha_levels)
    fig, axes = plt.subplots(1, n_alpha, figsize=(4 * n_alpha, 4), squeeze=False)
    for a, alpha in enumerate(summary.alpha_levels):
        ax = axes[0, a]
        ax.boxplot(
            [table[m][:, a] for m in summary.methods],
            tick_labels=list(summary.methods),
        )
        if kind == "type1":
            ax.axhline(alpha, linestyle="--", color="grey")
        ax.set_title(f"alpha = {alpha:g}")
        ax.set_ylabel("rejection rate" if a == 0 else "")
        ax.tick_params(axis="x", rotation=45)
    fig.tight_layout()
    fig.savefig(path, dpi=150)
    plt.close(fig)
