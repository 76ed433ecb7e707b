"""Synthetic clustered count data from a zero-inflated negative binomial model.

Cell-level counts for one gene and subject are drawn by sampling a
cell-specific mean from N(mu, sigma^2) (floored at a small positive value),
dropping the count to zero with the dropout probability, and otherwise
drawing from a negative binomial with that mean and dispersion phi, where
the variance is mean + mean^2 / phi. Differential genes modify the case
group's (mu, phi) through the fold-change transform; covariate effects
scale subject means by exp(beta * x). A label-permutation generator
supports null-data construction from real designs.
"""

from __future__ import annotations

import itertools
import math
from dataclasses import dataclass, field, replace
from typing import Mapping, Sequence

import numpy as np

MEAN_FLOOR = 1e-6
_MASK64 = (1 << 64) - 1
_SIZES_SALT = 0x9E3779B97F4A7C15


@dataclass(frozen=True)
class ZinbParams:
    """Subject-level generative parameters for one gene.

    mu and sigma describe the normal distribution of cell-level means, phi
    is the negative binomial dispersion (variance mu + mu^2/phi), and
    dropout is the probability of forcing a zero.
    """

    mu: float
    phi: float
    dropout: float
    sigma: float

    def __post_init__(self) -> None:
        for name in ("mu", "phi", "dropout", "sigma"):
            if not math.isfinite(getattr(self, name)):
                raise ValueError(f"{name} must be finite")
        if self.mu <= 0 or self.phi <= 0:
            raise ValueError("mu and phi must be strictly positive")
        if not 0.0 <= self.dropout <= 1.0:
            raise ValueError("dropout must lie in [0, 1]")
        if self.sigma < 0:
            raise ValueError("sigma must be non-negative")


@dataclass(frozen=True)
class SimDesign:
    """Design of one simulated dataset.

    cells_per_subject is either a fixed integer or an inclusive (low, high)
    range sampled per subject from a discrete uniform distribution. The
    first n_de_genes genes receive the fold change in the case group.
    covariate_values, ordered cases then controls, default to the standard
    confounded layout: cases equally spaced on [-0.9, 1.1] and controls on
    [-1, 1].
    """

    n_case_subjects: int
    n_control_subjects: int
    cells_per_subject: int | tuple[int, int]
    n_genes: int
    fold_change: float = 1.0
    n_de_genes: int = 0
    covariate_beta: float = 0.0
    covariate_values: tuple[float, ...] | None = None
    seed: int = 0

    def __post_init__(self) -> None:
        if self.n_case_subjects < 1 or self.n_control_subjects < 1:
            raise ValueError("need at least one subject per group")
        if self.n_genes < 1:
            raise ValueError("n_genes must be positive")
        if isinstance(self.cells_per_subject, tuple):
            lo, hi = self.cells_per_subject
            if lo < 1 or hi < lo:
                raise ValueError("cell-count range must satisfy 1 <= low <= high")
        elif self.cells_per_subject < 1:
            raise ValueError("cells_per_subject must be positive")
        if self.fold_change < 1.0:
            raise ValueError("fold_change must be >= 1")
        if not 0 <= self.n_de_genes <= self.n_genes:
            raise ValueError("n_de_genes must lie in [0, n_genes]")
        if self.covariate_values is not None:
            expected = self.n_case_subjects + self.n_control_subjects
            if len(self.covariate_values) != expected:
                raise ValueError(f"covariate_values must have length {expected}")

    @property
    def n_subjects(self) -> int:
        return self.n_case_subjects + self.n_control_subjects

    def resolved_covariates(self) -> np.ndarray:
        if self.covariate_values is not None:
            return np.asarray(self.covariate_values, dtype=float)
        return default_covariate_layout(self.n_case_subjects, self.n_control_subjects)


def default_covariate_layout(n_case: int, n_control: int) -> np.ndarray:
    """Confounded fixed covariate: cases on [-0.9, 1.1], controls on [-1, 1]."""
    return np.concatenate(
        [np.linspace(-0.9, 1.1, n_case), np.linspace(-1.0, 1.0, n_control)]
    )


def _zinb_draws(
    mu: float, phi: float, dropout: float, sigma: float, size: int, rng
) -> np.ndarray:
    means = rng.normal(mu, sigma, size) if sigma > 0 else np.full(size, mu)
    means = np.maximum(means, MEAN_FLOOR)
    counts = rng.negative_binomial(phi, phi / (phi + means))
    if dropout > 0:
        counts = np.where(rng.random(size) < dropout, 0, counts)
    return counts.astype(np.int64)


def sample_zinb(params: ZinbParams, rng: np.random.Generator) -> int:
    """Draw one zero-inflated negative binomial count."""
    return int(
        _zinb_draws(params.mu, params.phi, params.dropout, params.sigma, 1, rng)[0]
    )


def fold_change_transform(mu: float, phi: float, r: float) -> tuple[float, float]:
    """Mean/dispersion pair realizing a fold change r on the case group.

    Returns (mu / r, phi * mu / (mu + (1 - r) * phi)); r = 1 is the
    identity. Raises when the dispersion denominator is not positive.
    """
    if r < 1.0:
        raise ValueError("fold change must be >= 1")
    denom = mu + (1.0 - r) * phi
    if denom <= 0.0:
        raise ValueError("fold change exceeds dispersion-feasible range")
    return mu / r, phi * mu / denom


def apply_covariate_effect(mu: float, beta: float, x: float) -> float:
    """Scale a subject-level mean by exp(beta * x)."""
    if mu <= 0:
        raise ValueError("mu must be strictly positive")
    return mu * math.exp(beta * x)


@dataclass(frozen=True)
class ParameterGrid:
    """n_genes x n_subjects grid of generative parameters."""

    mu: np.ndarray
    phi: np.ndarray
    dropout: np.ndarray
    sigma: np.ndarray

    @property
    def shape(self) -> tuple[int, int]:
        return self.mu.shape

    def cell(self, gene: int, subject: int) -> ZinbParams:
        return ZinbParams(
            mu=float(self.mu[gene, subject]),
            phi=float(self.phi[gene, subject]),
            dropout=float(self.dropout[gene, subject]),
            sigma=float(self.sigma[gene, subject]),
        )


def resample_parameters(
    reference: Sequence[ZinbParams],
    n_genes: int,
    n_subjects: int,
    rng: np.random.Generator,
) -> ParameterGrid:
    """Fill an n_genes x n_subjects grid by sampling rows with replacement."""
    if len(reference) == 0:
        raise ValueError("reference parameter table is empty")
    idx = rng.integers(0, len(reference), size=(n_genes, n_subjects))
    mu = np.array([p.mu for p in reference])
    phi = np.array([p.phi for p in reference])
    dropout = np.array([p.dropout for p in reference])
    sigma = np.array([p.sigma for p in reference])
    return ParameterGrid(mu[idx], phi[idx], dropout[idx], sigma[idx])


def builtin_parameter_table(n_rows: int = 240, seed: int = 20240501) -> list[ZinbParams]:
    """Synthetic default parameter table for the simulation harness.

    Stand-in for a user-supplied table estimated from real data: a
    moderately heterogeneous population of expression levels, dispersions
    and dropout rates typical of a well-expressed single-cell gene. The
    table is deterministic for a given seed.
    """
    rng = np.random.default_rng(seed)
    mu = rng.lognormal(math.log(5.0), 0.30, n_rows)
    phi = rng.lognormal(math.log(2.0), 0.40, n_rows)
    dropout = rng.uniform(0.05, 0.35, n_rows)
    sigma = mu * rng.uniform(0.05, 0.30, n_rows)
    return [
        ZinbParams(float(m), float(p), float(z), float(s))
        for m, p, z, s in zip(mu, phi, dropout, sigma)
    ]


def read_parameter_table(path) -> list[ZinbParams]:
    """Read a delimited parameter table with columns mu, phi, dropout, sigma.

    The header must name gene_id, subject_id, mu, phi, dropout and sigma;
    key columns are carried in the file for provenance but resampling
    treats rows as an unkeyed pool.
    """
    rows: list[ZinbParams] = []
    with open(path, "rt", encoding="utf-8") as fh:
        header = fh.readline().rstrip("\n").split("\t")
        required = ["gene_id", "subject_id", "mu", "phi", "dropout", "sigma"]
        if header[: len(required)] != required:
            raise ValueError(
                f"parameter table header must start with {required}, got {header}"
            )
        for lineno, line in enumerate(fh, start=2):
            if not line.strip():
                continue
            parts = line.rstrip("\n").split("\t")
            if len(parts) < 6:
                raise ValueError(f"line {lineno}: expected 6 fields, got {len(parts)}")
            try:
                rows.append(
                    ZinbParams(
                        mu=float(parts[2]),
                        phi=float(parts[3]),
                        dropout=float(parts[4]),
                        sigma=float(parts[5]),
                    )
                )
            except ValueError as exc:
                raise ValueError(f"line {lineno}: {exc}") from exc
    if not rows:
        raise ValueError("reference parameter table is empty")
    return rows


def write_parameter_table(rows: Sequence[ZinbParams], path) -> None:
    """Write a parameter table in the format read_parameter_table expects."""
    with open(path, "wt", encoding="utf-8") as fh:
        fh.write("gene_id\tsubject_id\tmu\tphi\tdropout\tsigma\n")
        for k, p in enumerate(rows):
            fh.write(f"ref{k}\tref{k}\t{p.mu:.6g}\t{p.phi:.6g}\t{p.dropout:.6g}\t{p.sigma:.6g}\n")


@dataclass(frozen=True)
class GeneTruth:
    gene_id: str
    is_de: bool
    fold_change: float


@dataclass
class SimulatedDataset:
    """Counts, study metadata and per-gene ground truth for one simulation."""

    counts: "CountMatrix"
    metadata: "StudyMetadata"
    truth: list[GeneTruth]
    skipped_genes: list[str] = field(default_factory=list)


def _gene_rng(seed: int, gene_index: int) -> np.random.Generator:
    return np.random.default_rng((seed ^ gene_index) & _MASK64)


def _draw_cluster_sizes(design: SimDesign) -> np.ndarray:
    spec = design.cells_per_subject
    if isinstance(spec, tuple):
        rng = np.random.default_rng((design.seed ^ _SIZES_SALT) & _MASK64)
        return rng.integers(spec[0], spec[1] + 1, size=design.n_subjects)
    return np.full(design.n_subjects, int(spec), dtype=int)


def simulate_dataset(design: SimDesign, params: ParameterGrid) -> SimulatedDataset:
    """Generate one clustered count dataset with known per-gene truth.

    Case subjects of differential genes get the fold-change transform of
    their (mu, phi); every subject's mean is then scaled by the covariate
    effect before drawing its cells. Genes whose parameters cannot realize
    the requested fold change are skipped and reported. Per-gene RNG
    streams are derived as seed XOR gene index, so results do not depend on
    evaluation order.
    """
    from .io import CountMatrix, StudyMetadata

    if params.shape != (design.n_genes, design.n_subjects):
        raise ValueError(
            f"parameter grid shape {params.shape} does not match design "
            f"({design.n_genes}, {design.n_subjects})"
        )
    m, n = design.n_case_subjects, design.n_control_subjects
    subjects = [f"case{i + 1}" for i in range(m)] + [f"control{j + 1}" for j in range(n)]
    conditions = ["case"] * m + ["control"] * n
    x = design.resolved_covariates()
    sizes = _draw_cluster_sizes(design)

    cell_ids: list[str] = []
    cell_subject: list[str] = []
    for subj, size in zip(subjects, sizes):
        for k in range(size):
            cell_ids.append(f"{subj}_c{k + 1}")
            cell_subject.append(subj)
    n_cells = len(cell_ids)
    col_start = np.concatenate([[0], np.cumsum(sizes)])

    kept_rows: list[np.ndarray] = []
    kept_ids: list[str] = []
    truth: list[GeneTruth] = []
    skipped: list[str] = []

    for g in range(design.n_genes):
        gene_id = f"gene{g + 1}"
        is_de = g < design.n_de_genes and design.fold_change > 1.0
        rng = _gene_rng(design.seed, g)
        mu_row = params.mu[g].astype(float).copy()
        phi_row = params.phi[g].astype(float).copy()
        if is_de:
            try:
                for s in range(m):
                    mu_row[s], phi_row[s] = fold_change_transform(
                        mu_row[s], phi_row[s], design.fold_change
                    )
            except ValueError:
                skipped.append(gene_id)
                continue
        row = np.empty(n_cells, dtype=np.int64)
        for s in range(design.n_subjects):
            mu_s = apply_covariate_effect(mu_row[s], design.covariate_beta, x[s])
            row[col_start[s] : col_start[s + 1]] = _zinb_draws(
                mu_s,
                phi_row[s],
                float(params.dropout[g, s]),
                float(params.sigma[g, s]),
                int(sizes[s]),
                rng,
            )
        kept_rows.append(row)
        kept_ids.append(gene_id)
        truth.append(GeneTruth(gene_id, is_de, design.fold_change if is_de else 1.0))

    counts = CountMatrix(
        gene_ids=tuple(kept_ids),
        cell_ids=tuple(cell_ids),
        values=np.vstack(kept_rows) if kept_rows else np.zeros((0, n_cells), dtype=np.int64),
    )
    metadata = StudyMetadata(
        cell_to_subject=dict(zip(cell_ids, cell_subject)),
        subject_to_condition=dict(zip(subjects, conditions)),
        subject_covariates={s: np.array([x[k]]) for k, s in enumerate(subjects)},
        covariate_names=("x",),
    )
    return SimulatedDataset(counts, metadata, truth, skipped)


def _condition_pools(
    subject_conditions: Sequence[tuple[str, str]]
) -> dict[str, list[str]]:
    pools: dict[str, list[str]] = {}
    for subject, condition in subject_conditions:
        pools.setdefault(condition, []).append(subject)
    return pools


def permute_labels(
    subject_conditions: Sequence[tuple[str, str]],
    group_composition: Mapping[str, int],
    n_permutations: int,
    rng: np.random.Generator,
    enumeration_cap: int = 500_000,
) -> list[tuple[str, ...]]:
    """Distinct pseudo-group assignments for label-permutation null data.

    Each assignment is the sorted tuple of subjects placed in the first
    pseudo-group; the composition fixes how many subjects of each original
    condition that group contains. Assignments are sampled uniformly
    without replacement from all products of per-condition combinations;
    when n_permutations is at least the total count, all assignments are
    enumerated.
    """
    if n_permutations < 1:
        raise ValueError("n_permutations must be positive")
    pools = _condition_pools(subject_conditions)
    for condition, k in group_composition.items():
        if condition not in pools:
            raise ValueError(f"no subjects with condition {condition!r}")
        if not 0 <= k <= len(pools[condition]):
            raise ValueError(
                f"cannot place {k} of {len(pools[condition])} "
                f"{condition!r} subjects in one group"
            )
    total = 1
    for condition, k in group_composition.items():
        total *= math.comb(len(pools[condition]), k)
    conditions = sorted(group_composition)

    def assignment_from_combos(combos: Sequence[Sequence[str]]) -> tuple[str, ...]:
        members: list[str] = []
        for chosen in combos:
            members.extend(chosen)
        return tuple(sorted(members))

    if n_permutations >= total or total <= enumeration_cap:
        per_condition = [
            list(itertools.combinations(pools[c], group_composition[c]))
            for c in conditions
        ]
        all_assignments = [
            assignment_from_combos(combos)
            for combos in itertools.product(*per_condition)
        ]
        if n_permutations >= total:
            return all_assignments
        chosen = rng.choice(total, size=n_permutations, replace=False)
        return [all_assignments[i] for i in np.sort(chosen)]

    # large space: rejection-sample distinct assignments
    seen: set[tuple[str, ...]] = set()
    out: list[tuple[str, ...]] = []
    while len(out) < n_permutations:
        combos = []
        for c in conditions:
            pool = pools[c]
            take = rng.choice(len(pool), size=group_composition[c], replace=False)
            combos.append([pool[i] for i in take])
        assignment = assignment_from_combos(combos)
        if assignment not in seen:
            seen.add(assignment)
            out.append(assignment)
    return out
