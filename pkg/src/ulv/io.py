"""Data ingestion, QC filtering, CLR normalization, and result serialization."""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from enum import Enum
from typing import Mapping, Sequence

import numpy as np
import scipy.sparse as sp

logger = logging.getLogger(__name__)


class MatrixFormat(Enum):
    DENSE_TSV = "dense"
    MATRIX_MARKET = "mtx"


class ExprFractionScope(Enum):
    """Which cells the gene expression-fraction filter is computed over."""

    ALL_CELLS = "all"
    CASE_CELLS = "case"


@dataclass(frozen=True)
class CountMatrix:
    """Genes x cells matrix of non-negative expression values.

    values may be a dense array or a scipy CSR matrix for zero-heavy data.
    """

    gene_ids: tuple[str, ...]
    cell_ids: tuple[str, ...]
    values: object

    def __post_init__(self) -> None:
        shape = self.values.shape
        if shape != (len(self.gene_ids), len(self.cell_ids)):
            raise ValueError(
                f"matrix shape {shape} inconsistent with "
                f"{len(self.gene_ids)} genes x {len(self.cell_ids)} cells"
            )
        _check_unique(self.gene_ids, "gene")
        _check_unique(self.cell_ids, "cell")
        if self.min_value() < 0:
            raise ValueError("count matrix contains negative values")

    @property
    def n_genes(self) -> int:
        return len(self.gene_ids)

    @property
    def n_cells(self) -> int:
        return len(self.cell_ids)

    def min_value(self) -> float:
        if sp.issparse(self.values):
            data = self.values.data
            return float(data.min()) if data.size else 0.0
        return float(self.values.min()) if self.values.size else 0.0

    def dense(self) -> np.ndarray:
        if sp.issparse(self.values):
            return np.asarray(self.values.todense())
        return np.asarray(self.values)

    def gene_row(self, gene_index: int) -> np.ndarray:
        """Dense 1-D vector of one gene's values across all cells."""
        if sp.issparse(self.values):
            return np.asarray(self.values[gene_index].todense()).ravel()
        return np.asarray(self.values[gene_index]).ravel()


def _check_unique(ids: Sequence[str], what: str) -> None:
    seen: set[str] = set()
    for i in ids:
        if i in seen:
            raise ValueError(f"duplicate {what} id {i!r}")
        seen.add(i)


@dataclass(frozen=True)
class StudyMetadata:
    """Cell-to-subject and subject-to-condition maps plus subject covariates."""

    cell_to_subject: Mapping[str, str]
    subject_to_condition: Mapping[str, str]
    subject_covariates: Mapping[str, np.ndarray] = field(default_factory=dict)
    covariate_names: tuple[str, ...] = ()

    def __post_init__(self) -> None:
        for cell, subject in self.cell_to_subject.items():
            if subject not in self.subject_to_condition:
                raise ValueError(f"cell {cell!r} maps to unknown subject {subject!r}")
        p = len(self.covariate_names)
        for subject, vec in self.subject_covariates.items():
            if subject not in self.subject_to_condition:
                raise ValueError(f"covariates given for unknown subject {subject!r}")
            if len(vec) != p:
                raise ValueError(
                    f"subject {subject!r} has {len(vec)} covariates, expected {p}"
                )

    @property
    def cluster_sizes(self) -> dict[str, int]:
        sizes: dict[str, int] = {}
        for subject in self.cell_to_subject.values():
            sizes[subject] = sizes.get(subject, 0) + 1
        return sizes

    def subjects_by_condition(self) -> dict[str, list[str]]:
        groups: dict[str, list[str]] = {}
        for subject, condition in self.subject_to_condition.items():
            groups.setdefault(condition, []).append(subject)
        return groups

    def covariate_matrix(self, subjects: Sequence[str], names: Sequence[str]) -> np.ndarray:
        """Per-subject covariate matrix restricted to the named columns."""
        missing = [n for n in names if n not in self.covariate_names]
        if missing:
            raise ValueError(
                f"unknown covariate column(s) {missing}; "
                f"available: {list(self.covariate_names)}"
            )
        cols = [self.covariate_names.index(n) for n in names]
        rows = []
        for s in subjects:
            if s not in self.subject_covariates:
                raise ValueError(f"no covariates recorded for subject {s!r}")
            rows.append(np.asarray(self.subject_covariates[s], dtype=float)[cols])
        return np.vstack(rows)


def subject_column_indices(
    counts: CountMatrix, metadata: StudyMetadata
) -> dict[str, np.ndarray]:
    """Column indices of each subject's cells, in matrix order."""
    by_subject: dict[str, list[int]] = {}
    for idx, cell in enumerate(counts.cell_ids):
        subject = metadata.cell_to_subject.get(cell)
        if subject is None:
            raise ValueError(f"cell {cell!r} missing from metadata")
        by_subject.setdefault(subject, []).append(idx)
    return {s: np.asarray(ix, dtype=int) for s, ix in by_subject.items()}


# ---------------------------------------------------------------------------
# Readers and writers
# ---------------------------------------------------------------------------


def _parse_float(token: str, path, lineno: int) -> float:
    try:
        v = float(token)
    except ValueError:
        raise ValueError(f"{path}:{lineno}: unparseable numeric {token!r}") from None
    if v < 0:
        raise ValueError(f"{path}:{lineno}: negative value {token!r}")
    return v


def _read_dense_tsv(path) -> CountMatrix:
    with open(path, "rt", encoding="utf-8") as fh:
        header = fh.readline().rstrip("\n")
        if not header:
            raise ValueError(f"{path}:1: empty header")
        cell_ids = header.split("\t")[1:]
        if not cell_ids:
            raise ValueError(f"{path}:1: header lists no cell ids")
        gene_ids: list[str] = []
        rows: list[np.ndarray] = []
        for lineno, line in enumerate(fh, start=2):
            if not line.strip():
                continue
            parts = line.rstrip("\n").split("\t")
            if len(parts) != len(cell_ids) + 1:
                raise ValueError(
                    f"{path}:{lineno}: expected {len(cell_ids) + 1} fields, "
                    f"got {len(parts)}"
                )
            gene_ids.append(parts[0])
            rows.append(
                np.array([_parse_float(t, path, lineno) for t in parts[1:]], dtype=float)
            )
    values = np.vstack(rows) if rows else np.zeros((0, len(cell_ids)))
    return CountMatrix(tuple(gene_ids), tuple(cell_ids), values)


def _sidecar_paths(path) -> tuple[str, str]:
    base = str(path)
    if base.endswith(".mtx"):
        base = base[: -len(".mtx")]
    return base + ".genes.txt", base + ".cells.txt"


def _read_id_file(path) -> tuple[str, ...]:
    with open(path, "rt", encoding="utf-8") as fh:
        return tuple(line.rstrip("\n") for line in fh if line.strip())


def _read_matrix_market(path) -> CountMatrix:
    genes_path, cells_path = _sidecar_paths(path)
    gene_ids = _read_id_file(genes_path)
    cell_ids = _read_id_file(cells_path)
    with open(path, "rt", encoding="utf-8") as fh:
        first = fh.readline().rstrip("\n")
        if not first.startswith("%%MatrixMarket matrix coordinate"):
            raise ValueError(f"{path}:1: not a MatrixMarket coordinate file")
        lineno = 1
        line = fh.readline()
        lineno += 1
        while line.startswith("%"):
            line = fh.readline()
            lineno += 1
        dims = line.split()
        if len(dims) != 3:
            raise ValueError(f"{path}:{lineno}: expected 'rows cols nnz'")
        n_rows, n_cols, nnz = (int(t) for t in dims)
        if n_rows != len(gene_ids) or n_cols != len(cell_ids):
            raise ValueError(
                f"{path}:{lineno}: dimension mismatch: file says "
                f"{n_rows} x {n_cols}, sidecars list {len(gene_ids)} genes "
                f"and {len(cell_ids)} cells"
            )
        ii = np.empty(nnz, dtype=int)
        jj = np.empty(nnz, dtype=int)
        vv = np.empty(nnz, dtype=float)
        for k in range(nnz):
            line = fh.readline()
            lineno += 1
            parts = line.split()
            if len(parts) != 3:
                raise ValueError(f"{path}:{lineno}: expected 'row col value'")
            i, j = int(parts[0]) - 1, int(parts[1]) - 1
            if not (0 <= i < n_rows and 0 <= j < n_cols):
                raise ValueError(f"{path}:{lineno}: coordinate out of range")
            ii[k], jj[k] = i, j
            vv[k] = _parse_float(parts[2], path, lineno)
    coo = sp.coo_matrix((vv, (ii, jj)), shape=(n_rows, n_cols))
    if coo.nnz != len(np.unique(ii * n_cols + jj)):
        raise ValueError(f"{path}: duplicate coordinate entries")
    return CountMatrix(gene_ids, cell_ids, coo.tocsr())


def read_counts(path, format: MatrixFormat = MatrixFormat.DENSE_TSV) -> CountMatrix:
    """Read a count matrix.

    DENSE_TSV files carry gene rows and cell columns with a header row of
    cell ids and a leading gene-id column. MATRIX_MARKET files are
    coordinate format with '<base>.genes.txt' and '<base>.cells.txt'
    sidecar id lists; unlisted entries are zero. Parsing is strict and
    reports the offending line number.
    """
    if format is MatrixFormat.DENSE_TSV:
        return _read_dense_tsv(path)
    return _read_matrix_market(path)


def write_counts_dense(counts: CountMatrix, path) -> None:
    """Write a count matrix in the dense TSV layout read_counts accepts."""
    dense = counts.dense()
    with open(path, "wt", encoding="utf-8") as fh:
        fh.write("gene_id\t" + "\t".join(counts.cell_ids) + "\n")
        for g, gene in enumerate(counts.gene_ids):
            fh.write(gene + "\t" + "\t".join(_fmt(v) for v in dense[g]) + "\n")


def read_metadata(path) -> StudyMetadata:
    """Read cell metadata: cell_id, subject_id, condition, then covariates.

    Covariate values must be numeric and complete; missing values are
    rejected rather than imputed. Covariates must agree across all cells of
    a subject.
    """
    with open(path, "rt", encoding="utf-8") as fh:
        header = fh.readline().rstrip("\n").split("\t")
        if header[:3] != ["cell_id", "subject_id", "condition"]:
            raise ValueError(
                f"{path}:1: header must start with cell_id, subject_id, condition"
            )
        covariate_names = tuple(header[3:])
        cell_to_subject: dict[str, str] = {}
        subject_to_condition: dict[str, str] = {}
        subject_covariates: dict[str, np.ndarray] = {}
        for lineno, line in enumerate(fh, start=2):
            if not line.strip():
                continue
            parts = line.rstrip("\n").split("\t")
            if len(parts) != len(header):
                raise ValueError(
                    f"{path}:{lineno}: expected {len(header)} fields, got {len(parts)}"
                )
            cell, subject, condition = parts[:3]
            if cell in cell_to_subject:
                raise ValueError(f"{path}:{lineno}: duplicate cell id {cell!r}")
            cell_to_subject[cell] = subject
            if subject in subject_to_condition:
                if subject_to_condition[subject] != condition:
                    raise ValueError(
                        f"{path}:{lineno}: subject {subject!r} has conflicting conditions"
                    )
            else:
                subject_to_condition[subject] = condition
            if covariate_names:
                vals = []
                for name, token in zip(covariate_names, parts[3:]):
                    if token == "" or token.upper() in ("NA", "NAN"):
                        raise ValueError(
                            f"{path}:{lineno}: missing covariate {name!r} "
                            f"for subject {subject!r}"
                        )
                    try:
                        vals.append(float(token))
                    except ValueError:
                        raise ValueError(
                            f"{path}:{lineno}: covariate {name!r} not numeric: {token!r}"
                        ) from None
                vec = np.asarray(vals)
                prev = subject_covariates.get(subject)
                if prev is not None and not np.array_equal(prev, vec):
                    raise ValueError(
                        f"{path}:{lineno}: subject {subject!r} has conflicting covariates"
                    )
                subject_covariates[subject] = vec
    return StudyMetadata(
        cell_to_subject=cell_to_subject,
        subject_to_condition=subject_to_condition,
        subject_covariates=subject_covariates,
        covariate_names=covariate_names,
    )


def write_metadata(metadata: StudyMetadata, path) -> None:
    with open(path, "wt", encoding="utf-8") as fh:
        cols = ["cell_id", "subject_id", "condition", *metadata.covariate_names]
        fh.write("\t".join(cols) + "\n")
        for cell, subject in metadata.cell_to_subject.items():
            row = [cell, subject, metadata.subject_to_condition[subject]]
            if metadata.covariate_names:
                row.extend(
                    _fmt(v) for v in metadata.subject_covariates[subject]
                )
            fh.write("\t".join(row) + "\n")


# ---------------------------------------------------------------------------
# QC and normalization
# ---------------------------------------------------------------------------


def filter_qc(
    counts: CountMatrix,
    metadata: StudyMetadata,
    min_cells_per_subject: int = 0,
    min_expr_fraction: float = 0.0,
    expr_fraction_scope: ExprFractionScope = ExprFractionScope.ALL_CELLS,
    case_condition: str | None = None,
) -> tuple[CountMatrix, StudyMetadata]:
    """Drop small subjects, then rarely expressed genes.

    Subjects with fewer than min_cells_per_subject cells are removed
    (subjects at the threshold are kept). Genes are then kept only when
    their nonzero fraction strictly exceeds min_expr_fraction over the
    configured scope: all retained cells, or only cells of the case
    condition. Dropped counts are reported through the module logger.
    """
    sizes = metadata.cluster_sizes
    keep_subjects = {s for s, k in sizes.items() if k >= min_cells_per_subject}
    if not keep_subjects:
        raise ValueError("QC removed every subject")
    n_subjects_dropped = len(sizes) - len(keep_subjects)

    keep_cell_idx = np.array(
        [
            i
            for i, cell in enumerate(counts.cell_ids)
            if metadata.cell_to_subject.get(cell) in keep_subjects
        ],
        dtype=int,
    )
    if keep_cell_idx.size == 0:
        raise ValueError("QC removed every cell")
    kept_cells = tuple(counts.cell_ids[i] for i in keep_cell_idx)
    values = (
        counts.values[:, keep_cell_idx]
        if not sp.issparse(counts.values)
        else counts.values[:, keep_cell_idx]
    )

    if expr_fraction_scope is ExprFractionScope.CASE_CELLS:
        if case_condition is None:
            raise ValueError("case_condition required for case-cell scope")
        scope_mask = np.array(
            [
                metadata.subject_to_condition[metadata.cell_to_subject[c]]
                == case_condition
                for c in kept_cells
            ]
        )
        if not scope_mask.any():
            raise ValueError(f"no cells with condition {case_condition!r}")
    else:
        scope_mask = np.ones(len(kept_cells), dtype=bool)

    scoped = values[:, np.flatnonzero(scope_mask)]
    if sp.issparse(scoped):
        nonzero = np.asarray((scoped != 0).sum(axis=1)).ravel()
    else:
        nonzero = (scoped != 0).sum(axis=1)
    frac = nonzero / scoped.shape[1]
    keep_genes = np.flatnonzero(frac > min_expr_fraction)
    n_genes_dropped = counts.n_genes - keep_genes.size

    logger.info(
        "QC: dropped %d subject(s) below %d cells and %d gene(s) at or below "
        "expression fraction %g (%s scope)",
        n_subjects_dropped,
        min_cells_per_subject,
        n_genes_dropped,
        min_expr_fraction,
        expr_fraction_scope.value,
    )

    filtered = CountMatrix(
        gene_ids=tuple(counts.gene_ids[g] for g in keep_genes),
        cell_ids=kept_cells,
        values=values[keep_genes],
    )
    new_meta = StudyMetadata(
        cell_to_subject={c: metadata.cell_to_subject[c] for c in kept_cells},
        subject_to_condition={
            s: metadata.subject_to_condition[s] for s in keep_subjects
        },
        subject_covariates={
            s: metadata.subject_covariates[s]
            for s in keep_subjects
            if s in metadata.subject_covariates
        },
        covariate_names=metadata.covariate_names,
    )
    return filtered, new_meta


def clr_normalize(counts: CountMatrix, pseudocount: float = 1.0) -> np.ndarray:
    """Centered log-ratio transform per cell.

    Each column is mapped to log(v + pseudocount) minus that column's mean
    log value, so every output column has mean zero.
    """
    if pseudocount <= 0:
        raise ValueError("pseudocount must be positive")
    logged = np.log(counts.dense() + pseudocount)
    return logged - logged.mean(axis=0, keepdims=True)


# ---------------------------------------------------------------------------
# Results
# ---------------------------------------------------------------------------

RESULT_COLUMNS = (
    "gene_id",
    "effect_pi",
    "statistic",
    "df",
    "p_value",
    "fdr_p",
    "is_de",
    "method",
    "metric",
    "n_case_subjects",
    "n_control_subjects",
)


@dataclass(frozen=True)
class ResultRow:
    gene_id: str
    effect_pi: float
    statistic: float
    df: float
    p_value: float
    fdr_p: float
    is_de: bool
    method: str
    metric: str
    n_case_subjects: int
    n_control_subjects: int


def _fmt(value) -> str:
    if isinstance(value, (bool, np.bool_)):
        return "true" if value else "false"
    if isinstance(value, (int, np.integer)):
        return str(int(value))
    v = float(value)
    if math.isnan(v):
        return "nan"
    return f"{v:.6g}"


def write_results(rows: Sequence[ResultRow], path) -> None:
    """Write test results as TSV, one row per gene in input order.

    Numbers carry 6 significant digits; booleans serialize as true/false.
    """
    with open(path, "wt", encoding="utf-8") as fh:
        fh.write("\t".join(RESULT_COLUMNS) + "\n")
        for r in rows:
            fh.write(
                "\t".join(
                    (
                        r.gene_id,
                        _fmt(r.effect_pi),
                        _fmt(r.statistic),
                        _fmt(r.df),
                        _fmt(r.p_value),
                        _fmt(r.fdr_p),
                        _fmt(r.is_de),
                        r.method,
                        r.metric,
                        _fmt(r.n_case_subjects),
                        _fmt(r.n_control_subjects),
                    )
                )
                + "\n"
            )


def read_results(path) -> list[ResultRow]:
    rows: list[ResultRow] = []
    with open(path, "rt", encoding="utf-8") as fh:
        header = tuple(fh.readline().rstrip("\n").split("\t"))
        if header != RESULT_COLUMNS:
            raise ValueError(f"{path}:1: unexpected results header {header}")
        for lineno, line in enumerate(fh, start=2):
            if not line.strip():
                continue
            p = line.rstrip("\n").split("\t")
            if len(p) != len(RESULT_COLUMNS):
                raise ValueError(f"{path}:{lineno}: wrong field count")
            rows.append(
                ResultRow(
                    gene_id=p[0],
                    effect_pi=float(p[1]),
                    statistic=float(p[2]),
                    df=float(p[3]),
                    p_value=float(p[4]),
                    fdr_p=float(p[5]),
                    is_de=p[6] == "true",
                    method=p[7],
                    metric=p[8],
                    n_case_subjects=int(p[9]),
                    n_control_subjects=int(p[10]),
                )
            )
    return rows


def write_truth(truth, path) -> None:
    """Write per-gene ground truth: gene_id, is_de, fold_change."""
    with open(path, "wt", encoding="utf-8") as fh:
        fh.write("gene_id\tis_de\tfold_change\n")
        for t in truth:
            fh.write(f"{t.gene_id}\t{_fmt(t.is_de)}\t{_fmt(t.fold_change)}\n")
