"""Shared helpers for building difference matrices and simulated genes."""

import numpy as np
import pytest

from ulv.io import subject_column_indices
from ulv.pairwise import DifferenceMatrix, DifferenceMetric, build_difference_matrix
from ulv.simulate import (
    SimDesign,
    builtin_parameter_table,
    resample_parameters,
    simulate_dataset,
)


def matrix_from(values, metric=DifferenceMetric.PI, null_center=None, sizes=None):
    values = np.asarray(values, dtype=float)
    m, n = values.shape
    case_sizes = np.full(m, 100) if sizes is None else np.asarray(sizes[0])
    control_sizes = np.full(n, 100) if sizes is None else np.asarray(sizes[1])
    return DifferenceMatrix(
        values=values,
        case_ids=tuple(f"case{i}" for i in range(m)),
        control_ids=tuple(f"ctrl{j}" for j in range(n)),
        case_sizes=case_sizes,
        control_sizes=control_sizes,
        metric=metric,
        null_center=metric.null_center if null_center is None else null_center,
    )


def random_latent_matrix(rng, m=5, n=5, mu=0.6, s1=0.1, s0=0.08, resid=0.04):
    """Draw from the latent additive model, clipped onto the PI scale."""
    a = rng.normal(mu, s1, m)
    b = rng.normal(0.0, s0, n)
    d = np.clip(a[:, None] - b[None, :] + rng.normal(0, resid, (m, n)), 0.0, 1.0)
    return matrix_from(d)


def simulated_pi_matrices(n_genes, seed, m=5, n=5, cells=100):
    """Per-gene PI matrices from the count simulator under the null."""
    design = SimDesign(m, n, cells, n_genes=n_genes, seed=seed)
    grid = resample_parameters(
        builtin_parameter_table(), n_genes, m + n, np.random.default_rng(seed + 1)
    )
    ds = simulate_dataset(design, grid)
    groups = ds.metadata.subjects_by_condition()
    columns = subject_column_indices(ds.counts, ds.metadata)
    out = []
    for g in range(ds.counts.n_genes):
        row = ds.counts.gene_row(g)
        values = {s: row[columns[s]] for s in ds.metadata.subject_to_condition}
        out.append(
            build_difference_matrix(
                values, sorted(groups["case"]), sorted(groups["control"]), DifferenceMetric.PI
            )
        )
    return out


@pytest.fixture(scope="session")
def null_pi_matrices():
    return simulated_pi_matrices(100, seed=424242)
