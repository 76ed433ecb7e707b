"""Command-line entry point: test, simulate, calibrate, permute, normalize."""

from __future__ import annotations

import argparse
import os
import sys
from concurrent.futures import ProcessPoolExecutor
from dataclasses import replace

import numpy as np

from . import io as uio
from .inference import (
    KNOWN_METHODS,
    DECallRule,
    GeneData,
    bh_adjust,
    calibrate,
    call_de,
    pi_scale_effect,
    run_method,
    write_calibration_rows,
)
from .lvm import LatentModelConfig, multi_group_test
from .pairwise import DifferenceMetric, build_difference_matrix
from .simulate import (
    SimDesign,
    builtin_parameter_table,
    permute_labels,
    read_parameter_table,
    resample_parameters,
    simulate_dataset,
)

_METRICS = {
    "pi": DifferenceMetric.PI,
    "logit-pi": DifferenceMetric.LOGIT_PI,
    "mean": DifferenceMetric.MEAN_DIFF,
    "median": DifferenceMetric.MEDIAN_DIFF,
}

PRESETS = {
    # 5v5 subjects, 100 cells, 1000 genes
    "fig3-null": dict(n_case=5, n_control=5, cells="100", genes=1000, fold_change=1.0, de_genes=0),
    "fig3-power-r15": dict(n_case=5, n_control=5, cells="100", genes=1000, fold_change=1.5, de_genes=500),
    "fig3-power-r2": dict(n_case=5, n_control=5, cells="100", genes=1000, fold_change=2.0, de_genes=500),
}


def _parse_cells(text: str) -> int | tuple[int, int]:
    if "-" in text:
        lo, hi = text.split("-", 1)
        return (int(lo), int(hi))
    return int(text)


def _threads(args) -> int:
    if args.threads is not None:
        return max(1, args.threads)
    env = os.environ.get("ULV_THREADS")
    return max(1, int(env)) if env else 1


def _write_config_sidecar(out_path: str, args, extra: dict | None = None) -> None:
    items = {k: v for k, v in sorted(vars(args).items()) if k != "func" and v is not None}
    if extra:
        items.update(extra)
    with open(out_path + ".config", "wt", encoding="utf-8") as fh:
        for key, value in items.items():
            fh.write(f"{key}={value}\n")


def _load_study(args):
    fmt = uio.MatrixFormat.DENSE_TSV if args.format == "dense" else uio.MatrixFormat.MATRIX_MARKET
    counts = uio.read_counts(args.counts, fmt)
    metadata = uio.read_metadata(args.metadata)
    missing = [c for c in counts.cell_ids if c not in metadata.cell_to_subject]
    if missing:
        raise ValueError(f"{len(missing)} cells missing from metadata, e.g. {missing[0]!r}")
    if args.min_cells or args.min_expr_frac:
        scope = (
            uio.ExprFractionScope.CASE_CELLS
            if args.expr_scope == "case"
            else uio.ExprFractionScope.ALL_CELLS
        )
        counts, metadata = uio.filter_qc(
            counts,
            metadata,
            min_cells_per_subject=args.min_cells,
            min_expr_fraction=args.min_expr_frac,
            expr_fraction_scope=scope,
            case_condition=args.case_condition,
        )
    return counts, metadata


# ---------------------------------------------------------------------------
# per-gene work, kept module level so worker processes can fork it
# ---------------------------------------------------------------------------

_WORK = {}


def _init_worker(payload) -> None:
    _WORK.update(payload)


def _test_one_gene(g: int):
    counts = _WORK["counts"]
    row = counts.gene_row(g)
    values = {s: row[cols] for s, cols in _WORK["columns"].items()}
    gene_id = counts.gene_ids[g]
    if _WORK["mode"] == "two-group":
        data = GeneData(values, _WORK["case_ids"], _WORK["control_ids"], _WORK["covariates"])
        return run_method(
            _WORK["method"],
            data,
            metric=_WORK["metric"],
            normal_approx=_WORK["normal_approx"],
            gene_id=gene_id,
        )
    matrices = {
        cond: build_difference_matrix(values, ids, _WORK["control_ids"], _WORK["metric"])
        for cond, ids in _WORK["condition_ids"].items()
    }
    config = LatentModelConfig(
        covariates=_WORK["covariates"],
        weighted=_WORK["weighted"],
        normal_approx=_WORK["normal_approx"],
    )
    return multi_group_test(matrices, config, gene_id=gene_id)


def _map_genes(n_genes: int, n_threads: int, payload):
    if n_threads <= 1:
        _init_worker(payload)
        results = [_test_one_gene(g) for g in range(n_genes)]
        _WORK.clear()
        return results
    chunk = max(1, n_genes // (n_threads * 4))
    with ProcessPoolExecutor(
        max_workers=n_threads, initializer=_init_worker, initargs=(payload,)
    ) as pool:
        return list(pool.map(_test_one_gene, range(n_genes), chunksize=chunk))


def cmd_test(args) -> int:
    counts, metadata = _load_study(args)
    metric = _METRICS[args.metric]
    groups = metadata.subjects_by_condition()
    for cond, subjects in groups.items():
        if len(subjects) < 2:
            raise ValueError(f"insufficient subjects: condition {cond!r} has {len(subjects)}")
    conditions = sorted(groups)
    if len(conditions) < 2:
        raise ValueError("need at least two conditions")

    if args.reference is not None:
        if args.reference not in groups:
            raise ValueError(
                f"unknown reference condition {args.reference!r}; available: {conditions}"
            )
        reference = args.reference
    else:
        if len(conditions) > 2:
            raise ValueError(
                f"{len(conditions)} conditions present; pick one with --reference "
                f"from {conditions}"
            )
        reference = conditions[0]

    control_ids = tuple(sorted(groups[reference]))
    other_conditions = [c for c in conditions if c != reference]
    covariate_names = [c for c in (args.covariates.split(",") if args.covariates else []) if c]

    columns = uio.subject_column_indices(counts, metadata)
    payload = {
        "counts": counts,
        "columns": columns,
        "metric": metric,
        "normal_approx": args.normal_approx,
        "control_ids": control_ids,
        "weighted": args.weighted,
    }

    if len(other_conditions) == 1:
        case_ids = tuple(sorted(groups[other_conditions[0]]))
        ordered = case_ids + control_ids
        covariates = (
            metadata.covariate_matrix(ordered, covariate_names) if covariate_names else None
        )
        if covariate_names and args.weighted:
            method = "ulv-adj-wt"
        elif covariate_names:
            method = "ulv-adj"
        elif args.weighted:
            method = "ulv-wt"
        else:
            method = "ulv"
        payload.update(
            mode="two-group", case_ids=case_ids, covariates=covariates, method=method
        )
        n_case = len(case_ids)
    else:
        condition_ids = {c: tuple(sorted(groups[c])) for c in other_conditions}
        ordered = tuple(s for c in other_conditions for s in condition_ids[c]) + control_ids
        covariates = (
            metadata.covariate_matrix(ordered, covariate_names) if covariate_names else None
        )
        payload.update(mode="multi-group", condition_ids=condition_ids, covariates=covariates)
        n_case = sum(len(v) for v in condition_ids.values())

    results = _map_genes(counts.n_genes, _threads(args), payload)

    fdr = bh_adjust([r.p_value for r in results])
    pi_like = metric in (DifferenceMetric.PI, DifferenceMetric.LOGIT_PI)
    effects_pi = [pi_scale_effect(r.effect, metric) for r in results]
    rule = DECallRule(fdr_threshold=args.fdr, pi_lower=args.pi_band[0], pi_upper=args.pi_band[1])
    if pi_like:
        scaled = [replace(r, effect=e) for r, e in zip(results, effects_pi)]
        flags = call_de(scaled, fdr, rule)
    else:
        # mean/median effects have no probabilistic-index band; FDR rule only
        flags = fdr < rule.fdr_threshold

    rows = [
        uio.ResultRow(
            gene_id=r.gene_id,
            effect_pi=e,
            statistic=r.statistic,
            df=r.df,
            p_value=r.p_value,
            fdr_p=float(q),
            is_de=bool(f),
            method=r.method,
            metric=metric.value,
            n_case_subjects=n_case,
            n_control_subjects=len(control_ids),
        )
        for r, e, q, f in zip(results, effects_pi, fdr, flags)
    ]
    uio.write_results(rows, args.out)
    _write_config_sidecar(args.out, args, {"resolved_reference": reference})
    return 0


def cmd_simulate(args) -> int:
    if args.preset:
        preset = PRESETS[args.preset]
        args.subjects = f"{preset['n_case']},{preset['n_control']}"
        args.cells = preset["cells"]
        args.genes = preset["genes"]
        args.fold_change = preset["fold_change"]
        args.de_genes = preset["de_genes"]
    n_case, n_control = (int(t) for t in args.subjects.split(","))
    design = SimDesign(
        n_case_subjects=n_case,
        n_control_subjects=n_control,
        cells_per_subject=_parse_cells(args.cells),
        n_genes=args.genes,
        fold_change=args.fold_change,
        n_de_genes=args.de_genes,
        covariate_beta=args.covariate_beta,
        seed=args.seed,
    )
    reference = read_parameter_table(args.params) if args.params else builtin_parameter_table()
    rng = np.random.default_rng(design.seed)
    grid = resample_parameters(reference, design.n_genes, design.n_subjects, rng)
    ds = simulate_dataset(design, grid)
    if ds.skipped_genes:
        print(
            f"skipped {len(ds.skipped_genes)} gene(s) with infeasible fold change: "
            + ", ".join(ds.skipped_genes[:5])
            + ("..." if len(ds.skipped_genes) > 5 else ""),
            file=sys.stderr,
        )
    uio.write_counts_dense(ds.counts, args.out)
    uio.write_metadata(ds.metadata, args.out + ".metadata.tsv")
    uio.write_truth(ds.truth, args.out + ".truth.tsv")
    _write_config_sidecar(args.out, args)
    return 0


def cmd_calibrate(args) -> int:
    methods = [m for m in args.methods.split(",") if m]
    for m in methods:
        if m not in KNOWN_METHODS:
            raise ValueError(f"unknown method {m!r}; known: {KNOWN_METHODS}")
    n_case, n_control = (int(t) for t in args.subjects.split(","))
    design = SimDesign(
        n_case_subjects=n_case,
        n_control_subjects=n_control,
        cells_per_subject=_parse_cells(args.cells),
        n_genes=args.genes,
        fold_change=args.fold_change,
        n_de_genes=args.de_genes,
        covariate_beta=args.covariate_beta,
        seed=args.seed,
    )
    reference = read_parameter_table(args.params) if args.params else None
    alphas = [float(a) for a in args.alpha.split(",")]
    summary = calibrate(
        methods,
        design,
        alpha_levels=alphas,
        n_replicates=args.replicates,
        seed=args.seed,
        reference=reference,
        n_threads=_threads(args),
    )
    write_calibration_rows(summary, args.out, kind="type1")
    if summary.power is not None:
        write_calibration_rows(summary, args.out + ".power.tsv", kind="power")
    if args.plot:
        from .inference import plot_calibration

        plot_calibration(summary, args.out + ".png", kind="type1")
    _write_config_sidecar(args.out, args)
    return 0


def _permutation_rejections(task):
    counts, columns, all_subjects, group_one, method, metric, alphas = task
    one = set(group_one)
    case_ids = tuple(sorted(one))
    control_ids = tuple(sorted(s for s in all_subjects if s not in one))
    pvals = np.empty(counts.n_genes)
    for g in range(counts.n_genes):
        row = counts.gene_row(g)
        values = {s: row[columns[s]] for s in all_subjects}
        data = GeneData(values, case_ids, control_ids, None)
        pvals[g] = run_method(
            method, data, metric=metric, gene_id=counts.gene_ids[g]
        ).p_value
    return [float(np.mean(pvals <= alpha)) for alpha in alphas]


def cmd_permute(args) -> int:
    counts, metadata = _load_study(args)
    metric = _METRICS[args.metric]
    conditions = sorted(set(metadata.subject_to_condition.values()))
    if len(conditions) != 2:
        raise ValueError("label permutation needs exactly two conditions")
    groups = metadata.subjects_by_condition()
    subject_conditions = [
        (s, metadata.subject_to_condition[s]) for s in sorted(metadata.subject_to_condition)
    ]
    # balanced pseudo-groups: half of each original condition goes to group
    # one (rounded down), mirroring the published permutation protocol
    composition = {c: len(groups[c]) // 2 for c in conditions}
    if all(v == 0 for v in composition.values()):
        raise ValueError("too few subjects to permute")
    rng = np.random.default_rng(args.seed)
    assignments = permute_labels(subject_conditions, composition, args.permutations, rng)
    if len(assignments) < args.permutations:
        print(
            f"only {len(assignments)} distinct assignments exist; enumerating all",
            file=sys.stderr,
        )

    columns = uio.subject_column_indices(counts, metadata)
    alphas = [float(a) for a in args.alpha.split(",")]
    all_subjects = [s for s, _ in subject_conditions]
    tasks = [
        (counts, columns, all_subjects, group_one, args.method, metric, alphas)
        for group_one in assignments
    ]
    n_threads = _threads(args)
    if n_threads > 1:
        with ProcessPoolExecutor(max_workers=n_threads) as pool:
            rates = list(pool.map(_permutation_rejections, tasks))
    else:
        rates = [_permutation_rejections(t) for t in tasks]
    with open(args.out, "wt", encoding="utf-8") as fh:
        fh.write("method\talpha\tpermutation\trejection_rate\n")
        for k, per_alpha in enumerate(rates):
            for alpha, rate in zip(alphas, per_alpha):
                fh.write(f"{args.method}\t{alpha:g}\t{k}\t{rate:.6g}\n")
    _write_config_sidecar(args.out, args, {"n_assignments": len(assignments)})
    return 0


def cmd_normalize(args) -> int:
    fmt = uio.MatrixFormat.DENSE_TSV if args.format == "dense" else uio.MatrixFormat.MATRIX_MARKET
    counts = uio.read_counts(args.counts, fmt)
    normalized = uio.clr_normalize(counts, pseudocount=args.pseudocount)
    with open(args.out, "wt", encoding="utf-8") as fh:
        fh.write("gene_id\t" + "\t".join(counts.cell_ids) + "\n")
        for g, gene in enumerate(counts.gene_ids):
            fh.write(gene + "\t" + "\t".join(f"{v:.6g}" for v in normalized[g]) + "\n")
    _write_config_sidecar(args.out, args)
    return 0


def _add_common_io(p) -> None:
    p.add_argument("--counts", required=True, help="count matrix path")
    p.add_argument("--metadata", required=True, help="cell metadata TSV path")
    p.add_argument("--format", choices=("dense", "mtx"), default="dense")
    p.add_argument("--min-cells", type=int, default=0, help="QC: minimum cells per subject")
    p.add_argument("--min-expr-frac", type=float, default=0.0, help="QC: gene nonzero fraction")
    p.add_argument("--expr-scope", choices=("all", "case"), default="all")
    p.add_argument("--case-condition", default=None, help="condition treated as cases for QC scope")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="ulv",
        description="Rank-based latent-variable differential testing for clustered data",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("test", help="differential test on counts + metadata")
    _add_common_io(p)
    p.add_argument("--metric", choices=tuple(_METRICS), default="pi")
    p.add_argument("--weighted", action="store_true", help="cluster-size weighted variances")
    p.add_argument("--covariates", default=None, help="comma-separated covariate columns")
    p.add_argument("--reference", default=None, help="reference condition name")
    p.add_argument("--fdr", type=float, default=0.1)
    p.add_argument(
        "--pi-band",
        type=lambda t: tuple(float(x) for x in t.split(",")),
        default=(0.45, 0.55),
        metavar="LO,HI",
    )
    p.add_argument("--normal-approx", action="store_true")
    p.add_argument("--threads", type=int, default=None)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_test)

    p = sub.add_parser("simulate", help="generate a synthetic clustered dataset")
    p.add_argument("--preset", choices=tuple(PRESETS), default=None)
    p.add_argument("--subjects", default="5,5", metavar="CASES,CONTROLS")
    p.add_argument("--cells", default="100", help="fixed count or LO-HI range")
    p.add_argument("--genes", type=int, default=1000)
    p.add_argument("--fold-change", dest="fold_change", type=float, default=1.0)
    p.add_argument("--de-genes", dest="de_genes", type=int, default=0)
    p.add_argument("--covariate-beta", dest="covariate_beta", type=float, default=0.0)
    p.add_argument("--params", default=None, help="reference parameter table")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_simulate)

    p = sub.add_parser("calibrate", help="type I error / power calibration runs")
    p.add_argument("--methods", default="ulv")
    p.add_argument("--subjects", default="5,5")
    p.add_argument("--cells", default="100")
    p.add_argument("--genes", type=int, default=1000)
    p.add_argument("--fold-change", dest="fold_change", type=float, default=1.0)
    p.add_argument("--de-genes", dest="de_genes", type=int, default=0)
    p.add_argument("--covariate-beta", dest="covariate_beta", type=float, default=0.0)
    p.add_argument("--alpha", default="0.001,0.01,0.05,0.2")
    p.add_argument("--replicates", type=int, default=100)
    p.add_argument("--params", default=None)
    p.add_argument("--plot", action="store_true")
    p.add_argument("--threads", type=int, default=None)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_calibrate)

    p = sub.add_parser("permute", help="subject-label permutation null analysis")
    _add_common_io(p)
    p.add_argument("--metric", choices=tuple(_METRICS), default="pi")
    p.add_argument("--method", choices=KNOWN_METHODS, default="ulv")
    p.add_argument("--permutations", type=int, default=100)
    p.add_argument("--alpha", default="0.001,0.01,0.05,0.2")
    p.add_argument("--threads", type=int, default=None)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_permute)

    p = sub.add_parser("normalize", help="centered log-ratio normalization")
    p.add_argument("--counts", required=True)
    p.add_argument("--format", choices=("dense", "mtx"), default="dense")
    p.add_argument("--pseudocount", type=float, default=1.0)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_normalize)

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except (ValueError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
