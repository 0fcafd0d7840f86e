"""Normalization, gene selection, and per-condition aggregation.

The pipeline is counts -> log-normalize -> select genes -> aggregate into
per-condition mean vectors and LogFCs. LogFC is the difference of mean
log-normalized expression between a condition and its covariate-matched
control population.
"""

from __future__ import annotations

import dataclasses
import logging
from collections.abc import Sequence

import numpy as np

from .dataset import Condition, PerturbationDataset, fmt_float
from .errors import ControlError, FormatError, UsageError, ValidationError

log = logging.getLogger(__name__)

SCALE = 1e4


def log_normalize(d: PerturbationDataset) -> PerturbationDataset:
    """Per cell, map x_i to log(1 + x_i / total * 1e4) with natural log.

    Sparsity is preserved (zero maps to zero). Cells with zero total count are
    an error since the transform is undefined for them.
    """
    if d.meta.value_space != "counts":
        raise UsageError(f"log_normalize expects counts, got {d.meta.value_space}")
    totals = np.asarray(d.counts.sum(axis=1)).ravel()
    zero = np.flatnonzero(totals <= 0)
    if len(zero):
        raise ValidationError(f"cell {d.cell_ids[zero[0]]!r} has zero total count")
    out = d.counts.copy()
    per_row = np.repeat(SCALE / totals, np.diff(out.indptr))
    out.data = np.log1p(out.data * per_row)
    return d.with_values(out, "lognorm")


def gene_variances(d: PerturbationDataset) -> np.ndarray:
    """Per-gene variance of expression values (population formula)."""
    mean = np.asarray(d.counts.mean(axis=0)).ravel()
    sq = np.asarray(d.counts.multiply(d.counts).mean(axis=0)).ravel()
    return np.maximum(sq - mean * mean, 0.0)


def welch_t(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Welch t-statistic per column of two dense group matrices."""
    n1, n2 = a.shape[0], b.shape[0]
    if n1 < 2 or n2 < 2:
        raise UsageError("welch_t needs at least 2 observations per group")
    diff = a.mean(axis=0) - b.mean(axis=0)
    se2 = a.var(axis=0, ddof=1) / n1 + b.var(axis=0, ddof=1) / n2
    with np.errstate(divide="ignore", invalid="ignore"):
        t = diff / np.sqrt(se2)
    # zero pooled variance: infinitely significant if the means differ at all
    t[se2 == 0] = np.where(diff[se2 == 0] != 0, np.inf, 0.0)
    return t


def select_genes(d: PerturbationDataset, n_hvg: int, n_de_per_condition: int,
                 include_perturbed_genes: bool = True):
    """Retain top-variance genes plus per-condition differential-expression genes.

    The retained set is the union of the top ``n_hvg`` genes by variance of
    log-normalized expression, the top ``n_de_per_condition`` genes per
    perturbed condition by absolute Welch t-statistic against covariate-matched
    controls, and (for genetic screens) perturbation names that appear in the
    gene list. Gene order is the original order restricted to the set.

    Returns:
        (subset dataset, list of retained gene names)
    """
    if d.meta.value_space != "lognorm":
        raise UsageError("select_genes expects log-normalized values")
    if n_hvg > d.n_genes:
        raise UsageError(f"n_hvg={n_hvg} exceeds gene count {d.n_genes}")
    var = gene_variances(d)
    keep = set(np.argsort(-var, kind="stable")[:n_hvg].tolist())

    groups = d.rows_by_condition()
    controls = {c.covariates: rows for c, rows in groups.items()
                if c.is_control(d.meta.control_value)}
    skipped = []
    for cond, rows in groups.items():
        if cond.is_control(d.meta.control_value):
            continue
        ctrl_rows = controls.get(cond.covariates, np.empty(0, dtype=int))
        if len(rows) < 2 or len(ctrl_rows) < 2:
            skipped.append(cond.label(d.meta.combination_delimiter))
            continue
        t = np.abs(welch_t(d.counts[rows].toarray(), d.counts[ctrl_rows].toarray()))
        keep.update(np.argsort(-t, kind="stable")[:n_de_per_condition].tolist())
    if skipped:
        log.warning("DE selection skipped %d condition(s) with <2 cells on a side: %s",
                    len(skipped), ", ".join(sorted(set(skipped))))

    if include_perturbed_genes:
        gene_index = {g: j for j, g in enumerate(d.gene_names)}
        for pset in d.perturbations:
            for name in pset:
                if name in gene_index:
                    keep.add(gene_index[name])

    cols = sorted(keep)
    sub = d.subset_genes(cols)
    return sub, [d.gene_names[j] for j in cols]


# ---------------------------------------------------------------------------
# aggregation


@dataclasses.dataclass
class ConditionAggregate:
    """Population summary for one condition: mean lognorm vector and LogFC."""

    condition: Condition
    mean_lognorm: np.ndarray
    n_cells: int
    logfc: np.ndarray | None = None


def aggregate_means(d: PerturbationDataset, min_cells: int = 10) -> list[ConditionAggregate]:
    """Mean lognorm vector per distinct condition with at least min_cells cells."""
    if d.meta.value_space != "lognorm":
        raise UsageError("aggregate_means expects log-normalized values")
    out, excluded = [], []
    for cond, rows in d.rows_by_condition().items():
        if len(rows) < min_cells:
            excluded.append(cond.label(d.meta.combination_delimiter))
            continue
        mean = np.asarray(d.counts[rows].mean(axis=0)).ravel()
        out.append(ConditionAggregate(cond, mean, int(len(rows))))
    if excluded:
        log.warning("excluded %d condition(s) below min_cells=%d: %s",
                    len(excluded), min_cells, ", ".join(excluded))
    return out


def compute_logfc(aggs: Sequence[ConditionAggregate],
                  control_value: str = "control") -> list[ConditionAggregate]:
    """Fill logfc = mean - matched control mean; controls get the zero vector."""
    controls = {}
    for a in aggs:
        if a.condition.is_control(control_value):
            controls[a.condition.covariates] = a.mean_lognorm
    out = []
    for a in aggs:
        if a.condition.is_control(control_value):
            fc = np.zeros_like(a.mean_lognorm)
        else:
            ctrl = controls.get(a.condition.covariates)
            if ctrl is None:
                assignment = ", ".join("=".join(kv) for kv in a.condition.covariates)
                raise ControlError(
                    f"no control aggregate for covariate assignment {assignment or '<none>'}")
            fc = a.mean_lognorm - ctrl
        out.append(ConditionAggregate(a.condition, a.mean_lognorm, a.n_cells, fc))
    return out


# ---------------------------------------------------------------------------
# aggregates.tsv format


@dataclasses.dataclass
class AggregateTable:
    """One parsed aggregates.tsv: condition rows by gene columns."""

    conditions: list[Condition]
    values: np.ndarray
    n_cells: np.ndarray
    gene_names: list[str]
    covariate_keys: tuple[str, ...]


def write_aggregates(aggs: Sequence[ConditionAggregate], path: str,
                     gene_names: Sequence[str], field: str = "mean",
                     delimiter: str = "+") -> None:
    """Write mean or logfc vectors in the aggregates.tsv layout."""
    if field not in ("mean", "logfc"):
        raise UsageError(f"field must be mean or logfc, got {field!r}")
    keys = aggs[0].condition.covariates if aggs else ()
    cov_keys = tuple(k for k, _ in keys)
    if "n_cells" in cov_keys or any(k == "perturbation" for k in cov_keys):
        raise UsageError("covariate keys may not be named 'perturbation' or 'n_cells'")
    with open(path, "w", encoding="utf-8") as f:
        f.write("\t".join(["perturbation", *cov_keys, "n_cells", *gene_names]) + "\n")
        for a in aggs:
            vec = a.mean_lognorm if field == "mean" else a.logfc
            if vec is None:
                raise UsageError(f"aggregate {a.condition} has no logfc")
            if len(vec) != len(gene_names):
                raise ValidationError(
                    f"vector length {len(vec)} != {len(gene_names)} genes")
            if tuple(k for k, _ in a.condition.covariates) != cov_keys:
                raise ValidationError("aggregates mix covariate key sets")
            row = [a.condition.label(delimiter),
                   *(v for _, v in a.condition.covariates),
                   str(int(a.n_cells)),
                   *(fmt_float(x) for x in vec)]
            f.write("\t".join(row) + "\n")


def read_aggregates(path: str, delimiter: str = "+") -> AggregateTable:
    with open(path, encoding="utf-8") as f:
        header = f.readline().rstrip("\n").split("\t")
        if not header or header[0] != "perturbation":
            raise FormatError(f"{path}: first column must be perturbation")
        try:
            split_at = header.index("n_cells")
        except ValueError:
            raise FormatError(f"{path}: missing n_cells column") from None
        cov_keys = tuple(header[1:split_at])
        gene_names = header[split_at + 1:]
        conditions, counts, rows = [], [], []
        for ln, line in enumerate(f, 2):
            line = line.rstrip("\n")
            if not line:
                continue
            parts = line.split("\t")
            if len(parts) != len(header):
                raise FormatError(f"{path}:{ln}: expected {len(header)} fields")
            names = parts[0].split(delimiter)
            if any(not s for s in names):
                raise FormatError(f"{path}:{ln}: empty perturbation name")
            cov = tuple(zip(cov_keys, parts[1:split_at]))
            conditions.append(Condition(tuple(sorted(set(names))), cov))
            try:
                counts.append(int(parts[split_at]))
                rows.append([float(x) for x in parts[split_at + 1:]])
            except ValueError:
                raise FormatError(f"{path}:{ln}: bad numeric value") from None
    values = np.array(rows, dtype=np.float64).reshape(len(rows), len(gene_names))
    return AggregateTable(conditions, values, np.array(counts, dtype=int),
                          gene_names, cov_keys)


def tables_to_aggregates(means: AggregateTable,
                         logfc: AggregateTable | None = None) -> list[ConditionAggregate]:
    """Join a means table with an optional logfc table on condition equality."""
    out = []
    fc_by_cond = {}
    if logfc is not None:
        if logfc.gene_names != means.gene_names:
            raise ValidationError("means and logfc tables have different gene lists")
        fc_by_cond = {c: logfc.values[i] for i, c in enumerate(logfc.conditions)}
    for i, cond in enumerate(means.conditions):
        fc = fc_by_cond.get(cond) if logfc is not None else None
        if logfc is not None and fc is None:
            raise ValidationError(f"logfc table missing condition {cond}")
        out.append(ConditionAggregate(cond, means.values[i],
                                      int(means.n_cells[i]), fc))
    return out
