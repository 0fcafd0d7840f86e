"""Perturbational expression datasets, their on-disk format, and control matching.

A dataset is a sparse cells x genes matrix plus per-cell perturbation sets and
covariate labels. The on-disk form is a directory of four text files
(``matrix.mtx``, ``obs.tsv``, ``var.tsv``, ``meta.tsv``) written so that
save -> load -> save is byte-identical.
"""

from __future__ import annotations

import dataclasses
import os
from collections.abc import Iterable, Mapping, Sequence

import numpy as np
import scipy.sparse as sp

from .errors import ControlError, FormatError, UsageError, ValidationError

MTX_HEADER = "%%MatrixMarket matrix coordinate real general"
VALUE_SPACES = ("counts", "lognorm")


def fmt_float(v) -> str:
    """Shortest decimal string that round-trips to the same float64."""
    return repr(float(v))


@dataclasses.dataclass(frozen=True)
class DatasetMeta:
    control_value: str = "control"
    combination_delimiter: str = "+"
    covariate_keys: tuple[str, ...] = ()
    value_space: str = "counts"


@dataclasses.dataclass(frozen=True, order=True)
class Condition:
    """A (perturbation set, covariate assignment) pair; the unit of aggregation.

    ``perturbation`` is stored lexicographically sorted so equality and ordering
    are well defined. ``covariates`` holds (key, value) pairs in the dataset's
    covariate-key order.
    """

    perturbation: tuple[str, ...]
    covariates: tuple[tuple[str, str], ...] = ()

    @classmethod
    def make(cls, perturbation: Iterable[str], covariates: Mapping[str, str],
             keys: Sequence[str]) -> "Condition":
        return cls(tuple(sorted(set(perturbation))),
                   tuple((k, covariates[k]) for k in keys))

    def label(self, delimiter: str = "+") -> str:
        return delimiter.join(self.perturbation)

    def is_control(self, control_value: str = "control") -> bool:
        return self.perturbation == (control_value,)

    @property
    def covariate_values(self) -> tuple[str, ...]:
        return tuple(v for _, v in self.covariates)

    def covariate_map(self) -> dict[str, str]:
        return dict(self.covariates)


class PerturbationDataset:
    """Immutable container for a perturbational expression matrix.

    Args:
        counts: sparse or dense cells x genes matrix, non-negative, finite.
        cell_ids: unique identifier per row.
        perturbations: per cell, a set of perturbation names. Empty sets are
            forbidden; the control label is the singleton ``{control_value}``
            and may not appear inside a combination.
        covariates: map covariate_key -> per-cell category strings, keyed
            exactly by ``meta.covariate_keys``.
        gene_names: unique name per column.
        meta: format-level metadata (control value, delimiter, value space).
    """

    def __init__(self, counts, cell_ids: Sequence[str],
                 perturbations: Sequence[Iterable[str]],
                 covariates: Mapping[str, Sequence[str]],
                 gene_names: Sequence[str], meta: DatasetMeta):
        m = sp.csr_matrix(counts, dtype=np.float64, copy=True)
        m.sum_duplicates()
        m.sort_indices()
        m.eliminate_zeros()
        self.counts = m
        self.cell_ids = [str(c) for c in cell_ids]
        self.perturbations = [frozenset(p) for p in perturbations]
        self.covariates = {k: [str(v) for v in covariates[k]] for k in meta.covariate_keys}
        self.gene_names = [str(g) for g in gene_names]
        self.meta = meta
        self._validate()
        if set(covariates) != set(meta.covariate_keys):
            raise ValidationError(
                f"covariate keys {sorted(covariates)} do not match meta "
                f"{list(meta.covariate_keys)}")

    def _validate(self):
        n, g = self.counts.shape
        if len(self.cell_ids) != n:
            raise ValidationError(
                f"matrix has {n} rows but {len(self.cell_ids)} cell ids")
        if len(self.gene_names) != g:
            raise ValidationError(
                f"matrix has {g} columns but {len(self.gene_names)} gene names")
        if len(self.perturbations) != n:
            raise ValidationError(
                f"{len(self.perturbations)} perturbation labels for {n} cells")
        if len(set(self.cell_ids)) != n:
            raise ValidationError("cell ids are not unique")
        if len(set(self.gene_names)) != g:
            raise ValidationError("gene names are not unique")
        if self.meta.value_space not in VALUE_SPACES:
            raise ValidationError(f"unknown value_space {self.meta.value_space!r}")
        for key in self.meta.covariate_keys:
            vals = self.covariates.get(key)
            if vals is None or len(vals) != n:
                raise ValidationError(f"covariate {key!r} missing or wrong length")
        ctrl = self.meta.control_value
        delim = self.meta.combination_delimiter
        for i, pset in enumerate(self.perturbations):
            if not pset:
                raise ValidationError(f"cell {self.cell_ids[i]!r} has an empty perturbation set")
            if ctrl in pset and len(pset) > 1:
                raise ValidationError(
                    f"cell {self.cell_ids[i]!r} mixes the control value into a combination")
            for name in pset:
                if delim in name:
                    raise ValidationError(
                        f"perturbation name {name!r} contains the delimiter {delim!r}")
        if self.counts.nnz:
            data = self.counts.data
            if not np.all(np.isfinite(data)):
                raise ValidationError("matrix contains non-finite values")
            if data.min() < 0:
                raise ValidationError("matrix contains negative values")

    @property
    def n_cells(self) -> int:
        return self.counts.shape[0]

    @property
    def n_genes(self) -> int:
        return self.counts.shape[1]

    def covariate_assignment(self, i: int) -> tuple[tuple[str, str], ...]:
        return tuple((k, self.covariates[k][i]) for k in self.meta.covariate_keys)

    def condition_of(self, i: int) -> Condition:
        return Condition(tuple(sorted(self.perturbations[i])), self.covariate_assignment(i))

    def is_control(self, i: int) -> bool:
        return self.perturbations[i] == frozenset([self.meta.control_value])

    def control_rows(self) -> np.ndarray:
        ctrl = frozenset([self.meta.control_value])
        return np.array([i for i, p in enumerate(self.perturbations) if p == ctrl], dtype=int)

    def rows_by_condition(self) -> dict[Condition, np.ndarray]:
        groups: dict[Condition, list[int]] = {}
        for i in range(self.n_cells):
            groups.setdefault(self.condition_of(i), []).append(i)
        return {c: np.array(rows, dtype=int) for c, rows in sorted(groups.items())}

    def distinct_conditions(self) -> list[Condition]:
        return sorted({self.condition_of(i) for i in range(self.n_cells)})

    def subset_cells(self, rows) -> "PerturbationDataset":
        rows = np.asarray(rows, dtype=int)
        return PerturbationDataset(
            self.counts[rows],
            [self.cell_ids[i] for i in rows],
            [self.perturbations[i] for i in rows],
            {k: [self.covariates[k][i] for i in rows] for k in self.meta.covariate_keys},
            self.gene_names, self.meta)

    def subset_genes(self, cols) -> "PerturbationDataset":
        cols = np.asarray(cols, dtype=int)
        return PerturbationDataset(
            self.counts[:, cols], self.cell_ids, self.perturbations, self.covariates,
            [self.gene_names[j] for j in cols], self.meta)

    def with_values(self, counts, value_space: str) -> "PerturbationDataset":
        """Same cells and labels, new matrix values (e.g. after normalization)."""
        meta = dataclasses.replace(self.meta, value_space=value_space)
        return PerturbationDataset(counts, self.cell_ids, self.perturbations,
                                   self.covariates, self.gene_names, meta)

    def __eq__(self, other) -> bool:
        if not isinstance(other, PerturbationDataset):
            return NotImplemented
        a, b = self.counts, other.counts
        return (self.cell_ids == other.cell_ids
                and self.perturbations == other.perturbations
                and self.covariates == other.covariates
                and self.gene_names == other.gene_names
                and self.meta == other.meta
                and a.shape == b.shape
                and np.array_equal(a.indptr, b.indptr)
                and np.array_equal(a.indices, b.indices)
                and np.array_equal(a.data, b.data))


# ---------------------------------------------------------------------------
# directory format


def save_dataset(d: PerturbationDataset, path: str) -> None:
    """Write the dataset directory format; load_dataset inverts it exactly."""
    _check_writable_strings(d)
    os.makedirs(path, exist_ok=True)
    coo = d.counts.tocoo()
    with open(os.path.join(path, "matrix.mtx"), "w", encoding="utf-8") as f:
        f.write(MTX_HEADER + "\n")
        f.write(f"{d.n_cells} {d.n_genes} {coo.nnz}\n")
        for r, c, v in zip(coo.row, coo.col, coo.data):
            f.write(f"{r + 1} {c + 1} {fmt_float(v)}\n")
    keys = d.meta.covariate_keys
    with open(os.path.join(path, "obs.tsv"), "w", encoding="utf-8") as f:
        f.write("\t".join(["cell_id", "perturbation", *keys]) + "\n")
        for i, cid in enumerate(d.cell_ids):
            pert = d.meta.combination_delimiter.join(sorted(d.perturbations[i]))
            row = [cid, pert] + [d.covariates[k][i] for k in keys]
            f.write("\t".join(row) + "\n")
    with open(os.path.join(path, "var.tsv"), "w", encoding="utf-8") as f:
        f.write("gene_name\n")
        f.writelines(g + "\n" for g in d.gene_names)
    with open(os.path.join(path, "meta.tsv"), "w", encoding="utf-8") as f:
        f.write(f"control_value\t{d.meta.control_value}\n")
        f.write(f"combination_delimiter\t{d.meta.combination_delimiter}\n")
        f.write(f"covariate_keys\t{','.join(keys)}\n")
        f.write(f"value_space\t{d.meta.value_space}\n")


def _check_writable_strings(d: PerturbationDataset):
    def bad(s):
        return "\t" in s or "\n" in s or "\r" in s

    for s in d.cell_ids + d.gene_names + [v for vs in d.covariates.values() for v in vs]:
        if bad(s):
            raise ValidationError(f"string {s!r} contains a tab or newline")
    for pset in d.perturbations:
        for name in pset:
            if bad(name):
                raise ValidationError(f"perturbation name {name!r} contains a tab or newline")


def _require_file(path: str) -> str:
    if not os.path.isfile(path):
        raise FormatError(f"missing file {path}")
    return path


def load_dataset(path: str) -> PerturbationDataset:
    """Read a dataset directory and validate all invariants."""
    meta = _load_meta(os.path.join(path, "meta.tsv"))
    gene_names = _load_var(os.path.join(path, "var.tsv"))
    cell_ids, perturbations, covariates = _load_obs(os.path.join(path, "obs.tsv"), meta)
    counts = _load_mtx(os.path.join(path, "matrix.mtx"))
    if counts.shape[0] != len(cell_ids):
        raise ValidationError(
            f"matrix has {counts.shape[0]} rows but obs.tsv has {len(cell_ids)}")
    if counts.shape[1] != len(gene_names):
        raise ValidationError(
            f"matrix has {counts.shape[1]} columns but var.tsv has {len(gene_names)}")
    return PerturbationDataset(counts, cell_ids, perturbations, covariates, gene_names, meta)


def _load_meta(path: str) -> DatasetMeta:
    kv = {}
    with open(_require_file(path), encoding="utf-8") as f:
        for ln, line in enumerate(f, 1):
            line = line.rstrip("\n")
            if not line:
                continue
            parts = line.split("\t")
            if len(parts) != 2:
                raise FormatError(f"{path}:{ln}: expected key<TAB>value")
            kv[parts[0]] = parts[1]
    required = {"control_value", "combination_delimiter", "covariate_keys", "value_space"}
    missing = required - set(kv)
    if missing:
        raise FormatError(f"{path}: missing keys {sorted(missing)}")
    unknown = set(kv) - required
    if unknown:
        raise FormatError(f"{path}: unknown keys {sorted(unknown)}")
    keys = tuple(k for k in kv["covariate_keys"].split(",") if k)
    return DatasetMeta(control_value=kv["control_value"],
                       combination_delimiter=kv["combination_delimiter"],
                       covariate_keys=keys, value_space=kv["value_space"])


def _load_var(path: str) -> list[str]:
    with open(_require_file(path), encoding="utf-8") as f:
        header = f.readline().rstrip("\n")
        if header != "gene_name":
            raise FormatError(f"{path}: header must be 'gene_name', got {header!r}")
        return [line.rstrip("\n") for line in f if line.rstrip("\n")]


def _load_obs(path: str, meta: DatasetMeta):
    with open(_require_file(path), encoding="utf-8") as f:
        header = f.readline().rstrip("\n").split("\t")
        if not header or header[0] != "cell_id":
            raise FormatError(f"{path}: first column must be cell_id")
        col = {name: i for i, name in enumerate(header)}
        if "perturbation" not in col:
            raise FormatError(f"{path}: missing perturbation column")
        for k in meta.covariate_keys:
            if k not in col:
                raise FormatError(f"{path}: covariate key {k!r} named in meta.tsv "
                                  "has no matching column")
        cell_ids, perturbations = [], []
        covariates: dict[str, list[str]] = {k: [] for k in meta.covariate_keys}
        for ln, line in enumerate(f, 2):
            line = line.rstrip("\n")
            if not line:
                continue
            parts = line.split("\t")
            if len(parts) != len(header):
                raise FormatError(f"{path}:{ln}: expected {len(header)} fields")
            cell_ids.append(parts[0])
            label = parts[col["perturbation"]]
            names = [s for s in label.split(meta.combination_delimiter)]
            if any(not s for s in names):
                raise FormatError(f"{path}:{ln}: empty perturbation name in {label!r}")
            perturbations.append(frozenset(names))
            for k in meta.covariate_keys:
                covariates[k].append(parts[col[k]])
    return cell_ids, perturbations, covariates


def _load_mtx(path: str) -> sp.csr_matrix:
    with open(_require_file(path), encoding="utf-8") as f:
        header = f.readline().rstrip("\n")
        if header != MTX_HEADER:
            raise FormatError(f"{path}: bad MatrixMarket header {header!r}")
        size = None
        for line in f:
            line = line.rstrip("\n")
            if not line or line.startswith("%"):
                continue
            size = line
            break
        if size is None:
            raise FormatError(f"{path}: missing size line")
        try:
            n, g, nnz = (int(x) for x in size.split())
        except ValueError:
            raise FormatError(f"{path}: bad size line {size!r}") from None
        rows = np.empty(nnz, dtype=np.int64)
        cols = np.empty(nnz, dtype=np.int64)
        vals = np.empty(nnz, dtype=np.float64)
        k = 0
        for line in f:
            line = line.rstrip("\n")
            if not line or line.startswith("%"):
                continue
            parts = line.split()
            if len(parts) != 3:
                raise FormatError(f"{path}: bad entry {line!r}")
            if k >= nnz:
                raise FormatError(f"{path}: more than {nnz} entries")
            try:
                r, c, v = int(parts[0]), int(parts[1]), float(parts[2])
            except ValueError:
                raise FormatError(f"{path}: bad entry {line!r}") from None
            if not (1 <= r <= n and 1 <= c <= g):
                raise FormatError(f"{path}: entry ({r},{c}) out of range for {n}x{g}")
            rows[k], cols[k], vals[k] = r - 1, c - 1, v
            k += 1
        if k != nnz:
            raise FormatError(f"{path}: expected {nnz} entries, found {k}")
    return sp.coo_matrix((vals, (rows, cols)), shape=(n, g)).tocsr()


# ---------------------------------------------------------------------------
# control matching


@dataclasses.dataclass
class ControlIndex:
    """Map covariate assignment -> row indices of control cells."""

    keys: tuple[str, ...]
    groups: dict[tuple[str, ...], np.ndarray]

    def lookup(self, covariates) -> np.ndarray:
        values = _assignment_values(covariates, self.keys)
        pool = self.groups.get(values)
        if pool is None:
            raise UsageError(f"no controls indexed for covariate assignment "
                             f"{dict(zip(self.keys, values))}")
        return pool


def _assignment_values(covariates, keys: tuple[str, ...]) -> tuple[str, ...]:
    if isinstance(covariates, Mapping):
        return tuple(covariates[k] for k in keys)
    values = tuple(v for _, v in covariates) if covariates and isinstance(
        covariates[0], tuple) else tuple(covariates)
    if len(values) != len(keys):
        raise UsageError(f"covariate assignment {covariates!r} does not match keys {keys}")
    return values


def build_control_index(d: PerturbationDataset) -> ControlIndex:
    """Index control cells by covariate assignment.

    Raises ControlError naming the combination when a covariate assignment has
    perturbed cells but no controls.
    """
    keys = d.meta.covariate_keys
    control: dict[tuple[str, ...], list[int]] = {}
    perturbed: dict[tuple[str, ...], int] = {}
    for i in range(d.n_cells):
        values = tuple(d.covariates[k][i] for k in keys)
        if d.is_control(i):
            control.setdefault(values, []).append(i)
        else:
            perturbed[values] = perturbed.get(values, 0) + 1
    missing = sorted(set(perturbed) - set(control))
    if missing:
        combo = ", ".join("=".join(p) for p in zip(keys, missing[0])) or "<no covariates>"
        raise ControlError(
            f"{len(missing)} covariate combination(s) have perturbed cells but no "
            f"controls; first: {combo}")
    groups = {v: np.array(rows, dtype=int) for v, rows in sorted(control.items())}
    return ControlIndex(keys=keys, groups=groups)


def sample_matched_controls(idx: ControlIndex, covariates, n: int, seed) -> np.ndarray:
    """Sample n control rows uniformly with replacement for one assignment."""
    if n < 1:
        raise UsageError(f"n must be >= 1, got {n}")
    pool = idx.lookup(covariates)
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    return pool[rng.integers(0, len(pool), size=n)]


# ---------------------------------------------------------------------------
# counterfactual requests


@dataclasses.dataclass(frozen=True)
class CounterfactualRequest:
    """A target condition plus the matched control pool (and optional reference).

    ``control_rows`` are all control cells sharing the target's covariate
    assignment; prediction code samples from this pool. ``reference_rows`` are
    the observed perturbed cells for the condition when a reference dataset was
    supplied, None otherwise.
    """

    condition: Condition
    control_rows: tuple[int, ...]
    reference_rows: tuple[int, ...] | None = None

    @property
    def empty_reference(self) -> bool:
        return self.reference_rows is not None and len(self.reference_rows) == 0


def build_counterfactual_requests(d: PerturbationDataset, idx: ControlIndex,
                                  targets: Sequence[Condition],
                                  reference: PerturbationDataset | None = None,
                                  ) -> list[CounterfactualRequest]:
    """One request per target; reference rows matched by condition equality."""
    ref_rows: dict[Condition, np.ndarray] = {}
    if reference is not None:
        ref_rows = reference.rows_by_condition()
    requests = []
    for target in targets:
        pool = idx.lookup(target.covariates)
        rows = None
        if reference is not None:
            rows = tuple(int(i) for i in ref_rows.get(target, ()))
        requests.append(CounterfactualRequest(
            condition=target,
            control_rows=tuple(int(i) for i in pool),
            reference_rows=rows))
    return requests
