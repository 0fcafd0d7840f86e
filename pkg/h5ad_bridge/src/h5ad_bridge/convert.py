"""h5ad to dataset-directory conversion, and aggregates back to h5ad.

The forward direction is strictly format translation: values are copied (not
transformed), manifest-named metadata columns are carried verbatim, and every
source column or group that does not survive is listed in conversion_log.txt.
The reverse direction turns a condition-aggregate table into a small h5ad so
downstream single-cell tooling can consume engine outputs.
"""

from __future__ import annotations

import dataclasses
import os

import numpy as np

import h5py

from .errors import FormatError, MissingColumnError, UsageError, ValueSpaceError
from .reader import (SKIPPED_ROOT_KEYS, list_columns, open_h5ad, read_column,
                     read_index, read_matrix)

MTX_HEADER = "%%MatrixMarket matrix coordinate real general"
VALUE_SPACES = ("counts", "lognorm")
LOG_NAME = "conversion_log.txt"


def fmt_float(v) -> str:
    """Shortest decimal string that round-trips to the same float64."""
    return repr(float(v))


@dataclasses.dataclass(frozen=True)
class ConversionManifest:
    """What to pull out of the source container and how to label it.

    ``cell_filter`` is an optional ``column=value`` pair keeping only matching
    cells; ``gene_filter`` an optional comma-separated list of gene names to
    keep, in source order.
    """

    perturbation_column: str
    combination_delimiter: str = "+"
    control_value: str = "control"
    covariate_columns: tuple[str, ...] = ()
    value_space: str = "counts"
    cell_filter: str | None = None
    gene_filter: tuple[str, ...] | None = None

    def __post_init__(self):
        if not self.perturbation_column:
            raise UsageError("manifest: perturbation_column is required")
        if self.value_space not in VALUE_SPACES:
            raise UsageError(
                f"manifest: value_space must be one of {', '.join(VALUE_SPACES)}; "
                f"got {self.value_space!r}")
        if not self.combination_delimiter:
            raise UsageError("manifest: combination_delimiter may not be empty")
        if self.cell_filter is not None and "=" not in self.cell_filter:
            raise UsageError(
                f"manifest: cell_filter must be column=value, got {self.cell_filter!r}")


_MANIFEST_KEYS = tuple(f.name for f in dataclasses.fields(ConversionManifest))


def read_manifest(path: str) -> ConversionManifest:
    """Parse key<TAB>value lines into a ConversionManifest."""
    raw: dict[str, str] = {}
    with open(path, encoding="utf-8") as f:
        for ln, line in enumerate(f, 1):
            line = line.rstrip("\n")
            if not line or line.startswith("#"):
                continue
            key, sep, value = line.partition("\t")
            if not sep:
                raise UsageError(f"{path}:{ln}: expected key<TAB>value")
            key = key.strip()
            if key not in _MANIFEST_KEYS:
                raise UsageError(
                    f"{path}:{ln}: unknown manifest key {key!r}; expected one of "
                    f"{', '.join(_MANIFEST_KEYS)}")
            if key in raw:
                raise UsageError(f"{path}:{ln}: duplicate key {key!r}")
            raw[key] = value
    if "perturbation_column" not in raw:
        raise UsageError(f"{path}: missing required key perturbation_column")
    kwargs: dict[str, object] = dict(raw)
    if "covariate_columns" in raw:
        kwargs["covariate_columns"] = tuple(
            s.strip() for s in raw["covariate_columns"].split(",") if s.strip())
    if "gene_filter" in raw:
        kwargs["gene_filter"] = tuple(
            s.strip() for s in raw["gene_filter"].split(",") if s.strip())
    if "cell_filter" in raw and not raw["cell_filter"]:
        kwargs["cell_filter"] = None
    return ConversionManifest(**kwargs)


@dataclasses.dataclass
class ConversionReport:
    n_cells: int
    n_genes: int
    nnz: int
    dropped: list[str]


def _check_value_space(X: np.ndarray, declared: str) -> None:
    if not np.all(np.isfinite(X)):
        raise ValueSpaceError("matrix contains non-finite values")
    if declared == "counts":
        if X.size and (X.min() < 0 or np.any(X != np.floor(X))):
            raise ValueSpaceError(
                "declared value_space is counts but the matrix holds negative "
                "or non-integer values; counts must be non-negative integers")


def _apply_cell_filter(f, manifest: ConversionManifest, n_cells: int):
    if manifest.cell_filter is None:
        return np.arange(n_cells)
    column, _, wanted = manifest.cell_filter.partition("=")
    values = read_column(f, "obs", column.strip())
    keep = np.flatnonzero(np.array([v == wanted for v in values]))
    if keep.size == 0:
        raise UsageError(
            f"cell_filter {manifest.cell_filter!r} keeps no cells")
    return keep


def _apply_gene_filter(manifest: ConversionManifest, gene_names: list[str]):
    if manifest.gene_filter is None:
        return np.arange(len(gene_names))
    index = {g: i for i, g in enumerate(gene_names)}
    missing = [g for g in manifest.gene_filter if g not in index]
    if missing:
        raise MissingColumnError(
            f"gene_filter names absent genes: {', '.join(missing)}")
    keep = np.array(sorted(index[g] for g in manifest.gene_filter))
    return keep


def write_mtx(X: np.ndarray, path: str) -> int:
    """Write the canonical coordinate layout: row-major, zeros omitted."""
    n, g = X.shape
    rows, cols = np.nonzero(X)
    with open(path, "w", encoding="utf-8") as f:
        f.write(MTX_HEADER + "\n")
        f.write(f"{n} {g} {len(rows)}\n")
        for r, c in zip(rows, cols):
            f.write(f"{r + 1} {c + 1} {fmt_float(X[r, c])}\n")
    return len(rows)


def convert(source: str, manifest: ConversionManifest, dest: str) -> ConversionReport:
    """Translate an h5ad container into an engine dataset directory."""
    f = open_h5ad(source)
    try:
        cell_ids = read_index(f, "obs")
        gene_names = read_index(f, "var")
        pert = read_column(f, "obs", manifest.perturbation_column)
        covs = {k: read_column(f, "obs", k) for k in manifest.covariate_columns}
        X = read_matrix(f)
        if X.shape != (len(cell_ids), len(gene_names)):
            raise FormatError(
                f"X is {X.shape[0]}x{X.shape[1]} but obs has {len(cell_ids)} "
                f"rows and var {len(gene_names)}")
        _check_value_space(X, manifest.value_space)

        keep_cells = _apply_cell_filter(f, manifest, len(cell_ids))
        keep_genes = _apply_gene_filter(manifest, gene_names)
        X = X[np.ix_(keep_cells, keep_genes)]
        cell_ids = [cell_ids[i] for i in keep_cells]
        gene_names = [gene_names[i] for i in keep_genes]
        pert = [pert[i] for i in keep_cells]
        covs = {k: [v[i] for i in keep_cells] for k, v in covs.items()}

        carried = {manifest.perturbation_column, *manifest.covariate_columns}
        dropped = [f"obs column: {c}" for c in list_columns(f, "obs")
                   if c not in carried]
        dropped += [f"var column: {c}" for c in list_columns(f, "var")]
        dropped += [f"root group: {k}" for k in SKIPPED_ROOT_KEYS if k in f]
    finally:
        f.close()

    os.makedirs(dest, exist_ok=True)
    nnz = write_mtx(X, os.path.join(dest, "matrix.mtx"))
    keys = manifest.covariate_columns
    with open(os.path.join(dest, "obs.tsv"), "w", encoding="utf-8") as out:
        out.write("\t".join(["cell_id", "perturbation", *keys]) + "\n")
        for i, cid in enumerate(cell_ids):
            row = [cid, pert[i]] + [covs[k][i] for k in keys]
            out.write("\t".join(row) + "\n")
    with open(os.path.join(dest, "var.tsv"), "w", encoding="utf-8") as out:
        out.write("gene_name\n")
        out.writelines(g + "\n" for g in gene_names)
    with open(os.path.join(dest, "meta.tsv"), "w", encoding="utf-8") as out:
        out.write(f"control_value\t{manifest.control_value}\n")
        out.write(f"combination_delimiter\t{manifest.combination_delimiter}\n")
        out.write(f"covariate_keys\t{','.join(keys)}\n")
        out.write(f"value_space\t{manifest.value_space}\n")
    with open(os.path.join(dest, LOG_NAME), "w", encoding="utf-8") as out:
        out.write(f"source: {os.path.abspath(source)}\n")
        out.write(f"cells: {len(cell_ids)}  genes: {len(gene_names)}  "
                  f"nonzeros: {nnz}\n")
        if dropped:
            out.write("dropped (not represented in the dataset directory):\n")
            out.writelines(f"  {item}\n" for item in dropped)
        else:
            out.write("dropped: none\n")
    return ConversionReport(len(cell_ids), len(gene_names), nnz, dropped)


# ---------------------------------------------------------------------------
# aggregates back to h5ad


def _write_string_column(grp, name: str, values: list[str]) -> None:
    ds = grp.create_dataset(
        name, data=np.array(values, dtype=h5py.string_dtype("utf-8")))
    ds.attrs["encoding-type"] = "string-array"
    ds.attrs["encoding-version"] = "0.2.0"


def _frame_attrs(grp, index_name: str, columns: list[str]) -> None:
    grp.attrs["encoding-type"] = "dataframe"
    grp.attrs["encoding-version"] = "0.2.0"
    grp.attrs["_index"] = index_name
    grp.attrs["column-order"] = np.array(
        columns, dtype=h5py.string_dtype("utf-8"))


def export_aggregates(table_path: str, dest: str) -> tuple[int, int]:
    """Write a condition-aggregate TSV as an h5ad (conditions as rows)."""
    with open(table_path, encoding="utf-8") as f:
        header = f.readline().rstrip("\n").split("\t")
        if not header or header[0] != "perturbation":
            raise FormatError(f"{table_path}: first column must be perturbation")
        try:
            split_at = header.index("n_cells")
        except ValueError:
            raise FormatError(f"{table_path}: missing n_cells column") from None
        cov_keys = header[1:split_at]
        gene_names = header[split_at + 1:]
        perts, covs, counts, rows = [], {k: [] for k in cov_keys}, [], []
        for ln, line in enumerate(f, 2):
            line = line.rstrip("\n")
            if not line:
                continue
            parts = line.split("\t")
            if len(parts) != len(header):
                raise FormatError(
                    f"{table_path}:{ln}: expected {len(header)} fields")
            perts.append(parts[0])
            for j, k in enumerate(cov_keys):
                covs[k].append(parts[1 + j])
            counts.append(int(parts[split_at]))
            rows.append([float(v) for v in parts[split_at + 1:]])
    if not rows:
        raise FormatError(f"{table_path}: no data rows")

    X = np.array(rows, dtype=np.float64)
    with h5py.File(dest, "w") as f:
        f.attrs["encoding-type"] = "anndata"
        f.attrs["encoding-version"] = "0.1.0"
        f.create_dataset("X", data=X)
        obs = f.create_group("obs")
        index = [f"{p}|{'|'.join(covs[k][i] for k in cov_keys)}" if cov_keys
                 else p for i, p in enumerate(perts)]
        _write_string_column(obs, "_index", index)
        _write_string_column(obs, "perturbation", perts)
        for k in cov_keys:
            _write_string_column(obs, k, covs[k])
        ds = obs.create_dataset("n_cells", data=np.array(counts, dtype=np.int64))
        ds.attrs["encoding-type"] = "array"
        ds.attrs["encoding-version"] = "0.2.0"
        _frame_attrs(obs, "_index", ["perturbation", *cov_keys, "n_cells"])
        var = f.create_group("var")
        _write_string_column(var, "_index", gene_names)
        _frame_attrs(var, "_index", [])
    return X.shape
