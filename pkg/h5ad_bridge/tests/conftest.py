import h5py
import numpy as np
import pytest


def string_array(values):
    return np.array(values, dtype=h5py.string_dtype("utf-8"))


def write_frame(f, name, index, columns=None, categorical=(), index_attr="_index"):
    """obs/var group in the modern anndata layout."""
    grp = f.create_group(name)
    grp.attrs["encoding-type"] = "dataframe"
    grp.attrs["encoding-version"] = "0.2.0"
    grp.attrs["_index"] = index_attr
    grp.attrs["column-order"] = string_array(sorted(columns or {}))
    grp.create_dataset(index_attr, data=string_array(index))
    for col, values in (columns or {}).items():
        if col in categorical:
            cats = sorted(set(values))
            code_of = {c: i for i, c in enumerate(cats)}
            sub = grp.create_group(col)
            sub.attrs["encoding-type"] = "categorical"
            sub.create_dataset("categories", data=string_array(cats))
            sub.create_dataset(
                "codes", data=np.array([code_of[v] for v in values], dtype=np.int8))
        elif isinstance(values[0], str):
            grp.create_dataset(col, data=string_array(values))
        else:
            grp.create_dataset(col, data=np.asarray(values))


def write_x_dense(f, X, dtype=np.float64):
    f.create_dataset("X", data=np.asarray(X, dtype=dtype))


def write_x_sparse(f, X, fmt="csr"):
    X = np.asarray(X, dtype=np.float64)
    grp = f.create_group("X")
    grp.attrs["encoding-type"] = f"{fmt}_matrix"
    grp.attrs["encoding-version"] = "0.1.0"
    grp.attrs["shape"] = np.array(X.shape, dtype=np.int64)
    data, indices, indptr = [], [], [0]
    for line in (X if fmt == "csr" else X.T):
        nz = np.nonzero(line)[0]
        data.extend(line[nz])
        indices.extend(nz)
        indptr.append(indptr[-1] + len(nz))
    grp.create_dataset("data", data=np.array(data, dtype=np.float64))
    grp.create_dataset("indices", data=np.array(indices, dtype=np.int64))
    grp.create_dataset("indptr", data=np.array(indptr, dtype=np.int64))


def make_h5ad(path, X, cell_ids, gene_names, obs_columns,
              categorical=(), layout="dense", extras=()):
    with h5py.File(path, "w") as f:
        if layout == "dense":
            write_x_dense(f, X)
        else:
            write_x_sparse(f, X, fmt=layout)
        write_frame(f, "obs", cell_ids, obs_columns, categorical)
        write_frame(f, "var", gene_names)
        for name in extras:
            f.create_group(name)
    return path


@pytest.fixture
def tiny(tmp_path):
    """The smallest interesting screen: 3 cells, 4 genes, one combo."""
    X = np.array([[0.0, 1.0, 2.0, 0.0],
                  [3.0, 0.0, 0.0, 4.0],
                  [0.0, 5.0, 0.0, 6.0]])
    path = make_h5ad(
        tmp_path / "tiny.h5ad", X,
        cell_ids=["c0", "c1", "c2"],
        gene_names=["g0", "g1", "g2", "g3"],
        obs_columns={"perturbation": ["control", "KLF1", "KLF1+GATA1"],
                     "cell_type": ["A", "A", "B"],
                     "batch": ["b1", "b2", "b1"]},
        categorical=("cell_type",))
    return str(path), X


@pytest.fixture
def manifest_file(tmp_path):
    def write(**fields):
        fields.setdefault("perturbation_column", "perturbation")
        lines = []
        for key, value in fields.items():
            if value is None:
                continue
            if isinstance(value, (tuple, list)):
                value = ",".join(value)
            lines.append(f"{key}\t{value}")
        path = tmp_path / "manifest.tsv"
        path.write_text("\n".join(lines) + "\n", encoding="utf-8")
        return str(path)
    return write
