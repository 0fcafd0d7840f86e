"""Minimal h5ad reading: the expression matrix and the obs/var data frames.

Supports the layouts anndata has written over the years: dense ``X`` datasets,
CSR/CSC groups tagged with ``encoding-type``, categorical columns stored as
``codes`` + ``categories`` groups, and the legacy variant where a column
dataset carries an object reference to its categories in its attributes.
Everything is materialized in memory; this is a batch converter, not a
streaming reader.
"""

from __future__ import annotations

import numpy as np

try:
    import h5py
except ImportError as exc:  # pragma: no cover
    raise ImportError("h5ad-bridge requires h5py") from exc

from .errors import FormatError, MissingColumnError

SKIPPED_ROOT_KEYS = ("layers", "obsm", "obsp", "varm", "varp", "uns", "raw")


def open_h5ad(path: str) -> "h5py.File":
    try:
        f = h5py.File(path, "r")
    except (OSError, Exception) as exc:
        if isinstance(exc, OSError):
            raise FormatError(f"{path}: not a readable HDF5 container ({exc})")
        raise
    if "X" not in f or "obs" not in f or "var" not in f:
        present = sorted(f.keys())
        f.close()
        raise FormatError(
            f"{path}: missing X/obs/var; found root keys {present}")
    return f


def _decode(value) -> str:
    if isinstance(value, bytes):
        return value.decode("utf-8")
    return str(value)


def _attr(node, name: str, default=None):
    if name in node.attrs:
        return _decode(node.attrs[name])
    return default


def _to_strings(values: np.ndarray) -> list[str]:
    out = []
    for v in values:
        if isinstance(v, bytes):
            out.append(v.decode("utf-8"))
        elif isinstance(v, str):
            out.append(v)
        elif isinstance(v, (bool, np.bool_)):
            out.append("true" if v else "false")
        elif isinstance(v, (int, np.integer)):
            out.append(str(int(v)))
        elif isinstance(v, (float, np.floating)):
            f = float(v)
            out.append(str(int(f)) if f.is_integer() else repr(f))
        else:
            out.append(str(v))
    return out


def read_matrix(f: "h5py.File", key: str = "X") -> np.ndarray:
    """Return the expression matrix as a dense float64 array (cells x genes)."""
    node = f[key]
    if isinstance(node, h5py.Dataset):
        return np.asarray(node[...], dtype=np.float64)
    enc = _attr(node, "encoding-type") or _attr(node, "h5sparse_format", "")
    if not {"data", "indices", "indptr"} <= set(node.keys()):
        raise FormatError(f"{key}: group is not a recognized sparse layout")
    shape = node.attrs.get("shape", node.attrs.get("h5sparse_shape"))
    if shape is None:
        raise FormatError(f"{key}: sparse group lacks a shape attribute")
    n, g = (int(s) for s in np.asarray(shape).ravel())
    data = np.asarray(node["data"][...], dtype=np.float64)
    indices = np.asarray(node["indices"][...], dtype=np.int64)
    indptr = np.asarray(node["indptr"][...], dtype=np.int64)
    dense = np.zeros((n, g), dtype=np.float64)
    if enc.startswith("csr") or enc == "csr_matrix":
        for i in range(n):
            cols = indices[indptr[i]:indptr[i + 1]]
            dense[i, cols] = data[indptr[i]:indptr[i + 1]]
    elif enc.startswith("csc") or enc == "csc_matrix":
        for j in range(g):
            rows = indices[indptr[j]:indptr[j + 1]]
            dense[rows, j] = data[indptr[j]:indptr[j + 1]]
    else:
        raise FormatError(f"{key}: unknown sparse encoding {enc!r}")
    return dense


def read_index(f: "h5py.File", frame: str) -> list[str]:
    """Row labels of the obs or var frame."""
    grp = f[frame]
    name = _attr(grp, "_index")
    if name is None:
        for candidate in ("_index", "index"):
            if candidate in grp:
                name = candidate
                break
    if name is None or name not in grp:
        raise FormatError(f"{frame}: no index column")
    return _to_strings(np.asarray(grp[name][...]))


def list_columns(f: "h5py.File", frame: str) -> list[str]:
    """Column names of the obs or var frame, index excluded, source order."""
    grp = f[frame]
    index_name = _attr(grp, "_index") or "_index"
    order = grp.attrs.get("column-order")
    if order is not None:
        names = [_decode(n) for n in np.asarray(order).ravel()]
    else:
        names = [k for k in grp.keys()]
    return [n for n in names
            if n in grp and n != index_name and n != "index"
            and n != "__categories"]


def read_column(f: "h5py.File", frame: str, name: str) -> list[str]:
    """One obs/var column as strings, decoding categoricals."""
    grp = f[frame]
    if name not in grp:
        raise MissingColumnError(
            f"column {name!r} not found in {frame}; available: "
            f"{', '.join(list_columns(f, frame)) or '(none)'}")
    node = grp[name]
    if isinstance(node, h5py.Group):
        if not {"codes", "categories"} <= set(node.keys()):
            raise FormatError(f"{frame}/{name}: group is not categorical")
        cats = _to_strings(np.asarray(node["categories"][...]))
        codes = np.asarray(node["codes"][...], dtype=np.int64)
        return [cats[c] if c >= 0 else "" for c in codes]
    if "categories" in node.attrs:
        ref = node.attrs["categories"]
        cats = _to_strings(np.asarray(f[ref][...]))
        codes = np.asarray(node[...], dtype=np.int64)
        return [cats[c] if c >= 0 else "" for c in codes]
    return _to_strings(np.asarray(node[...]))
