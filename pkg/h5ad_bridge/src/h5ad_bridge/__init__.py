"""Convert h5ad single-cell containers to the perturbkit dataset directory
format, and export condition aggregates back to h5ad."""

from .convert import (ConversionManifest, ConversionReport, convert,
                      export_aggregates, fmt_float, read_manifest, write_mtx)
from .errors import (BridgeError, FormatError, MissingColumnError, UsageError,
                     ValueSpaceError)
from .reader import (list_columns, open_h5ad, read_column, read_index,
                     read_matrix)

__all__ = [
    "BridgeError",
    "ConversionManifest",
    "ConversionReport",
    "FormatError",
    "MissingColumnError",
    "UsageError",
    "ValueSpaceError",
    "convert",
    "export_aggregates",
    "fmt_float",
    "list_columns",
    "open_h5ad",
    "read_column",
    "read_index",
    "read_manifest",
    "read_matrix",
    "write_mtx",
]

__version__ = "0.1.0"
