"""Command-line entry points: convert (h5ad in) and export (aggregates out).

Failures exit with status 1 and a single ``CODE: message`` line on stderr.
"""

from __future__ import annotations

import argparse
import sys

from .convert import convert, export_aggregates, read_manifest
from .errors import BridgeError, UsageError

PROG = "h5ad-bridge"


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog=PROG, description="h5ad container converter")
    sub = parser.add_subparsers(dest="command", metavar="subcommand")
    sub.required = True

    sp = sub.add_parser("convert",
                        help="translate an h5ad container into a dataset directory")
    sp.add_argument("--input", required=True, help="source .h5ad file")
    sp.add_argument("--manifest", required=True,
                    help="key<TAB>value manifest file")
    sp.add_argument("--out", required=True, help="destination directory")

    sp = sub.add_parser("export",
                        help="write a condition-aggregate TSV as an h5ad file")
    sp.add_argument("--input", required=True, help="aggregates.tsv file")
    sp.add_argument("--out", required=True, help="destination .h5ad file")
    return parser


def main(argv=None) -> int:
    try:
        args = build_parser().parse_args(argv)
        if args.command == "convert":
            report = convert(args.input, read_manifest(args.manifest), args.out)
            print(f"wrote {args.out}: {report.n_cells} cells x "
                  f"{report.n_genes} genes, {report.nnz} nonzeros, "
                  f"{len(report.dropped)} dropped")
        else:
            n, g = export_aggregates(args.input, args.out)
            print(f"wrote {args.out}: {n} conditions x {g} genes")
        return 0
    except BridgeError as exc:
        print(f"{exc.code}: {' '.join(str(exc).split()) or exc.code}",
              file=sys.stderr)
        return 1
    except OSError as exc:
        print(f"E_IO: {' '.join(str(exc).split())}", file=sys.stderr)
        return 1
    except KeyboardInterrupt:
        raise
    except Exception as exc:  # pragma: no cover
        print(f"E_INTERNAL: {type(exc).__name__}: "
              f"{' '.join(str(exc).split())}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
