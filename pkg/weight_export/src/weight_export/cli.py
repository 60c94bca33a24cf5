"""Command line front end.

Two subcommands: ``export`` turns one torchvision backbone into the
engine's spec + weight container + verification fixture, ``export-data``
converts a source dataset archive into the engine's ingestion layout.
Exit codes: 0 success, 1 any failure (bad arguments, missing or corrupt
sources, unrepresentable layers).
"""

import argparse
import sys

from .datasets import export_dataset
from .errors import ExportError
from .networks import ARCH_NAMES, export_network, write_export

EXIT_OK = 0
EXIT_ERROR = 1


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise ExportError(message)


def cmd_export(args) -> int:
    export = export_network(args.arch)
    paths = write_export(export, args.out)
    taps = sum(1 for entry in export.spec_doc["layers"] if entry.get("tap"))
    print(f"{args.arch}: {len(export.spec_doc['layers'])} layers, "
          f"{taps} taps, {len(export.tensors)} tensors")
    print(f"weights source: {export.meta['weights_source']}")
    for warning in export.meta["warnings"]:
        print(f"warning: {warning}", file=sys.stderr)
    for kind in ("spec", "weights", "fixture"):
        print(f"wrote {paths[kind]}")
    return EXIT_OK


def cmd_export_data(args) -> int:
    manifest = export_dataset(args.dataset, args.src, args.out,
                              skip_checksum=args.skip_checksum)
    for key, count in sorted(manifest["counts"].items()):
        print(f"{args.dataset} {key}: {count} records")
    for note in manifest["notes"]:
        print(f"note: {note}")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(
        prog="weight-export",
        description="Export pretrained backbones and datasets into the "
                    "similarity engine's file formats.")
    sub = parser.add_subparsers(dest="command", metavar="command",
                                parser_class=_Parser)
    sub.required = True

    p = sub.add_parser("export",
                       help="export one backbone to spec + weights + fixture")
    p.add_argument("--arch", required=True,
                   help=f"one of: {', '.join(ARCH_NAMES)}")
    p.add_argument("--out", required=True, help="output directory")
    p.set_defaults(func=cmd_export)

    p = sub.add_parser("export-data",
                       help="convert a dataset archive to the engine layout")
    p.add_argument("--dataset", required=True,
                   help="one of: bapps, stl10, svhn")
    p.add_argument("--src", required=True,
                   help="source archive file or directory")
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--skip-checksum", action="store_true",
                   help="skip source checksum verification (for subsampled "
                        "or synthetic archives)")
    p.set_defaults(func=cmd_export_data)
    return parser


def main(argv=None) -> int:
    try:
        args = build_parser().parse_args(argv)
        return args.func(args)
    except ExportError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_ERROR


if __name__ == "__main__":
    sys.exit(main())
