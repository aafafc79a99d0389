"""Command line for backbone embedding extraction, mirroring the consumer
tool's conventions (exit 0 success, 1 user/config error, 2 data error)."""

from __future__ import annotations

import argparse
import logging
import sys

from .backbones import BACKBONE_KINDS, BackboneError, MissingDependencyError
from .extract import ExtractorSpec, extract
from .xyz import XyzFormatError


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise _UsageError(f"{self.format_usage()}error: {message}")


class _UsageError(Exception):
    pass


def build_parser() -> _Parser:
    parser = _Parser(prog="probe-extract",
                     description="Export per-atom embeddings from a frozen "
                                 "backbone checkpoint into a PEC container")
    parser.add_argument("--backbone", required=True, choices=BACKBONE_KINDS)
    parser.add_argument("--checkpoint", required=True,
                        help="TorchScript archive or pickled torch module")
    parser.add_argument("--structures", required=True,
                        help="XYZ file (charge=/energy=/id= comment fields)")
    parser.add_argument("--out", required=True, help="output PEC path")
    parser.add_argument("--embed-key", default="embeddings",
                        help="output-dict key holding per-atom embeddings")
    parser.add_argument("--hook", default=None,
                        help="submodule path to capture instead of an output key "
                             "(eager checkpoints only)")
    parser.add_argument("-v", "--verbose", action="store_true")
    return parser


def main(argv=None) -> int:
    logging.basicConfig(format="%(levelname)s %(name)s: %(message)s")
    try:
        args = build_parser().parse_args(argv)
    except _UsageError as exc:
        print(str(exc), file=sys.stderr)
        return 1
    if args.verbose:
        logging.getLogger("probe_extractors").setLevel(logging.INFO)
    spec = ExtractorSpec(backbone=args.backbone, checkpoint=args.checkpoint,
                         structures=args.structures, out=args.out,
                         embed_key=args.embed_key, hook_path=args.hook)
    try:
        summary = extract(spec)
    except MissingDependencyError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except (XyzFormatError, BackboneError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    print(f"wrote {summary.written} records (d={summary.embed_dim}, "
          f"charges={'yes' if summary.has_charges else 'no'}, "
          f"ref_energy={'yes' if summary.has_ref_energy else 'no'}) to {spec.out}")
    if summary.skipped:
        print(f"skipped {len(summary.skipped)} structures "
              f"(first: id {summary.skipped[0][0]}: {summary.skipped[0][1]})")
    return 0


if __name__ == "__main__":
    sys.exit(main())
