"""Command-line entry: export a backbone checkpoint to the portable graph
format and record its parity probe."""

from __future__ import annotations

import argparse
import sys

from .export import EXPORTER_VERSION, export_backbone
from .onnx_writer import ExportError


def main(argv=None) -> int:
    parser = argparse.ArgumentParser(
        prog="export_backbone",
        description="Convert a vision-transformer checkpoint into the "
                    "portable neural-network graph format with a parity probe")
    parser.add_argument("--model", required=True,
                        help="vitb14 | vitb14-random[:seed] | "
                             "tiny-random[:seed] | path to a .pth state dict")
    parser.add_argument("--out", required=True, help="graph output path (.onnx)")
    parser.add_argument("--probe", help="probe raster path (default: "
                                        "<out>.probe.png, JSON beside it)")
    parser.add_argument("--version", action="version",
                        version=f"export_backbone {EXPORTER_VERSION}")
    args = parser.parse_args(argv)
    try:
        probe = export_backbone(args.model, args.out, args.probe)
    except ExportError as e:
        print(f"export failed: {e}", file=sys.stderr)
        return 1
    print(f"graph -> {args.out} (sha256 {probe.graph_sha256[:16]}...)")
    print(f"probe reference: {len(probe.reference)} values, "
          f"raster sha256 {probe.probe_sha256[:16]}...")
    return 0


if __name__ == "__main__":
    sys.exit(main())
