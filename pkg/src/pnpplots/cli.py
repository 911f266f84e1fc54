"""Command line entry point for rendering solver CSV output."""

from __future__ import annotations

import argparse
import sys
from pathlib import Path

from .render import KINDS, PlotDataError, PlotSpec, render

EXIT_OK = 0
EXIT_DATA = 4


def main(argv=None) -> int:
    parser = argparse.ArgumentParser(
        prog="pnp-plots",
        description="Render figures from solver CSV output")
    parser.add_argument("--in", dest="in_dir", required=True,
                        help="directory holding the solver CSV files")
    parser.add_argument("--kind", choices=list(KINDS), required=True,
                        help="which figure to draw")
    parser.add_argument("--out", required=True, help="output image path")
    parser.add_argument("--field", default=None,
                        help="restrict to a single field, e.g. rho_1 or phi")
    args = parser.parse_args(argv)

    spec = PlotSpec(in_dir=Path(args.in_dir), kind=args.kind,
                    out_path=Path(args.out), field=args.field)
    try:
        path = render(spec)
    except PlotDataError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_DATA
    print(f"wrote {path}")
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
