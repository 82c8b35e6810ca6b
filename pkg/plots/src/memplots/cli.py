"""Standalone figure renderer: `contmem-plot <kind> --in data.csv --out fig`."""

from __future__ import annotations

import argparse
import sys

from .figures import REQUIRED_COLUMNS, FigureSpec, PlotError, render


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="contmem-plot",
                                description="render experiment CSVs as figures")
    p.add_argument("kind", choices=sorted(REQUIRED_COLUMNS))
    p.add_argument("--in", dest="in_path", required=True, help="input CSV")
    p.add_argument("--out", dest="out_path", required=True,
                   help="output base path (.png and .svg are written)")
    p.add_argument("--xlabel", default="")
    p.add_argument("--ylabel", default="")
    p.add_argument("--title", default="")
    return p


def main(argv=None) -> int:
    try:
        args = build_parser().parse_args(argv)
    except SystemExit as e:
        return e.code if isinstance(e.code, int) else 2
    spec = FigureSpec(kind=args.kind, in_path=args.in_path, out_path=args.out_path,
                      xlabel=args.xlabel, ylabel=args.ylabel, title=args.title)
    try:
        for path in render(spec):
            print(path)
    except PlotError as e:
        print(f"error: {e}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
