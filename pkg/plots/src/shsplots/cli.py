"""Figure regeneration command: render --kind K --in FILES --out PATH."""

from __future__ import annotations

import argparse
import sys

from .figures import KINDS, FigureSpec, render
from .readers import FormatError


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="shsplot",
                                     description="Regenerate figures from "
                                                 "simulation CSV/checkpoint outputs")
    sub = parser.add_subparsers(dest="command", required=True)
    p = sub.add_parser("render", help="render one figure")
    p.add_argument("--kind", required=True, choices=KINDS)
    p.add_argument("--in", dest="inputs", required=True, nargs="+",
                   help="input files (order matters per kind)")
    p.add_argument("--out", required=True, help="output image path")
    p.add_argument("--times", default="",
                   help="comma-separated snapshot times (density_snapshots)")
    p.add_argument("--grid", type=int, default=200)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    times = [float(v) for v in args.times.split(",") if v.strip()]
    try:
        spec = FigureSpec(kind=args.kind, inputs=args.inputs, output=args.out,
                          times=times, grid=args.grid)
        render(spec)
        return 0
    except (FormatError, FileNotFoundError) as err:
        print(f"error: {err}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
