"""Render charts from deftsim metrics artifacts.

Either one chart per invocation:

    deftplots density_vs_workers --glob 'artifacts/*.csv' --out density.png

or a batch spec file (JSON list of {kind, glob, out}):

    deftplots render --spec charts.json

Rendering is read-only over the artifacts.  Exit codes: 0 success,
1 bad arguments or schema mismatch (the offending column is named).
"""

from __future__ import annotations

import argparse
import json
import sys

from .artifacts import SchemaError, load_glob
from .charts import CHART_KINDS, render


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="deftplots", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)
    for kind in CHART_KINDS:
        p = sub.add_parser(kind, help=f"render the {kind} chart")
        p.add_argument("--glob", required=True, help="metrics CSV glob")
        p.add_argument("--out", required=True, help="output image path")
    spec_p = sub.add_parser("render", help="render every chart in a spec file")
    spec_p.add_argument("--spec", required=True, help="JSON list of {kind, glob, out}")
    return parser


def _render_one(kind: str, pattern: str, out: str) -> None:
    runs = load_glob(pattern)
    path = render(kind, runs, out)
    print(f"wrote {path}")


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        if args.command == "render":
            with open(args.spec) as fh:
                entries = json.load(fh)
            if not isinstance(entries, list) or not entries:
                raise SchemaError(f"{args.spec}: expected a non-empty JSON list")
            for entry in entries:
                _render_one(entry["kind"], entry["glob"], entry["out"])
        else:
            _render_one(args.command, args.glob, args.out)
    except (SchemaError, OSError, KeyError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
