"""Experiment runner CLI.

``deftsim run --config exp.toml --seed 42`` executes every sweep point
in the config and writes one metrics CSV plus one summary JSON per
point.  ``deftsim report --out artifacts`` aggregates the artifacts in
a directory into density, speedup, and error tables (text to stdout,
CSV alongside the artifacts).

Exit codes: 0 success, 1 configuration error, 2 numeric failure during
training, 3 I/O error.
"""

from __future__ import annotations

import argparse
import json
import sys
from collections import defaultdict
from pathlib import Path

from .collectives import CollectiveDesync
from .config import ConfigError, build_experiment, parse_file, run_config_to_dict
from .metrics import MetricsCsvWriter, write_summary_json
from .models import NumericFault
from .trainer import run_training

EXIT_OK = 0
EXIT_CONFIG = 1
EXIT_NUMERIC = 2
EXIT_IO = 3


def _parse_bool(text: str) -> bool:
    if text.lower() in ("true", "1", "yes"):
        return True
    if text.lower() in ("false", "0", "no"):
        return False
    raise argparse.ArgumentTypeError(f"expected true or false, got {text!r}")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="deftsim", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    run_p = sub.add_parser("run", help="execute the runs described by a config file")
    run_p.add_argument("--config", required=True, help="TOML run configuration")
    run_p.add_argument("--seed", required=True, type=int, help="RNG seed (mandatory; no silent nondeterminism)")
    run_p.add_argument("--out", default=None, help="artifact directory (overrides [output] dir)")
    run_p.add_argument("--mode", choices=("lockstep", "concurrent"), default=None,
                       help="override execution mode")
    run_p.add_argument("--strict-alg1", type=_parse_bool, default=None, metavar="true|false",
                       help="contribute residuals at foreign indices (true) or zero-fill (false)")
    run_p.add_argument("--validate-only", action="store_true",
                       help="parse and print the resolved config, then exit")
    run_p.add_argument("--export-ledger", action="store_true",
                       help="also write a per-point collective ledger CSV")

    report_p = sub.add_parser("report", help="aggregate artifact directory into tables")
    report_p.add_argument("--out", required=True, help="artifact directory to aggregate")
    return parser


def _cmd_run(args: argparse.Namespace) -> int:
    try:
        raw = parse_file(args.config)
        experiment = build_experiment(
            raw, seed=args.seed, out_dir=args.out,
            mode=args.mode, strict_alg1=args.strict_alg1,
        )
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except OSError as exc:
        print(f"i/o error: {exc}", file=sys.stderr)
        return EXIT_IO

    print(f"sweep: {len(experiment.points)} point(s)")
    if args.validate_only:
        for name, cfg in experiment.points:
            print(f"--- {name}")
            print(json.dumps(run_config_to_dict(cfg), indent=2, sort_keys=True))
        return EXIT_OK

    out_dir = Path(experiment.out_dir)
    try:
        out_dir.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        print(f"i/o error: {exc}", file=sys.stderr)
        return EXIT_IO

    for name, cfg in experiment.points:
        csv_path = out_dir / f"{name}.csv"
        json_path = out_dir / f"{name}.json"
        try:
            with MetricsCsvWriter(csv_path) as writer:
                result = run_training(cfg, on_iteration=writer.write)
            write_summary_json(json_path, result.summary(run_config_to_dict(cfg)))
            if args.export_ledger:
                result.ledger.to_csv(out_dir / f"{name}_ledger.csv")
        except (NumericFault, CollectiveDesync) as exc:
            print(f"numeric failure in {name}: {exc} (partial CSV kept at {csv_path})", file=sys.stderr)
            return EXIT_NUMERIC
        except OSError as exc:
            print(f"i/o error: {exc}", file=sys.stderr)
            return EXIT_IO
        print(f"wrote {csv_path} and {json_path}")
    return EXIT_OK


def _load_summaries(out_dir: Path) -> list[dict]:
    summaries = []
    for path in sorted(out_dir.glob("*.json")):
        with open(path) as fh:
            data = json.load(fh)
        if "config" in data:
            data["_name"] = path.stem
            summaries.append(data)
    return summaries


def _format_table(header: list[str], rows: list[list[str]]) -> str:
    widths = [max(len(str(r[i])) for r in [header, *rows]) for i in range(len(header))]
    lines = ["  ".join(str(cell).ljust(w) for cell, w in zip(row, widths)) for row in [header, *rows]]
    lines.insert(1, "  ".join("-" * w for w in widths))
    return "\n".join(lines)


def _write_table(path: Path, header: list[str], rows: list[list[str]]) -> None:
    with open(path, "w") as fh:
        fh.write(",".join(header) + "\n")
        for row in rows:
            fh.write(",".join(str(c) for c in row) + "\n")


def _cmd_report(args: argparse.Namespace) -> int:
    out_dir = Path(args.out)
    if not out_dir.is_dir():
        print(f"error: {out_dir} is not a directory", file=sys.stderr)
        return EXIT_IO
    summaries = _load_summaries(out_dir)
    if not summaries:
        print(f"error: no run summaries found in {out_dir}", file=sys.stderr)
        return EXIT_CONFIG

    # density vs workers, one column per sparsifier kind
    by_kind: dict[str, dict[int, float]] = defaultdict(dict)
    for s in summaries:
        kind = s["config"]["sparsifier"]["kind"]
        n = s["config"]["train"]["n_workers"]
        by_kind[kind][n] = s["mean_density"]
    kinds = sorted(by_kind)
    workers = sorted({n for col in by_kind.values() for n in col})
    density_rows = [
        [str(n)] + [f"{by_kind[k][n]:.6f}" if n in by_kind[k] else "" for k in kinds]
        for n in workers
    ]
    density_header = ["n_workers", *kinds]

    speedup_rows = []
    for s in summaries:
        sp = s["speedup"]
        if sp["mean_f_n"] is None:
            continue
        speedup_rows.append([
            s["_name"],
            str(s["config"]["train"]["n_workers"]),
            f"{sp['mean_f_n']:.4f}",
            f"{sp['mean_f_trivial']:.4f}" if sp["mean_f_trivial"] is not None else "",
        ])
    speedup_header = ["run", "n_workers", "mean_f_n", "mean_f_trivial"]

    error_rows = [
        [s["_name"], f"{s['final_error_norm']:.6g}", f"{s['final_loss']:.6g}", f"{s['mean_density']:.6f}"]
        for s in summaries
    ]
    error_header = ["run", "final_error_norm", "final_loss", "mean_density"]

    for title, header, rows, fname in (
        ("actual density vs workers", density_header, density_rows, "report_density.csv"),
        ("selection speedup vs workers", speedup_header, speedup_rows, "report_speedup.csv"),
        ("error summary", error_header, error_rows, "report_error.csv"),
    ):
        print(f"\n== {title}")
        print(_format_table(header, rows))
        _write_table(out_dir / fname, header, rows)
    return EXIT_OK


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    if args.command == "run":
        return _cmd_run(args)
    return _cmd_report(args)


if __name__ == "__main__":
    sys.exit(main())
