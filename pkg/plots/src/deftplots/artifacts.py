"""Read and validate deftsim metrics artifacts.

This package talks to the simulator only through its published file
contract: per-run metrics CSVs (fixed column schema, one row per
iteration) and the sibling summary JSONs carrying the config echo.
"""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass
from glob import glob
from pathlib import Path

import numpy as np

SCHEMA = [
    "iteration", "actual_density", "error_norm", "loss", "acc",
    "t_forward", "t_backward", "t_select", "t_comm", "t_partition",
    "C_n", "f_n", "f_trivial", "bytes_idx", "bytes_grad",
]

PHASE_COLUMNS = ["t_forward", "t_backward", "t_select", "t_comm", "t_partition"]


class SchemaError(Exception):
    """Artifact does not conform to the metrics CSV contract."""


@dataclass
class RunArtifact:
    name: str
    path: Path
    columns: dict[str, np.ndarray]     # numeric columns; blanks become NaN
    config: dict | None                # sibling JSON echo, when present

    @property
    def kind(self) -> str | None:
        if self.config:
            return self.config["sparsifier"]["kind"]
        return None

    @property
    def n_workers(self) -> int | None:
        if self.config:
            return self.config["train"]["n_workers"]
        return None

    @property
    def density(self) -> float | None:
        if self.config:
            return self.config["sparsifier"].get("density")
        return None


def _to_array(values: list[str], column: str) -> np.ndarray:
    out = np.empty(len(values))
    for i, v in enumerate(values):
        if v == "":
            out[i] = np.nan
        else:
            try:
                out[i] = float(v)
            except ValueError as exc:
                raise SchemaError(f"column {column!r}: non-numeric value {v!r} at row {i}") from exc
    return out


def load_run(path: str | Path) -> RunArtifact:
    path = Path(path)
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise SchemaError(f"{path}: empty file") from None
        if header != SCHEMA:
            extra = [c for c in header if c not in SCHEMA]
            missing = [c for c in SCHEMA if c not in header]
            offender = (extra + missing or ["<column order>"])[0]
            raise SchemaError(f"{path}: schema mismatch at column {offender!r}")
        rows = list(reader)
    if not rows:
        raise SchemaError(f"{path}: no data rows")
    columns = {
        name: _to_array([row[i] for row in rows], name) for i, name in enumerate(SCHEMA)
    }

    config = None
    summary_path = path.with_suffix(".json")
    if summary_path.exists():
        with open(summary_path) as fh:
            summary = json.load(fh)
        config = summary.get("config")
    return RunArtifact(name=path.stem, path=path, columns=columns, config=config)


def load_glob(pattern: str) -> list[RunArtifact]:
    paths = sorted(glob(pattern))
    if not paths:
        raise SchemaError(f"no artifacts match {pattern!r}")
    return [load_run(p) for p in paths]


def configured_densities(runs: list[RunArtifact]) -> list[float]:
    return sorted({r.density for r in runs if r.density is not None})
