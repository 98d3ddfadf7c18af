"""Run-configuration file handling and sweep expansion.

Configs are TOML with ``[model]``, ``[train]``, ``[sparsifier]`` and
optional ``[comm]``, ``[output]``, ``[sweep]`` tables.  Sweep axes
(sparsifier kinds x worker counts x densities) expand into independent
run points named ``<kind>_n<workers>_d<density>``.  The seed comes from
the command line, never the file, so no run is silently nondeterministic.
"""

from __future__ import annotations

import itertools
from dataclasses import dataclass

try:
    import tomllib  # Python >= 3.11
except ModuleNotFoundError:  # pragma: no cover - depends on interpreter
    import tomli as tomllib

from .models import BlockQuadraticSpec, MlpSpec
from .sparsifiers import SparsifierConfig
from .trainer import RunConfig, TrainConfig


class ConfigError(Exception):
    """Invalid configuration file or overrides."""


def _take(table: dict, section: str, allowed: dict[str, type | tuple[type, ...]]) -> dict:
    """Pull allowed keys out of a section, rejecting unknown ones."""
    unknown = set(table) - set(allowed)
    if unknown:
        raise ConfigError(f"[{section}] unknown key(s): {', '.join(sorted(unknown))}")
    out = {}
    for key, expected in allowed.items():
        if key in table:
            value = table[key]
            if expected is float and isinstance(value, int) and not isinstance(value, bool):
                value = float(value)
            if not isinstance(value, expected):
                raise ConfigError(f"[{section}] {key}: expected {expected}, got {type(value).__name__}")
            out[key] = value
    return out


def _model_spec(table: dict) -> BlockQuadraticSpec | MlpSpec:
    kind = table.get("kind")
    if kind == "block_quadratic":
        fields = _take(table, "model", {
            "kind": str, "block_sizes": list, "scales": list, "noise_sigma": float,
        })
        try:
            return BlockQuadraticSpec(
                block_sizes=tuple(int(s) for s in fields["block_sizes"]),
                scales=tuple(float(s) for s in fields["scales"]),
                noise_sigma=fields.get("noise_sigma", 0.0),
            )
        except (KeyError, ValueError) as exc:
            raise ConfigError(f"[model] {exc}") from exc
    if kind == "mlp":
        fields = _take(table, "model", {
            "kind": str, "input_dim": int, "hidden": list, "n_classes": int,
            "n_samples": int, "class_offset": float,
        })
        try:
            return MlpSpec(
                input_dim=fields["input_dim"],
                hidden=tuple(int(h) for h in fields["hidden"]),
                n_classes=fields.get("n_classes", 2),
                n_samples=fields.get("n_samples", 512),
                class_offset=fields.get("class_offset", 2.0),
            )
        except (KeyError, ValueError) as exc:
            raise ConfigError(f"[model] {exc}") from exc
    raise ConfigError(f"[model] kind must be 'block_quadratic' or 'mlp', got {kind!r}")


@dataclass(frozen=True)
class Experiment:
    points: tuple[tuple[str, RunConfig], ...]
    out_dir: str


def point_name(cfg: RunConfig) -> str:
    sp = cfg.sparsifier
    n = cfg.train.n_workers
    if sp.kind == "hard_threshold":
        return f"{sp.kind}_n{n}_t{sp.threshold:g}"
    return f"{sp.kind}_n{n}_d{sp.density:g}"


def parse_file(path) -> dict:
    try:
        with open(path, "rb") as fh:
            return tomllib.load(fh)
    except tomllib.TOMLDecodeError as exc:
        raise ConfigError(f"{path}: {exc}") from exc


def build_experiment(
    raw: dict,
    seed: int,
    out_dir: str | None = None,
    mode: str | None = None,
    strict_alg1: bool | None = None,
) -> Experiment:
    """Resolve a parsed config plus CLI overrides into run points."""
    known_sections = {"model", "train", "sparsifier", "comm", "output", "sweep"}
    unknown = set(raw) - known_sections
    if unknown:
        raise ConfigError(f"unknown section(s): {', '.join(sorted(unknown))}")
    for section in ("model", "train", "sparsifier"):
        if section not in raw:
            raise ConfigError(f"missing required section [{section}]")

    model = _model_spec(raw["model"])

    train_fields = _take(raw["train"], "train", {
        "n_workers": int, "iterations": int, "lr": float, "lr_decay_at": int,
        "lr_decay_factor": float, "batch_size": int, "mode": str,
        "strict_alg1": bool, "timing": bool,
    })
    if mode is not None:
        train_fields["mode"] = mode
    if strict_alg1 is not None:
        train_fields["strict_alg1"] = strict_alg1

    sp_fields = _take(raw["sparsifier"], "sparsifier", {
        "kind": str, "density": float, "threshold": float,
    })
    comm = _take(raw.get("comm", {}), "comm", {"alpha": float, "beta": float})
    output = _take(raw.get("output", {}), "output", {"dir": str})
    sweep = _take(raw.get("sweep", {}), "sweep", {
        "kinds": list, "n_workers": list, "densities": list,
    })

    kinds = sweep.get("kinds", [sp_fields.get("kind")])
    workers = sweep.get("n_workers", [train_fields.get("n_workers")])
    densities = sweep.get("densities", [sp_fields.get("density")])
    if any(v is None for v in (*kinds, *workers)):
        raise ConfigError("[sparsifier] kind and [train] n_workers are required (directly or via [sweep])")

    points = []
    try:
        for kind, n, d in itertools.product(kinds, workers, densities):
            if kind == "hard_threshold":
                sparsifier = SparsifierConfig(kind=kind, threshold=sp_fields.get("threshold"))
            else:
                if d is None:
                    raise ConfigError("[sparsifier] density is required (directly or via [sweep])")
                sparsifier = SparsifierConfig(kind=kind, density=float(d))
            train = TrainConfig(**{**train_fields, "n_workers": int(n)})
            cfg = RunConfig(
                model=model, train=train, sparsifier=sparsifier, seed=seed,
                alpha=comm.get("alpha", 1.0), beta=comm.get("beta", 0.001),
            )
            points.append((point_name(cfg), cfg))
    except (TypeError, ValueError) as exc:
        raise ConfigError(str(exc)) from exc

    chosen_dir = out_dir if out_dir is not None else output.get("dir", "artifacts")
    return Experiment(points=tuple(points), out_dir=chosen_dir)


def run_config_to_dict(cfg: RunConfig) -> dict:
    from .trainer import _config_dict

    return _config_dict(cfg)


def run_config_from_dict(data: dict) -> RunConfig:
    """Rebuild a RunConfig from a summary echo; inverse of the echo dict."""
    model_data = dict(data["model"])
    kind = model_data.pop("kind")
    if kind == "block_quadratic":
        model = BlockQuadraticSpec(
            block_sizes=tuple(model_data["block_sizes"]),
            scales=tuple(model_data["scales"]),
            noise_sigma=model_data["noise_sigma"],
        )
    elif kind == "mlp":
        model = MlpSpec(
            input_dim=model_data["input_dim"],
            hidden=tuple(model_data["hidden"]),
            n_classes=model_data["n_classes"],
            n_samples=model_data["n_samples"],
            class_offset=model_data["class_offset"],
        )
    else:
        raise ConfigError(f"unknown model kind {kind!r}")
    train = TrainConfig(**{k: (tuple(v) if isinstance(v, list) else v) for k, v in data["train"].items()})
    sparsifier = SparsifierConfig(**data["sparsifier"])
    return RunConfig(
        model=model, train=train, sparsifier=sparsifier,
        seed=data["seed"], alpha=data["alpha"], beta=data["beta"],
    )
