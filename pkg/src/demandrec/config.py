"""Experiment configuration: one JSON file, flags override keys."""
from __future__ import annotations

import json
import os
from dataclasses import dataclass, field

from .data import ColumnSchema, TimeScale
from .synthetic import SyntheticError, SyntheticSpec, spec_from_dict
from .training import TrainConfig

OUTPUT_ROOT_ENV = "DEMANDREC_OUTPUT_ROOT"


class ConfigError(ValueError):
    """Invalid experiment configuration; message names the offending field."""


@dataclass
class DataSource:
    """Either a delimited events file or an inline synthetic spec."""

    file: str | None = None
    schema: ColumnSchema = field(default_factory=ColumnSchema)
    synthetic: SyntheticSpec | None = None

    def __post_init__(self):
        if self.file is not None and self.synthetic is not None:
            raise ConfigError(
                "data: both a data file and a synthetic spec were given; choose one"
            )
        if self.file is None and self.synthetic is None:
            raise ConfigError("data: needs either data.file or data.synthetic")


@dataclass
class ExperimentConfig:
    seed: int
    output_dir: str
    data: DataSource
    train: TrainConfig
    join: str = "mlp"
    ks: tuple[int, ...] = (5, 10)

    def resolved_output_dir(self) -> str:
        root = os.environ.get(OUTPUT_ROOT_ENV)
        if root and not os.path.isabs(self.output_dir):
            return os.path.join(root, self.output_dir)
        return self.output_dir


def _schema_from_dict(raw: dict) -> ColumnSchema:
    allowed = {"user", "item", "timestamp", "delimiter", "header"}
    unknown = set(raw) - allowed
    if unknown:
        raise ConfigError(f"data.schema: unknown fields {sorted(unknown)}")
    return ColumnSchema(
        user=int(raw.get("user", 0)),
        item=int(raw.get("item", 1)),
        timestamp=int(raw.get("timestamp", 2)),
        delimiter=str(raw.get("delimiter", "\t")),
        header=bool(raw.get("header", True)),
    )


def _data_from_dict(raw: dict) -> DataSource:
    if not isinstance(raw, dict):
        raise ConfigError("data: expected a mapping")
    unknown = set(raw) - {"file", "schema", "synthetic"}
    if unknown:
        raise ConfigError(f"data: unknown fields {sorted(unknown)}")
    synthetic = None
    if "synthetic" in raw:
        try:
            synthetic = spec_from_dict(raw["synthetic"])
        except SyntheticError as exc:
            raise ConfigError(f"data.synthetic: {exc}") from exc
    return DataSource(
        file=raw.get("file"),
        schema=_schema_from_dict(raw.get("schema", {})),
        synthetic=synthetic,
    )


def _train_from_dict(raw: dict, scales, seed: int) -> TrainConfig:
    if not isinstance(raw, dict):
        raise ConfigError("train: expected a mapping")
    known = {
        "dim",
        "epochs",
        "learning_rate",
        "batch_size",
        "optimizer",
        "beta1",
        "beta2",
        "adam_eps",
        "pos_weight",
        "neg_weight",
        "scale_loss_weight",
        "clip_norm",
        "m_max_cap",
        "m_max_percentile",
        "mlp_hidden",
        "share_embeddings",
        "checkpoint_every",
        "select",
    }
    unknown = set(raw) - known
    if unknown:
        raise ConfigError(f"train: unknown fields {sorted(unknown)}")
    try:
        return TrainConfig(scales=tuple(scales), seed=seed, **raw)
    except (ValueError, TypeError) as exc:
        raise ConfigError(f"train: {exc}") from exc


def load_config(path: str, overrides: dict | None = None) -> ExperimentConfig:
    """Parse a JSON experiment config; ``overrides`` wins over file keys."""
    try:
        with open(path, "r", encoding="utf-8") as fh:
            raw = json.load(fh)
    except FileNotFoundError as exc:
        raise ConfigError(f"config file not found: {path}") from exc
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: invalid JSON ({exc})") from exc
    if not isinstance(raw, dict):
        raise ConfigError(f"{path}: top level must be a mapping")
    return build_config(raw, overrides or {})


def build_config(raw: dict, overrides: dict) -> ExperimentConfig:
    merged = dict(raw)
    for key, value in overrides.items():
        if value is None:
            continue
        if key in ("data_file", "synthetic_file"):
            data = dict(merged.get("data", {}))
            if key == "data_file":
                data["file"] = value
            else:
                with open(value, "r", encoding="utf-8") as fh:
                    data["synthetic"] = json.load(fh)
            merged["data"] = data
        elif key in ("epochs", "learning_rate", "batch_size", "dim", "select"):
            train = dict(merged.get("train", {}))
            train[key] = value
            merged["train"] = train
        else:
            merged[key] = value

    unknown = set(merged) - {"seed", "output_dir", "data", "scales", "join", "train", "ks"}
    if unknown:
        raise ConfigError(f"unknown config fields: {sorted(unknown)}")
    for required in ("output_dir", "data", "scales"):
        if required not in merged:
            raise ConfigError(f"missing required config field {required!r}")

    seed = int(merged.get("seed", 0))
    scales_raw = merged["scales"]
    if not isinstance(scales_raw, (list, tuple)) or not scales_raw:
        raise ConfigError("scales: expected a non-empty list")
    try:
        scales = tuple(TimeScale.parse(str(s)) for s in scales_raw)
    except ValueError as exc:
        raise ConfigError(f"scales: {exc}") from exc
    if len(set(scales)) != len(scales):
        raise ConfigError("scales: duplicate entries")

    join = str(merged.get("join", "mlp"))
    from .joining import STRATEGIES

    if join not in STRATEGIES:
        raise ConfigError(f"join: unknown strategy {join!r}; use one of {STRATEGIES}")
    ks_raw = merged.get("ks", [5, 10])
    try:
        ks = tuple(int(k) for k in ks_raw)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"ks: {exc}") from exc
    if not ks or any(k < 1 for k in ks):
        raise ConfigError("ks: expected positive cutoffs")

    return ExperimentConfig(
        seed=seed,
        output_dir=str(merged["output_dir"]),
        data=_data_from_dict(merged["data"]),
        train=_train_from_dict(merged.get("train", {}), scales, seed),
        join=join,
        ks=ks,
    )
