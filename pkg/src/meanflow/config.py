"""Strict JSON run configuration: unknown or out-of-range fields abort early.

A run file carries a version tag, the model, named dataset specs, the
two-stage curriculum, and evaluation settings. Parsing walks the schema
explicitly so every error names the offending dotted field path.
"""

from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass
from pathlib import Path

from .data import DatasetSpec
from .metrics import EvalConfig
from .net import FlowNetConfig
from .objective import GuidanceConfig, TimestepConfig
from .trainer import CurriculumConfig, StageConfig

CONFIG_VERSION = 1


class ConfigError(ValueError):
    """Invalid run configuration; the message names the field."""


@dataclass(frozen=True)
class RunConfig:
    output_dir: str
    model: FlowNetConfig
    datasets: dict
    curriculum: CurriculumConfig
    eval: EvalConfig

    def dataset(self, dataset_id: str) -> DatasetSpec:
        if dataset_id not in self.datasets:
            raise ConfigError(f"datasets.{dataset_id}: not defined")
        return self.datasets[dataset_id]


_TUPLE_FIELDS = {"decay_milestones", "point", "center", "ar_coeffs", "nfe_list"}


def _build(cls, raw, path):
    if not isinstance(raw, dict):
        raise ConfigError(f"{path}: expected an object")
    allowed = {f.name for f in dataclasses.fields(cls)}
    for key in raw:
        if key not in allowed:
            raise ConfigError(f"{path}.{key}: unknown field")
    kwargs = {}
    for key, value in raw.items():
        if key in _TUPLE_FIELDS and isinstance(value, list):
            value = tuple(value)
        kwargs[key] = value
    try:
        return cls(**kwargs)
    except (TypeError, ValueError) as e:
        raise ConfigError(f"{path}: {e}") from e


def _build_stage(raw, path):
    if not isinstance(raw, dict):
        raise ConfigError(f"{path}: expected an object")
    raw = dict(raw)
    if "timestep" in raw:
        raw["timestep"] = _build(TimestepConfig, raw["timestep"], f"{path}.timestep")
    if "guidance" in raw:
        raw["guidance"] = _build(GuidanceConfig, raw["guidance"], f"{path}.guidance")
    return _build(StageConfig, raw, path)


def parse_run_config(raw: dict, path: str = "config") -> RunConfig:
    if not isinstance(raw, dict):
        raise ConfigError(f"{path}: expected a JSON object")
    version = raw.get("version")
    if version != CONFIG_VERSION:
        raise ConfigError(f"{path}.version: expected {CONFIG_VERSION}, got {version!r}")

    known = {"version", "output_dir", "model", "datasets", "curriculum", "eval"}
    for key in raw:
        if key not in known:
            raise ConfigError(f"{path}.{key}: unknown field")
    for key in ("output_dir", "model", "datasets", "curriculum"):
        if key not in raw:
            raise ConfigError(f"{path}.{key}: missing required field")

    model = _build(FlowNetConfig, raw["model"], f"{path}.model")

    if not isinstance(raw["datasets"], dict) or not raw["datasets"]:
        raise ConfigError(f"{path}.datasets: expected a non-empty object of specs")
    datasets = {
        name: _build(DatasetSpec, spec, f"{path}.datasets.{name}")
        for name, spec in raw["datasets"].items()
    }

    cur_raw = raw["curriculum"]
    if not isinstance(cur_raw, dict):
        raise ConfigError(f"{path}.curriculum: expected an object")
    for key in cur_raw:
        if key not in {"seed", "stage1", "stage2"}:
            raise ConfigError(f"{path}.curriculum.{key}: unknown field")
    if "stage1" not in cur_raw:
        raise ConfigError(f"{path}.curriculum.stage1: missing required field")
    stage1 = _build_stage(cur_raw["stage1"], f"{path}.curriculum.stage1")
    stage2 = None
    if cur_raw.get("stage2") is not None:
        stage2 = _build_stage(cur_raw["stage2"], f"{path}.curriculum.stage2")
    curriculum = CurriculumConfig(
        stage1=stage1, stage2=stage2, seed=int(cur_raw.get("seed", 0))
    )

    eval_cfg = _build(EvalConfig, raw.get("eval", {}), f"{path}.eval")

    config = RunConfig(
        output_dir=str(raw["output_dir"]),
        model=model,
        datasets=datasets,
        curriculum=curriculum,
        eval=eval_cfg,
    )
    _check_cross_references(config, path)
    return config


def _check_cross_references(config: RunConfig, path: str) -> None:
    stages = [("stage1", config.curriculum.stage1)]
    if config.curriculum.stage2 is not None:
        stages.append(("stage2", config.curriculum.stage2))
    for name, stage in stages:
        if stage.dataset_id not in config.datasets:
            raise ConfigError(
                f"{path}.curriculum.{name}.dataset_id: unknown dataset "
                f"'{stage.dataset_id}'"
            )
        spec = config.datasets[stage.dataset_id]
        if spec.n_labels > config.model.n_labels:
            raise ConfigError(
                f"{path}.curriculum.{name}.dataset_id: dataset has "
                f"{spec.n_labels} labels but the model supports {config.model.n_labels}"
            )
        if spec.seq_len > config.model.max_seq_len:
            raise ConfigError(
                f"{path}.curriculum.{name}.dataset_id: sequence length "
                f"{spec.seq_len} exceeds model.max_seq_len {config.model.max_seq_len}"
            )
        if spec.dim != config.model.latent_dim:
            raise ConfigError(
                f"{path}.curriculum.{name}.dataset_id: dataset dim {spec.dim} "
                f"!= model.latent_dim {config.model.latent_dim}"
            )


def load_run_config(path) -> RunConfig:
    path = Path(path)
    try:
        raw = json.loads(path.read_text())
    except (OSError, json.JSONDecodeError) as e:
        raise ConfigError(f"cannot read config {path}: {e}") from e
    return parse_run_config(raw)


def run_config_to_dict(config: RunConfig) -> dict:
    return {
        "version": CONFIG_VERSION,
        "output_dir": config.output_dir,
        "model": dataclasses.asdict(config.model),
        "datasets": {k: dataclasses.asdict(v) for k, v in config.datasets.items()},
        "curriculum": {
            "seed": config.curriculum.seed,
            "stage1": dataclasses.asdict(config.curriculum.stage1),
            "stage2": dataclasses.asdict(config.curriculum.stage2)
            if config.curriculum.stage2
            else None,
        },
        "eval": dataclasses.asdict(config.eval),
    }
