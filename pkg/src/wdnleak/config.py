"""Run configuration: one JSON file drives every command.

Keys mirror the nested models below. ``seed`` is the master seed and is pushed
into every stochastic step (dataset generation, weight init, minibatch order,
SVM tie-breaking, test-time noise). Values can be overridden on the command line
with ``--set section.key=value``; the output root can also come from the
``WDNLEAK_OUTPUT`` environment variable.
"""

from __future__ import annotations

import json
import os
from importlib import resources
from pathlib import Path
from typing import Literal

from pydantic import BaseModel, Field, ValidationError, model_validator

from .autoencoder import TrainConfig
from .detector import DetectorConfig
from .scenario import WEEKLY_PERIOD, ConfigError, GenerationConfig

OUTPUT_ENV = "WDNLEAK_OUTPUT"
BUNDLED_TOPOLOGIES = ("desk16", "foreign8", "modena_like", "ring4")


class SvmConfig(BaseModel):
    nu: float = Field(0.1, gt=0, le=1)
    gamma: float | None = Field(None, gt=0, description="fixed RBF gamma; overrides gamma_scale")
    gamma_scale: float = Field(8.0, gt=0, description="multiplier on 1 / (dim * mean feature variance)")
    window_stride: int = Field(12, ge=1, description="stride of the training windows fed to the SVM")
    tol: float = Field(1e-6, gt=0)


class EvalConfig(BaseModel):
    snr_levels: list[float] = [45.0, 40.0, 35.0, 30.0, 25.0]
    snr_reference: Literal["ac", "total"] = "ac"
    noise_seed: int = 0
    delay_mode: Literal["detected", "censored"] = "detected"
    foreign_topology: str = "foreign8"
    foreign_reference: int = Field(10, ge=0, description="no-leak foreign scenarios used to refit standardisation")
    foreign_test: int = Field(40, ge=1)
    fpr_curve: list[float] = [0.01, 0.02, 0.05, 0.10, 0.15, 0.20, 0.30, 0.50]


def _desk_generation() -> GenerationConfig:
    return GenerationConfig(n_train=30, n_validation=50, n_test=40, duration_samples=6 * WEEKLY_PERIOD)


class RunConfig(BaseModel):
    seed: int = 0
    topology: str = "desk16"
    window_length: int = Field(WEEKLY_PERIOD, ge=4)
    normalize: bool = Field(True, description="per-node z-scoring fitted on the train split; off for ablation")
    generation: GenerationConfig = Field(default_factory=_desk_generation)
    train: TrainConfig = Field(default_factory=lambda: TrainConfig(max_epochs=15))
    svm: SvmConfig = Field(default_factory=SvmConfig)
    detector: DetectorConfig = Field(default_factory=DetectorConfig)
    evaluation: EvalConfig = Field(default_factory=EvalConfig)
    workers: int = Field(1, ge=1)
    output_dir: str = "runs/desk"

    @model_validator(mode="after")
    def _propagate(self) -> "RunConfig":
        # the master seed and window length are authoritative
        self.generation = self.generation.model_copy(
            update={"master_seed": self.seed, "window_length": self.window_length})
        self.train = self.train.model_copy(update={"seed": self.seed})
        return self

    def snapshot(self) -> dict:
        return self.model_dump(mode="json")


def resolve_topology(name_or_path: str, base: Path | None = None) -> Path:
    """A topology file path, or the name of a bundled topology."""
    p = Path(name_or_path)
    if not p.is_absolute() and base is not None and (base / p).exists():
        return base / p
    if p.exists():
        return p
    if name_or_path in BUNDLED_TOPOLOGIES:
        return Path(str(resources.files("wdnleak") / "data" / f"{name_or_path}.json"))
    raise FileNotFoundError(f"topology not found: {name_or_path}")


def _parse_value(text: str):
    try:
        return json.loads(text)
    except json.JSONDecodeError:
        return text


def apply_overrides(data: dict, overrides: list[str]) -> dict:
    """Apply ``a.b.c=value`` overrides; values are parsed as JSON when possible."""
    data = json.loads(json.dumps(data))
    for item in overrides:
        if "=" not in item:
            raise ConfigError(f"override must look like key=value, got {item!r}")
        key, value = item.split("=", 1)
        node = data
        parts = key.strip().split(".")
        for part in parts[:-1]:
            node = node.setdefault(part, {})
            if not isinstance(node, dict):
                raise ConfigError(f"cannot descend into {part!r} in {key!r}")
        node[parts[-1]] = _parse_value(value)
    return data


def load_config(
    path: str | Path | None = None,
    overrides: list[str] | None = None,
    output_dir: str | None = None,
) -> RunConfig:
    """Build the run config: file (optional) < environment < explicit arguments."""
    data: dict = {}
    if path is not None:
        path = Path(path)
        if not path.exists():
            raise ConfigError(f"config file not found: {path}")
        try:
            data = json.loads(path.read_text())
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{path}: invalid JSON ({exc})") from exc
        if not isinstance(data, dict):
            raise ConfigError(f"{path}: top level must be an object")
    env_out = os.environ.get(OUTPUT_ENV)
    if env_out:
        data["output_dir"] = env_out
    data = apply_overrides(data, overrides or [])
    if output_dir is not None:
        data["output_dir"] = output_dir
    try:
        return RunConfig.model_validate(data)
    except ValidationError as exc:
        raise ConfigError(str(exc)) from exc


def write_snapshot(config: RunConfig, directory: str | Path, name: str = "config.resolved.json") -> Path:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    path = directory / name
    path.write_text(json.dumps(config.snapshot(), indent=2, sort_keys=True) + "\n")
    return path
