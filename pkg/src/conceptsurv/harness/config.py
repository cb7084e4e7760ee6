"""Experiment configuration read from a flat YAML file with dotted keys.

Example::

    dataset.kind: mnist
    sweep.axis: sample_size
    sweep.grid: [200, 500, 1000, 2000]
    repetitions: 10
    models: [survcbm-cox, survbase-cox]
    train.epochs: 25

Every key is listed in ``DEFAULTS``; anything else is rejected.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field

import yaml

from ..datagen import DATASET_KINDS, GenerationConfig, default_generation
from ..encoders import EncoderConfig
from ..models import ARCHITECTURES, HEADS, SurvivalHeadSpec, TrainConfig

__all__ = ["ConfigError", "DEFAULTS", "ExperimentConfig", "load_config", "parse_model_name"]

AXES = ("sample_size", "uncensored_proportion")

DEFAULTS = {
    "dataset.kind": "mnist",
    "dataset.pool_per_category": 200,
    "dataset.pool_seed": 1,
    "dataset.idx_images": None,
    "dataset.idx_labels": None,
    "generation.b": None,
    "generation.nu": None,
    "generation.lam": None,
    "generation.law": None,
    "generation.encoding": None,
    "sweep.axis": "sample_size",
    "sweep.grid": [200, 500, 1000, 2000],
    "sweep.fixed_n": 2000,
    "sweep.fixed_rho": 0.33,
    "repetitions": 10,
    "test_fraction": 0.4,
    "models": ["survcbm-cox", "survrcm-cox", "survbase-cox"],
    "encoder.convs": [[8, 3, 2], [16, 3, 1]],
    "encoder.pool": 2,
    "encoder.dense": [64],
    "encoder.embedding_dim": 32,
    "encoder.concept_hidden": [32],
    "head.background_size": 64,
    "head.bandwidth": "scalar",
    "head.tau": 100.0,
    "train.alpha": 0.5,
    "train.omega": 0.2,
    "train.lr": 3e-3,
    "train.epochs": 25,
    "train.batch_size": 64,
    "train.tasks_per_epoch": None,
    "train.optimizer": "adam",
    "train.momentum": 0.9,
    "train.weight_decay": 0.0,
    "train.final_background_size": 2000,
    "train.beran_time_scale": "median",
    "seed": 0,
    "out": "results",
    "threads": 1,
    "timing": False,
}


class ConfigError(ValueError):
    pass


def parse_model_name(name: str):
    """``'survcbm-beran'`` -> ``('survcbm', 'beran')``."""
    arch, sep, head = str(name).partition("-")
    if not sep or arch not in ARCHITECTURES or head not in HEADS:
        raise ConfigError(
            f"bad model name {name!r}; expected <architecture>-<head> with "
            f"architecture in {ARCHITECTURES} and head in {HEADS}"
        )
    return arch, head


@dataclass
class ExperimentConfig:
    values: dict = field(default_factory=lambda: dict(DEFAULTS))

    def __post_init__(self):
        unknown = sorted(set(self.values) - set(DEFAULTS))
        if unknown:
            raise ConfigError(f"unknown config keys: {', '.join(unknown)}")
        self.values = {**DEFAULTS, **self.values}
        self._validate()

    def __getitem__(self, key):
        return self.values[key]

    def replace(self, **updates) -> "ExperimentConfig":
        """Copy with dotted keys given as ``dataset__kind=...`` or plain keys."""
        new = dict(self.values)
        for k, v in updates.items():
            new[k.replace("__", ".")] = v
        return ExperimentConfig(new)

    def _validate(self):
        v = self.values
        if v["dataset.kind"] not in DATASET_KINDS:
            raise ConfigError(f"dataset.kind must be one of {DATASET_KINDS}, got {v['dataset.kind']!r}")
        if v["sweep.axis"] not in AXES:
            raise ConfigError(f"sweep.axis must be one of {AXES}, got {v['sweep.axis']!r}")
        if not isinstance(v["sweep.grid"], (list, tuple)) or not v["sweep.grid"]:
            raise ConfigError("sweep.grid must be a nonempty list")
        if int(v["repetitions"]) < 1:
            raise ConfigError("repetitions must be >= 1")
        if not 0 < float(v["test_fraction"]) < 1:
            raise ConfigError("test_fraction must lie in (0, 1)")
        if not v["models"]:
            raise ConfigError("models must be a nonempty list")
        for name in v["models"]:
            parse_model_name(name)
        if int(v["threads"]) < 1:
            raise ConfigError("threads must be >= 1")
        if (v["dataset.idx_images"] is None) != (v["dataset.idx_labels"] is None):
            raise ConfigError("dataset.idx_images and dataset.idx_labels go together")
        for value in self.axis_values:
            self.cell(value)
        try:
            self.train_config(0)
            self.generation(0.33, 0)
            self.encoder_config((56, 56, 1), 10)
            self.head_spec("beran")
        except ValueError as err:
            raise ConfigError(str(err)) from err

    @property
    def axis_values(self) -> list:
        grid = self.values["sweep.grid"]
        if self.values["sweep.axis"] == "sample_size":
            return [int(g) for g in grid]
        return [float(g) for g in grid]

    def cell(self, axis_value):
        """(n, rho) for one axis value."""
        v = self.values
        if v["sweep.axis"] == "sample_size":
            n, rho = int(axis_value), float(v["sweep.fixed_rho"])
        else:
            n, rho = int(v["sweep.fixed_n"]), float(axis_value)
        if n < 10:
            raise ConfigError(f"sample size {n} is too small")
        if not 0 < rho <= 1:
            raise ConfigError(f"uncensored proportion {rho} must lie in (0, 1]")
        return n, rho

    def generation(self, rho: float, seed: int) -> GenerationConfig:
        overrides = {
            k.split(".", 1)[1]: val
            for k, val in self.values.items()
            if k.startswith("generation.") and val is not None
        }
        return default_generation(self.values["dataset.kind"], rho=rho, seed=seed, **overrides)

    def train_config(self, seed: int) -> TrainConfig:
        kw = {k.split(".", 1)[1]: val for k, val in self.values.items() if k.startswith("train.")}
        return TrainConfig(seed=seed, **kw)

    def encoder_config(self, input_shape, output_dim) -> EncoderConfig:
        v = self.values
        return EncoderConfig(
            tuple(input_shape),
            tuple(tuple(int(x) for x in c) for c in v["encoder.convs"]),
            int(v["encoder.pool"]),
            tuple(int(x) for x in v["encoder.dense"]),
            int(output_dim),
        )

    def head_spec(self, kind: str) -> SurvivalHeadSpec:
        v = self.values
        if kind == "cox":
            return SurvivalHeadSpec("cox")
        return SurvivalHeadSpec("beran", int(v["head.background_size"]), v["head.bandwidth"], float(v["head.tau"]))

    def digest(self) -> str:
        """Stable hash of the resolved configuration."""
        text = json.dumps(self.values, sort_keys=True, default=str)
        return hashlib.sha256(text.encode()).hexdigest()[:16]


def load_config(path=None, **overrides) -> ExperimentConfig:
    """Read a config file (or the defaults) and apply dotted-key overrides."""
    values = {}
    if path is not None:
        with open(path, encoding="utf-8") as fh:
            loaded = yaml.safe_load(fh)
        if loaded is None:
            loaded = {}
        if not isinstance(loaded, dict):
            raise ConfigError(f"{path}: expected a mapping of dotted keys")
        nested = [k for k, val in loaded.items() if isinstance(val, dict)]
        if nested:
            raise ConfigError(f"{path}: nested sections are not supported, use dotted keys ({nested[0]})")
        values.update(loaded)
    values.update({k: val for k, val in overrides.items() if val is not None})
    return ExperimentConfig(values)
