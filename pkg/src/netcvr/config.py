"""Run configuration: one JSON document describing data, windows, model and regime.

Schema (version 1)::

    {
      "schema_version": 1,
      "paths": {"log": null | str, "out_dir": str, "checkpoint": null | str},
      "windows": {w_obs_v, w_obs_r, w_attr_v, w_attr_r, segment_len},
      "ground_truth": {... GroundTruthConfig fields ...},
      "regime": {regime, variant, use_refund_obs_window, cvr_debias, rfr_debias,
                 use_dar, direct_netcvr_head, ranking: {...}},
      "model": {d_emb, d_shared, hidden, leaky_slope, bn_momentum, bn_eps,
                bn_min_batch, dtype, emb_init_std},
      "train": {... TrainConfig fields ...},
      "delay": {... DelayHyper fields ...},
      "pretrain_end": float,
      "seeds": {"data": int, "init": int, "sampling": int},
      "aggregation": "pooled" | "segment_mean"
    }

Unknown keys are rejected. ``seeds.data`` overrides ``ground_truth.seed``;
``seeds.init`` seeds model initialisation and the delay models;
``seeds.sampling`` seeds shuffling and negative sampling.
"""

from __future__ import annotations

import json
import os
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path
from typing import Optional

from .baselines import RegimeSpec
from .datagen import GroundTruthConfig
from .delay_model import DelayHyper
from .domain import WindowConfig
from .model import ModelConfig
from .training import TrainConfig

SCHEMA_VERSION = 1
OUTPUT_ROOT_ENV = "NETCVR_OUTPUT_ROOT"


class ConfigError(ValueError):
    pass


@dataclass
class Paths:
    log: Optional[str] = None
    out_dir: str = "runs/default"
    checkpoint: Optional[str] = None


@dataclass
class ModelHyper:
    d_emb: int = 8
    d_shared: int = 64
    hidden: tuple = (256, 256, 128)
    leaky_slope: float = 0.01
    bn_momentum: float = 0.99
    bn_eps: float = 1e-5
    bn_min_batch: int = 16
    dtype: str = "float32"
    emb_init_std: float = 0.05

    def __post_init__(self):
        self.hidden = tuple(int(h) for h in self.hidden)

    def build(self, cards, variant: str, init_seed: int) -> ModelConfig:
        return ModelConfig(field_cardinalities=cards, variant=variant, init_seed=init_seed, **asdict(self))


@dataclass
class Seeds:
    data: int = 0
    init: int = 0
    sampling: int = 0


def _strict(cls, data: dict, where: str):
    if not isinstance(data, dict):
        raise ConfigError(f"{where}: expected an object")
    known = {f.name for f in fields(cls)}
    extra = set(data) - known
    if extra:
        raise ConfigError(f"{where}: unknown keys {sorted(extra)}")
    try:
        return cls(**data)
    except (TypeError, ValueError) as err:
        raise ConfigError(f"{where}: {err}") from err


@dataclass
class RunConfig:
    paths: Paths = field(default_factory=Paths)
    windows: WindowConfig = field(default_factory=WindowConfig)
    ground_truth: GroundTruthConfig = field(default_factory=GroundTruthConfig)
    regime: RegimeSpec = field(default_factory=RegimeSpec)
    model: ModelHyper = field(default_factory=ModelHyper)
    train: TrainConfig = field(default_factory=TrainConfig)
    delay: DelayHyper = field(default_factory=DelayHyper)
    pretrain_end: float = 5.0
    seeds: Seeds = field(default_factory=Seeds)
    aggregation: str = "pooled"

    def __post_init__(self):
        self.validate()

    def validate(self) -> None:
        if self.aggregation not in ("pooled", "segment_mean"):
            raise ConfigError("aggregation must be 'pooled' or 'segment_mean'")
        if not 0 < self.pretrain_end:
            raise ConfigError("pretrain_end must be positive")
        stream_start = self.pretrain_end + self.windows.w_attr_v + self.windows.w_attr_r
        if stream_start + self.windows.segment_len > self.ground_truth.horizon + 1e-9:
            raise ConfigError(
                f"no streaming segment fits: stream starts at day {stream_start:g}, "
                f"horizon is {self.ground_truth.horizon:g}"
            )
        try:
            self.regime.validate()
        except ValueError as err:
            raise ConfigError(str(err)) from err

    # -- derived -----------------------------------------------------------

    def data_config(self) -> GroundTruthConfig:
        return replace(self.ground_truth, seed=self.seeds.data)

    def model_config(self, cards=None) -> ModelConfig:
        cards = cards if cards is not None else self.ground_truth.field_cardinalities
        return self.model.build(cards, self.regime.variant, self.seeds.init)

    def delay_hyper(self) -> DelayHyper:
        return replace(self.delay, seed=self.seeds.init)

    def with_overrides(self, **changes) -> "RunConfig":
        return replace(self, **changes)

    def out_dir(self) -> Path:
        return resolve_output(self.paths.out_dir)

    # -- serialisation -----------------------------------------------------

    def to_dict(self) -> dict:
        model = asdict(self.model)
        model["hidden"] = list(model["hidden"])
        return {
            "schema_version": SCHEMA_VERSION,
            "paths": asdict(self.paths),
            "windows": asdict(self.windows),
            "ground_truth": self.ground_truth.to_dict(),
            "regime": self.regime.to_dict(),
            "model": model,
            "train": self.train.to_dict(),
            "delay": asdict(self.delay),
            "pretrain_end": self.pretrain_end,
            "seeds": asdict(self.seeds),
            "aggregation": self.aggregation,
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n"

    @classmethod
    def from_dict(cls, data: dict) -> "RunConfig":
        if not isinstance(data, dict):
            raise ConfigError("config must be a JSON object")
        data = dict(data)
        version = data.pop("schema_version", SCHEMA_VERSION)
        if version != SCHEMA_VERSION:
            raise ConfigError(f"unsupported schema_version {version}; expected {SCHEMA_VERSION}")
        known = {f.name for f in fields(cls)}
        extra = set(data) - known
        if extra:
            raise ConfigError(f"unknown config keys {sorted(extra)}")
        kwargs = {}
        if "paths" in data:
            kwargs["paths"] = _strict(Paths, data["paths"], "paths")
        if "windows" in data:
            kwargs["windows"] = _strict(WindowConfig, data["windows"], "windows")
        if "ground_truth" in data:
            try:
                kwargs["ground_truth"] = GroundTruthConfig.from_dict(data["ground_truth"])
            except (TypeError, ValueError) as err:
                raise ConfigError(f"ground_truth: {err}") from err
        if "regime" in data:
            try:
                kwargs["regime"] = RegimeSpec.from_dict(data["regime"])
            except (TypeError, ValueError) as err:
                raise ConfigError(f"regime: {err}") from err
        if "model" in data:
            kwargs["model"] = _strict(ModelHyper, data["model"], "model")
        if "train" in data:
            kwargs["train"] = _strict(TrainConfig, data["train"], "train")
        if "delay" in data:
            kwargs["delay"] = _strict(DelayHyper, data["delay"], "delay")
        if "seeds" in data:
            kwargs["seeds"] = _strict(Seeds, data["seeds"], "seeds")
        for key in ("pretrain_end", "aggregation"):
            if key in data:
                kwargs[key] = data[key]
        return cls(**kwargs)

    @classmethod
    def from_json(cls, text: str) -> "RunConfig":
        try:
            data = json.loads(text)
        except json.JSONDecodeError as err:
            raise ConfigError(f"config is not valid JSON: {err}") from err
        return cls.from_dict(data)

    @classmethod
    def load(cls, path) -> "RunConfig":
        return cls.from_json(Path(path).read_text())

    def save(self, path) -> Path:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(self.to_json())
        return path


def resolve_output(path) -> Path:
    """Relative output paths are placed under ``$NETCVR_OUTPUT_ROOT`` when set."""
    path = Path(path)
    root = os.environ.get(OUTPUT_ROOT_ENV)
    if root and not path.is_absolute():
        return Path(root) / path
    return path
