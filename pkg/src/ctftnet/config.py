"""TOML run configuration: one file drives model geometry, training
hyperparameters, and the degradation pipeline.  Every field defaults to the
16 kHz desk setup; unknown keys are rejected so typos can't silently fall
back to defaults.
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field
from pathlib import Path

import tomli

from .dsp import StftConfig
from .engine import TrainConfig
from .model import ModelConfig, desk_config
from .objectives import LossConfig

__all__ = ["RunConfig", "PipelineConfig", "ConfigError", "load_run_config"]


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class PipelineConfig:
    lr_rate: int = 4000
    clip_seconds: float = 4.0

    def __post_init__(self):
        if self.lr_rate < 1:
            raise ConfigError("pipeline.lr_rate must be positive")
        if self.clip_seconds <= 0:
            raise ConfigError("pipeline.clip_seconds must be positive")


@dataclass(frozen=True)
class RunConfig:
    model: ModelConfig = field(default_factory=desk_config)
    train: TrainConfig = field(default_factory=TrainConfig)
    pipeline: PipelineConfig = field(default_factory=PipelineConfig)

    def digest(self) -> bytes:
        """The digest checkpoints are stamped with covers the model section
        (the part a checkpoint must be structurally compatible with)."""
        return self.model.digest()


def _tuplify(value):
    if isinstance(value, list):
        return tuple(_tuplify(v) for v in value)
    return value


def _apply(cls, defaults: dict, table: dict, where: str) -> dict:
    known = {f.name for f in dataclasses.fields(cls)}
    for key, value in table.items():
        if key not in known:
            raise ConfigError(f"unknown key {where}.{key}")
        defaults[key] = _tuplify(value)
    return defaults


def load_run_config(path=None) -> RunConfig:
    """Parse a TOML file into a RunConfig; no file means pure desk defaults."""
    if path is None:
        return RunConfig()
    try:
        with open(path, "rb") as fh:
            doc = tomli.load(fh)
    except tomli.TOMLDecodeError as err:
        raise ConfigError(f"{path}: {err}") from err

    unknown = set(doc) - {"model", "train", "pipeline"}
    if unknown:
        raise ConfigError(f"unknown section [{sorted(unknown)[0]}]")

    model_tbl = dict(doc.get("model", {}))
    stft_tbl = model_tbl.pop("stft", {})
    loss_tbl = model_tbl.pop("loss", {})
    model_kw = _apply(ModelConfig, {}, model_tbl, "model")
    desk = desk_config()
    if stft_tbl:
        stft_kw = _apply(StftConfig, {}, stft_tbl, "model.stft")
        model_kw["stft"] = StftConfig(
            **{**dataclasses.asdict(desk.stft), **stft_kw})
    if loss_tbl:
        loss_kw = _apply(LossConfig, {}, loss_tbl, "model.loss")
        model_kw["loss"] = LossConfig(
            **{**dataclasses.asdict(desk.loss), **loss_kw})

    train_kw = _apply(TrainConfig, {}, dict(doc.get("train", {})), "train")
    pipe_kw = _apply(PipelineConfig, {}, dict(doc.get("pipeline", {})),
                     "pipeline")
    try:
        return RunConfig(model=desk_config(**model_kw),
                         train=TrainConfig(**train_kw),
                         pipeline=PipelineConfig(**pipe_kw))
    except (ValueError, TypeError) as err:
        raise ConfigError(f"{path}: {err}") from err
