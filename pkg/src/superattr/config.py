"""Run configuration: paths, dims, loss/optimizer settings, component toggles.

Loaded from config.json. Validation is strict and happens before any data is
touched; every message names the offending field.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

from .losses import LossConfig


class ConfigError(ValueError):
    pass


@dataclass
class PathsConfig:
    fixture: str = ""
    annotations: str = ""  # training set
    eval_annotations: str = ""  # held-out evaluation set
    hierarchy: str = ""
    split: str = ""

    def resolve(self, base: Path) -> "PathsConfig":
        def r(p: str) -> str:
            return str((base / p).resolve()) if p and not Path(p).is_absolute() else p

        return PathsConfig(
            fixture=r(self.fixture),
            annotations=r(self.annotations),
            eval_annotations=r(self.eval_annotations),
            hierarchy=r(self.hierarchy),
            split=r(self.split),
        )


@dataclass
class OptimizerConfig:
    kind: str = "adamw"
    lr: float = 1e-4
    weight_decay: float = 1e-4
    lr_drop_epoch: int | None = None  # unset for the zero-shot schedule
    lr_after_drop: float = 1e-5


@dataclass
class Toggles:
    sqi: bool = True  # grouped queries; off falls back to class-wise
    md: bool = True  # off restricts to the crop context
    scr: bool = True
    zrse: bool = True
    query_mode: str = ""  # derived from sqi when empty
    pool_mode: str = "att_obj"
    zrse_topk: int = 2
    zrse_novel_only: bool = False
    positional_encoding: bool = False


@dataclass
class DimsConfig:
    d: int = 256
    d_ff: int = 2048
    n_heads: int = 1
    n_blocks: int = 3


@dataclass
class MetricsConfig:
    head_min_count: int | None = None
    medium_min_count: int | None = None

    def thresholds(self) -> tuple[int, int] | None:
        if self.head_min_count is None or self.medium_min_count is None:
            return None
        return (self.head_min_count, self.medium_min_count)


@dataclass
class RunConfig:
    paths: PathsConfig = field(default_factory=PathsConfig)
    dims: DimsConfig = field(default_factory=DimsConfig)
    loss: LossConfig = field(default_factory=LossConfig)
    optimizer: OptimizerConfig = field(default_factory=OptimizerConfig)
    toggles: Toggles = field(default_factory=Toggles)
    metrics: MetricsConfig = field(default_factory=MetricsConfig)
    epochs: int = 9
    batch_size: int = 16
    seed: int = 0

    def validate(self) -> "RunConfig":
        if self.epochs < 1:
            raise ConfigError("epochs must be >= 1")
        if self.batch_size < 1:
            raise ConfigError("batch_size must be >= 1")
        if self.optimizer.lr <= 0:
            raise ConfigError("optimizer.lr must be > 0")
        if self.optimizer.lr_after_drop <= 0:
            raise ConfigError("optimizer.lr_after_drop must be > 0")
        if self.optimizer.kind != "adamw":
            raise ConfigError(f"unsupported optimizer kind {self.optimizer.kind!r}")
        if self.optimizer.weight_decay < 0:
            raise ConfigError("optimizer.weight_decay must be >= 0")
        t = self.toggles
        if t.query_mode == "":
            t.query_mode = "superclass" if t.sqi else "classwise"
        elif t.query_mode not in ("superclass", "classwise"):
            raise ConfigError(f"unknown query_mode {t.query_mode!r}")
        elif (t.query_mode == "superclass") != t.sqi:
            raise ConfigError("toggles.sqi and toggles.query_mode disagree")
        if t.pool_mode not in ("mean", "max", "obj", "att", "att_obj"):
            raise ConfigError(f"unknown pool_mode {t.pool_mode!r}")
        if t.zrse_topk < 0:
            raise ConfigError("zrse_topk must be >= 0")
        if t.positional_encoding:
            raise ConfigError("positional_encoding is reserved and must stay off")
        if self.dims.d < 1 or self.dims.d_ff < 1:
            raise ConfigError("dims must be positive")
        if self.dims.d % self.dims.n_heads != 0:
            raise ConfigError("dims.d must be divisible by dims.n_heads")
        return self

    def lr_at_epoch(self, epoch: int) -> float:
        drop = self.optimizer.lr_drop_epoch
        if drop is not None and epoch >= drop:
            return self.optimizer.lr_after_drop
        return self.optimizer.lr

    def to_json_dict(self) -> dict:
        d = {
            "paths": vars(self.paths).copy(),
            "dims": vars(self.dims).copy(),
            "loss": {
                "gamma_pos": self.loss.gamma_pos,
                "gamma_neg": self.loss.gamma_neg,
                "clip": self.loss.clip,
                "lambda": self.loss.scr_weight,
            },
            "optimizer": vars(self.optimizer).copy(),
            "toggles": vars(self.toggles).copy(),
            "metrics": vars(self.metrics).copy(),
            "epochs": self.epochs,
            "batch_size": self.batch_size,
            "seed": self.seed,
        }
        return d

    def save(self, path: Path | str) -> None:
        Path(path).write_text(json.dumps(self.to_json_dict(), indent=1))


def _take(d: dict, cls, name: str):
    extra = set(d) - {f for f in cls.__dataclass_fields__}
    if extra:
        raise ConfigError(f"unknown key(s) in {name}: {sorted(extra)}")
    return cls(**d)


def config_from_dict(raw: dict, base: Path | None = None) -> RunConfig:
    raw = dict(raw)
    loss_raw = dict(raw.pop("loss", {}))
    if "lambda" in loss_raw:
        loss_raw["scr_weight"] = loss_raw.pop("lambda")
    cfg = RunConfig(
        paths=_take(raw.pop("paths", {}), PathsConfig, "paths"),
        dims=_take(raw.pop("dims", {}), DimsConfig, "dims"),
        loss=_take(loss_raw, LossConfig, "loss"),
        optimizer=_take(raw.pop("optimizer", {}), OptimizerConfig, "optimizer"),
        toggles=_take(raw.pop("toggles", {}), Toggles, "toggles"),
        metrics=_take(raw.pop("metrics", {}), MetricsConfig, "metrics"),
        epochs=int(raw.pop("epochs", 9)),
        batch_size=int(raw.pop("batch_size", 16)),
        seed=int(raw.pop("seed", 0)),
    )
    if raw:
        raise ConfigError(f"unknown top-level config key(s): {sorted(raw)}")
    if base is not None:
        cfg.paths = cfg.paths.resolve(base)
    return cfg.validate()


def load_config(path: Path | str) -> RunConfig:
    p = Path(path)
    try:
        raw = json.loads(p.read_text())
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{p}: invalid JSON: {exc}") from exc
    return config_from_dict(raw, base=p.parent)
