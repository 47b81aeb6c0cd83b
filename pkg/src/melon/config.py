"""Run configuration: TOML/JSON files, validated, with unknown keys rejected."""

from __future__ import annotations

import json
import sys
from dataclasses import asdict, dataclass, field, fields, is_dataclass
from pathlib import Path
from typing import Any, get_type_hints

if sys.version_info >= (3, 11):
    import tomllib
else:  # pragma: no cover - exercised on 3.10 only
    import tomli as tomllib


class ConfigError(ValueError):
    pass


@dataclass
class SyntheticSection:
    num_users: int = 50
    num_items: int = 40
    num_interactions: int = 5000
    groups: int = 5
    switch_at: float = 0.5
    shift: int = 1
    p_cluster: float = 0.9
    concentration: float = 1.0


@dataclass
class DataSection:
    path: str = ""  # raw CSV/TSV file or canonical directory; empty -> synthetic
    format: str = ""  # csv | tsv | canonical; empty -> by extension
    min_interactions: int = 1
    split: list = field(default_factory=lambda: [0.95, 0.005, 0.045])
    synthetic: SyntheticSection = field(default_factory=SyntheticSection)


@dataclass
class ModelSection:
    kind: str = "bpr"
    dim: int = 32
    tower: list = field(default_factory=lambda: [64, 32, 16])
    init_std: float = 0.01


@dataclass
class MeLONSection:
    role_layers: int = 2
    p: float = 10.0
    neighbor_cap: int = 10
    forget_gate: bool = True
    mode: str = "2d"
    lr_bias_init: float = -4.0
    forget_bias_init: float = 7.0


@dataclass
class StrategySection:
    kind: str = "melon"
    lr: float = 1e-3
    optimizer: str = "adam"  # recommender optimizer for default/eals/mwnet
    eals_boost: float = 4.0
    mwnet_hidden: int = 100
    melon: MeLONSection = field(default_factory=MeLONSection)


@dataclass
class TrainSection:
    batch_size: int = 256
    epochs: int = 100
    meta_epochs: int = 0  # extra meta-only epochs after joint pretraining
    meta_lr: float = 1e-3
    meta_weight_decay: float = 1e-3
    train_negatives: int = 1
    eval_negatives: int = 99
    last_item_side: bool = False
    snapshot_every: int = 0


@dataclass
class RankSection:
    trials: int = 100
    ranks: list = field(default_factory=lambda: [2, 3, 4])
    shape: list = field(default_factory=lambda: [10, 16])
    batches: int = 100
    batch_size: int = 16
    heatmap_rows: int = 16


@dataclass
class BenchSection:
    strategies: list = field(default_factory=lambda: ["default", "eals", "mwnet", "metasgd", "melon"])
    warmup: int = 3
    batches: int = 20


@dataclass
class RunConfig:
    seed: int = 0
    out: str = "runs/latest"
    data: DataSection = field(default_factory=DataSection)
    model: ModelSection = field(default_factory=ModelSection)
    strategy: StrategySection = field(default_factory=StrategySection)
    train: TrainSection = field(default_factory=TrainSection)
    rank: RankSection = field(default_factory=RankSection)
    bench: BenchSection = field(default_factory=BenchSection)

    def validate(self) -> "RunConfig":
        from .strategies import KINDS

        if self.model.kind not in ("bpr", "ncf"):
            raise ConfigError(f"model.kind must be bpr or ncf, got {self.model.kind!r}")
        if self.strategy.kind not in KINDS:
            raise ConfigError(f"strategy.kind must be one of {KINDS}, got {self.strategy.kind!r}")
        if self.strategy.optimizer not in ("sgd", "adam"):
            raise ConfigError("strategy.optimizer must be sgd or adam")
        if self.strategy.melon.mode not in ("2d", "interaction", "parameter"):
            raise ConfigError("strategy.melon.mode must be 2d, interaction or parameter")
        if len(self.data.split) != 3 or abs(sum(self.data.split) - 1.0) > 1e-9 or min(self.data.split) < 0:
            raise ConfigError("data.split must be three non-negative fractions summing to 1")
        if self.data.format not in ("", "csv", "tsv", "canonical"):
            raise ConfigError("data.format must be csv, tsv or canonical")
        positive = {
            "model.dim": self.model.dim, "train.batch_size": self.train.batch_size,
            "train.train_negatives": self.train.train_negatives,
            "train.eval_negatives": self.train.eval_negatives, "strategy.lr": self.strategy.lr,
            "train.meta_lr": self.train.meta_lr, "data.min_interactions": self.data.min_interactions,
            "strategy.melon.p": self.strategy.melon.p, "strategy.melon.role_layers": self.strategy.melon.role_layers,
            "strategy.melon.neighbor_cap": self.strategy.melon.neighbor_cap,
        }
        for k, v in positive.items():
            if v <= 0:
                raise ConfigError(f"{k} must be positive, got {v}")
        if self.train.epochs < 0 or self.train.meta_epochs < 0:
            raise ConfigError("epochs must be >= 0")
        bad = [s for s in self.bench.strategies if s not in KINDS]
        if bad:
            raise ConfigError(f"bench.strategies has unknown kinds {bad}")
        return self

    def to_dict(self) -> dict:
        return asdict(self)


def _build(cls, data: dict, where: str):
    if not isinstance(data, dict):
        raise ConfigError(f"{where or 'config'}: expected a table, got {type(data).__name__}")
    hints = get_type_hints(cls)
    known = {f.name for f in fields(cls)}
    unknown = sorted(set(data) - known)
    if unknown:
        raise ConfigError(f"unknown config key(s) {', '.join(where + k for k in unknown)}")
    kw: dict[str, Any] = {}
    for name, value in data.items():
        typ = hints[name]
        if is_dataclass(typ):
            kw[name] = _build(typ, value, f"{where}{name}.")
            continue
        kw[name] = _coerce(typ, value, where + name)
    return cls(**kw)


def _coerce(typ, value, key: str):
    if typ is bool:
        if not isinstance(value, bool):
            raise ConfigError(f"{key}: expected bool, got {value!r}")
        return value
    if typ is int:
        if isinstance(value, bool) or not isinstance(value, int):
            raise ConfigError(f"{key}: expected integer, got {value!r}")
        return value
    if typ is float:
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError(f"{key}: expected number, got {value!r}")
        return float(value)
    if typ is str:
        if not isinstance(value, str):
            raise ConfigError(f"{key}: expected string, got {value!r}")
        return value
    if typ is list:
        if not isinstance(value, list):
            raise ConfigError(f"{key}: expected list, got {value!r}")
        return value
    return value


def from_dict(data: dict) -> RunConfig:
    return _build(RunConfig, data, "").validate()


def load_config(path: str | Path | None) -> RunConfig:
    if path is None:
        return RunConfig().validate()
    p = Path(path)
    if not p.exists():
        raise ConfigError(f"config file not found: {p}")
    text = p.read_bytes()
    try:
        if p.suffix == ".json":
            data = json.loads(text)
        else:
            data = tomllib.loads(text.decode("utf-8"))
    except (json.JSONDecodeError, tomllib.TOMLDecodeError, UnicodeDecodeError) as exc:
        raise ConfigError(f"{p}: {exc}") from exc
    return from_dict(data)


def override(cfg: RunConfig, **flags) -> RunConfig:
    """Apply CLI flags (``None`` means not given); flags win over the file."""
    if flags.get("seed") is not None:
        cfg.seed = int(flags["seed"])
    if flags.get("strategy") is not None:
        cfg.strategy.kind = flags["strategy"]
    if flags.get("model") is not None:
        cfg.model.kind = flags["model"]
    if flags.get("out") is not None:
        cfg.out = str(flags["out"])
    return cfg.validate()
