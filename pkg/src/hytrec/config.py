"""Run configuration: one YAML file with sections, plus ``KEY=VALUE`` overrides."""
from __future__ import annotations

import dataclasses
import os
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any

import yaml

from .model import ModelConfig
from .train import TrainConfig

OUTPUT_ROOT_ENV = "HYTREC_OUTPUT_ROOT"


class ConfigError(ValueError):
    pass


@dataclass
class SyntheticConfig:
    n_users: int = 2000
    n_items: int = 500
    seq_len: int = 100
    drift_point_fraction: float = 0.7
    drift_strength: float = 0.8
    seed: int = 0


@dataclass
class DataConfig:
    input: str | None = None  # interaction log; ignored when synthetic
    synthetic: bool = False
    delimiter: str = ","
    columns: list[str] = field(default_factory=lambda: ["user", "item", "rating", "timestamp"])
    header: bool = False
    min_user_events: int = 5
    min_item_count: int = 5
    train_targets: int = 1
    dataset_dir: str | None = None  # default: <out>/data
    synthetic_params: SyntheticConfig = field(default_factory=SyntheticConfig)


@dataclass
class EvalConfig:
    ks: list[int] = field(default_factory=lambda: [10, 50, 500])
    batch_size: int = 256
    checkpoint: str | None = None  # default: <out>/train/best.ckpt


@dataclass
class SweepConfig:
    axis: str = "ratio"
    values: list[Any] = field(default_factory=lambda: [2, 3, 4])
    metric_k: int = 10


@dataclass
class GradcheckConfig:
    vocab_size: int = 20
    d_model: int = 8
    n_layers_long: int = 4
    hybrid_ratio: int = 3
    n_heads: int = 2
    short_window: int = 3
    seq_len: int = 12
    batch_size: int = 2
    tol: float = 1e-4
    step: float = 1e-5
    max_params: int = 20000
    corrupt_primitive: str | None = None  # test hook: scale this primitive's VJP


@dataclass
class BenchConfig:
    variants: list[str] = field(default_factory=lambda: ["PURE_LINEAR", "FULL", "PURE_SOFTMAX"])
    lengths: list[int] = field(default_factory=lambda: [128, 512, 2048, 4096, 8192, 12288])
    repeats: int = 3
    d_model: int = 64
    vocab_size: int = 1000


@dataclass
class RunConfig:
    out_dir: str = "runs/default"
    seed: int | None = None
    model: ModelConfig = field(default_factory=ModelConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    data: DataConfig = field(default_factory=DataConfig)
    eval: EvalConfig = field(default_factory=EvalConfig)
    sweep: SweepConfig = field(default_factory=SweepConfig)
    gradcheck: GradcheckConfig = field(default_factory=GradcheckConfig)
    bench: BenchConfig = field(default_factory=BenchConfig)

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    def output_path(self) -> Path:
        p = Path(self.out_dir)
        root = os.environ.get(OUTPUT_ROOT_ENV)
        if root and not p.is_absolute():
            p = Path(root) / p
        return p


def _build(cls, raw: Any, where: str):
    if not isinstance(raw, dict):
        raise ConfigError(f"{where}: expected a mapping, got {type(raw).__name__}")
    hints = {f.name: f for f in dataclasses.fields(cls)}
    unknown = set(raw) - set(hints)
    if unknown:
        raise ConfigError(f"{where}: unknown keys {sorted(unknown)}")
    kwargs = {}
    for k, v in raw.items():
        default = getattr(cls(), k) if cls is not ModelConfig else getattr(ModelConfig(), k)
        if dataclasses.is_dataclass(default) and isinstance(v, dict):
            kwargs[k] = _build(type(default), v, f"{where}.{k}")
        else:
            kwargs[k] = v
    try:
        return cls(**kwargs)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"{where}: {exc}") from None


def _set_dotted(d: dict, key: str, value: Any) -> None:
    parts = key.split(".")
    cur = d
    for p in parts[:-1]:
        cur = cur.setdefault(p, {})
        if not isinstance(cur, dict):
            raise ConfigError(f"override {key!r} descends into a non-section")
    cur[parts[-1]] = value


def load_config(path=None, overrides: list[str] | None = None, out: str | None = None,
                seed: int | None = None) -> RunConfig:
    """Defaults <- config file <- ``--override`` pairs <- explicit flags."""
    raw: dict = {}
    if path is not None:
        try:
            raw = yaml.safe_load(Path(path).read_text(encoding="utf-8")) or {}
        except OSError as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from None
        except yaml.YAMLError as exc:
            raise ConfigError(f"malformed config {path}: {exc}") from None
    for item in overrides or []:
        if "=" not in item:
            raise ConfigError(f"override {item!r} is not KEY=VALUE")
        k, v = item.split("=", 1)
        _set_dotted(raw, k.strip(), yaml.safe_load(v))
    if out is not None:
        raw["out_dir"] = out
    if seed is not None:
        raw["seed"] = seed
    cfg = _build(RunConfig, raw, "config")
    if cfg.seed is not None:
        cfg.train.init_seed = cfg.seed
        cfg.train.shuffle_seed = cfg.seed
        cfg.data.synthetic_params.seed = cfg.seed
    return cfg


def dump_config(cfg: RunConfig, path) -> None:
    Path(path).write_text(yaml.safe_dump(cfg.to_dict(), sort_keys=False), encoding="utf-8")
