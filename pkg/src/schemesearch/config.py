"""Versioned run configuration (JSON) with strict key checking."""
from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

from .controller import ControllerConfig
from .search import SearchConfig, default_workers
from .trainer import TrainConfig

CONFIG_VERSION = 1


class ConfigError(ValueError):
    """Malformed, unknown or out-of-range configuration."""


@dataclass
class DataConfig:
    n_train: int = 2000
    n_test: int = 500
    num_classes: int = 10
    image_size: int = 16
    channels: int = 3
    noise: float = 3.0
    val_fraction: float = 0.1


@dataclass
class ModelConfig:
    channels: tuple = (16, 32, 32, 64, 64, 128)
    strides: tuple = (1, 1, 2, 1, 2, 1)

    def __post_init__(self):
        self.channels, self.strides = tuple(self.channels), tuple(self.strides)
        if len(self.channels) != len(self.strides) or not self.channels:
            raise ValueError("channels and strides must be non-empty and of equal length")


@dataclass
class LatencyConfig:
    reps: int = 30
    holdout: float = 0.2
    tile: int = 16
    unroll: int = 4


@dataclass
class SyntheticConfig:
    base_accuracy: float = 0.9
    dense_ms: float | None = None     # None: twice the latency threshold


@dataclass
class RunConfig:
    version: int = CONFIG_VERSION
    seed: int = 0
    output_dir: str = "run"
    data: DataConfig = field(default_factory=DataConfig)
    model: ModelConfig = field(default_factory=ModelConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    controller: ControllerConfig = field(default_factory=ControllerConfig)
    search: SearchConfig = field(default_factory=SearchConfig)
    latency: LatencyConfig = field(default_factory=LatencyConfig)
    synthetic: SyntheticConfig = field(default_factory=SyntheticConfig)

    # derived artifact paths, all inside output_dir
    @property
    def out(self) -> Path:
        return Path(self.output_dir)

    @property
    def base_weights_path(self) -> Path:
        return self.out / "base_weights.npz"

    @property
    def cost_model_path(self) -> Path:
        return self.out / "costmodel.json"

    @property
    def runlog_path(self) -> Path:
        return self.out / "runlog.jsonl"

    def with_seed(self, seed: int) -> "RunConfig":
        d = self.to_dict()
        d["seed"] = seed
        return from_dict(d)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["model"] = {k: list(v) for k, v in d["model"].items()}
        d["search"]["surrogate_clamp"] = list(d["search"]["surrogate_clamp"])
        d["search"].pop("seed")
        d["train"].pop("seed")
        return d


_SECTIONS = {"data": DataConfig, "model": ModelConfig, "train": TrainConfig,
             "controller": ControllerConfig, "search": SearchConfig,
             "latency": LatencyConfig, "synthetic": SyntheticConfig}
_SEEDED = ("train", "search")     # take their seed from the top level


def _build(cls, name: str, raw, seed: int | None):
    if not isinstance(raw, dict):
        raise ConfigError(f"section '{name}' must be an object")
    allowed = {f.name for f in fields(cls)} - ({"seed"} if name in _SEEDED else set())
    unknown = sorted(set(raw) - allowed)
    if unknown:
        raise ConfigError(f"unknown key(s) in '{name}': {', '.join(unknown)}")
    kw = dict(raw)
    if name in _SEEDED:
        kw["seed"] = seed
    if name == "search" and "surrogate_clamp" in kw:
        kw["surrogate_clamp"] = tuple(kw["surrogate_clamp"])
    try:
        return cls(**kw)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"section '{name}': {exc}") from None


def from_dict(d: dict) -> RunConfig:
    if not isinstance(d, dict):
        raise ConfigError("config must be a JSON object")
    allowed = {"version", "seed", "output_dir", *_SECTIONS}
    unknown = sorted(set(d) - allowed)
    if unknown:
        raise ConfigError(f"unknown top-level key(s): {', '.join(unknown)}")
    if d.get("version") != CONFIG_VERSION:
        raise ConfigError(f"config version must be {CONFIG_VERSION}, got {d.get('version')!r}")
    seed = d.get("seed", 0)
    if not isinstance(seed, int) or isinstance(seed, bool) or seed < 0:
        raise ConfigError("seed must be a non-negative integer")
    out = d.get("output_dir", "run")
    if not isinstance(out, str) or not out:
        raise ConfigError("output_dir must be a non-empty string")
    raw = {name: d.get(name, {}) for name in _SECTIONS}
    for name in raw:
        if not isinstance(raw[name], dict):
            raise ConfigError(f"section '{name}' must be an object")
    # K lives in the search section; the controller follows unless set explicitly
    if "batch_size" not in raw["controller"] and "pool_size" in raw["search"]:
        raw["controller"] = {**raw["controller"], "batch_size": raw["search"]["pool_size"]}
    if "workers" not in raw["search"]:
        raw["search"] = {**raw["search"], "workers": default_workers()}
    sections = {name: _build(cls, name, raw[name], seed) for name, cls in _SECTIONS.items()}
    cfg = RunConfig(CONFIG_VERSION, seed, out, **sections)
    if cfg.search.batch_size > cfg.search.pool_size:
        raise ConfigError("search.batch_size must not exceed search.pool_size")
    if cfg.controller.batch_size != cfg.search.pool_size:
        raise ConfigError("controller.batch_size must equal search.pool_size (K)")
    return cfg


def loads(text: str) -> RunConfig:
    try:
        d = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ConfigError(f"invalid JSON: {exc}") from None
    return from_dict(d)


def load(path) -> RunConfig:
    try:
        text = Path(path).read_text()
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc.strerror}") from None
    return loads(text)


def dumps(cfg: RunConfig) -> str:
    return json.dumps(cfg.to_dict(), indent=2, sort_keys=True) + "\n"
