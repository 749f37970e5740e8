"""Run configuration: one JSON document with a section per component.

Every training hyperparameter has an explicit key; anything omitted
falls back to the dataclass default. Unknown keys are rejected.
"""

from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass, field
from pathlib import Path

from .errors import ConfigError
from .evolution import EvolutionConfig
from .market_data import IndicatorConfig
from .policy import HyperParams
from .trading_env import EnvConfig


@dataclass(frozen=True)
class DataConfig:
    csv: tuple[str, ...] = ()
    tickers: tuple[str, ...] | None = None
    artifact: str | None = None
    train_fraction: float = 0.7
    periods_per_year: int | None = None

    def __post_init__(self):
        object.__setattr__(self, "csv", tuple(self.csv))
        if self.tickers is not None:
            object.__setattr__(self, "tickers", tuple(self.tickers))
        if not 0.0 < self.train_fraction < 1.0:
            raise ConfigError("train_fraction must lie in (0, 1)")


@dataclass(frozen=True)
class RunConfig:
    data: DataConfig = field(default_factory=DataConfig)
    indicators: IndicatorConfig = field(default_factory=IndicatorConfig)
    env: EnvConfig = field(default_factory=EnvConfig)
    hyperparams: HyperParams = field(default_factory=HyperParams)
    evolution: EvolutionConfig = field(default_factory=EvolutionConfig)
    seed: int = 0
    out_dir: str = "runs/run"
    threads: int = 1
    executor: str = "thread"

    def __post_init__(self):
        if not 0 <= int(self.seed) < 2**64:
            raise ConfigError("seed must be an unsigned 64-bit integer")
        if self.threads < 1:
            raise ConfigError("threads must be >= 1")
        if self.executor not in ("thread", "process"):
            raise ConfigError(f"executor must be 'thread' or 'process', got {self.executor!r}")

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    def check_paths(self, base: Path | None = None) -> None:
        base = base or Path.cwd()
        for p in self.data.csv + ((self.data.artifact,) if self.data.artifact else ()):
            if not (base / p).exists():
                raise ConfigError(f"referenced path does not exist: {p}")


_SECTIONS = {
    "data": DataConfig,
    "indicators": IndicatorConfig,
    "env": EnvConfig,
    "hyperparams": HyperParams,
    "evolution": EvolutionConfig,
}


def _build(cls, values: dict, where: str):
    if not isinstance(values, dict):
        raise ConfigError(f"section {where!r} must be an object")
    known = {f.name for f in dataclasses.fields(cls)}
    unknown = set(values) - known
    if unknown:
        raise ConfigError(f"unknown keys in {where!r}: {sorted(unknown)}")
    try:
        return cls(**values)
    except TypeError as exc:
        raise ConfigError(f"bad value in {where!r}: {exc}") from None


def from_dict(raw: dict) -> RunConfig:
    raw = dict(raw)
    kwargs = {}
    for name, cls in _SECTIONS.items():
        if name in raw:
            kwargs[name] = _build(cls, raw.pop(name), name)
    top = {f.name for f in dataclasses.fields(RunConfig)} - set(_SECTIONS)
    unknown = set(raw) - top
    if unknown:
        raise ConfigError(f"unknown top-level keys: {sorted(unknown)}")
    return RunConfig(**kwargs, **raw)


def load_config(path, check_paths: bool = True) -> RunConfig:
    path = Path(path)
    try:
        raw = json.loads(path.read_text(encoding="utf-8"))
    except FileNotFoundError:
        raise ConfigError(f"config file not found: {path}") from None
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: invalid JSON ({exc})") from None
    cfg = from_dict(raw)
    if check_paths:
        cfg.check_paths(path.parent)
    return cfg


def dump_config(cfg: RunConfig, path) -> Path:
    path = Path(path)
    path.write_text(json.dumps(cfg.to_dict(), indent=2, sort_keys=True) + "\n", encoding="utf-8")
    return path


def override(cfg: RunConfig, section: str | None = None, **values) -> RunConfig:
    """Replace fields, ignoring ``None`` values (unset CLI flags)."""
    values = {k: v for k, v in values.items() if v is not None}
    if not values:
        return cfg
    if section is None:
        return dataclasses.replace(cfg, **values)
    return dataclasses.replace(cfg, **{section: dataclasses.replace(getattr(cfg, section), **values)})
