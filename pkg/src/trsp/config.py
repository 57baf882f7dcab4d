"""Run configuration: INI sections mapped onto dataclasses, with flag overrides."""

from __future__ import annotations

import configparser
import dataclasses
import types
import typing
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .core import Stage1Config, Stage2Config
from .model import ModelConfig
from .training import PretrainConfig


class ConfigError(ValueError):
    pass


@dataclass
class DataConfig:
    corpus: str | None = None
    mode: str = "char"
    fractions: tuple[float, float, float] = (0.9, 0.05, 0.05)
    calib_n: int = 32
    calib_len: int = 64
    eval_split: str = "test"
    eval_seq_len: int | None = None
    eval_tokens: int | None = None  # evaluate on a prefix of the split

    def __post_init__(self):
        self.fractions = tuple(self.fractions)
        if self.mode not in ("char", "byte"):
            raise ValueError("data.mode must be 'char' or 'byte'")
        if self.eval_split not in ("validation", "test"):
            raise ValueError("data.eval_split must be 'validation' or 'test'")
        if self.calib_n < 1 or self.calib_len < 2:
            raise ValueError("calibration needs calib_n >= 1 and calib_len >= 2")


@dataclass
class PruneConfig:
    ratio: float = 0.25
    mode: str = "iterative"
    regularize: bool = True
    strategy: str = "trsp"

    def __post_init__(self):
        if not 0.0 < self.ratio < 1.0:
            raise ValueError("prune.ratio must lie in (0, 1)")
        if self.mode not in ("iterative", "one_shot"):
            raise ValueError("prune.mode must be 'iterative' or 'one_shot'")
        if self.strategy not in ("trsp", "similarity", "loss-impact", "random"):
            raise ValueError("prune.strategy must be trsp, similarity, loss-impact or random")


@dataclass
class BenchConfig:
    batch: int = 8
    gen_len: int = 32
    prompt_len: int | None = None
    repeats: int = 5
    warmup: int = 1

    def __post_init__(self):
        if self.repeats < 1 or self.batch < 1 or self.gen_len < 1:
            raise ValueError("bench.batch, bench.gen_len and bench.repeats must be >= 1")


@dataclass
class GridConfig:
    lambda1s: tuple[float, ...] = (0.0, 1e-3, 5e-3)
    lambda2s: tuple[float, ...] = (0.0, 1e-4, 1e-3)

    def __post_init__(self):
        self.lambda1s = tuple(float(x) for x in self.lambda1s)
        self.lambda2s = tuple(float(x) for x in self.lambda2s)
        if not self.lambda1s or not self.lambda2s:
            raise ValueError("grid lambda lists must be non-empty")


@dataclass
class RootConfig:
    seed: int = 0
    out: str = "runs"


SECTIONS: dict[str, type] = {
    "run": RootConfig,
    "model": ModelConfig,
    "data": DataConfig,
    "pretrain": PretrainConfig,
    "stage1": Stage1Config,
    "stage2": Stage2Config,
    "prune": PruneConfig,
    "bench": BenchConfig,
    "grid": GridConfig,
}


@dataclass
class RunConfig:
    run: RootConfig = field(default_factory=RootConfig)
    model: ModelConfig = field(default_factory=ModelConfig)
    data: DataConfig = field(default_factory=DataConfig)
    pretrain: PretrainConfig = field(default_factory=PretrainConfig)
    stage1: Stage1Config = field(default_factory=Stage1Config)
    stage2: Stage2Config = field(default_factory=Stage2Config)
    prune: PruneConfig = field(default_factory=PruneConfig)
    bench: BenchConfig = field(default_factory=BenchConfig)
    grid: GridConfig = field(default_factory=GridConfig)

    def to_dict(self) -> dict:
        return {name: dataclasses.asdict(getattr(self, name)) for name in SECTIONS}

    @classmethod
    def from_dict(cls, d: dict) -> "RunConfig":
        raw = {s: {k: v for k, v in (d.get(s) or {}).items()} for s in SECTIONS}
        unknown = set(d) - set(SECTIONS)
        if unknown:
            raise ConfigError(f"unknown config section(s): {sorted(unknown)}")
        return cls(**{s: _build(s, SECTIONS[s], raw[s], from_text=False) for s in SECTIONS})

    def seeds(self) -> dict[str, int]:
        """Per-stage seeds expanded from the root seed."""
        names = ("init", "pretrain", "calibration", "selection", "bench")
        words = np.random.SeedSequence(self.run.seed).generate_state(len(names))
        return {n: int(w) % 2**31 for n, w in zip(names, words)}


def _hints(cls) -> dict[str, object]:
    return typing.get_type_hints(cls)


def _parse_bool(text: str) -> bool:
    t = text.strip().lower()
    if t in ("1", "true", "yes", "on"):
        return True
    if t in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {text!r}")


def _coerce(value, hint, from_text: bool):
    origin = typing.get_origin(hint)
    args = typing.get_args(hint)
    if origin in (typing.Union, types.UnionType):
        inner = [a for a in args if a is not type(None)]
        if value is None or (from_text and str(value).strip().lower() in ("", "none", "null")):
            return None
        return _coerce(value, inner[0], from_text)
    if origin is tuple:
        items = value
        if from_text:
            items = [s for s in str(value).replace(",", " ").split() if s]
        elem = args[0]
        return tuple(_coerce(x, elem, from_text) for x in items)
    if hint is bool:
        if from_text or isinstance(value, str):
            return _parse_bool(str(value))
        if not isinstance(value, bool):
            raise ValueError(f"expected a boolean, got {value!r}")
        return value
    if hint is int:
        if isinstance(value, float) and not value.is_integer():
            raise ValueError(f"expected an integer, got {value!r}")
        if isinstance(value, bool):
            raise ValueError(f"expected an integer, got {value!r}")
        return int(value)
    if hint is float:
        return float(value)
    if hint is str:
        return str(value)
    return value


def _build(section: str, cls, values: dict, from_text: bool):
    hints = _hints(cls)
    known = {f.name for f in dataclasses.fields(cls)}
    kwargs = {}
    for key, raw in values.items():
        if key not in known:
            raise ConfigError(f"unknown key {section}.{key}")
        try:
            kwargs[key] = _coerce(raw, hints[key], from_text)
        except (TypeError, ValueError) as exc:
            raise ConfigError(f"{section}.{key}: {exc}") from None
    try:
        return cls(**kwargs)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"[{section}] {exc}") from None


def load_config(path=None, overrides: list[str] | None = None) -> RunConfig:
    """Read an INI file (optional), then apply ``section.key=value`` overrides; flags win."""
    values: dict[str, dict[str, str]] = {s: {} for s in SECTIONS}
    if path is not None:
        p = Path(path)
        if not p.is_file():
            raise ConfigError(f"config file not found: {p}")
        parser = configparser.ConfigParser(interpolation=None)
        parser.optionxform = str
        try:
            parser.read(p, encoding="utf-8")
        except configparser.Error as exc:
            raise ConfigError(f"cannot parse {p}: {exc}") from None
        for sec in parser.sections():
            if sec not in SECTIONS:
                raise ConfigError(f"unknown config section [{sec}]")
            values[sec].update(parser[sec])
    for item in overrides or []:
        key, sep, val = item.partition("=")
        sec, dot, name = key.strip().partition(".")
        if not sep or not dot:
            raise ConfigError(f"override must look like section.key=value, got {item!r}")
        if sec not in SECTIONS:
            raise ConfigError(f"unknown config section [{sec}] in override {item!r}")
        values[sec][name] = val
    return RunConfig(**{s: _build(s, SECTIONS[s], values[s], from_text=True) for s in SECTIONS})


def to_ini(cfg: RunConfig) -> str:
    parser = configparser.ConfigParser(interpolation=None)
    parser.optionxform = str
    for name, section in cfg.to_dict().items():
        parser[name] = {k: _ini_value(v) for k, v in section.items()}
    import io

    buf = io.StringIO()
    parser.write(buf)
    return buf.getvalue()


def _ini_value(v) -> str:
    if v is None:
        return "none"
    if isinstance(v, (list, tuple)):
        return ", ".join(repr(x) for x in v)
    if isinstance(v, float):
        return repr(v)
    return str(v)
