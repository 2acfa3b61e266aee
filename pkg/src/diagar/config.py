"""Run configuration: one flat `key = value` file over dataclass
sections, with strict precedence  defaults < config file < command line.

Keys are dotted paths ("model.d_model", "adapt.base_rate", "seed").
Values are parsed by the type of the built-in default, so a config file
round-trips through `dump_config` unchanged.  All overrides are
collected as text first and sections are constructed once, which keeps
cross-field validation (say d_model vs num_heads) from firing on
half-applied states.

One master `seed` is fanned into named integer substreams
(`derive_seed`) so data generation, training, and sampling never share
a stream by accident.
"""

from __future__ import annotations

import zlib
from dataclasses import dataclass, field, fields
from pathlib import Path

import numpy as np

from .model import ModelConfig


class ConfigError(Exception):
    """Malformed keys, values, or rejected field combinations."""


@dataclass(frozen=True)
class DataConfig:
    count: int = 22000
    noise_rate: float = 0.05
    val_fraction: float = 0.1


@dataclass(frozen=True)
class PretrainConfig:
    steps: int = 600
    base_rate: float = 1e-3
    batch_size: int = 16
    warmup_steps: int = 40
    eval_every: int = 50
    eval_samples: int = 128
    checkpoint_every: int = 0
    cond_dropout: float = 0.1


@dataclass(frozen=True)
class AdaptConfig:
    steps: int = 600
    base_rate: float = 1e-3
    batch_size: int = 16
    warmup_steps: int = 20
    eval_every: int = 50
    eval_samples: int = 128
    checkpoint_every: int = 0
    cond_dropout: float = 0.1
    stage1_fraction: float = 0.2
    aux_weight: float = 0.05
    branch_point: int = 7


@dataclass(frozen=True)
class SampleConfig:
    num: int = 16
    mode: str = "diagonal"  # "diagonal" | "raster"
    greedy: bool = False
    temperature: float = 1.0
    top_k: int = 0
    cfg_scale: float = 2.0
    guided: bool = True
    class_id: int | None = None  # fixed class; unset cycles classes
    unconditional: bool = False
    chunk: int = 32


@dataclass(frozen=True)
class ProbeConfig:
    steps: int = 0  # 0 -> five percent of pretrain.steps
    batch_size: int = 16
    rate: float = 1e-2
    eval_samples: int = 256


@dataclass(frozen=True)
class BenchConfig:
    repeats: int = 20
    warmups: int = 3


@dataclass(frozen=True)
class RunConfig:
    model: ModelConfig = field(default_factory=ModelConfig)
    data: DataConfig = field(default_factory=DataConfig)
    pretrain: PretrainConfig = field(default_factory=PretrainConfig)
    adapt: AdaptConfig = field(default_factory=AdaptConfig)
    sample: SampleConfig = field(default_factory=SampleConfig)
    probe: ProbeConfig = field(default_factory=ProbeConfig)
    bench: BenchConfig = field(default_factory=BenchConfig)
    seed: int = 0


_SECTIONS = {
    "model": ModelConfig,
    "data": DataConfig,
    "pretrain": PretrainConfig,
    "adapt": AdaptConfig,
    "sample": SampleConfig,
    "probe": ProbeConfig,
    "bench": BenchConfig,
}

# value kinds not inferable from the default value
_KIND_OVERRIDES = {"sample.class_id": "optional_int"}


def _kind_of(key: str, default) -> str:
    if key in _KIND_OVERRIDES:
        return _KIND_OVERRIDES[key]
    if isinstance(default, bool):
        return "bool"
    if isinstance(default, int):
        return "int"
    if isinstance(default, float):
        return "float"
    if isinstance(default, str):
        return "str"
    raise AssertionError(f"no value kind for config key {key}")


def config_keys() -> dict[str, str]:
    """Every dotted key and its value kind."""
    keys = {"seed": "int"}
    for section, cls in _SECTIONS.items():
        for f in fields(cls):
            key = f"{section}.{f.name}"
            keys[key] = _kind_of(key, f.default)
    return keys


def _defaults() -> dict[str, object]:
    values: dict[str, object] = {"seed": RunConfig.seed}
    for section, cls in _SECTIONS.items():
        for f in fields(cls):
            values[f"{section}.{f.name}"] = f.default
    return values


def parse_value(kind: str, text: str, key: str):
    t = text.strip()
    if len(t) >= 2 and t[0] == t[-1] and t[0] in "\"'":
        t = t[1:-1]
    try:
        if kind == "int":
            return int(t)
        if kind == "float":
            return float(t)
        if kind == "bool":
            low = t.lower()
            if low in ("true", "1", "yes", "on"):
                return True
            if low in ("false", "0", "no", "off"):
                return False
            raise ValueError(f"not a boolean: {t!r}")
        if kind == "optional_int":
            return None if t.lower() in ("none", "null", "") else int(t)
        return t  # str
    except ValueError as e:
        raise ConfigError(f"bad value for {key}: {e}") from None


def format_value(value) -> str:
    if value is None:
        return "none"
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, float):
        return repr(value)
    return str(value)


def read_config_file(path) -> list[tuple[str, str]]:
    """Parse `key = value` lines; '#' starts a comment, blanks ignored."""
    pairs = []
    text = Path(path).read_text(encoding="utf-8")
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{path}:{lineno}: expected 'key = value', got {raw!r}")
        key, value = line.split("=", 1)
        pairs.append((key.strip(), value.strip()))
    return pairs


def _split_assignment(text: str) -> tuple[str, str]:
    if "=" not in text:
        raise ConfigError(f"override {text!r} is not of the form key=value")
    key, value = text.split("=", 1)
    return key.strip(), value.strip()


def resolve_config(
    config_path=None, overrides: list[str] | None = None
) -> RunConfig:
    """Merge defaults, an optional config file, and key=value overrides
    (in that order) into a validated RunConfig."""
    kinds = config_keys()
    values = _defaults()

    def apply(key: str, raw: str, origin: str) -> None:
        if key not in kinds:
            raise ConfigError(f"{origin}: unknown config key {key!r}")
        values[key] = parse_value(kinds[key], raw, key)

    if config_path is not None:
        for key, raw in read_config_file(config_path):
            apply(key, raw, str(config_path))
    for text in overrides or []:
        key, raw = _split_assignment(text)
        apply(key, raw, "command line")
    sections = {}
    for section, cls in _SECTIONS.items():
        kwargs = {
            f.name: values[f"{section}.{f.name}"] for f in fields(cls)
        }
        try:
            sections[section] = cls(**kwargs)
        except ValueError as e:
            raise ConfigError(f"{section}: {e}") from None
    return RunConfig(seed=values["seed"], **sections)


def dump_config(cfg: RunConfig) -> str:
    """The fully resolved configuration, one sorted `key = value` line
    per field; reparsing reproduces `cfg` exactly."""
    lines = [f"seed = {format_value(cfg.seed)}"]
    for section in _SECTIONS:
        obj = getattr(cfg, section)
        for f in fields(type(obj)):
            lines.append(
                f"{section}.{f.name} = {format_value(getattr(obj, f.name))}"
            )
    return "\n".join(sorted(lines)) + "\n"


def derive_seed(seed: int, name: str) -> int:
    """A stable integer sub-seed for the named consumer."""
    seq = np.random.SeedSequence((int(seed), zlib.crc32(name.encode())))
    return int(seq.generate_state(1, dtype=np.uint64)[0] >> 1)
