"""Run configuration and its flat ``key = value`` text format.

Grammar (one entry per line)::

    # comment                      ; also a comment
    seed = 1
    [model]                        section header: prefixes following keys with "model."
    backbone = tiny
    loss.margin = 0.2              -> model.loss.margin
    [ ]                            empty header resets the prefix
    batch.P = 8                    dotted keys work with or without headers

Values are coerced to the type of the field's default: ints, floats,
booleans (true/false/yes/no/1/0), strings, and comma-separated tuples.
The environment variable MESHGAIT_SEED overrides ``seed``.
"""

from __future__ import annotations

import dataclasses
import os
from dataclasses import dataclass, field, fields, is_dataclass, replace
from pathlib import Path

from meshgait.dataset import BatchSpec
from meshgait.errors import ConfigError
from meshgait.model import ModelConfig

SEED_ENV = "MESHGAIT_SEED"


@dataclass(frozen=True)
class DataConfig:
    root: str = ""
    holdout: int = 1  # sequences per identity held out as evaluation probes (0 = none)


@dataclass(frozen=True)
class OptimConfig:
    name: str = "sgd"
    lr: float = 0.1
    momentum: float = 0.9
    weight_decay: float = 5e-4
    milestones: tuple[int, ...] = ()
    gamma: float = 0.1


@dataclass(frozen=True)
class TrainConfig:
    mesh_frames: int = 0  # frames per sequence given mesh supervision each step (0 = all)
    log_interval: int = 10


@dataclass(frozen=True)
class EvalConfig:
    protocol: str = "gait3d"
    seed: int = 0
    max_frames: int = 0  # 0 = whole sequence


@dataclass(frozen=True)
class RunConfig:
    seed: int = 0
    max_steps: int = 1000
    eval_interval: int = 250
    output_dir: str = "runs/meshgait"
    model: ModelConfig = field(default_factory=ModelConfig)
    data: DataConfig = field(default_factory=DataConfig)
    batch: BatchSpec = field(default_factory=BatchSpec)
    optim: OptimConfig = field(default_factory=OptimConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    eval: EvalConfig = field(default_factory=EvalConfig)

    def validate(self) -> None:
        self.model.validate()
        self.batch.validate(triplet=self.model.loss.triplet > 0)
        if self.max_steps < 1:
            raise ConfigError("max_steps must be >= 1")
        if self.eval_interval < 1:
            raise ConfigError("eval_interval must be >= 1")
        if self.optim.name not in ("sgd", "adam"):
            raise ConfigError(f"optim.name must be sgd or adam, got {self.optim.name!r}")
        if self.optim.lr <= 0:
            raise ConfigError("optim.lr must be positive")
        if self.eval.protocol not in ("gait3d", "cross_view"):
            raise ConfigError(f"unknown eval protocol {self.eval.protocol!r}")
        if self.train.mesh_frames < 0:
            raise ConfigError("train.mesh_frames must be >= 0")

    def to_text(self) -> str:
        return "".join(f"{k} = {_format(v)}\n" for k, v in flatten(self))


def _format(value) -> str:
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, tuple):
        return ",".join(str(v) for v in value)
    return str(value)


def flatten(obj, prefix: str = ""):
    for f in fields(obj):
        value = getattr(obj, f.name)
        key = f"{prefix}{f.name}"
        if is_dataclass(value):
            yield from flatten(value, key + ".")
        else:
            yield key, value


def _coerce(raw: str, default, key: str):
    raw = raw.strip()
    try:
        if isinstance(default, bool):
            low = raw.lower()
            if low in ("true", "yes", "1", "on"):
                return True
            if low in ("false", "no", "0", "off"):
                return False
            raise ValueError(raw)
        if isinstance(default, int):
            return int(raw)
        if isinstance(default, float):
            return float(raw)
        if isinstance(default, tuple):
            if not raw:
                return ()
            items = [s.strip() for s in raw.split(",")]
            kind = type(default[0]) if default else int
            return tuple(kind(s) for s in items)
    except ValueError:
        raise ConfigError(f"{key}: cannot parse {raw!r} as {type(default).__name__}") from None
    return raw


def apply_overrides(cfg, values: dict[str, str], _prefix: str = ""):
    """Return a copy of dataclass ``cfg`` with dotted-key string overrides applied."""
    names = {f.name for f in fields(cfg)}
    nested: dict[str, dict[str, str]] = {}
    direct = {}
    for key, raw in values.items():
        head, _, rest = key.partition(".")
        if head not in names:
            raise ConfigError(f"unknown config key {_prefix + key!r}")
        current = getattr(cfg, head)
        if rest:
            if not is_dataclass(current):
                raise ConfigError(f"{_prefix + head!r} has no sub-keys")
            nested.setdefault(head, {})[rest] = raw
        else:
            if is_dataclass(current):
                raise ConfigError(f"{_prefix + key!r} is a section, not a value")
            direct[head] = _coerce(raw, current, _prefix + key)
    for head, sub in nested.items():
        direct[head] = apply_overrides(getattr(cfg, head), sub, _prefix + head + ".")
    return replace(cfg, **direct)


def parse_text(text: str, source: str = "<config>") -> dict[str, str]:
    values: dict[str, str] = {}
    section = ""
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].split(";", 1)[0].strip()
        if not line:
            continue
        if line.startswith("[") and line.endswith("]"):
            section = line[1:-1].strip()
            continue
        if "=" not in line:
            raise ConfigError(f"{source}:{lineno}: expected 'key = value'")
        key, value = (s.strip() for s in line.split("=", 1))
        if not key:
            raise ConfigError(f"{source}:{lineno}: empty key")
        values[f"{section}.{key}" if section else key] = value
    return values


def load_config(path: str | os.PathLike | None = None, overrides: dict[str, str] | None = None) -> RunConfig:
    values: dict[str, str] = {}
    if path is not None:
        path = Path(path)
        if not path.is_file():
            raise ConfigError(f"{path}: config file not found")
        values.update(parse_text(path.read_text(), str(path)))
    values.update(overrides or {})
    if os.environ.get(SEED_ENV):
        values["seed"] = os.environ[SEED_ENV]
    cfg = apply_overrides(RunConfig(), values)
    cfg.validate()
    return cfg


def parse_assignments(items: list[str] | None) -> dict[str, str]:
    out = {}
    for item in items or []:
        if "=" not in item:
            raise ConfigError(f"--set expects key=value, got {item!r}")
        k, v = item.split("=", 1)
        out[k.strip()] = v.strip()
    return out


def as_dict(cfg: RunConfig) -> dict:
    return dataclasses.asdict(cfg)
