"""Run configuration and its INI-style file format.

Sections map to dataclasses (``[run]``, ``[model]``, ``[grpo]``, ``[conflict]``,
``[task]``); every field is addressable and unknown sections or keys are errors.
"""

from __future__ import annotations

import configparser
import dataclasses
import enum
import hashlib
import json
import typing
from dataclasses import dataclass, field
from pathlib import Path

from ..conflict import ConflictConfig
from ..grpo import GrpoConfig
from ..model import ModelConfig
from .tasks import TaskSpec


class ConfigError(ValueError):
    pass


class Optimizer(str, enum.Enum):
    SGD = "sgd"
    ADAM = "adam"


@dataclass(frozen=True)
class RunSettings:
    seed: int = 0
    steps: int = 200
    learning_rate: float = 1e-3
    optimizer: Optimizer = Optimizer.ADAM
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    adam_eps: float = 1e-8
    eval_every: int = 10
    heldout_prompts: int = 16
    reward_flip_prob: float = 0.0
    init_std: float = 0.02
    pretrain_steps: int = 0
    pretrain_lr: float = 1e-2
    pretrain_batch: int = 16

    def __post_init__(self):
        object.__setattr__(self, "optimizer", Optimizer(self.optimizer))
        if self.steps < 1:
            raise ValueError("steps must be >= 1")
        if not self.learning_rate > 0:
            raise ValueError("learning_rate must be > 0")
        if self.eval_every < 1:
            raise ValueError("eval_every must be >= 1")
        if self.heldout_prompts < 1:
            raise ValueError("heldout_prompts must be >= 1")
        if not 0.0 <= self.reward_flip_prob <= 1.0:
            raise ValueError("reward_flip_prob must lie in [0, 1]")
        if self.pretrain_steps < 0:
            raise ValueError("pretrain_steps must be >= 0")
        if not 0 <= self.seed < 2 ** 64:
            raise ValueError("seed must be a 64-bit unsigned integer")


@dataclass(frozen=True)
class RunConfig:
    run: RunSettings = field(default_factory=RunSettings)
    model: ModelConfig = field(default_factory=ModelConfig)
    grpo: GrpoConfig = field(default_factory=GrpoConfig)
    conflict: ConflictConfig = field(default_factory=ConflictConfig)
    task: TaskSpec = field(default_factory=TaskSpec)

    def __post_init__(self):
        if self.task.query_len + _max_new(self) > self.model.max_seq_len:
            raise ValueError("query_len + response length exceeds max_seq_len")
        if self.task.query_len >= self.model.max_seq_len:
            raise ValueError("query_len must be < max_seq_len")

    def to_dict(self) -> dict:
        return {s: _section_dict(getattr(self, s)) for s in SECTIONS}

    def digest(self) -> str:
        blob = json.dumps(self.to_dict(), sort_keys=True).encode()
        return hashlib.sha256(blob).hexdigest()

    def replace(self, **sections) -> "RunConfig":
        """``cfg.replace(run={"steps": 5}, conflict={"mode": "sum"})``."""
        kw = {}
        for name, changes in sections.items():
            kw[name] = dataclasses.replace(getattr(self, name), **changes)
        return dataclasses.replace(self, **kw)


SECTIONS = ("run", "model", "grpo", "conflict", "task")


def _max_new(cfg: RunConfig) -> int:
    from .tasks import TaskKind

    return cfg.task.query_len if cfg.task.kind == TaskKind.REVERSE else 1


def response_length(cfg: RunConfig) -> int:
    return _max_new(cfg)


def _section_dict(obj) -> dict:
    out = {}
    for f in dataclasses.fields(obj):
        v = getattr(obj, f.name)
        out[f.name] = v.value if isinstance(v, enum.Enum) else v
    return out


def _parse_value(raw: str, typ, key: str):
    raw = raw.strip()
    try:
        if typ is bool:
            low = raw.lower()
            if low in ("true", "yes", "1", "on"):
                return True
            if low in ("false", "no", "0", "off"):
                return False
            raise ValueError(raw)
        if typ is int:
            return int(raw, 0)
        if typ is float:
            return float(raw)
        if isinstance(typ, type) and issubclass(typ, enum.Enum):
            return typ(raw.lower())
        return raw
    except ValueError as exc:
        raise ConfigError(f"bad value for {key}: {raw!r}") from exc


def _build_section(cls, items: dict, section: str):
    hints = typing.get_type_hints(cls)
    names = {f.name for f in dataclasses.fields(cls)}
    kwargs = {}
    for key, raw in items.items():
        if key not in names:
            raise ConfigError(f"unknown key [{section}] {key}")
        kwargs[key] = _parse_value(raw, hints[key], f"[{section}] {key}")
    try:
        return cls(**kwargs)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"[{section}] {exc}") from exc


_SECTION_TYPES = {
    "run": RunSettings,
    "model": ModelConfig,
    "grpo": GrpoConfig,
    "conflict": ConflictConfig,
    "task": TaskSpec,
}


def parse_config(text: str) -> RunConfig:
    parser = configparser.ConfigParser(interpolation=None, inline_comment_prefixes=("#", ";"))
    parser.optionxform = str
    try:
        parser.read_string(text)
    except configparser.Error as exc:
        raise ConfigError(str(exc)) from exc
    sections = {}
    for name in parser.sections():
        if name not in _SECTION_TYPES:
            raise ConfigError(f"unknown section [{name}]")
        sections[name] = _build_section(_SECTION_TYPES[name], dict(parser[name]), name)
    try:
        return RunConfig(**sections)
    except ValueError as exc:
        raise ConfigError(str(exc)) from exc


def load_config(path: str | Path) -> RunConfig:
    try:
        text = Path(path).read_text()
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    return parse_config(text)


def dump_config(cfg: RunConfig) -> str:
    lines = []
    for section, values in cfg.to_dict().items():
        lines.append(f"[{section}]")
        for k, v in values.items():
            if isinstance(v, bool):
                v = "true" if v else "false"
            elif isinstance(v, float):
                v = repr(v)
            lines.append(f"{k} = {v}")
        lines.append("")
    return "\n".join(lines)
