"""Run configuration files.

A run config is an INI file with four sections mirroring :class:`RunConfig`::

    [model]       ModelConfig fields (vocab_size, d, layers, heads, C, ...)
    [optimizer]   learning_rate, steps, batch_size, weight_decay, warmup_steps,
                  min_lr, seed, eval_interval, grad_clip
    [data]        train_path, val_path, kinds, train_sequences, val_sequences,
                  train_seed, val_seed, dt, stride, value_min, value_max, bins,
                  eval_sequences, completions
    [output]      metrics_path, checkpoint_path

Relative paths are resolved against the directory holding the config file.
"""

from __future__ import annotations

import configparser
import dataclasses
import os
from dataclasses import dataclass, field

from mppa.model import ConfigError, ModelConfig
from mppa.physics import DomainConfig, TokenizerSpec


@dataclass(frozen=True)
class OptimizerConfig:
    learning_rate: float = 3e-3
    steps: int = 500
    batch_size: int = 16
    weight_decay: float = 0.01
    warmup_steps: int = 50
    min_lr: float = 3e-4
    seed: int = 0
    eval_interval: int = 100
    grad_clip: float = 1.0

    def __post_init__(self):
        if self.steps < 1:
            raise ConfigError("optimizer.steps must be >= 1")
        if self.learning_rate < 0:
            raise ConfigError("optimizer.learning_rate must be >= 0")
        if self.batch_size < 1 or self.eval_interval < 1:
            raise ConfigError("batch_size and eval_interval must be >= 1")


@dataclass(frozen=True)
class DataConfig:
    train_path: str = "data/train.txt"
    val_path: str = "data/val.txt"
    kinds: tuple = ("harmonic", "damped")
    train_sequences: int = 2000
    val_sequences: int = 200
    train_seed: int = 88
    val_seed: int = 42
    dt: float = 0.05
    stride: int = 4
    value_min: float = -4.0
    value_max: float = 4.0
    bins: int = 62
    eval_sequences: int = 200
    completions: int = 8

    def domain(self, split: str, seq_len: int) -> DomainConfig:
        tok = TokenizerSpec(value_min=self.value_min, value_max=self.value_max, bins=self.bins, seq_len=seq_len)
        count = self.train_sequences if split == "train" else self.val_sequences
        return DomainConfig(kinds=tuple(self.kinds), num_sequences=count, dt=self.dt, stride=self.stride, tokenizer=tok)

    def tokenizer(self, seq_len: int) -> TokenizerSpec:
        return TokenizerSpec(value_min=self.value_min, value_max=self.value_max, bins=self.bins, seq_len=seq_len)


@dataclass(frozen=True)
class OutputConfig:
    metrics_path: str = "out/metrics.jsonl"
    checkpoint_path: str = "out/model.ckpt"


@dataclass(frozen=True)
class RunConfig:
    model: ModelConfig = field(default_factory=ModelConfig)
    optimizer: OptimizerConfig = field(default_factory=OptimizerConfig)
    data: DataConfig = field(default_factory=DataConfig)
    output: OutputConfig = field(default_factory=OutputConfig)
    base_dir: str = "."

    @property
    def seq_len(self) -> int:
        # each stored sequence feeds n_max inputs plus one shifted target
        return self.model.n_max + 1

    def path(self, p: str) -> str:
        return p if os.path.isabs(p) else os.path.normpath(os.path.join(self.base_dir, p))

    def replace(self, **sections) -> "RunConfig":
        return dataclasses.replace(self, **sections)

    def to_text(self) -> str:
        cp = _parser()
        for section in ("model", "optimizer", "data", "output"):
            obj = getattr(self, section)
            cp[section] = {f.name: _fmt(getattr(obj, f.name)) for f in dataclasses.fields(obj)}
        lines = []
        for section in cp.sections():
            lines.append(f"[{section}]")
            lines.extend(f"{k} = {v}" for k, v in cp[section].items())
            lines.append("")
        return "\n".join(lines)


def _parser() -> configparser.ConfigParser:
    cp = configparser.ConfigParser(interpolation=None)
    cp.optionxform = str  # keys are case-sensitive (the chunk size is ``C``)
    return cp


def _fmt(v) -> str:
    if isinstance(v, (tuple, list)):
        return ",".join(str(x) for x in v)
    return str(v)


def _coerce(cls, section: str, raw: dict):
    types = {f.name: f.type for f in dataclasses.fields(cls)}
    kw = {}
    for key, value in raw.items():
        if key not in types:
            raise ConfigError(f"unknown setting {section}.{key}")
        kind = types[key]
        try:
            if kind == "int":
                kw[key] = int(value)
            elif kind == "float":
                kw[key] = float(value)
            elif kind == "tuple":
                kw[key] = tuple(x.strip() for x in value.split(",") if x.strip())
            else:
                kw[key] = value.strip()
        except ValueError as exc:
            raise ConfigError(f"{section}.{key}: {exc}") from None
    return cls(**kw)


def parse_run_config(text: str, base_dir: str = ".") -> RunConfig:
    cp = _parser()
    try:
        cp.read_string(text)
    except configparser.Error as exc:
        raise ConfigError(f"malformed config: {exc}") from None
    unknown = set(cp.sections()) - {"model", "optimizer", "data", "output"}
    if unknown:
        raise ConfigError(f"unknown config sections: {sorted(unknown)}")
    sect = lambda name: dict(cp[name]) if cp.has_section(name) else {}  # noqa: E731
    try:
        model = ModelConfig.from_items(sect("model"))
    except (TypeError, ValueError) as exc:
        raise ConfigError(str(exc)) from None
    return RunConfig(
        model=model,
        optimizer=_coerce(OptimizerConfig, "optimizer", sect("optimizer")),
        data=_coerce(DataConfig, "data", sect("data")),
        output=_coerce(OutputConfig, "output", sect("output")),
        base_dir=base_dir,
    )


def load_run_config(path) -> RunConfig:
    path = os.fspath(path)
    try:
        with open(path) as fh:
            text = fh.read()
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from None
    return parse_run_config(text, base_dir=os.path.dirname(os.path.abspath(path)))
