"""Flat ``key = value`` run configuration.

Every key has a desk-scale default that is active unless overridden. The
values used at full VQA scale are listed in ``FULL_SCALE`` for reference,
and setting those keys in a config file reproduces them.
"""

from __future__ import annotations

from dataclasses import dataclass, fields, replace
from pathlib import Path

from .model import ModelConfig
from .optim import AdamaxState, Schedule
from .synth import SynthConfig


class ConfigError(ValueError):
    """Unknown key or unparsable value in a config file."""


@dataclass
class RunConfig:
    # model
    C: int = 128
    D: int = 64
    K: int = 128
    K_prime: int = 128
    d: int = 3
    g: int = 4
    L: int = 1
    m: int = 15
    n: int = 16
    embed_dim: int = 64
    dropout_p: float = 0.2
    bias: bool = True
    variant: str = "bgn"
    seed: int = 0
    # schedule
    base_lr: float = 0.001
    warm_increment: float = 0.001
    warm_target: float = 0.004
    plateau_end_epoch: int = 6
    decay_factor: float = 0.25
    decay_every: int = 2
    floor_lr: float = 0.00025
    # optimizer
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    # training
    epochs: int = 10
    batch_size: int = 128
    # data
    train_count: int = 5000
    val_count: int = 1000
    min_objects: int = 3
    max_objects: int = 16
    grid: int = 5
    left_band: float = 0.3
    hop_shares: tuple = (1 / 3, 1 / 3, 1 / 3)
    # ablation
    seeds: tuple = (0, 1, 2)
    ablation_layers: tuple = (1, 2, 3)
    ablation_variants: tuple = ("ban", "sdp", "bgn")

    def model_config(self, vocab_size: int, answer_count: int, D_raw: int, **overrides) -> ModelConfig:
        names = {f.name for f in fields(ModelConfig)}
        values = {k: getattr(self, k) for k in names if hasattr(self, k)}
        values.update(vocab_size=vocab_size, answer_count=answer_count, D_raw=D_raw)
        values.update(overrides)
        return ModelConfig(**values)

    def schedule(self) -> Schedule:
        return Schedule(**{f.name: getattr(self, f.name) for f in fields(Schedule)})

    def optimizer_state(self) -> AdamaxState:
        return AdamaxState(beta1=self.beta1, beta2=self.beta2, eps=self.eps)

    def synth_config(self) -> SynthConfig:
        return SynthConfig(
            n_max=self.n,
            min_objects=self.min_objects,
            max_objects=self.max_objects,
            grid=self.grid,
            m=self.m,
            left_band=self.left_band,
            hop_shares=tuple(float(x) for x in self.hop_shares),
        )

    def updated(self, **changes) -> "RunConfig":
        return replace(self, **changes)


# Values stated for the full-size VQA v2.0 model.
FULL_SCALE = {
    "C": 1024,
    "D": 2048,
    "K": 1024,
    "K_prime": 1024,
    "d": 3,
    "g": 4,
    "L": 3,
    "m": 15,
    "n": 100,
    "dropout_p": 0.2,
    "base_lr": 0.001,
    "warm_increment": 0.001,
    "warm_target": 0.004,
    "plateau_end_epoch": 10,
    "decay_factor": 0.25,
    "decay_every": 2,
    "floor_lr": 0.00025,
    "batch_size": 128,
}


def _parse_value(key: str, raw: str, default):
    raw = raw.strip()
    try:
        if isinstance(default, bool):
            if raw.lower() in ("true", "1", "yes"):
                return True
            if raw.lower() in ("false", "0", "no"):
                return False
            raise ValueError(raw)
        if isinstance(default, int):
            return int(raw)
        if isinstance(default, float):
            return float(raw)
        if isinstance(default, tuple):
            items = [x.strip() for x in raw.split(",") if x.strip()]
            kind = type(default[0]) if default else str
            return tuple(kind(x) for x in items)
        return raw
    except ValueError:
        raise ConfigError(f"config key {key}: cannot parse {raw!r} as {type(default).__name__}") from None


def parse_config(text: str, base: RunConfig | None = None) -> RunConfig:
    base = base or RunConfig()
    defaults = {f.name: getattr(base, f.name) for f in fields(RunConfig)}
    changes = {}
    for lineno, line in enumerate(text.splitlines(), start=1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"config line {lineno}: expected 'key = value'")
        key, raw = (part.strip() for part in line.split("=", 1))
        if key not in defaults:
            raise ConfigError(f"unknown config key {key!r} (line {lineno})")
        changes[key] = _parse_value(key, raw, defaults[key])
    return replace(base, **changes)


def load_config(path: str | Path | None) -> RunConfig:
    if path is None:
        return RunConfig()
    try:
        text = Path(path).read_text(encoding="utf-8")
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc.strerror}") from exc
    return parse_config(text)


def dump_config(cfg: RunConfig) -> str:
    lines = []
    for f in fields(RunConfig):
        value = getattr(cfg, f.name)
        if isinstance(value, tuple):
            value = ", ".join(str(v) for v in value)
        lines.append(f"{f.name} = {value}")
    return "\n".join(lines) + "\n"
