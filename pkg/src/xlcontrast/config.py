"""Run configuration and its flat ``key = value`` text format."""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, fields
from pathlib import Path
from typing import Iterable

from .encoder import EncoderConfig
from .momentum import MOMENTUM_MODES

_TRUE = {"on", "true", "yes", "1"}
_FALSE = {"off", "false", "no", "0"}


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class RunConfig:
    """Every tunable of a pre-training run.

    Defaults are a desk-scale reduction of the base recipe: a 2-layer model
    trained from scratch, so the momentum coefficient follows the
    inverse-square-root schedule.
    """

    # encoder
    num_layers: int = 2
    hidden_size: int = 64
    ffn_size: int = 256
    num_heads: int = 4
    vocab_size: int = 0  # 0: take from the vocab file
    max_positions: int = 64
    projection_dim: int = 64
    universal_layer: int | None = None
    retrieval_layer: int | None = None
    init_range: float = 0.02
    # optimization
    batch_size: int = 32
    total_steps: int = 2000
    warmup_steps: int = 100
    peak_lr: float = 1e-3
    adam_beta1: float = 0.9
    adam_beta2: float = 0.98
    adam_eps: float = 1e-6
    weight_decay: float = 0.01
    clip_norm: float = 1.0
    # tasks
    mmlm: bool = True
    tlm: bool = True
    xlco: bool = True
    mixup: bool = True
    mask_rate: float = 0.15
    sampling_alpha: float = 0.7
    temperature: float = 1.0
    # momentum contrast
    queue_capacity: int = 1024
    momentum_mode: str = "inverse_sqrt"
    momentum: float = 0.9999
    momentum_cap: float = 0.9995
    key_warmup_steps: int = 0
    # data and bookkeeping
    data_dir: str = ""
    eval_dir: str = ""
    pivot: str = "l0"
    seed: int = 0
    log_interval: int = 10
    checkpoint_interval: int = 0

    def __post_init__(self):
        if self.batch_size < 1:
            raise ConfigError(f"batch_size must be >= 1, got {self.batch_size}")
        if self.total_steps < 1:
            raise ConfigError(f"total_steps must be >= 1, got {self.total_steps}")
        if not 0 <= self.warmup_steps <= self.total_steps:
            raise ConfigError(f"warmup_steps {self.warmup_steps} must lie in [0, total_steps]")
        if not 0.0 < self.mask_rate < 1.0:
            raise ConfigError(f"mask_rate must lie in (0, 1), got {self.mask_rate}")
        if self.momentum_mode not in MOMENTUM_MODES:
            raise ConfigError(f"momentum_mode must be one of {MOMENTUM_MODES}, got {self.momentum_mode!r}")
        for name in ("momentum", "momentum_cap"):
            if not 0.0 <= getattr(self, name) <= 1.0:
                raise ConfigError(f"{name} must lie in [0, 1]")
        if not (self.mmlm or self.tlm or self.xlco):
            raise ConfigError("at least one of mmlm, tlm, xlco must be enabled")
        if self.queue_capacity < 0 or self.key_warmup_steps < 0:
            raise ConfigError("queue_capacity and key_warmup_steps must be >= 0")
        if self.temperature <= 0:
            raise ConfigError("temperature must be positive")
        if self.log_interval < 1:
            raise ConfigError("log_interval must be >= 1")

    def encoder_config(self, vocab_size: int | None = None) -> EncoderConfig:
        vs = vocab_size if vocab_size is not None else self.vocab_size
        try:
            return EncoderConfig(self.num_layers, self.hidden_size, self.ffn_size, self.num_heads, vs,
                                 self.max_positions, self.universal_layer, self.retrieval_layer,
                                 self.projection_dim)
        except ValueError as exc:
            raise ConfigError(str(exc)) from None

    def replace(self, **changes) -> "RunConfig":
        return dataclasses.replace(self, **changes)

    def with_overrides(self, pairs: Iterable[str]) -> "RunConfig":
        """Apply ``key=value`` strings, as from repeated ``--set`` flags."""
        changes = {}
        for item in pairs:
            if "=" not in item:
                raise ConfigError(f"override must be KEY=VALUE, got {item!r}")
            key, value = item.split("=", 1)
            key = key.strip()
            changes[key] = _parse_value(key, value.strip())
        return self.replace(**changes)

    def to_text(self) -> str:
        lines = []
        for f in fields(self):
            lines.append(f"{f.name} = {_format_value(getattr(self, f.name))}")
        return "\n".join(lines) + "\n"

    @classmethod
    def from_text(cls, text: str) -> "RunConfig":
        changes = {}
        for lineno, raw in enumerate(text.splitlines(), 1):
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise ConfigError(f"line {lineno}: expected 'key = value', got {raw!r}")
            key, value = (s.strip() for s in line.split("=", 1))
            if key in changes:
                raise ConfigError(f"line {lineno}: duplicate key {key!r}")
            changes[key] = _parse_value(key, value, lineno)
        return cls(**changes)

    @classmethod
    def load(cls, path) -> "RunConfig":
        return cls.from_text(Path(path).read_text(encoding="utf-8"))

    def save(self, path) -> None:
        Path(path).write_text(self.to_text(), encoding="utf-8")


_FIELD_TYPES = {f.name: f.type for f in fields(RunConfig)}


def _parse_value(key: str, value: str, lineno: int | None = None):
    where = f"line {lineno}: " if lineno else ""
    if key not in _FIELD_TYPES:
        raise ConfigError(f"{where}unknown config key {key!r}")
    kind = _FIELD_TYPES[key]
    try:
        if kind == "bool":
            low = value.lower()
            if low in _TRUE:
                return True
            if low in _FALSE:
                return False
            raise ValueError(value)
        if kind == "int":
            return int(value)
        if kind == "int | None":
            return None if value.lower() == "auto" else int(value)
        if kind == "float":
            return float(value)
        return value
    except ValueError:
        raise ConfigError(f"{where}invalid value {value!r} for {key} ({kind})") from None


def _format_value(v) -> str:
    if v is None:
        return "auto"
    if isinstance(v, bool):
        return "on" if v else "off"
    if isinstance(v, float):
        return repr(v)
    return str(v)
