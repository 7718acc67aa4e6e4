"""Run configuration: loss/model/training settings and the flat key:value file format.

The config file is line-oriented text, one ``key: value`` pair per line,
with ``#`` comments. Keys mirror the dataclass field names below; nested
sections use a dotted prefix (``loss.beta``, ``model.attention_channels``).
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass, field, fields


@dataclass
class LossConfig:
    """Weights and hyperparameters of the training objective."""

    beta: float = 0.05        # weight of the clustering terms on top of cross-entropy
    gamma: float = 0.9        # momentum of the running class means
    delta: float = 1.0        # margin inside the inter-class repulsion
    mixup_alpha: float = 0.2  # Beta(alpha, alpha) interpolation strength

    def validate(self) -> None:
        if not 0.0 <= self.gamma < 1.0:
            raise ValueError(f"gamma must be in [0, 1), got {self.gamma}")
        if self.delta <= 0.0:
            raise ValueError(f"delta must be > 0, got {self.delta}")
        if self.mixup_alpha <= 0.0:
            raise ValueError(f"mixup_alpha must be > 0, got {self.mixup_alpha}")
        if self.beta < 0.0:
            raise ValueError(f"beta must be >= 0, got {self.beta}")


@dataclass
class ModelConfig:
    """Desk-scale architecture settings.

    ``channel_plan`` gives the encoder channel counts for the three pyramid
    levels; the decoder attention maps use ``attention_channels``.
    """

    channel_plan: tuple[int, int, int] = (16, 32, 64)
    temporal_kernel: int = 3
    attention_channels: int = 32
    cluster_embedding_dim: int = 16   # width of the clustering-loss features
    detector_embedding_dim: int = 16  # width of the novelty/OOD features
    decoder: str = "teu"              # "teu" (dual-path attention) or "tpp" (pooling only)

    def validate(self) -> None:
        if len(self.channel_plan) != 3 or any(c < 1 for c in self.channel_plan):
            raise ValueError(f"channel_plan must be three positive ints, got {self.channel_plan}")
        if self.temporal_kernel < 1 or self.temporal_kernel % 2 == 0:
            raise ValueError(f"temporal_kernel must be odd and >= 1, got {self.temporal_kernel}")
        if self.decoder not in ("teu", "tpp"):
            raise ValueError(f"decoder must be 'teu' or 'tpp', got {self.decoder!r}")
        for name in ("attention_channels", "cluster_embedding_dim", "detector_embedding_dim"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be positive")


@dataclass
class TrainConfig:
    """Full training recipe. Defaults are desk scale; the reference regime
    (batch 16, 60 epochs) is reachable by overriding fields."""

    batch_size: int = 4
    epochs: int = 30
    lr0: float = 0.02   # desk-scale default; the reference regime uses 0.1
    lr_decay: float = 0.95
    momentum: float = 0.9
    weight_decay: float = 0.001
    seed: int = 0
    mixup_enabled: bool = True
    tc_loss_enabled: bool = True
    train_ratio: float = 0.6
    val_ratio: float = 0.2
    loss: LossConfig = field(default_factory=LossConfig)
    model: ModelConfig = field(default_factory=ModelConfig)

    def validate(self) -> None:
        if self.batch_size < 1 or self.epochs < 1:
            raise ValueError("batch_size and epochs must be positive")
        if not 0.0 < self.lr_decay <= 1.0:
            raise ValueError(f"lr_decay must be in (0, 1], got {self.lr_decay}")
        if self.lr0 < 0 or self.momentum < 0 or self.weight_decay < 0:
            raise ValueError("lr0, momentum and weight_decay must be non-negative")
        if self.train_ratio <= 0 or self.val_ratio <= 0 or self.train_ratio + self.val_ratio >= 1:
            raise ValueError("split ratios must be positive and sum to < 1")
        self.loss.validate()
        self.model.validate()


_BOOL_WORDS = {"true": True, "false": False, "1": True, "0": False}


def _format_value(value) -> str:
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, tuple):
        return ",".join(str(v) for v in value)
    return repr(value) if isinstance(value, float) else str(value)


def _parse_value(text: str, kind: type):
    if kind is bool:
        word = text.strip().lower()
        if word not in _BOOL_WORDS:
            raise ValueError(f"expected a boolean, got {text!r}")
        return _BOOL_WORDS[word]
    if kind is float:
        return float(text)
    if kind is int:
        return int(text)
    if kind is str:
        return text.strip()
    if kind is tuple:
        return tuple(int(part) for part in text.split(","))
    raise ValueError(f"unsupported config field type {kind}")


def config_to_text(config: TrainConfig) -> str:
    """Serialize a TrainConfig to the flat key: value format (stable key order)."""
    lines = []
    for f in fields(config):
        value = getattr(config, f.name)
        if f.name in ("loss", "model"):
            for sub in fields(value):
                lines.append(f"{f.name}.{sub.name}: {_format_value(getattr(value, sub.name))}")
        else:
            lines.append(f"{f.name}: {_format_value(value)}")
    return "\n".join(lines) + "\n"


def config_from_text(text: str) -> TrainConfig:
    """Parse the flat key: value format; unknown keys are an error."""
    config = TrainConfig()
    top = {f.name: f for f in fields(TrainConfig)}
    sub_sections = {"loss": LossConfig, "model": ModelConfig}
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if ":" not in line:
            raise ValueError(f"config line {lineno}: expected 'key: value', got {raw!r}")
        key, value = line.split(":", 1)
        key = key.strip()
        if "." in key:
            section, name = key.split(".", 1)
            if section not in sub_sections:
                raise ValueError(f"config line {lineno}: unknown section {section!r}")
            target = getattr(config, section)
            sub_fields = {f.name: f for f in fields(sub_sections[section])}
            if name not in sub_fields:
                raise ValueError(f"config line {lineno}: unknown key {key!r}")
            kind = type(getattr(target, name))
            setattr(target, name, _parse_value(value, kind))
        else:
            if key not in top:
                raise ValueError(f"config line {lineno}: unknown key {key!r}")
            kind = type(getattr(config, key))
            setattr(config, key, _parse_value(value, kind))
    config.validate()
    return config


def config_hash(config: TrainConfig) -> str:
    """Stable hash of the full configuration, recorded in checkpoints."""
    return hashlib.sha256(config_to_text(config).encode("utf-8")).hexdigest()[:16]
