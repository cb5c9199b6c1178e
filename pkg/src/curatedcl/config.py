"""Run configuration and its flat ``dotted.key = value`` text format.

Example::

    # desk-scale run
    epochs = 30
    warmup_epochs = 5
    loss.temperature = 0.5
    encoder.conv_channels = [16, 32, 64]
    data.name = mnist

Values are Python literals (numbers, ``true``/``false``, lists); anything
else is taken as a bare string. Unknown keys are rejected.
"""

from __future__ import annotations

import ast
import dataclasses
from dataclasses import dataclass, field, fields, is_dataclass, replace
from pathlib import Path

from .augment import TransformSpec
from .errors import ConfigError
from .losses import LossConfig
from .model import EncoderConfig


@dataclass(frozen=True)
class OptimizerConfig:
    momentum: float = 0.9
    weight_decay: float = 1e-4


@dataclass(frozen=True)
class CurationConfig:
    feature: str = "z"  # "z" projection output, "h" encoder output
    normalize: bool = False
    shrinkage: float = 1e-6


@dataclass(frozen=True)
class DataConfig:
    name: str = "synthetic"
    seed: int = 0
    subset: int = 0  # 0 = whole training split
    test_subset: int = 0
    classes: int = 10
    per_class: int = 100
    test_per_class: int = 50
    size: int = 16
    channels: int = 1


@dataclass(frozen=True)
class ProbeConfig:
    source: str = "h"
    k: int = 5
    linear_epochs: int = 100
    linear_lr: float = 0.1
    seed: int = 0


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 200
    batch_size: int = 128
    base_lr: float = 0.05
    warmup_epochs: int = 30
    calibration_epoch: int = 5
    curation_enabled: bool = True
    seed: int = 0
    checkpoint_every: int = 10
    loss: LossConfig = field(default_factory=LossConfig)
    transform: TransformSpec = field(default_factory=TransformSpec)
    encoder: EncoderConfig = field(default_factory=EncoderConfig)
    optimizer: OptimizerConfig = field(default_factory=OptimizerConfig)
    curation: CurationConfig = field(default_factory=CurationConfig)
    data: DataConfig = field(default_factory=DataConfig)
    probe: ProbeConfig = field(default_factory=ProbeConfig)

    def validate(self):
        if self.epochs < 1:
            raise ConfigError(f"epochs must be positive, got {self.epochs}", key="epochs")
        if not 0 <= self.warmup_epochs <= self.epochs:
            raise ConfigError(f"warmup_epochs must lie in [0, epochs], got {self.warmup_epochs}", key="warmup_epochs")
        if self.curation_enabled and not 1 <= self.calibration_epoch < self.epochs:
            raise ConfigError(
                f"calibration_epoch must lie in [1, epochs), got {self.calibration_epoch}",
                key="calibration_epoch",
            )
        if self.batch_size < 2:
            raise ConfigError(f"batch_size must be >= 2, got {self.batch_size}", key="batch_size")
        if self.curation.feature not in ("z", "h"):
            raise ConfigError(f"curation.feature must be z or h, got {self.curation.feature!r}",
                              key="curation.feature")
        if self.probe.source not in ("z", "h"):
            raise ConfigError(f"probe.source must be z or h, got {self.probe.source!r}", key="probe.source")
        self.encoder.validate(batch_size=self.batch_size)
        return self


def desk_profile(**overrides) -> TrainConfig:
    """30 epochs with a 5-epoch warmup; everything else at defaults."""
    return apply_overrides(TrainConfig(epochs=30, warmup_epochs=5), overrides)


def paper_profile(**overrides) -> TrainConfig:
    """200 epochs, batch 128, 30-epoch warmup, calibration at epoch 5."""
    return apply_overrides(TrainConfig(), overrides)


# ---------------------------------------------------------------------------
# flattening / overrides


def flatten(cfg, prefix="") -> dict:
    out = {}
    for f in fields(cfg):
        v = getattr(cfg, f.name)
        key = prefix + f.name
        if is_dataclass(v):
            out.update(flatten(v, key + "."))
        else:
            out[key] = v
    return out


def _coerce(value, current, key):
    if isinstance(current, bool):
        if isinstance(value, bool):
            return value
        raise ConfigError(f"{key} expects true/false, got {value!r}", key=key)
    if isinstance(current, int) and current is not None:
        if isinstance(value, bool) or not isinstance(value, int):
            raise ConfigError(f"{key} expects an integer, got {value!r}", key=key)
        return value
    if isinstance(current, float):
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError(f"{key} expects a number, got {value!r}", key=key)
        return float(value)
    if isinstance(current, tuple) or (current is None and isinstance(value, (list, tuple))):
        if not isinstance(value, (list, tuple)):
            raise ConfigError(f"{key} expects a list, got {value!r}", key=key)
        return tuple(value)
    return value


def apply_overrides(cfg, overrides: dict, _prefix: str = ""):
    """Return a copy of ``cfg`` with dotted-key overrides applied."""
    if not overrides:
        return cfg
    grouped, direct = {}, {}
    names = {f.name for f in fields(cfg)}
    for key, value in overrides.items():
        full = _prefix + key
        head, _, rest = key.partition(".")
        if head not in names:
            raise ConfigError(f"unknown config key {full!r}", key=full)
        current = getattr(cfg, head)
        if rest:
            if not is_dataclass(current):
                raise ConfigError(f"unknown config key {full!r}", key=full)
            grouped.setdefault(head, {})[rest] = value
        elif is_dataclass(current):
            raise ConfigError(f"config key {full!r} names a section, not a value", key=full)
        else:
            direct[head] = _coerce(value, current, full)
    for head, sub in grouped.items():
        direct[head] = apply_overrides(getattr(cfg, head), sub, f"{_prefix}{head}.")
    return replace(cfg, **direct)


def parse_value(text: str):
    low = text.lower()
    if low in ("true", "false"):
        return low == "true"
    if low in ("none", "null"):
        return None
    try:
        return ast.literal_eval(text)
    except (ValueError, SyntaxError):
        return text


def parse_config_text(text: str, base: TrainConfig | None = None) -> TrainConfig:
    overrides = {}
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        key, sep, value = line.partition("=")
        if not sep:
            raise ConfigError(f"line {lineno}: expected 'key = value', got {line!r}")
        key = key.strip()
        if key in overrides:
            raise ConfigError(f"line {lineno}: duplicate key {key!r}", key=key)
        overrides[key] = parse_value(value.strip())
    return apply_overrides(base or TrainConfig(), overrides).validate()


def load_config(path, base: TrainConfig | None = None) -> TrainConfig:
    return parse_config_text(Path(path).read_text(), base)


def _format_value(v):
    if isinstance(v, bool):
        return "true" if v else "false"
    if v is None:
        return "none"
    if isinstance(v, tuple):
        return "[" + ", ".join(_format_value(x) for x in v) + "]"
    if isinstance(v, float):
        return repr(v)
    return str(v)


def dump_config(cfg: TrainConfig) -> str:
    """Serialize every key; ``parse_config_text(dump_config(c)) == c``."""
    return "".join(f"{k} = {_format_value(v)}\n" for k, v in flatten(cfg).items())


def to_dict(cfg) -> dict:
    return dataclasses.asdict(cfg)
