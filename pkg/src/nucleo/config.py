"""Run configuration and its flat ``key = value`` text format.

Nested dataclass fields use dotted keys (``augment.crop_hw``,
``detector.anchor.scales``). Tuples are comma-separated; tuples of tuples
separate their groups with ``;``. ``none`` stands for an absent optional
value. Unknown keys are rejected.
"""

from __future__ import annotations

import dataclasses
import os
import types
import typing
from dataclasses import dataclass, field

from nucleo.data import AugmentConfig
from nucleo.detection.model import DetectorConfig


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class RunConfig:
    dataset_root: str = "data/stage1_train"
    out_dir: str = "runs/default"
    seed: int = 0
    epochs: int = 100
    batch_size: int = 6
    steps_per_epoch: int = 0
    lr_initial: float = 0.001
    lr_final: float = 0.0001
    momentum: float = 0.9
    weight_decay: float = 0.0001
    clip_norm: float = 5.0
    stage_epochs: tuple[int, int, int] = (40, 40, 20)
    precision: str = "float32"
    test_count: int = 65
    val_fraction: float = 0.1
    val_every: int = 1
    augment: AugmentConfig = field(default_factory=AugmentConfig)
    detector: DetectorConfig = field(default_factory=DetectorConfig)

    def __post_init__(self):
        if len(self.stage_epochs) != 3 or any(e <= 0 for e in self.stage_epochs):
            raise ConfigError(f"stage_epochs must be three positive integers, got {self.stage_epochs}")
        if sum(self.stage_epochs) != self.epochs:
            raise ConfigError(f"stage_epochs {self.stage_epochs} do not sum to epochs={self.epochs}")
        if self.batch_size < 1:
            raise ConfigError("batch_size must be positive")
        crop = self.augment.crop_hw
        if crop is not None and any(c % 32 for c in crop):
            raise ConfigError(f"augment.crop_hw {crop} must be multiples of 32 for the backbone")
        if self.precision not in ("float32", "float64"):
            raise ConfigError(f"precision must be float32 or float64, got {self.precision!r}")

    def stage_of(self, epoch: int) -> int:
        """Training stage (1, 2 or 3) of a 0-based epoch."""
        a, b, _ = self.stage_epochs
        return 1 if epoch < a else 2 if epoch < a + b else 3

    def lr_for_stage(self, stage: int) -> float:
        return self.lr_final if stage == 3 else self.lr_initial


_COMMENTS = {
    "epochs": "total epochs across all three stages",
    "batch_size": "images per SGD step",
    "steps_per_epoch": "0 = one pass over the training split",
    "lr_initial": "learning rate for stages 1 and 2",
    "lr_final": "stage 3 learning rate, a 10x reduction from lr_initial",
    "momentum": "SGD momentum",
    "weight_decay": "L2 coefficient added to the gradient at every step",
    "clip_norm": "global gradient norm limit",
    "stage_epochs": "stage 1 heads only, stage 2 adds the upper backbone, stage 3 trains everything",
    "test_count": "held-out test images",
    "val_fraction": "share of the remaining images used for validation",
}


def _hints(cls) -> dict[str, typing.Any]:
    return typing.get_type_hints(cls)


def _format_value(value) -> str:
    if value is None:
        return "none"
    if isinstance(value, tuple):
        if value and isinstance(value[0], tuple):
            return ";".join(",".join(_format_value(v) for v in group) for group in value)
        return ",".join(_format_value(v) for v in value)
    if isinstance(value, bool):
        return "true" if value else "false"
    return repr(value) if isinstance(value, float) else str(value)


def _parse_value(text: str, tp, key: str):
    text = text.strip()
    origin = typing.get_origin(tp)
    args = typing.get_args(tp)
    if origin in (typing.Union, types.UnionType):
        inner = [a for a in args if a is not type(None)]
        if text.lower() == "none" and len(inner) < len(args):
            return None
        return _parse_value(text, inner[0], key)
    if origin is tuple:
        if not text:
            return ()
        if args and typing.get_origin(args[0]) is tuple:
            return tuple(_parse_value(g, args[0], key) for g in text.split(";"))
        items = [t for t in text.split(",")]
        if len(args) == 2 and args[1] is Ellipsis:
            return tuple(_parse_value(t, args[0], key) for t in items)
        if len(items) != len(args):
            raise ConfigError(f"{key}: expected {len(args)} values, got {len(items)}")
        return tuple(_parse_value(t, a, key) for t, a in zip(items, args))
    try:
        if tp is bool:
            if text.lower() not in ("true", "false"):
                raise ValueError(text)
            return text.lower() == "true"
        if tp in (int, float, str):
            return tp(text)
    except ValueError:
        raise ConfigError(f"{key}: cannot parse {text!r} as {tp.__name__}") from None
    raise ConfigError(f"{key}: unsupported type {tp}")


def to_text(cfg, prefix: str = "") -> str:
    """Serialize a (nested) config dataclass to ``key = value`` lines."""
    lines = []
    for f in dataclasses.fields(cfg):
        value = getattr(cfg, f.name)
        key = prefix + f.name
        if dataclasses.is_dataclass(value):
            lines.append(to_text(value, key + "."))
            continue
        if f.name in _COMMENTS and not prefix:
            lines.append(f"# {_COMMENTS[f.name]}")
        lines.append(f"{key} = {_format_value(value)}")
    return "\n".join(lines)


def _build(cls, values: dict[str, str], prefix: str):
    hints = _hints(cls)
    kwargs = {}
    for f in dataclasses.fields(cls):
        key = prefix + f.name
        tp = hints[f.name]
        if dataclasses.is_dataclass(tp):
            sub = {k: v for k, v in values.items() if k.startswith(key + ".")}
            if sub:
                kwargs[f.name] = _build(tp, values, key + ".")
        elif key in values:
            kwargs[f.name] = _parse_value(values[key], tp, key)
    return cls(**kwargs)


def _known_keys(cls, prefix: str = "") -> set[str]:
    keys = set()
    hints = _hints(cls)
    for f in dataclasses.fields(cls):
        tp = hints[f.name]
        if dataclasses.is_dataclass(tp):
            keys |= _known_keys(tp, prefix + f.name + ".")
        else:
            keys.add(prefix + f.name)
    return keys


def parse_config(text: str, overrides: dict[str, str] | None = None) -> RunConfig:
    """Parse config text; ``overrides`` are applied on top, keyed the same way."""
    values: dict[str, str] = {}
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        key, sep, value = line.partition("=")
        if not sep:
            raise ConfigError(f"line {lineno}: expected 'key = value', got {raw!r}")
        values[key.strip()] = value.strip()
    values.update(overrides or {})
    unknown = sorted(set(values) - _known_keys(RunConfig))
    if unknown:
        raise ConfigError(f"unknown config keys: {', '.join(unknown)}")
    try:
        return _build(RunConfig, values, "")
    except (TypeError, ValueError) as exc:
        if isinstance(exc, ConfigError):
            raise
        raise ConfigError(str(exc)) from exc


def load_config(path: str | os.PathLike | None, overrides: dict[str, str] | None = None) -> RunConfig:
    text = "" if path is None else open(path, encoding="utf-8").read()
    return parse_config(text, overrides)
