"""Experiment configuration and its flat ``key = value`` text form.

Every field of :class:`ExperimentConfig` (including nested model, training
and attack settings) maps to one dotted key, e.g. ``train.lr_main = 0.1`` or
``train.train_attack.iters = 10``. Tuples are comma separated, booleans are
``true``/``false``. Lines starting with ``#`` are comments. The special key
``preset`` selects a model preset before any ``model.*`` keys are applied.
"""

from __future__ import annotations

import dataclasses
import hashlib
import typing
from dataclasses import dataclass, field, fields, is_dataclass, replace
from pathlib import Path

from .attacks import FAMILIES
from .model import PRESETS, ConfigError, ModelConfig
from .training import TrainConfig


@dataclass(frozen=True)
class DatasetSpec:
    source: str = "synthetic"
    path: str = ""
    classes: int = 10
    image_size: int = 8
    n_train: int = 50
    n_holdout: int = 30
    noise: float = 0.03

    def __post_init__(self):
        if self.source not in ("synthetic", "cifar"):
            raise ConfigError(f"dataset.source must be 'synthetic' or 'cifar', got {self.source!r}")
        if self.source == "cifar" and not self.path:
            raise ConfigError("dataset.path is required for CIFAR data")
        if self.n_train < 1 or self.n_holdout < 1:
            raise ConfigError("split sizes must be positive")


# Toy-benchmark schedule: about 240 SGD steps in total, so the type head gets
# a larger step than the signal heads, which saturate omega when pushed hard.
TOY_TRAIN = TrainConfig(epochs=30, lr_milestones=(20, 26), lr_regulator=0.001, lr_type=0.1)


@dataclass(frozen=True)
class ExperimentConfig:
    """Everything a run needs. ``(config, seed)`` determines all artifacts.

    For synthetic data ``n_train``/``n_holdout`` count samples per class; for
    CIFAR they are totals taken from the start of the train and test files.
    Per-epoch model selection attacks the first ``select_size`` holdout
    samples (0 means all of them); final reports always use the full holdout.
    """

    dataset: DatasetSpec = field(default_factory=DatasetSpec)
    preset: str = "toy"
    model: ModelConfig = field(default_factory=lambda: PRESETS["toy"])
    train: TrainConfig = field(default_factory=lambda: TOY_TRAIN)
    attacks: tuple[str, ...] = ("fgsm", "pgd_sat", "pgd_trades", "cw_linf")
    teacher_epochs: int = 12
    extractor_epochs: int = 10
    select_size: int = 100
    out: str = "runs/default"
    seed: int = 0

    def __post_init__(self):
        if self.preset not in PRESETS:
            raise ConfigError(f"unknown preset {self.preset!r}")
        bad = [a for a in self.attacks if a not in FAMILIES]
        if bad:
            raise ConfigError(f"unknown attack families {bad}")
        if self.train.epochs < 0:
            raise ConfigError("train.epochs must be non-negative")
        if self.select_size < 0:
            raise ConfigError("select_size must be non-negative")
        classes = self.dataset.classes if self.dataset.source == "synthetic" else 10
        if self.model.num_classes != classes:
            raise ConfigError(f"model.num_classes={self.model.num_classes} but the dataset has {classes} classes")

    def to_text(self) -> str:
        return "".join(f"{k} = {v}\n" for k, v in flatten(self))

    @classmethod
    def from_text(cls, text: str, overrides: dict[str, str] | None = None) -> "ExperimentConfig":
        pairs = parse_pairs(text)
        pairs.update(overrides or {})
        return build_config(pairs)

    def hash(self) -> str:
        return hashlib.sha256(self.to_text().encode()).hexdigest()

    def save(self, path: str | Path) -> None:
        Path(path).write_text(self.to_text())

    @classmethod
    def load(cls, path: str | Path, overrides: dict[str, str] | None = None) -> "ExperimentConfig":
        return cls.from_text(Path(path).read_text(), overrides)


# ---------------------------------------------------------------------------
# flattening and parsing


def _format(value) -> str:
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, float):
        return repr(value)
    if isinstance(value, tuple):
        return ",".join(_format(v) for v in value)
    return str(value)


def flatten(obj, prefix: str = "") -> list[tuple[str, str]]:
    out = []
    for f in fields(obj):
        value = getattr(obj, f.name)
        key = prefix + f.name
        if is_dataclass(value):
            out += flatten(value, key + ".")
        else:
            out.append((key, _format(value)))
    return out


def parse_pairs(text: str) -> dict[str, str]:
    pairs: dict[str, str] = {}
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        key, sep, value = line.partition("=")
        if not sep:
            raise ConfigError(f"line {lineno}: expected 'key = value', got {raw!r}")
        pairs[key.strip()] = value.strip()
    return pairs


def parse_overrides(items: list[str]) -> dict[str, str]:
    """``["train.epochs=3", ...]`` from the command line."""
    return parse_pairs("\n".join(items))


def _coerce(text: str, hint, key: str):
    origin = typing.get_origin(hint)
    try:
        if hint is bool:
            low = text.lower()
            if low not in ("true", "false"):
                raise ValueError(f"expected true/false, got {text!r}")
            return low == "true"
        if hint in (int, float, str):
            return hint(text)
        if origin is tuple:
            args = typing.get_args(hint)
            items = [t for t in (s.strip() for s in text.split(",")) if t]
            item_types = [args[0]] * len(items) if args[-1] is Ellipsis else list(args)
            if len(item_types) != len(items):
                raise ValueError(f"expected {len(item_types)} items, got {len(items)}")
            return tuple(_coerce(s, t, key) for s, t in zip(items, item_types))
        if origin is typing.Union or type(hint).__name__ == "UnionType":
            args = [a for a in typing.get_args(hint) if a is not type(None)]
            if text in ("None", ""):
                return None
            return _coerce(text, args[0], key)
    except ValueError as exc:
        raise ConfigError(f"{key}: {exc}") from None
    raise ConfigError(f"{key}: unsupported field type {hint}")


def _apply(obj, pairs: dict[str, str], prefix: str, used: set[str]):
    hints = typing.get_type_hints(type(obj))
    changes = {}
    for f in fields(obj):
        key = prefix + f.name
        value = getattr(obj, f.name)
        if is_dataclass(value):
            changes[f.name] = _apply(value, pairs, key + ".", used)
        elif key in pairs:
            changes[f.name] = _coerce(pairs[key], hints[f.name], key)
            used.add(key)
    try:
        return replace(obj, **changes)
    except (ValueError, TypeError) as exc:
        raise ConfigError(f"{prefix or 'config'}: {exc}") from None


def build_config(pairs: dict[str, str]) -> ExperimentConfig:
    used = {"preset"} if "preset" in pairs else set()
    preset = pairs.get("preset", "toy")
    if preset not in PRESETS:
        raise ConfigError(f"unknown preset {preset!r}; choose from {sorted(PRESETS)}")
    base = ExperimentConfig(preset=preset, model=PRESETS[preset])
    cfg = _apply(base, pairs, "", used)
    unknown = sorted(set(pairs) - used)
    if unknown:
        raise ConfigError(f"unknown config keys: {unknown}")
    return cfg


def default_config(**kw) -> ExperimentConfig:
    return dataclasses.replace(ExperimentConfig(), **kw)
