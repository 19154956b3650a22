"""Training configuration: one validated record, read from flat ``key = value`` text.

Keys are dotted (``loss.alpha``, ``optim.milestones``); ``#`` starts a
comment. ``model.preset`` seeds the backbone fields before any explicit
``model.*`` key is applied. The full key list lives in ``docs/config.md``.
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field
from pathlib import Path

from .backbone import PRESETS, BackboneConfig
from .data import AugmentConfig
from .losses import LossConfig
from .teacher import SelfTeacherConfig


class ConfigError(ValueError):
    """The configuration text or one of its values is invalid."""


@dataclass
class TeacherOptions:
    enabled: bool = True
    width: int = 2
    channel_mode: str = "scaled"
    uniform_channels: int = 256
    eps: float = 1e-4
    lateral_norm: bool = True
    node_convs: int = 2
    detach_input: bool = False


@dataclass
class OptimConfig:
    lr: float = 0.1
    momentum: float = 0.9
    weight_decay: float = 1e-4
    milestones: tuple[int, ...] | None = None
    gamma: float = 0.1


@dataclass
class TrainConfig:
    backbone: BackboneConfig = field(default_factory=lambda: BackboneConfig(**PRESETS["mini"]))
    teacher: TeacherOptions = field(default_factory=TeacherOptions)
    loss: LossConfig = field(default_factory=LossConfig)
    optim: OptimConfig = field(default_factory=OptimConfig)
    augment: AugmentConfig = field(default_factory=AugmentConfig)
    epochs: int = 60
    batch_size: int = 64
    precision: str = "float32"
    checkpoint_every: int = 0
    seed_init: int = 0
    seed_shuffle: int = 1
    seed_augment: int = 2
    train_manifest: str = ""
    test_manifest: str = ""
    out_dir: str = "runs/default"

    @property
    def milestones(self) -> tuple[int, ...]:
        if self.optim.milestones is not None:
            return tuple(self.optim.milestones)
        # Short runs collapse the default pair; keep the distinct ones inside (0, E).
        return tuple(sorted({m for m in (self.epochs // 2, (3 * self.epochs) // 4) if 0 < m < self.epochs}))

    def lr_at(self, epoch: int) -> float:
        """Step schedule: multiply by ``gamma`` once per milestone reached (0-based epochs)."""
        lr = self.optim.lr
        for m in self.milestones:
            if epoch >= m:
                lr *= self.optim.gamma
        return lr

    def teacher_config(self) -> SelfTeacherConfig:
        t = self.teacher
        return SelfTeacherConfig(channels=self.backbone.channels, width=t.width,
                                 channel_mode=t.channel_mode, uniform_channels=t.uniform_channels,
                                 eps=t.eps, num_classes=self.backbone.num_classes,
                                 lateral_norm=t.lateral_norm, node_convs=t.node_convs)

    def validate(self) -> "TrainConfig":
        try:
            self.backbone.validate()
            self.loss.validate()
            AugmentConfig(**dataclasses.asdict(self.augment))
            if self.teacher.enabled:
                self.teacher_config().validate()
        except ValueError as exc:
            raise ConfigError(str(exc)) from exc
        if self.epochs < 1 or self.batch_size < 1:
            raise ConfigError("epochs and batch_size must be >= 1")
        ms = self.milestones
        if any(b <= a for a, b in zip(ms, ms[1:])) or any(m < 1 or m >= self.epochs for m in ms):
            raise ConfigError(f"milestones {ms} must be strictly increasing and inside (0, {self.epochs})")
        o = self.optim
        if not (o.lr > 0 and o.gamma > 0 and o.momentum >= 0 and o.weight_decay >= 0):
            raise ConfigError("learning rate and decay factor must be positive; momentum and weight decay non-negative")
        if self.precision not in ("float32", "float64"):
            raise ConfigError("train.precision must be float32 or float64")
        if self.checkpoint_every < 0:
            raise ConfigError("train.checkpoint_every must be >= 0")
        return self

    def to_text(self) -> str:
        lines = [f"{k} = {_format(v)}" for k, v in flatten(self).items()]
        return "\n".join(lines) + "\n"


# key -> (section attribute or None for top level, field name)
_SECTIONS = {
    "model": "backbone",
    "teacher": "teacher",
    "loss": "loss",
    "optim": "optim",
    "augment": "augment",
}
_TOP = {
    "train.epochs": "epochs",
    "train.batch_size": "batch_size",
    "train.precision": "precision",
    "train.checkpoint_every": "checkpoint_every",
    "seed.init": "seed_init",
    "seed.shuffle": "seed_shuffle",
    "seed.augment": "seed_augment",
    "data.train": "train_manifest",
    "data.test": "test_manifest",
    "output.dir": "out_dir",
}
_TUPLE_FIELDS = {"channels", "milestones"}


def known_keys() -> list[str]:
    keys = ["model.preset"]
    defaults = TrainConfig()
    for prefix, attr in _SECTIONS.items():
        keys += [f"{prefix}.{f.name}" for f in dataclasses.fields(getattr(defaults, attr))]
    return keys + list(_TOP)


def flatten(cfg: TrainConfig) -> dict[str, object]:
    out: dict[str, object] = {}
    for prefix, attr in _SECTIONS.items():
        section = getattr(cfg, attr)
        for f in dataclasses.fields(section):
            out[f"{prefix}.{f.name}"] = getattr(section, f.name)
    for key, name in _TOP.items():
        out[key] = getattr(cfg, name)
    return out


def _format(v) -> str:
    if v is None:
        return "none"
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, (tuple, list)):
        return ",".join(str(x) for x in v)
    return str(v)


def _coerce(key: str, raw: str, current):
    name = key.rsplit(".", 1)[-1]
    text = raw.strip()
    try:
        if name in _TUPLE_FIELDS:
            if text.lower() in ("", "none"):
                return None
            return tuple(int(x) for x in text.replace(" ", "").split(",") if x)
        if isinstance(current, bool):
            if text.lower() in ("true", "1", "yes", "on"):
                return True
            if text.lower() in ("false", "0", "no", "off"):
                return False
            raise ValueError(text)
        if isinstance(current, int):
            return int(text)
        if isinstance(current, float):
            return float(text)
        return text
    except ValueError:
        raise ConfigError(f"{key}: cannot parse {raw!r}") from None


def parse_pairs(lines) -> dict[str, str]:
    pairs: dict[str, str] = {}
    for lineno, line in enumerate(lines, 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected key = value, got {line!r}")
        k, v = line.split("=", 1)
        pairs[k.strip()] = v.strip()
    return pairs


def build_config(pairs: dict[str, str]) -> TrainConfig:
    """Apply ``pairs`` on top of the defaults and validate."""
    unknown = sorted(set(pairs) - set(known_keys()))
    if unknown:
        raise ConfigError(f"unknown config key(s): {', '.join(unknown)}")
    model = dict(PRESETS["mini"])
    if "model.preset" in pairs:
        name = pairs["model.preset"]
        if name not in PRESETS:
            raise ConfigError(f"unknown preset {name!r}; choose from {sorted(PRESETS)}")
        model = dict(PRESETS[name])
    sections = {
        "model": model,
        "teacher": dataclasses.asdict(TeacherOptions()),
        "loss": dataclasses.asdict(LossConfig()),
        "optim": dataclasses.asdict(OptimConfig()),
        "augment": dataclasses.asdict(AugmentConfig()),
    }
    top = {name: getattr(TrainConfig, name, None) for name in _TOP.values()}
    top_defaults = {f.name: f.default for f in dataclasses.fields(TrainConfig)
                    if f.default is not dataclasses.MISSING}
    top.update(top_defaults)
    for key, raw in pairs.items():
        if key == "model.preset":
            continue
        if key in _TOP:
            name = _TOP[key]
            top[name] = _coerce(key, raw, top[name])
            continue
        prefix, name = key.split(".", 1)
        sections[prefix][name] = _coerce(key, raw, sections[prefix][name])
    try:
        cfg = TrainConfig(
            backbone=BackboneConfig(**sections["model"]),
            teacher=TeacherOptions(**sections["teacher"]),
            loss=LossConfig(**sections["loss"]),
            optim=OptimConfig(**sections["optim"]),
            augment=AugmentConfig(**sections["augment"]),
            **top,
        )
    except (TypeError, ValueError) as exc:
        if isinstance(exc, ConfigError):
            raise
        raise ConfigError(str(exc)) from exc
    return cfg.validate()


def load_config(path: str | Path | None = None, overrides=()) -> TrainConfig:
    """Read a config file (optional) and apply ``key=value`` overrides, later wins."""
    pairs: dict[str, str] = {}
    if path is not None:
        p = Path(path)
        if not p.is_file():
            raise ConfigError(f"config file not found: {p}")
        pairs.update(parse_pairs(p.read_text().splitlines()))
    pairs.update(parse_pairs(overrides))
    return build_config(pairs)


def config_from_text(text: str) -> TrainConfig:
    return build_config(parse_pairs(text.splitlines()))
