"""Classifier networks that expose one feature map per stage."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import ShapeError, Tensor
from .nn import BatchNorm2d, Conv2d, Linear, Module, ModuleList
from .nn.functional import global_avg_pool

FAMILIES = ("wrn", "resnet-basic")


def _same_pad(stride: int):
    # stride 2 on an even extent: pad before only, so the output is exactly half
    return 1 if stride == 1 else (1, 0)


def _subsample(x: Tensor, stride: int) -> Tensor:
    return x if stride == 1 else x[:, :, ::stride, ::stride]


@dataclass
class BackboneConfig:
    family: str = "wrn"
    channels: tuple[int, ...] = (16, 32, 64)
    blocks_per_stage: int = 1
    image_size: int = 32
    num_classes: int = 10
    stem_channels: int = 16

    def __post_init__(self):
        self.channels = tuple(int(c) for c in self.channels)
        self.validate()

    @property
    def num_stages(self) -> int:
        return len(self.channels)

    @property
    def depth(self) -> int:
        """Nominal depth (``6N + 4`` for three-stage WRNs)."""
        per_block = 2
        extra = 4 if self.family == "wrn" else 2
        return per_block * self.blocks_per_stage * self.num_stages + extra

    def stage_extents(self) -> list[int]:
        return [self.image_size // 2 ** i for i in range(self.num_stages)]

    def validate(self) -> None:
        if self.family not in FAMILIES:
            raise ValueError(f"unknown backbone family {self.family!r}")
        n = len(self.channels)
        if n < 3:
            raise ValueError(f"backbone needs at least 3 stages, got {n}")
        if any(c < 1 for c in self.channels):
            raise ValueError("channel counts must be positive")
        if any(b < a for a, b in zip(self.channels, self.channels[1:])):
            raise ValueError(f"channel counts must be non-decreasing, got {self.channels}")
        if self.blocks_per_stage < 1 or self.num_classes < 2 or self.stem_channels < 1:
            raise ValueError("blocks_per_stage >= 1, num_classes >= 2 and stem_channels >= 1 required")
        if self.image_size < 1 or self.image_size % 2 ** (n - 1):
            raise ValueError(f"image size {self.image_size} is not divisible by 2^{n - 1}")


PRESETS: dict[str, dict] = {
    "wrn16-2": dict(family="wrn", channels=(32, 64, 128), blocks_per_stage=2, image_size=32,
                    num_classes=100, stem_channels=16),
    "mini": dict(family="wrn", channels=(16, 32, 64), blocks_per_stage=1, image_size=16,
                 num_classes=4, stem_channels=16),
    "tiny": dict(family="wrn", channels=(8, 16, 32), blocks_per_stage=1, image_size=16,
                 num_classes=4, stem_channels=8),
    "resnet18": dict(family="resnet-basic", channels=(64, 128, 256, 512), blocks_per_stage=2,
                     image_size=32, num_classes=100, stem_channels=64),
}


def preset(name: str, **overrides) -> BackboneConfig:
    if name not in PRESETS:
        raise ValueError(f"unknown preset {name!r}; choose from {sorted(PRESETS)}")
    return BackboneConfig(**{**PRESETS[name], **overrides})


class PreActBlock(Module):
    """Wide-ResNet block: BN-ReLU-conv twice, projection shortcut on the activated input."""

    def __init__(self, in_ch, out_ch, stride, *, rng, dtype):
        super().__init__()
        self.bn1 = BatchNorm2d(in_ch, dtype=dtype)
        self.conv1 = Conv2d(in_ch, out_ch, 3, stride, _same_pad(stride), bias=False, rng=rng, dtype=dtype)
        self.bn2 = BatchNorm2d(out_ch, dtype=dtype)
        self.conv2 = Conv2d(out_ch, out_ch, 3, 1, 1, bias=False, rng=rng, dtype=dtype)
        self.shortcut = None
        if in_ch != out_ch or stride != 1:
            self.stride = stride
            self.shortcut = Conv2d(in_ch, out_ch, 1, 1, 0, bias=False, rng=rng, dtype=dtype)

    def forward(self, x):
        a = ad.relu(self.bn1(x))
        y = self.conv2(ad.relu(self.bn2(self.conv1(a))))
        return y + (self.shortcut(_subsample(a, self.stride)) if self.shortcut is not None else x)


class BasicBlock(Module):
    """Post-activation ResNet block."""

    def __init__(self, in_ch, out_ch, stride, *, rng, dtype):
        super().__init__()
        self.conv1 = Conv2d(in_ch, out_ch, 3, stride, _same_pad(stride), bias=False, rng=rng, dtype=dtype)
        self.bn1 = BatchNorm2d(out_ch, dtype=dtype)
        self.conv2 = Conv2d(out_ch, out_ch, 3, 1, 1, bias=False, rng=rng, dtype=dtype)
        self.bn2 = BatchNorm2d(out_ch, dtype=dtype)
        self.shortcut = None
        if in_ch != out_ch or stride != 1:
            self.stride = stride
            self.shortcut = Conv2d(in_ch, out_ch, 1, 1, 0, bias=False, rng=rng, dtype=dtype)
            self.shortcut_bn = BatchNorm2d(out_ch, dtype=dtype)

    def forward(self, x):
        y = self.bn2(self.conv2(ad.relu(self.bn1(self.conv1(x)))))
        skip = self.shortcut_bn(self.shortcut(_subsample(x, self.stride))) if self.shortcut is not None else x
        return ad.relu(y + skip)


class Backbone(Module):
    def __init__(self, cfg: BackboneConfig, rng: np.random.Generator, dtype=np.float64):
        super().__init__()
        self.cfg = cfg
        block = PreActBlock if cfg.family == "wrn" else BasicBlock
        self.stem = Conv2d(3, cfg.stem_channels, 3, 1, 1, bias=False, rng=rng, dtype=dtype)
        if cfg.family == "resnet-basic":
            self.stem_bn = BatchNorm2d(cfg.stem_channels, dtype=dtype)
        self.stages = ModuleList()
        in_ch = cfg.stem_channels
        for i, ch in enumerate(cfg.channels):
            stage = ModuleList()
            for j in range(cfg.blocks_per_stage):
                stride = 2 if (i > 0 and j == 0) else 1
                stage.append(block(in_ch, ch, stride, rng=rng, dtype=dtype))
                in_ch = ch
            self.stages.append(stage)
        if cfg.family == "wrn":
            self.final_bn = BatchNorm2d(in_ch, dtype=dtype)
        self.fc = Linear(in_ch, cfg.num_classes, rng=rng, dtype=dtype)

    def forward(self, x: Tensor) -> tuple[list[Tensor], Tensor]:
        s = self.cfg.image_size
        if x.ndim != 4 or x.shape[1] != 3 or x.shape[2:] != (s, s):
            raise ShapeError(f"expected input [b, 3, {s}, {s}], got {x.shape}")
        h = self.stem(x)
        if self.cfg.family == "resnet-basic":
            h = ad.relu(self.stem_bn(h))
        feats = []
        for i, stage in enumerate(self.stages):
            for blk in stage:
                h = blk(h)
            if i == len(self.stages) - 1 and self.cfg.family == "wrn":
                h = ad.relu(self.final_bn(h))
            feats.append(h)
        return feats, self.fc(global_avg_pool(h))


def build_backbone(cfg: BackboneConfig, seed: int, dtype=np.float64) -> Backbone:
    cfg.validate()
    return Backbone(cfg, np.random.default_rng(seed), dtype=dtype)


def backbone_forward(model: Backbone, x: Tensor, mode: str = "train"):
    if mode not in ("train", "eval"):
        raise ValueError(f"mode must be 'train' or 'eval', got {mode!r}")
    model.train(mode == "train")
    return model(x)


def pyramid_shapes(cfg: BackboneConfig, batch: int) -> list[tuple[int, int, int, int]]:
    return [(batch, c, s, s) for c, s in zip(cfg.channels, cfg.stage_extents())]
