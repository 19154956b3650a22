"""Self-teacher: lateral projections, a top-down and a bottom-up fusion path, and a head.

Levels are 1-based in the docstrings below and 0-based in code. For ``n``
backbone stages the graph is::

    L_i     = lateral_i(F_i)
    P_{n-1} = conv(fuse(L_{n-1}, up(L_n)))
    P_i     = conv(fuse(L_i, up(P_{i+1})))            i = n-2 .. 2
    T_1     = conv(fuse(L_1, up(P_2)))
    T_i     = conv(fuse(L_i, P_i, down(T_{i-1})))     i = 2 .. n-1
    T_n     = conv(fuse(L_n, down(T_{n-1})))
    logits  = fc(avgpool(T_n))

Every cross-level input is channel-projected to the destination width.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import ShapeError, Tensor
from .backbone import BackboneConfig
from .nn import DepthwiseSeparableConv, Linear, Module, ModuleList, PointwiseConv
from .nn.functional import adaptive_max_pool, global_avg_pool, upsample_bilinear


@dataclass
class SelfTeacherConfig:
    channels: tuple[int, ...] = (16, 32, 64)
    width: int = 2
    channel_mode: str = "scaled"
    uniform_channels: int = 256
    eps: float = 1e-4
    num_classes: int = 10
    lateral_norm: bool = True
    node_convs: int = 2

    def __post_init__(self):
        self.channels = tuple(int(c) for c in self.channels)
        self.validate()

    @classmethod
    def for_backbone(cls, bcfg: BackboneConfig, **kw) -> "SelfTeacherConfig":
        return cls(channels=bcfg.channels, num_classes=bcfg.num_classes, **kw)

    @property
    def widths(self) -> tuple[int, ...]:
        if self.channel_mode == "scaled":
            return tuple(self.width * c for c in self.channels)
        return (self.uniform_channels,) * len(self.channels)

    def validate(self) -> None:
        if len(self.channels) < 3:
            raise ValueError(f"self-teacher needs at least 3 levels, got {len(self.channels)}")
        if self.channel_mode not in ("scaled", "uniform"):
            raise ValueError(f"unknown channel mode {self.channel_mode!r}")
        if self.width < 1 or self.uniform_channels < 1 or self.node_convs < 1:
            raise ValueError("width, uniform_channels and node_convs must be >= 1")
        if not self.eps > 0:
            raise ValueError("fusion eps must be positive")
        if min(self.widths) < 1:
            raise ValueError("every level needs at least one channel")


def fuse(inputs: list[Tensor], raw_weights: Tensor, eps: float) -> Tensor:
    """Fast normalized fusion: ``sum_k relu(w_k) x_k / (sum_k relu(w_k) + eps)``."""
    if len(inputs) < 2:
        raise ValueError("fusion needs at least two inputs")
    if raw_weights.shape != (len(inputs),):
        raise ShapeError(f"{raw_weights.shape[0]} fusion weights for {len(inputs)} inputs")
    shape = inputs[0].shape
    for x in inputs[1:]:
        if x.shape != shape:
            raise ShapeError(f"fusion inputs differ in shape: {shape} vs {x.shape}")
    w = ad.relu(raw_weights)
    coef = w / (ad.sum(w) + eps)
    out = inputs[0] * coef[0]
    for k in range(1, len(inputs)):
        out = out + inputs[k] * coef[k]
    return out


class FusionNode(Module):
    def __init__(self, n_edges: int, ch: int, eps: float, n_convs: int, *, rng, dtype):
        super().__init__()
        self.n_edges, self.eps = n_edges, eps
        self.add_param("weights", np.ones(n_edges, dtype=dtype))
        self.convs = ModuleList(DepthwiseSeparableConv(ch, ch, rng=rng, dtype=dtype)
                                for _ in range(n_convs))

    def forward(self, inputs: list[Tensor]) -> Tensor:
        if len(inputs) != self.n_edges:
            raise ShapeError(f"node expects {self.n_edges} inputs, got {len(inputs)}")
        h = fuse(inputs, self.weights, self.eps)
        for conv in self.convs:
            h = conv(h)
        return h


class ChannelProject(Module):
    """Pointwise convolution between channel widths; identity when they agree."""

    def __init__(self, d_src: int, d_dst: int, *, rng, dtype):
        super().__init__()
        self.d_src, self.d_dst = d_src, d_dst
        self.proj = None
        if d_src != d_dst:
            self.proj = PointwiseConv(d_src, d_dst, norm=False, rng=rng, dtype=dtype)

    def forward(self, x: Tensor) -> Tensor:
        if x.shape[1] != self.d_src:
            raise ShapeError(f"expected {self.d_src} channels, got {x.shape[1]}")
        return x if self.proj is None else self.proj(x)


def channel_project(x: Tensor, module: ChannelProject) -> Tensor:
    return module(x)


class SelfTeacher(Module):
    def __init__(self, cfg: SelfTeacherConfig, rng: np.random.Generator, dtype=np.float64):
        super().__init__()
        self.cfg = cfg
        c, d = cfg.channels, cfg.widths
        n = len(c)
        mk = dict(rng=rng, dtype=dtype)
        self.lateral = ModuleList(PointwiseConv(c[i], d[i], norm=cfg.lateral_norm, **mk)
                                  for i in range(n))
        # top-down nodes P_{n-1} .. P_2, indexed here by 0-based level n-2 .. 1
        self.td_proj = ModuleList()
        self.td_node = ModuleList()
        for i in range(n - 2, 0, -1):
            self.td_proj.append(ChannelProject(d[i + 1], d[i], **mk))
            self.td_node.append(FusionNode(2, d[i], cfg.eps, cfg.node_convs, **mk))
        # bottom-up nodes T_1 .. T_n
        self.bu_proj = ModuleList()
        self.bu_node = ModuleList()
        for i in range(n):
            src = d[1] if i == 0 else d[i - 1]
            edges = 2 if i in (0, n - 1) else 3
            self.bu_proj.append(ChannelProject(src, d[i], **mk))
            self.bu_node.append(FusionNode(edges, d[i], cfg.eps, cfg.node_convs, **mk))
        self.fc = Linear(d[-1], cfg.num_classes, **mk)

    def forward(self, feats: list[Tensor]) -> tuple[list[Tensor], Tensor]:
        c = self.cfg.channels
        n = len(c)
        if len(feats) != n:
            raise ShapeError(f"expected {n} feature maps, got {len(feats)}")
        for i, f in enumerate(feats):
            if f.ndim != 4 or f.shape[1] != c[i]:
                raise ShapeError(f"level {i + 1}: expected {c[i]} channels, got shape {f.shape}")
            if i and f.shape[2:] != tuple(s // 2 for s in feats[i - 1].shape[2:]):
                raise ShapeError(f"level {i + 1}: spatial extent {f.shape[2:]} does not halve")
        lat = [self.lateral[i](feats[i]) for i in range(n)]

        p: dict[int, Tensor] = {}
        above = lat[n - 1]
        for k, i in enumerate(range(n - 2, 0, -1)):
            up = upsample_bilinear(self.td_proj[k](above), lat[i].shape[2:])
            p[i] = self.td_node[k]([lat[i], up])
            above = p[i]

        t: list[Tensor] = []
        for i in range(n):
            if i == 0:
                cross = upsample_bilinear(self.bu_proj[0](p[1]), lat[0].shape[2:])
                inputs = [lat[0], cross]
            else:
                cross = self.bu_proj[i](adaptive_max_pool(t[i - 1], lat[i].shape[2:]))
                inputs = [lat[i], cross] if i == n - 1 else [lat[i], p[i], cross]
            t.append(self.bu_node[i](inputs))
        return t, self.fc(global_avg_pool(t[-1]))


def build_teacher(cfg: SelfTeacherConfig, seed: int, dtype=np.float64) -> SelfTeacher:
    cfg.validate()
    return SelfTeacher(cfg, np.random.default_rng(seed), dtype=dtype)


def teacher_forward(teacher: SelfTeacher, feats: list[Tensor], mode: str = "train"):
    if mode not in ("train", "eval"):
        raise ValueError(f"mode must be 'train' or 'eval', got {mode!r}")
    teacher.train(mode == "train")
    return teacher(feats)


def lateral(teacher: SelfTeacher, feats: list[Tensor]) -> list[Tensor]:
    return [teacher.lateral[i](f) for i, f in enumerate(feats)]
