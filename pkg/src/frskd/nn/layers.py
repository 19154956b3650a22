"""Parameterized layers and the minimal module system that names their tensors."""

from __future__ import annotations

from typing import Iterator

import numpy as np

from .. import autodiff as ad
from ..autodiff import Tensor
from . import functional as F

BN_MOMENTUM = 0.9


class Module:
    """Container that records parameters, buffers and child modules in assignment order.

    Parameter names are dotted paths (``blocks.0.conv1.weight``); they key
    checkpoints and gradient lookups, so construction order must stay stable.
    """

    def __init__(self):
        object.__setattr__(self, "_params", {})
        object.__setattr__(self, "_buffers", {})
        object.__setattr__(self, "_children", {})
        object.__setattr__(self, "_decay", set())
        object.__setattr__(self, "training", True)

    def __setattr__(self, name, value):
        if isinstance(value, Tensor) and value.requires_grad:
            self._params[name] = value
        elif isinstance(value, Module):
            self._children[name] = value
        object.__setattr__(self, name, value)

    def add_param(self, name: str, value: np.ndarray, decay: bool = False) -> Tensor:
        t = Tensor(value, requires_grad=True)
        setattr(self, name, t)
        if decay:
            self._decay.add(name)
        return t

    def register_buffer(self, name: str, value: np.ndarray) -> None:
        self._buffers[name] = name
        object.__setattr__(self, name, value)

    def named_parameters(self, prefix: str = "") -> Iterator[tuple[str, Tensor]]:
        for name, p in self._params.items():
            yield prefix + name, p
        for cname, child in self._children.items():
            yield from child.named_parameters(f"{prefix}{cname}.")

    def parameters(self) -> list[Tensor]:
        return [p for _, p in self.named_parameters()]

    def decayed_names(self, prefix: str = "") -> set[str]:
        out = {prefix + n for n in self._decay}
        for cname, child in self._children.items():
            out |= child.decayed_names(f"{prefix}{cname}.")
        return out

    def named_buffers(self, prefix: str = "") -> Iterator[tuple[str, np.ndarray]]:
        for name in self._buffers:
            yield prefix + name, getattr(self, name)
        for cname, child in self._children.items():
            yield from child.named_buffers(f"{prefix}{cname}.")

    def set_buffer(self, dotted: str, value: np.ndarray) -> None:
        head, _, rest = dotted.partition(".")
        if rest:
            self._children[head].set_buffer(rest, value)
        else:
            object.__setattr__(self, head, value)

    def modules(self) -> Iterator["Module"]:
        yield self
        for child in self._children.values():
            yield from child.modules()

    def train(self, mode: bool = True) -> "Module":
        for m in self.modules():
            object.__setattr__(m, "training", mode)
        return self

    def eval(self) -> "Module":
        return self.train(False)

    def num_params(self) -> int:
        return int(sum(p.size for p in self.parameters()))

    def __call__(self, *args, **kwargs):
        return self.forward(*args, **kwargs)


class ModuleList(Module):
    def __init__(self, mods=()):
        super().__init__()
        self._items = []
        for m in mods:
            self.append(m)

    def append(self, m: Module) -> None:
        setattr(self, str(len(self._items)), m)
        self._items.append(m)

    def __iter__(self):
        return iter(self._items)

    def __len__(self):
        return len(self._items)

    def __getitem__(self, i):
        return self._items[i]


def he_normal(rng: np.random.Generator, shape, fan_in: int) -> np.ndarray:
    return rng.normal(0.0, np.sqrt(2.0 / fan_in), size=shape)


class Conv2d(Module):
    def __init__(self, in_ch: int, out_ch: int, kernel: int, stride: int = 1, padding: int = 0,
                 bias: bool = True, *, rng: np.random.Generator, dtype=np.float64):
        super().__init__()
        self.in_ch, self.out_ch, self.kernel = in_ch, out_ch, kernel
        self.stride, self.padding = stride, padding
        w = he_normal(rng, (out_ch, in_ch, kernel, kernel), in_ch * kernel * kernel)
        self.add_param("weight", w.astype(dtype), decay=True)
        self.bias = self.add_param("bias", np.zeros(out_ch, dtype=dtype)) if bias else None

    def forward(self, x: Tensor) -> Tensor:
        return F.conv2d(x, self.weight, self.bias, self.stride, self.padding)


class BatchNorm2d(Module):
    def __init__(self, ch: int, *, dtype=np.float64):
        super().__init__()
        self.ch = ch
        self.add_param("scale", np.ones(ch, dtype=dtype))
        self.add_param("shift", np.zeros(ch, dtype=dtype))
        self.register_buffer("running_mean", np.zeros(ch, dtype=dtype))
        self.register_buffer("running_var", np.ones(ch, dtype=dtype))

    def forward(self, x: Tensor) -> Tensor:
        out, mu, var = F.batch_norm(x, self.scale, self.shift, self.running_mean,
                                    self.running_var, self.training)
        if self.training:
            dt = self.running_mean.dtype
            self.running_mean = (BN_MOMENTUM * self.running_mean + (1 - BN_MOMENTUM) * mu).astype(dt)
            self.running_var = (BN_MOMENTUM * self.running_var + (1 - BN_MOMENTUM) * var).astype(dt)
        return out


class Linear(Module):
    def __init__(self, in_f: int, out_f: int, *, rng: np.random.Generator, dtype=np.float64):
        super().__init__()
        self.add_param("weight", he_normal(rng, (out_f, in_f), in_f).astype(dtype), decay=True)
        self.add_param("bias", np.zeros(out_f, dtype=dtype))

    def forward(self, x: Tensor) -> Tensor:
        return F.linear(x, self.weight, self.bias)


class PointwiseConv(Module):
    """1x1 convolution, optionally followed by batch normalization and ReLU.

    The convolution carries a bias only when normalization is off, since the
    normalization shift subsumes it.
    """

    def __init__(self, in_ch: int, out_ch: int, norm: bool = True, act: bool = False, *,
                 rng: np.random.Generator, dtype=np.float64):
        super().__init__()
        self.conv = Conv2d(in_ch, out_ch, 1, bias=not norm, rng=rng, dtype=dtype)
        self.bn = BatchNorm2d(out_ch, dtype=dtype) if norm else None
        self.act = act

    def forward(self, x: Tensor) -> Tensor:
        y = self.conv(x)
        if self.bn is not None:
            y = self.bn(y)
        return ad.relu(y) if self.act else y


class DepthwiseSeparableConv(Module):
    """3x3 depthwise then 1x1 pointwise convolution, with optional normalization and ReLU."""

    def __init__(self, in_ch: int, out_ch: int, norm: bool = True, act: bool = True, *,
                 rng: np.random.Generator, dtype=np.float64):
        super().__init__()
        self.in_ch, self.out_ch = in_ch, out_ch
        self.add_param("depthwise", he_normal(rng, (in_ch, 1, 3, 3), 9).astype(dtype), decay=True)
        self.pointwise = PointwiseConv(in_ch, out_ch, norm=norm, act=act, rng=rng, dtype=dtype)

    def forward(self, x: Tensor) -> Tensor:
        if x.shape[1] != self.in_ch:
            raise ad.ShapeError(f"expected {self.in_ch} channels, got {x.shape[1]}")
        return self.pointwise(F.depthwise_conv2d(x, self.depthwise, padding=1))


def separable_param_count(in_ch: int, out_ch: int, norm: bool = True) -> int:
    """Closed-form parameter count of :class:`DepthwiseSeparableConv`."""
    return 9 * in_ch + in_ch * out_ch + (2 * out_ch if norm else out_ch)
