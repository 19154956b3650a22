"""Finite-difference checks for every differentiable primitive and loss term.

Each case draws a random double-precision instance, reduces the op's output
to a scalar with a fixed random contraction, and compares the analytic
gradient with central differences. Inputs near a kink (ReLU at zero, ties
in a max) are redrawn rather than checked.
"""

from __future__ import annotations

import time
from dataclasses import dataclass
from typing import Callable

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .losses import FitnetRegressor, attention_map, ce_loss, feature_loss, kd_loss
from .nn import functional as F
from .nn import DepthwiseSeparableConv
from .teacher import fuse

MARGIN = 1e-3
Instance = tuple[Callable[[Tensor], Tensor], np.ndarray]
CASES: dict[str, Callable[[np.random.Generator], Instance]] = {}


def case(name: str):
    def register(fn):
        CASES[name] = fn
        return fn
    return register


def _contract(op: Callable[[Tensor], Tensor], x: np.ndarray, rng) -> Callable[[Tensor], Tensor]:
    weights = rng.standard_normal(op(Tensor(x)).shape)
    return lambda t: ad.sum(op(t) * weights)


def _t(rng, *shape) -> Tensor:
    return Tensor(rng.standard_normal(shape))


def _away_from_zero(rng, shape) -> np.ndarray:
    x = rng.standard_normal(shape)
    while np.any(np.abs(x) < MARGIN):
        bad = np.abs(x) < MARGIN
        x[bad] = rng.standard_normal(int(bad.sum()))
    return x


def _distinct(rng, shape) -> np.ndarray:
    """Values whose pairwise gaps all exceed the margin, so every max is unique."""
    while True:
        x = rng.standard_normal(shape)
        s = np.sort(x.ravel())
        if np.all(np.diff(s) > MARGIN):
            return x


# ----------------------------------------------------------------- elementwise

@case("add")
def _(rng):
    b = _t(rng, 3, 1)
    x = rng.standard_normal((3, 4))
    return _contract(lambda t: t + b, x, rng), x


@case("add.broadcast_operand")
def _(rng):
    a = _t(rng, 3, 4)
    x = rng.standard_normal((1, 4))
    return _contract(lambda t: a + t, x, rng), x


@case("sub")
def _(rng):
    a = _t(rng, 3, 4)
    x = rng.standard_normal((3, 4))
    return _contract(lambda t: a - t, x, rng), x


@case("mul")
def _(rng):
    b = _t(rng, 3, 4)
    x = rng.standard_normal((3, 4))
    return _contract(lambda t: t * b, x, rng), x


@case("div.numerator")
def _(rng):
    b = Tensor(rng.uniform(0.5, 2.0, (3, 4)) * rng.choice([-1, 1], (3, 4)))
    x = rng.standard_normal((3, 4))
    return _contract(lambda t: t / b, x, rng), x


@case("div.denominator")
def _(rng):
    a = _t(rng, 3, 4)
    x = rng.uniform(0.5, 2.0, (3, 4)) * rng.choice([-1, 1], (3, 4))
    return _contract(lambda t: a / t, x, rng), x


@case("neg")
def _(rng):
    x = rng.standard_normal((5,))
    return _contract(ad.neg, x, rng), x


@case("relu")
def _(rng):
    x = _away_from_zero(rng, (4, 5))
    return _contract(ad.relu, x, rng), x


@case("square")
def _(rng):
    x = rng.standard_normal((4, 5))
    return _contract(ad.square, x, rng), x


@case("sqrt")
def _(rng):
    x = rng.uniform(0.2, 3.0, (4, 5))
    return _contract(ad.sqrt, x, rng), x


@case("exp")
def _(rng):
    x = rng.uniform(-2, 2, (4, 5))
    return _contract(ad.exp, x, rng), x


@case("log")
def _(rng):
    x = rng.uniform(0.2, 3.0, (4, 5))
    return _contract(ad.log, x, rng), x


# ---------------------------------------------------------- reductions, views

@case("sum")
def _(rng):
    x = rng.standard_normal((3, 4, 2))
    return _contract(lambda t: ad.sum(t, axes=(0, 2)), x, rng), x


@case("mean")
def _(rng):
    x = rng.standard_normal((3, 4, 2))
    return _contract(lambda t: ad.mean(t, axes=1, keepdims=True), x, rng), x


@case("amax")
def _(rng):
    x = _distinct(rng, (3, 5))
    return _contract(lambda t: ad.amax(t, axes=1), x, rng), x


@case("matmul.left")
def _(rng):
    b = _t(rng, 4, 3)
    x = rng.standard_normal((2, 4))
    return _contract(lambda t: ad.matmul(t, b), x, rng), x


@case("matmul.right")
def _(rng):
    a = _t(rng, 2, 4)
    x = rng.standard_normal((4, 3))
    return _contract(lambda t: ad.matmul(a, t), x, rng), x


@case("reshape")
def _(rng):
    x = rng.standard_normal((2, 6))
    return _contract(lambda t: ad.reshape(t, (3, 4)), x, rng), x


@case("getitem")
def _(rng):
    x = rng.standard_normal((2, 3, 6, 6))
    return _contract(lambda t: t[:, 1:, ::2, 1::2], x, rng), x


@case("transpose")
def _(rng):
    x = rng.standard_normal((2, 3, 4))
    return _contract(lambda t: ad.transpose(t, (2, 0, 1)), x, rng), x


@case("log_softmax")
def _(rng):
    x = rng.standard_normal((3, 5)) * 2
    return _contract(lambda t: ad.log_softmax(t, axis=1), x, rng), x


@case("softmax")
def _(rng):
    x = rng.standard_normal((3, 5)) * 2
    return _contract(lambda t: ad.softmax(t, axis=1), x, rng), x


@case("pick")
def _(rng):
    x = rng.standard_normal((4, 5))
    idx = rng.integers(0, 5, 4)
    return _contract(lambda t: ad.pick(t, idx), x, rng), x


@case("l2norm")
def _(rng):
    x = rng.standard_normal((3, 6))
    return _contract(lambda t: ad.l2norm(t, axes=1), x, rng), x


# ---------------------------------------------------------------- nn kernels

@case("conv2d.input")
def _(rng):
    w, b = _t(rng, 4, 3, 3, 3), _t(rng, 4)
    x = rng.standard_normal((2, 3, 6, 6))
    return _contract(lambda t: F.conv2d(t, w, b, stride=2, padding=(1, 0)), x, rng), x


@case("conv2d.weight")
def _(rng):
    xin = _t(rng, 2, 3, 5, 5)
    w = rng.standard_normal((4, 3, 3, 3))
    return _contract(lambda t: F.conv2d(xin, t, None, stride=1, padding=1), w, rng), w


@case("conv2d.bias")
def _(rng):
    xin, w = _t(rng, 2, 3, 5, 5), _t(rng, 4, 3, 3, 3)
    b = rng.standard_normal(4)
    return _contract(lambda t: F.conv2d(xin, w, t, stride=1, padding=1), b, rng), b


@case("conv2d.pointwise")
def _(rng):
    w = _t(rng, 5, 3, 1, 1)
    x = rng.standard_normal((2, 3, 4, 4))
    return _contract(lambda t: F.conv2d(t, w), x, rng), x


@case("depthwise_conv2d.input")
def _(rng):
    w = _t(rng, 3, 1, 3, 3)
    x = rng.standard_normal((2, 3, 5, 5))
    return _contract(lambda t: F.depthwise_conv2d(t, w), x, rng), x


@case("depthwise_conv2d.weight")
def _(rng):
    xin = _t(rng, 2, 3, 5, 5)
    w = rng.standard_normal((3, 1, 3, 3))
    return _contract(lambda t: F.depthwise_conv2d(xin, t), w, rng), w


def _bn(x, scale, shift):
    c = x.shape[1]
    out, _, _ = F.batch_norm(x, scale, shift, np.zeros(c), np.ones(c), training=True)
    return out


@case("batch_norm.input")
def _(rng):
    g, b = _t(rng, 3), _t(rng, 3)
    x = rng.standard_normal((4, 3, 3, 3))
    return _contract(lambda t: _bn(t, g, b), x, rng), x


@case("batch_norm.scale")
def _(rng):
    xin, b = _t(rng, 4, 3, 3, 3), _t(rng, 3)
    g = rng.standard_normal(3)
    return _contract(lambda t: _bn(xin, t, b), g, rng), g


@case("batch_norm.shift")
def _(rng):
    xin, g = _t(rng, 4, 3, 3, 3), _t(rng, 3)
    b = rng.standard_normal(3)
    return _contract(lambda t: _bn(xin, g, t), b, rng), b


@case("upsample_bilinear")
def _(rng):
    x = rng.standard_normal((2, 2, 3, 4))
    return _contract(lambda t: F.upsample_bilinear(t, (6, 8)), x, rng), x


@case("adaptive_max_pool")
def _(rng):
    x = _distinct(rng, (2, 2, 6, 6))
    return _contract(lambda t: F.adaptive_max_pool(t, (3, 3)), x, rng), x


@case("adaptive_max_pool.uneven")
def _(rng):
    x = _distinct(rng, (1, 2, 5, 7))
    return _contract(lambda t: F.adaptive_max_pool(t, (2, 3)), x, rng), x


@case("global_avg_pool")
def _(rng):
    x = rng.standard_normal((2, 3, 4, 4))
    return _contract(F.global_avg_pool, x, rng), x


@case("linear.input")
def _(rng):
    w, b = _t(rng, 4, 6), _t(rng, 4)
    x = rng.standard_normal((3, 6))
    return _contract(lambda t: F.linear(t, w, b), x, rng), x


@case("linear.weight")
def _(rng):
    xin, b = _t(rng, 3, 6), _t(rng, 4)
    w = rng.standard_normal((4, 6))
    return _contract(lambda t: F.linear(xin, t, b), w, rng), w


@case("separable_conv.input")
def _(rng):
    layer = DepthwiseSeparableConv(3, 4, norm=True, act=False, rng=rng)
    x = rng.standard_normal((3, 3, 4, 4))
    return _contract(layer, x, rng), x


# -------------------------------------------------------------------- losses

@case("fuse.inputs")
def _(rng):
    others = [_t(rng, 2, 3, 4, 4) for _ in range(2)]
    w = Tensor(rng.uniform(0.2, 2.0, 3))
    x = rng.standard_normal((2, 3, 4, 4))
    return _contract(lambda t: fuse([t, *others], w, 1e-4), x, rng), x


@case("fuse.weights")
def _(rng):
    inputs = [_t(rng, 2, 3, 4, 4) for _ in range(3)]
    w = rng.uniform(0.2, 2.0, 3) * rng.choice([-1, 1], 3)
    return _contract(lambda t: fuse(inputs, t, 1e-4), w, rng), w


@case("ce_loss")
def _(rng):
    labels = rng.integers(0, 5, 4)
    x = rng.standard_normal((4, 5)) * 2
    return (lambda t: ce_loss(t, labels)), x


@case("kd_loss.student_teacher")
def _(rng):
    zt = _t(rng, 4, 5)
    x = rng.standard_normal((4, 5)) * 2
    return (lambda t: kd_loss(t, zt, 4.0)), x


@case("kd_loss.teacher_student")
def _(rng):
    zt = _t(rng, 4, 5)
    x = rng.standard_normal((4, 5)) * 2
    return (lambda t: kd_loss(t, zt, 2.0, True, "teacher_student")), x


@case("attention_map")
def _(rng):
    x = rng.standard_normal((2, 3, 4, 4))
    return _contract(attention_map, x, rng), x


@case("feature_loss.attention")
def _(rng):
    t_maps = [_t(rng, 2, 4, 4, 4), _t(rng, 2, 6, 2, 2)]
    f_last = _t(rng, 2, 5, 2, 2)
    x = rng.standard_normal((2, 3, 4, 4))
    return (lambda t: feature_loss(t_maps, [t, f_last], "attention", reduction="squared_mean")), x


@case("feature_loss.attention_l2")
def _(rng):
    t_maps = [_t(rng, 2, 4, 4, 4), _t(rng, 2, 6, 2, 2)]
    f_last = _t(rng, 2, 5, 2, 2)
    x = rng.standard_normal((2, 3, 4, 4))
    return (lambda t: feature_loss(t_maps, [t, f_last], "attention", reduction="l2")), x


@case("feature_loss.fitnet")
def _(rng):
    reg = FitnetRegressor((3, 5), (4, 6), rng=rng)
    t_maps = [_t(rng, 2, 4, 4, 4), _t(rng, 2, 6, 2, 2)]
    f_last = _t(rng, 2, 5, 2, 2)
    x = rng.standard_normal((2, 3, 4, 4))
    return (lambda t: feature_loss(t_maps, [t, f_last], "fitnet", reg)), x


@dataclass
class CheckResult:
    name: str
    max_rel_error: float
    instances: int

    @property
    def ok(self) -> bool:
        return self.max_rel_error <= TOLERANCE


TOLERANCE = 1e-4


def run_suite(instances: int = 10, seed: int = 0, names=None, eps: float = 1e-6) -> list[CheckResult]:
    """Run every registered case ``instances`` times; returns one result per case."""
    results = []
    for name, make in CASES.items():
        if names is not None and name not in names:
            continue
        rng = np.random.default_rng([seed, len(results)])
        worst = 0.0
        for _ in range(instances):
            f, x = make(rng)
            worst = max(worst, ad.finite_diff_check(f, Tensor(np.asarray(x, dtype=np.float64)), eps))
        results.append(CheckResult(name, worst, instances))
    return results


def format_results(results: list[CheckResult], seconds: float | None = None) -> str:
    width = max(len(r.name) for r in results)
    lines = [f"{r.name:<{width}}  {r.max_rel_error:.3e}  {'ok' if r.ok else 'FAIL'}" for r in results]
    tail = f"{sum(r.ok for r in results)}/{len(results)} within {TOLERANCE:g}"
    if seconds is not None:
        tail += f" in {seconds:.1f}s"
    return "\n".join(lines + [tail])


def main(instances: int = 10, seed: int = 0) -> tuple[list[CheckResult], float]:
    t0 = time.perf_counter()
    results = run_suite(instances, seed)
    return results, time.perf_counter() - t0
