"""Training objective: two cross-entropies, soft-label KL and feature distillation.

Teacher-side tensors entering the distillation terms are detached here, so
those terms only ever update the classifier.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import DomainError, ShapeError, Tensor
from .nn import Module, ModuleList, PointwiseConv

FEATURE_KINDS = ("attention", "fitnet")
KD_DIRECTIONS = ("student_teacher", "teacher_student")
FEATURE_REDUCTIONS = ("l2", "squared_mean")

# Number of all-zero maps seen by attention_map; inspected by diagnostics.
zero_attention_maps = 0


@dataclass
class LossConfig:
    alpha: float = 2.0
    beta: float = 100.0
    temperature: float = 4.0
    feature_kind: str = "attention"
    kd_scale_by_t2: bool = False
    kd_direction: str = "student_teacher"
    feature_reduction: str = "squared_mean"

    def __post_init__(self):
        self.validate()

    def validate(self) -> None:
        if self.alpha < 0 or self.beta < 0:
            raise ValueError("alpha and beta must be non-negative")
        if not self.temperature > 0:
            raise ValueError("temperature must be positive")
        if self.feature_kind not in FEATURE_KINDS:
            raise ValueError(f"feature kind must be one of {FEATURE_KINDS}")
        if self.kd_direction not in KD_DIRECTIONS:
            raise ValueError(f"kd direction must be one of {KD_DIRECTIONS}")
        if self.feature_reduction not in FEATURE_REDUCTIONS:
            raise ValueError(f"feature reduction must be one of {FEATURE_REDUCTIONS}")


@dataclass
class LossBundle:
    ce_student: Tensor
    ce_teacher: Tensor
    kd: Tensor
    feature: Tensor
    total: Tensor

    def values(self) -> dict[str, float]:
        return {k: getattr(self, k).item()
                for k in ("ce_student", "ce_teacher", "kd", "feature", "total")}


def attention_map(a: Tensor) -> Tensor:
    """Channel-summed squared activations, flattened per sample and L2-normalized.

    An all-zero sample maps to the zero vector and bumps ``zero_attention_maps``.
    """
    global zero_attention_maps
    if a.ndim != 4:
        raise ShapeError(f"attention_map expects [b, c, h, w], got {a.shape}")
    b = a.shape[0]
    q = ad.reshape(ad.sum(ad.square(a), axes=1), (b, -1))
    norm = ad.l2norm(q, axes=1, keepdims=True)
    zero = norm.data == 0
    if zero.any():
        zero_attention_maps += int(zero.sum())
        norm = norm + zero.astype(q.dtype)
    return q / norm


def ce_loss(logits: Tensor, labels) -> Tensor:
    labels = np.asarray(labels, dtype=np.int64)
    if logits.ndim != 2 or labels.shape != (logits.shape[0],):
        raise ShapeError(f"logits {logits.shape} do not match labels {labels.shape}")
    if labels.size and (labels.min() < 0 or labels.max() >= logits.shape[1]):
        raise DomainError("label out of range")
    return -ad.mean(ad.pick(ad.log_softmax(logits, axis=1), labels))


def kd_loss(z_student: Tensor, z_teacher: Tensor, temperature: float,
            scale_by_t2: bool = False, direction: str = "student_teacher") -> Tensor:
    """Batch mean of ``KL(softmax(z_s / K) || softmax(z_t / K))``.

    ``direction="teacher_student"`` swaps the arguments of the divergence.
    The caller is responsible for detaching ``z_teacher``.
    """
    if z_student.shape != z_teacher.shape or z_student.ndim != 2:
        raise ShapeError(f"logit shapes differ: {z_student.shape} vs {z_teacher.shape}")
    if not temperature > 0:
        raise DomainError("temperature must be positive")
    log_s = ad.log_softmax(z_student * (1.0 / temperature), axis=1)
    log_t = ad.log_softmax(z_teacher * (1.0 / temperature), axis=1)
    if direction == "student_teacher":
        p, log_p, log_q = ad.exp(log_s), log_s, log_t
    elif direction == "teacher_student":
        p, log_p, log_q = ad.exp(log_t), log_t, log_s
    else:
        raise ValueError(f"unknown kd direction {direction!r}")
    kl = ad.mean(ad.sum(p * (log_p - log_q), axes=1))
    if scale_by_t2:
        kl = kl * (temperature * temperature)
    return kl


class FitnetRegressor(Module):
    """Student-side 1x1 projections mapping each F_i to the width of T_i."""

    def __init__(self, in_channels, out_channels, *, rng, dtype=np.float64):
        super().__init__()
        self.proj = ModuleList(PointwiseConv(ci, co, norm=False, rng=rng, dtype=dtype)
                               for ci, co in zip(in_channels, out_channels))

    def forward(self, feats: list[Tensor]) -> list[Tensor]:
        return [p(f) for p, f in zip(self.proj, feats)]


def _check_pyramids(t_maps, f_maps):
    if len(t_maps) != len(f_maps):
        raise ShapeError(f"pyramid lengths differ: {len(t_maps)} vs {len(f_maps)}")
    for i, (t, f) in enumerate(zip(t_maps, f_maps)):
        if t.shape[0] != f.shape[0] or t.shape[2:] != f.shape[2:]:
            raise ShapeError(f"level {i + 1}: {t.shape} and {f.shape} differ spatially")


def feature_loss(t_maps: list[Tensor], f_maps: list[Tensor], kind: str = "attention",
                 regressor: FitnetRegressor | None = None, reduction: str = "squared_mean") -> Tensor:
    """Sum over levels of the distance between teacher and student maps.

    ``attention``: mean of ``(phi(T_i) - phi(F_i))**2`` over batch and
    positions; with ``reduction="l2"`` the batch mean of the per-sample
    ``||phi(T_i) - phi(F_i)||_2`` instead.
    ``fitnet``: mean squared error between ``regressor(F)_i`` and ``T_i``.
    Teacher maps are detached in both kinds.
    """
    _check_pyramids(t_maps, f_maps)
    t_maps = [ad.detach(t) for t in t_maps]
    terms = []
    if kind == "attention":
        for t, f in zip(t_maps, f_maps):
            diff = attention_map(t) - attention_map(f)
            if reduction == "l2":
                terms.append(ad.mean(ad.l2norm(diff, axes=1)))
            elif reduction == "squared_mean":
                terms.append(ad.mean(ad.square(diff)))
            else:
                raise ValueError(f"unknown feature reduction {reduction!r}")
    elif kind == "fitnet":
        if regressor is None:
            raise ValueError("fitnet feature loss needs a regressor")
        for t, f in zip(t_maps, regressor(f_maps)):
            if t.shape != f.shape:
                raise ShapeError(f"regressed map {f.shape} does not match teacher map {t.shape}")
            terms.append(ad.mean(ad.square(f - t)))
    else:
        raise ValueError(f"unknown feature loss kind {kind!r}")
    out = terms[0]
    for term in terms[1:]:
        out = out + term
    return out


def total_loss(z_student: Tensor, z_teacher: Tensor, f_maps: list[Tensor], t_maps: list[Tensor],
               labels, cfg: LossConfig, regressor: FitnetRegressor | None = None) -> LossBundle:
    ce_s = ce_loss(z_student, labels)
    ce_t = ce_loss(z_teacher, labels)
    kd = kd_loss(z_student, ad.detach(z_teacher), cfg.temperature, cfg.kd_scale_by_t2,
                 cfg.kd_direction)
    feat = feature_loss(t_maps, f_maps, cfg.feature_kind, regressor, cfg.feature_reduction)
    total = ce_s + ce_t + kd * cfg.alpha + feat * cfg.beta
    return LossBundle(ce_s, ce_t, kd, feat, total)
