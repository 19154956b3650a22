"""Parameter and FLOP counting for backbones and self-teachers.

FLOPs are tallied by the kernels themselves while a batch of one runs in
eval mode: convolutions and linear layers count two operations per
multiply-accumulate, elementwise kernels one per value touched, and resizes
their interpolation or comparison work. See ``docs/flops.md``.
"""

from __future__ import annotations

import numpy as np

from .autodiff import Tensor, count_ops
from .backbone import Backbone
from .nn import Module
from .teacher import SelfTeacher


def count_params(model: Module) -> int:
    return model.num_params()


def flops_breakdown(model: Module, image_size: int | None = None) -> dict[str, int]:
    """Per-kind operation counts for one forward pass of a single image."""
    was_training = model.training
    model.eval()
    try:
        if isinstance(model, Backbone):
            s = image_size or model.cfg.image_size
            x = Tensor(np.zeros((1, 3, s, s)))
            _check_extent(model, s)
            with count_ops() as ops:
                _backbone_any(model, x)
        elif isinstance(model, SelfTeacher):
            if image_size is None:
                raise ValueError("teacher FLOPs need the classifier input extent")
            feats = [Tensor(np.zeros((1, c, image_size // 2 ** i, image_size // 2 ** i)))
                     for i, c in enumerate(model.cfg.channels)]
            with count_ops() as ops:
                model(feats)
        else:
            raise TypeError(f"cannot count FLOPs for {type(model).__name__}")
    finally:
        model.train(was_training)
    return dict(ops)


def count_flops(model: Module, image_size: int | None = None) -> int:
    return int(sum(flops_breakdown(model, image_size).values()))


def _check_extent(model: Backbone, s: int) -> None:
    n = model.cfg.num_stages
    if s % 2 ** (n - 1):
        raise ValueError(f"input extent {s} is not divisible by 2^{n - 1}")


def _backbone_any(model: Backbone, x: Tensor):
    # Same as Backbone.forward without the configured-extent check.
    saved = model.cfg.image_size
    model.cfg.image_size = x.shape[2]
    try:
        return model(x)
    finally:
        model.cfg.image_size = saved


def ratio_report(backbone: Backbone, teacher: SelfTeacher, image_size: int) -> dict[str, float]:
    bp, tp = count_params(backbone), count_params(teacher)
    bf, tf = count_flops(backbone, image_size), count_flops(teacher, image_size)
    return {
        "classifier_params": bp,
        "teacher_params": tp,
        "param_ratio": tp / bp,
        "classifier_flops": bf,
        "teacher_flops": tf,
        "flops_ratio": tf / bf,
    }
