import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra import numpy as hnp

from frskd import autodiff as ad
from frskd import losses
from frskd.autodiff import DomainError, ShapeError, Tensor
from frskd.config import load_config
from frskd.losses import (FEATURE_REDUCTIONS, FitnetRegressor, LossConfig, attention_map, ce_loss, feature_loss,
                          kd_loss, total_loss)
from frskd.train import Trainer


def softmax_py(z, k=1.0):
    e = [math.exp(v / k) for v in z]
    s = sum(e)
    return [v / s for v in e]


def kl_py(zs, zt, k=1.0):
    p, q = softmax_py(zs, k), softmax_py(zt, k)
    return sum(a * math.log(a / b) for a, b in zip(p, q))


def phi_py(channels):
    """Attention vector of one sample given as a list of 2-D lists."""
    q = [sum(ch[i][j] ** 2 for ch in channels) for i in range(len(channels[0])) for j in range(len(channels[0][0]))]
    n = math.sqrt(sum(v * v for v in q))
    return [v / n for v in q]


# --------------------------------------------------------------- attention

def test_attention_worked_example():
    out = attention_map(Tensor([[[[3.0, 0.0], [0.0, 4.0]]]])).data[0]
    np.testing.assert_allclose(out, [9 / math.sqrt(337), 0, 0, 16 / math.sqrt(337)], atol=1e-6)
    np.testing.assert_allclose(out, [0.49026, 0, 0, 0.87158], atol=1e-5)


def test_attention_unit_norm(rng):
    out = attention_map(Tensor(rng.standard_normal((3, 4, 5, 5)))).data
    np.testing.assert_allclose(np.linalg.norm(out, axis=1), 1.0, rtol=1e-12)


def test_attention_zero_map_counted():
    before = losses.zero_attention_maps
    out = attention_map(Tensor(np.zeros((2, 3, 2, 2))))
    assert not out.data.any()
    assert losses.zero_attention_maps == before + 2


def test_attention_rank_checked():
    with pytest.raises(ShapeError):
        attention_map(Tensor(np.ones((2, 3))))


# ----------------------------------------------------------------------- kd

def test_kd_worked_example():
    assert abs(kd_loss(Tensor([[2.0, 0.0]]), Tensor([[0.0, 0.0]]), 1.0).item() - kl_py([2, 0], [0, 0])) < 1e-12
    assert abs(kd_loss(Tensor([[2.0, 0.0]]), Tensor([[0.0, 0.0]]), 1.0).item() - 0.3278) < 1e-4


def test_kd_equal_logits_is_zero(rng):
    z = Tensor(rng.standard_normal((4, 6)))
    assert kd_loss(z, z, 3.0).item() == 0.0


def test_kd_direction_and_scale(rng):
    zs, zt = rng.standard_normal((1, 5)), rng.standard_normal((1, 5))
    fwd = kd_loss(Tensor(zs), Tensor(zt), 2.0).item()
    rev = kd_loss(Tensor(zs), Tensor(zt), 2.0, direction="teacher_student").item()
    assert abs(fwd - kl_py(zs[0], zt[0], 2.0)) < 1e-12
    assert abs(rev - kl_py(zt[0], zs[0], 2.0)) < 1e-12
    scaled = kd_loss(Tensor(zs), Tensor(zt), 2.0, scale_by_t2=True).item()
    assert abs(scaled - 4 * fwd) < 1e-12


def test_kd_errors():
    with pytest.raises(ShapeError):
        kd_loss(Tensor(np.zeros((2, 3))), Tensor(np.zeros((2, 4))), 1.0)
    with pytest.raises(DomainError):
        kd_loss(Tensor(np.zeros((2, 3))), Tensor(np.zeros((2, 3))), 0.0)


@given(hnp.arrays(np.float64, (2, 4), elements=st.floats(-5, 5)),
       hnp.arrays(np.float64, (2, 4), elements=st.floats(-5, 5)), st.floats(0.5, 8))
def test_kd_non_negative(zs, zt, k):
    assert kd_loss(Tensor(zs), Tensor(zt), k).item() >= -1e-12


# ----------------------------------------------------------------------- ce

def test_ce_examples():
    assert abs(ce_loss(Tensor([[0.0, 0.0]]), [0]).item() - math.log(2)) < 1e-12
    assert abs(ce_loss(Tensor([[math.log(3), 0.0]]), [0]).item() - math.log(4 / 3)) < 1e-12
    assert abs(ce_loss(Tensor(np.zeros((3, 7))), [0, 3, 6]).item() - math.log(7)) < 1e-12
    assert ce_loss(Tensor([[30.0, 0.0, 0.0]]), [0]).item() < 1e-9


def test_ce_label_range():
    with pytest.raises(DomainError):
        ce_loss(Tensor(np.zeros((1, 3))), [3])
    with pytest.raises(ShapeError):
        ce_loss(Tensor(np.zeros((2, 3))), [0])


# ------------------------------------------------------------------ feature

def test_feature_hand_example():
    t = [[[1.0, 2.0], [0.0, 1.0]]]
    f = [[[1.0, 0.0], [2.0, 1.0]], [[0.0, 1.0], [1.0, 3.0]]]
    expected = math.sqrt(sum((a - b) ** 2 for a, b in zip(phi_py(t), phi_py(f))))
    out = feature_loss([Tensor([t])], [Tensor([f])], reduction="l2").item()
    assert abs(out - expected) < 1e-12


def test_feature_identical_is_zero(rng):
    t = [Tensor(rng.standard_normal((2, 3, 4, 4)))]
    assert feature_loss(t, t).item() == 0.0


def test_feature_squared_mean(rng):
    t, f = Tensor(rng.standard_normal((2, 3, 2, 2))), Tensor(rng.standard_normal((2, 5, 2, 2)))
    diff = attention_map(t).data - attention_map(f).data
    out = feature_loss([t], [f], reduction="squared_mean").item()
    assert abs(out - np.mean(diff ** 2)) < 1e-14


def test_feature_pyramid_errors(rng):
    a = Tensor(rng.standard_normal((1, 2, 4, 4)))
    b = Tensor(rng.standard_normal((1, 2, 2, 2)))
    with pytest.raises(ShapeError):
        feature_loss([a, b], [a])
    with pytest.raises(ShapeError):
        feature_loss([a], [b])
    with pytest.raises(ValueError):
        feature_loss([a], [a], kind="fitnet")


def test_fitnet_feature_loss(rng):
    reg = FitnetRegressor((2, 3), (4, 5), rng=rng)
    t = [Tensor(rng.standard_normal((2, 4, 4, 4))), Tensor(rng.standard_normal((2, 5, 2, 2)))]
    f = [Tensor(rng.standard_normal((2, 2, 4, 4))), Tensor(rng.standard_normal((2, 3, 2, 2)))]
    expected = sum(np.mean((r.data - tt.data) ** 2) for r, tt in zip(reg(f), t))
    assert abs(feature_loss(t, f, "fitnet", reg).item() - expected) < 1e-12
    g = ad.backward(feature_loss(t, f, "fitnet", reg))
    assert all(p in g for _, p in reg.named_parameters())


# ---------------------------------------------------------------- composite

def tiny_trainer(**over):
    sets = ["model.preset=tiny", "train.precision=float64"] + [f"{k}={v}" for k, v in over.items()]
    return Trainer(load_config(None, sets))


def tiny_batch(trainer, seed=0):
    rng = np.random.default_rng(seed)
    s = trainer.cfg.backbone.image_size
    return Tensor(rng.standard_normal((4, 3, s, s))), rng.integers(0, trainer.cfg.backbone.num_classes, 4)


def teacher_params(trainer):
    return {n: p for n, p in trainer.params.items() if n.startswith("teacher.")}


def test_distillation_terms_leave_teacher_untouched():
    trainer = tiny_trainer()
    x, y = tiny_batch(trainer)
    bundle, _, _ = trainer.losses(x, y)
    cfg = trainer.cfg.loss
    grads = ad.backward(bundle.kd * cfg.alpha + bundle.feature * cfg.beta)
    tp = teacher_params(trainer)
    assert tp
    for p in tp.values():
        assert p not in grads or not grads[p].any()


def test_teacher_gradient_matches_teacher_ce_alone():
    trainer = tiny_trainer()
    x, y = tiny_batch(trainer)
    full = trainer.gradients(trainer.losses(x, y)[0])
    ce_only = ad.backward(trainer.losses(x, y)[0].ce_teacher)
    for name, p in teacher_params(trainer).items():
        assert full[name].tobytes() == ce_only[p].tobytes()


def test_zero_weights_reduce_to_cross_entropies():
    trainer = tiny_trainer(**{"loss.alpha": 0, "loss.beta": 0})
    x, y = tiny_batch(trainer)
    b, _, _ = trainer.losses(x, y)
    assert b.total.item() == (b.ce_student + b.ce_teacher).item()


def test_kd_linearity_on_student_logits(rng):
    zs = Tensor(rng.standard_normal((3, 4)), requires_grad=True)
    zt = Tensor(rng.standard_normal((3, 4)))
    t, f = [Tensor(rng.standard_normal((3, 2, 2, 2)))], [Tensor(rng.standard_normal((3, 2, 2, 2)))]
    y = [0, 1, 3]
    cfg = LossConfig(alpha=2.0, beta=0.0)
    g_total = ad.backward(total_loss(zs, zt, f, t, y, cfg).total)[zs]
    g_ce = ad.backward(ce_loss(zs, y))[zs]
    g_kd = ad.backward(kd_loss(zs, zt, cfg.temperature))[zs]
    np.testing.assert_allclose(g_total, g_ce + 2 * g_kd, rtol=1e-12, atol=1e-15)


@settings(max_examples=50)
@given(st.integers(0, 10_000), st.floats(0, 5), st.floats(0, 200))
def test_bundle_composition(seed, alpha, beta):
    rng = np.random.default_rng(seed)
    zs, zt = Tensor(rng.standard_normal((2, 3))), Tensor(rng.standard_normal((2, 3)))
    t, f = [Tensor(rng.standard_normal((2, 2, 2, 2)))], [Tensor(rng.standard_normal((2, 3, 2, 2)))]
    b = total_loss(zs, zt, f, t, [0, 2], LossConfig(alpha=alpha, beta=beta))
    assert b.total.item() == (b.ce_student + b.ce_teacher + b.kd * alpha + b.feature * beta).item()


@pytest.mark.parametrize("kw", [dict(alpha=-1), dict(temperature=0), dict(feature_kind="fsp"),
                                dict(kd_direction="sideways"), dict(feature_reduction="l1")])
def test_loss_config_validation(kw):
    with pytest.raises(ValueError):
        LossConfig(**kw)


# --------------------------------------------------------------- invariants

@settings(max_examples=100)
@given(st.integers(0, 10_000), st.floats(0.01, 100), st.floats(0.01, 100))
def test_feature_scale_invariance(seed, a, b):
    rng = np.random.default_rng(seed)
    t = [Tensor(rng.standard_normal((2, 2, 4, 4))), Tensor(rng.standard_normal((2, 3, 2, 2)))]
    f = [Tensor(rng.standard_normal((2, 1, 4, 4))), Tensor(rng.standard_normal((2, 2, 2, 2)))]
    for reduction in FEATURE_REDUCTIONS:
        base = feature_loss(t, f, reduction=reduction).item()
        scaled = feature_loss([t[0] * a, t[1]], [f[0], f[1] * b], reduction=reduction).item()
        assert abs(base - scaled) <= 1e-12 * max(1.0, base)


@settings(max_examples=100)
@given(hnp.arrays(np.float64, (3, 5), elements=st.floats(-5, 5)),
       hnp.arrays(np.float64, (3, 5), elements=st.floats(-5, 5)), st.floats(-20, 20))
def test_kd_shift_invariance(zs, zt, c):
    base = kd_loss(Tensor(zs), Tensor(zt), 4.0).item()
    assert abs(kd_loss(Tensor(zs + c), Tensor(zt), 4.0).item() - base) <= 1e-12
