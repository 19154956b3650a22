import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from hypothesis.extra import numpy as hnp

from frskd import autodiff as ad
from frskd.autodiff import DomainError, ShapeError, Tensor

finite = st.floats(-10, 10, allow_nan=False, allow_infinity=False, width=64)


def leaf(values, **kw):
    return Tensor(np.asarray(values, dtype=np.float64), requires_grad=True, **kw)


# ---------------------------------------------------------------- create

def test_create_row_major():
    t = ad.create([2, 2], [1, 2, 3, 4])
    assert t.shape == (2, 2)
    np.testing.assert_array_equal(t.data, [[1, 2], [3, 4]])
    assert t.is_leaf


def test_create_scalar_like():
    t = ad.create([1], [0])
    assert t.shape == (1,) and t.item() == 0.0


def test_create_length_mismatch():
    with pytest.raises(ShapeError):
        ad.create([3], [1, 2])


def test_create_rejects_non_finite():
    with pytest.raises(DomainError):
        ad.create([2], [1.0, float("nan")])
    with pytest.raises(DomainError):
        ad.create([1], [float("inf")])


@given(hnp.arrays(np.float64, hnp.array_shapes(min_dims=1, max_dims=4, max_side=5), elements=finite))
def test_create_bit_identical(arr):
    t = ad.create(arr.shape, arr.ravel().tolist())
    assert t.data.tobytes() == np.ascontiguousarray(arr).tobytes()


# ----------------------------------------------------------- elementwise

def test_relu_values():
    np.testing.assert_array_equal(ad.elementwise("relu", Tensor([-1.0, 0.0, 2.0])).data, [0, 0, 2])


def test_add_broadcast():
    np.testing.assert_array_equal(ad.elementwise("add", Tensor([1.0, 2.0]), Tensor([10.0])).data, [11, 12])


def test_square_backward():
    x = leaf([3.0])
    g = ad.backward(ad.sum(ad.elementwise("square", x)))
    np.testing.assert_array_equal(g[x], [6.0])


def test_incompatible_shapes():
    with pytest.raises(ShapeError):
        ad.add(Tensor(np.ones(3)), Tensor(np.ones(2)))


@pytest.mark.parametrize("kind,value", [("log", 0.0), ("log", -1.0), ("sqrt", -1.0)])
def test_domain_errors(kind, value):
    with pytest.raises(DomainError):
        ad.elementwise(kind, Tensor([value]))


def test_division_by_zero():
    with pytest.raises(DomainError):
        ad.div(Tensor([1.0]), Tensor([0.0]))


def test_overflow_is_reported():
    with pytest.raises(FloatingPointError):
        ad.exp(Tensor([1000.0]))


def test_lineage_only_when_needed():
    a, b = Tensor([1.0]), Tensor([2.0])
    assert (a + b).is_leaf and not (a + b).requires_grad
    c = leaf([1.0])
    assert not (c + b).is_leaf


@given(hnp.arrays(np.float64, st.tuples(st.integers(1, 4), st.integers(1, 4)), elements=finite),
       st.sampled_from([(1, 1), (1, None), (None, 1)]))
def test_broadcast_gradient_reduces_to_operand_shape(a, pattern):
    bshape = tuple(a.shape[i] if p is None else p for i, p in enumerate(pattern))
    b = leaf(np.ones(bshape))
    x = Tensor(a)
    g = ad.backward(ad.sum(x * b))
    assert g[b].shape == bshape
    axes = tuple(i for i, p in enumerate(pattern) if p == 1)
    np.testing.assert_allclose(g[b], a.sum(axis=axes, keepdims=True).reshape(bshape))


# ------------------------------------------------------------- reductions

def test_sum_axis():
    np.testing.assert_array_equal(ad.reduce("sum", Tensor([[1.0, 2], [3, 4]]), [1]).data, [3, 7])


def test_mean_axis():
    np.testing.assert_array_equal(ad.reduce("mean", Tensor([2.0, 4.0]), [0]).data, 3.0)


def test_max_routes_to_argmax():
    x = leaf([1.0, 5.0, 2.0])
    out = ad.reduce("max", x, [0])
    assert out.item() == 5.0
    np.testing.assert_array_equal(ad.backward(out)[x], [0, 1, 0])


def test_max_first_tie_wins():
    x = leaf([[4.0, 4.0, 1.0]])
    np.testing.assert_array_equal(ad.backward(ad.sum(ad.amax(x, axes=1)))[x], [[1, 0, 0]])


def test_keepdims():
    assert ad.reduce("sum", Tensor(np.ones((2, 3))), [1], keepdims=True).shape == (2, 1)


@pytest.mark.parametrize("axes", [[2], [0, 0], [-3]])
def test_invalid_axes(axes):
    with pytest.raises((ShapeError, ValueError)):
        ad.reduce("sum", Tensor(np.ones((2, 2))), axes)


# ---------------------------------------------------------------- matmul

def test_matmul_identity():
    m = Tensor([[1.0, 2], [3, 4]])
    np.testing.assert_array_equal(ad.matmul(Tensor(np.eye(2)), m).data, m.data)


def test_matmul_small():
    np.testing.assert_array_equal(ad.matmul(Tensor([[1.0, 2]]), Tensor([[3.0], [4]])).data, [[11]])


def test_matmul_mismatch():
    with pytest.raises(ShapeError):
        ad.matmul(Tensor(np.ones((2, 3))), Tensor(np.ones((2, 3))))


def test_matmul_finite_difference(rng):
    a = rng.standard_normal((3, 4))
    b = Tensor(rng.standard_normal((4, 2)))
    w = rng.standard_normal((3, 2))
    assert ad.finite_diff_check(lambda t: ad.sum(ad.matmul(t, b) * w), Tensor(a)) < 1e-6
    a_t = Tensor(a)
    assert ad.finite_diff_check(lambda t: ad.sum(ad.matmul(a_t, t) * w), b) < 1e-6


# -------------------------------------------------------------- backward

def test_backward_sum():
    x = leaf([1.0, 2.0, 3.0])
    np.testing.assert_array_equal(ad.backward(ad.sum(x))[x], [1, 1, 1])


def test_backward_sum_of_squares():
    x = leaf([1.0, 2.0, 3.0])
    np.testing.assert_array_equal(ad.backward(ad.sum(x * x))[x], [2, 4, 6])


def test_fan_out_accumulates():
    y = leaf([1.5])
    np.testing.assert_array_equal(ad.backward(ad.sum(y + y))[y], [2.0])


def test_backward_needs_scalar():
    x = leaf([1.0, 2.0])
    with pytest.raises(ShapeError):
        ad.backward(x * 2)


def test_backward_needs_lineage():
    with pytest.raises(ValueError):
        ad.backward(Tensor(1.0))


def test_non_grad_inputs_absent():
    x, c = leaf([1.0]), Tensor([2.0])
    g = ad.backward(ad.sum(x * c))
    assert x in g and c not in g


def test_backward_deterministic(rng):
    x = leaf(rng.standard_normal((4, 5)))
    w = Tensor(rng.standard_normal((5, 3)))
    loss = ad.sum(ad.log_softmax(ad.matmul(ad.relu(x), w), axis=1))
    g1 = ad.backward(loss, retain_graph=True)[x]
    g2 = ad.backward(loss, retain_graph=True)[x]
    assert g1.tobytes() == g2.tobytes()


def test_graph_released_after_backward():
    x = leaf([1.0, 2.0])
    y = x * 3
    loss = ad.sum(y)
    ad.backward(loss)
    assert y.is_leaf and y._parents == ()


# ---------------------------------------------------------------- detach

def test_detach_squared_has_no_entry():
    x = leaf([2.0])
    d = ad.detach(x)
    assert not d.requires_grad and d.is_leaf
    with pytest.raises(ValueError):
        ad.backward(ad.sum(d * d))


def test_detach_values_bit_equal(rng):
    x = leaf(rng.standard_normal(7))
    assert ad.detach(x).data.tobytes() == x.data.tobytes()


def test_detach_severs_one_branch():
    x = leaf([3.0])
    np.testing.assert_array_equal(ad.backward(ad.sum(x * ad.detach(x)))[x], [3.0])


@given(hnp.arrays(np.float64, st.integers(1, 6), elements=finite))
def test_detach_severs_exactly(arr):
    x = leaf(arr)
    g = ad.backward(ad.sum(x * 2.0 + ad.detach(x) * ad.detach(x) * 5.0))
    np.testing.assert_array_equal(g[x], np.full(arr.shape, 2.0))


# ------------------------------------------------------- finite differences

def test_fd_square(rng):
    x = Tensor(rng.standard_normal((3, 4)))
    assert ad.finite_diff_check(lambda t: ad.sum(ad.square(t)), x, eps=1e-5) < 1e-6


def test_fd_relu_away_from_kink(rng):
    x = rng.standard_normal(20)
    x[np.abs(x) < 1e-2] = 0.5
    assert ad.finite_diff_check(lambda t: ad.sum(ad.relu(t)), Tensor(x)) < 1e-6


def test_fd_constant():
    assert ad.finite_diff_check(lambda t: Tensor(3.0), Tensor(np.ones(4))) == 0.0


def test_fd_non_scalar():
    with pytest.raises(ShapeError):
        ad.finite_diff_check(lambda t: t * 2, Tensor(np.ones(3)))


# ---------------------------------------------------------- invariants

@given(hnp.arrays(np.float64, hnp.array_shapes(min_dims=1, max_dims=3, max_side=4), elements=finite))
def test_shape_matches_value_count(arr):
    t = Tensor(arr)
    assert int(np.prod(t.shape)) == t.data.size


@given(hnp.arrays(np.float64, st.integers(1, 8), elements=st.floats(-50, 50)))
def test_successful_ops_are_finite(arr):
    x = Tensor(arr)
    for out in (ad.exp(x), ad.relu(x), ad.softmax(x), ad.log_softmax(x), ad.square(x)):
        assert np.isfinite(out.data).all()
