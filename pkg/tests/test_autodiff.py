import threading

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from clusterscan import autodiff as ad
from clusterscan.autodiff import ContractError, ShapeError, Tape, Tensor, parameter, tensor


def fd_grad(f, x, h=1e-6):
    """Central differences of a scalar function of one array."""
    g = np.zeros_like(x)
    for i in range(x.size):
        e = np.zeros_like(x)
        e.flat[i] = h * max(1.0, abs(x.flat[i]))
        g.flat[i] = (f(x + e) - f(x - e)) / (2 * e.flat[i])
    return g


def grad_of(build, *arrays):
    leaves = [parameter(a) for a in arrays]
    with Tape() as tape:
        out = build(*leaves)
    tape.backward(out)
    return [t.grad for t in leaves]


# -- construction -----------------------------------------------------------


def test_tensor_fill_zero():
    np.testing.assert_array_equal(tensor([2, 2], fill=0).data, [[0, 0], [0, 0]])


def test_tensor_values():
    np.testing.assert_array_equal(tensor([3], values=[1, 2, 3]).data, [1, 2, 3])


def test_tensor_length_mismatch():
    with pytest.raises(ShapeError):
        tensor([2], values=[1, 2, 3])


def test_size_matches_shape():
    t = tensor([2, 3, 4], fill=1.5)
    assert t.size == 24 and t.data.size == int(np.prod(t.shape))


# -- elementwise ------------------------------------------------------------


def test_elementwise_examples():
    assert ad.elementwise("silu", tensor([1], fill=0.0)).data[0] == 0.0
    assert ad.elementwise("sigmoid", tensor([1], fill=0.0)).data[0] == 0.5
    np.testing.assert_array_equal(ad.elementwise("add", tensor([2], values=[1, 2]), tensor([2], values=[3, 4])).data, [4, 6])


def test_incompatible_broadcast():
    with pytest.raises(ShapeError):
        ad.elementwise("add", tensor([2, 3], fill=1), tensor([4], fill=1))


def test_div_by_zero_propagates():
    with np.errstate(divide="ignore"):
        out = ad.elementwise("div", tensor([1], fill=1.0), tensor([1], fill=0.0))
    assert np.isinf(out.data[0])


def test_softplus_stable_at_large_magnitude():
    x = tensor([3], values=[-800.0, 0.0, 800.0])
    np.testing.assert_allclose(ad.softplus(x).data, [0.0, np.log(2.0), 800.0], rtol=1e-15)


@pytest.mark.parametrize("op", ["add", "sub", "mul", "div"])
def test_binary_gradients_with_broadcast(op, rng):
    a = rng.standard_normal((3, 4))
    b = rng.uniform(0.5, 2.0, (1, 4))
    w = rng.standard_normal((3, 4))
    fa = lambda x: float((ad.elementwise(op, x, b).data * w).sum())  # noqa: E731
    fb = lambda y: float((ad.elementwise(op, a, y).data * w).sum())  # noqa: E731
    ga, gb = grad_of(lambda x, y: (ad.elementwise(op, x, y) * w).sum(), a, b)
    np.testing.assert_allclose(ga, fd_grad(fa, a), rtol=1e-6, atol=1e-9)
    np.testing.assert_allclose(gb, fd_grad(fb, b), rtol=1e-6, atol=1e-9)


@pytest.mark.parametrize("op", ["exp", "log", "sqrt", "sigmoid", "silu", "relu", "softplus", "abs"])
def test_unary_gradients(op, rng):
    x = rng.uniform(0.3, 2.0, (2, 5)) * (1 if op in ("log", "sqrt") else rng.choice([-1, 1], (2, 5)))
    w = rng.standard_normal((2, 5))
    (g,) = grad_of(lambda t: (ad.elementwise(op, t) * w).sum(), x)
    np.testing.assert_allclose(g, fd_grad(lambda v: float((ad.elementwise(op, v).data * w).sum()), x), rtol=1e-6, atol=1e-9)


# -- matmul -----------------------------------------------------------------


def test_matmul_identity_and_selector():
    m = tensor([2, 2], values=[1, 2, 3, 4])
    np.testing.assert_array_equal((tensor([2, 2], values=[1, 0, 0, 1]) @ m).data, m.data)
    np.testing.assert_array_equal((tensor([1, 2], values=[1, 0]) @ tensor([2, 1], values=[2, 3])).data, [[2]])


def test_matmul_gradient_example():
    (ga,) = grad_of(lambda a: (a @ Tensor([[2.0], [5.0]])).sum(), np.array([[1.0, 1.0]]))
    fd = fd_grad(lambda a: float((a @ np.array([[2.0], [5.0]])).sum()), np.array([[1.0, 1.0]]), h=1e-4)
    np.testing.assert_allclose(ga, [[2.0, 5.0]])
    np.testing.assert_allclose(ga, fd, rtol=1e-8)


def test_matmul_inner_mismatch():
    with pytest.raises(ShapeError):
        ad.matmul(tensor([2, 3], fill=1), tensor([2, 3], fill=1))


# -- reductions -------------------------------------------------------------


def test_reduce_examples():
    assert ad.reduce("sum", tensor([3], values=[1, 2, 3])).item() == 6
    np.testing.assert_array_equal(ad.reduce("max", tensor([2, 2], values=[1, 5, 2, 2]), axis=1).data, [5, 2])
    assert ad.reduce("mean", tensor([2, 2], fill=1.0)).item() == 1


def test_reduce_axis_out_of_range():
    with pytest.raises(ShapeError):
        ad.reduce("sum", tensor([2, 2], fill=1.0), axis=2)


def test_max_tie_routes_to_first_index():
    (g,) = grad_of(lambda t: t.max(axis=1).sum(), np.array([[3.0, 3.0, 1.0], [0.0, 2.0, 2.0]]))
    np.testing.assert_array_equal(g, [[1, 0, 0], [0, 1, 0]])
    (g,) = grad_of(lambda t: t.max(), np.array([4.0, 1.0, 4.0]))
    np.testing.assert_array_equal(g, [1, 0, 0])


@pytest.mark.parametrize("op", ["sum", "mean"])
@pytest.mark.parametrize("axis", [None, 0, 1, (0, 2)])
def test_reduce_gradients(op, axis, rng):
    x = rng.standard_normal((2, 3, 4))
    out_shape = np.asarray(getattr(np, op)(x, axis=axis)).shape
    w = rng.standard_normal(out_shape)
    (g,) = grad_of(lambda t: (ad.reduce(op, t, axis=axis) * w).sum(), x)
    fd = fd_grad(lambda v: float((getattr(np, op)(v, axis=axis) * w).sum()), x)
    np.testing.assert_allclose(g, fd, rtol=1e-6, atol=1e-9)


# -- backward contract ------------------------------------------------------


def test_backward_examples():
    (g,) = grad_of(lambda t: t.sum(), np.zeros(3))
    np.testing.assert_array_equal(g, [1, 1, 1])
    (g,) = grad_of(lambda t: (t * t).sum(), np.array([2.0, 3.0]))
    np.testing.assert_array_equal(g, [4, 6])


def test_backward_rejects_non_scalar_root():
    x = parameter(np.ones(3))
    with Tape() as tape:
        y = x * 2
    with pytest.raises(ContractError):
        tape.backward(y)


def test_backward_rejects_root_from_other_tape():
    x = parameter(np.ones(3))
    with Tape():
        y = x.sum()
    with Tape() as other:
        pass
    with pytest.raises(ContractError):
        other.backward(y)


def test_unreached_leaf_gets_zero_gradient():
    a, b = parameter(np.ones(2)), parameter(np.ones((2, 2)))
    with Tape() as tape:
        out = (a * 3).sum()
        _ = b * 2
    tape.backward(out)
    np.testing.assert_array_equal(a.grad, [3, 3])
    assert b.grad.shape == b.shape and not b.grad.any()


def test_detached_tensor_receives_no_gradient():
    x = parameter(np.array([1.0, 2.0]))
    with Tape() as tape:
        d = x.detach()
        out = (x * d).sum()
    tape.backward(out)
    assert d.grad is None
    np.testing.assert_array_equal(x.grad, [1.0, 2.0])


def test_backward_visits_nodes_in_reverse_order():
    seen = []
    x = parameter(np.array([1.0]))
    with Tape() as tape:
        a = ad.record_op("first", x.data * 2, (x,), lambda g: (seen.append("first") or g * 2,))
        b = ad.record_op("second", a.data + 1, (a,), lambda g: (seen.append("second") or g,))
        out = b.sum()
    tape.backward(out)
    assert seen == ["second", "first"]
    assert [n[0] for n in tape.nodes] == ["first", "second", "sum"]


def test_backward_is_bitwise_deterministic(rng):
    x = rng.standard_normal((4, 5))
    w = rng.standard_normal((5, 3))

    def run():
        (g,) = grad_of(lambda t: ((t @ w).sigmoid() * (t @ w).exp().log()).mean(), x)
        return g

    assert np.array_equal(run(), run())


def test_no_grad_records_nothing():
    x = parameter(np.ones(2))
    with Tape() as tape, ad.no_grad():
        _ = x * 2
    assert len(tape) == 0


def test_tapes_are_thread_local():
    x = parameter(np.ones(2))
    lengths = []

    def worker():
        with Tape() as t:
            _ = (x * 2).sum()
        lengths.append(len(t))

    with Tape() as main:
        th = threading.Thread(target=worker)
        th.start()
        th.join()
    assert lengths == [2] and len(main) == 0


# -- shape ops --------------------------------------------------------------


def test_shape_op_gradients(rng):
    a = rng.standard_normal((2, 3, 4))
    c = rng.standard_normal((2, 1, 4))
    w = rng.standard_normal((2, 2, 8))

    def f(x, y):
        z = ad.concat([x, y], axis=1).transpose(2, 0, 1).reshape(4, 8)
        return ad.stack([z[1:3], z[[0, 0]]], axis=0)

    ga, gc = grad_of(lambda x, y: (f(x, y) * w).sum(), a, c)
    np.testing.assert_allclose(ga, fd_grad(lambda v: float((f(Tensor(v), Tensor(c)).data * w).sum()), a), atol=1e-9)
    np.testing.assert_allclose(gc, fd_grad(lambda v: float((f(Tensor(a), Tensor(v)).data * w).sum()), c), atol=1e-9)


# -- precision --------------------------------------------------------------


def test_precision_switch():
    with ad.precision(32):
        assert tensor([2], fill=1).dtype == np.float32
    assert tensor([2], fill=1).dtype == np.float64
    with pytest.raises(ValueError):
        ad.set_precision(16)


# -- properties -------------------------------------------------------------

dims = st.lists(st.integers(1, 3), min_size=0, max_size=3)


def _broadcastable(s, t):
    try:
        np.broadcast_shapes(s, t)
        return True
    except ValueError:
        return False


@settings(max_examples=200, deadline=None)
@given(dims, dims, dims)
def test_broadcast_result_shape_is_associative(s1, s2, s3):
    s1, s2, s3 = tuple(s1), tuple(s2), tuple(s3)
    if not (_broadcastable(s1, s2) and _broadcastable(np.broadcast_shapes(s1, s2), s3)):
        return
    a, b, c = (tensor(s, fill=1.0) for s in (s1, s2, s3))
    assert ((a + b) + c).shape == (a + (b + c)).shape


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 2**31 - 1))
def test_random_composite_matches_finite_differences(seed):
    rng = np.random.default_rng(seed)
    x = rng.standard_normal((3, 4))
    W = rng.standard_normal((4, 2))

    def f(t):
        h = ad.matmul(t, Tensor(W))
        return (ad.silu(h) * ad.sigmoid(h) + ad.softplus(h)).mean() + (t * t).sum().sqrt()

    (g,) = grad_of(f, x)
    fd = fd_grad(lambda v: f(Tensor(v)).item(), x)
    assert np.linalg.norm(g - fd) <= 1e-6 * max(np.linalg.norm(fd), 1e-12)
