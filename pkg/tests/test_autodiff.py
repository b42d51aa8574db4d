import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from emgtta import autodiff as ad
from emgtta.autodiff import Tape, Tensor, backward, grad, grad_of_grad, record

from oracles import central_difference, rel_err


def _shape(rng, ndim, lo=1, hi=4):
    return tuple(int(n) for n in rng.integers(lo, hi + 1, size=ndim))


def _away_from_zero(rng, shape):
    x = rng.normal(size=shape)
    return np.where(np.abs(x) < 0.1, np.sign(x) * 0.1 + x, x)


def _distinct(rng, shape):
    n = int(np.prod(shape))
    return (rng.permutation(n) + rng.uniform(0.1, 0.9, size=n)).reshape(shape) / n


def _case(name, rng):
    """Return (fn, arrays) where fn maps Tensors to a Tensor."""
    if name == "add":
        s = _shape(rng, 3)
        return ad.add, [rng.normal(size=s), rng.normal(size=(1,) + s[1:])]
    if name == "sub":
        s = _shape(rng, 2)
        return ad.sub, [rng.normal(size=s), rng.normal(size=s[1:])]
    if name == "mul":
        s = _shape(rng, 3)
        return ad.mul, [rng.normal(size=s), rng.normal(size=(s[0], 1, s[2]))]
    if name == "div":
        s = _shape(rng, 2)
        return ad.div, [rng.normal(size=s), rng.uniform(0.5, 2.0, size=s)]
    if name == "scalar_mul":
        c = float(rng.normal())
        return (lambda x: ad.scalar_mul(x, c)), [rng.normal(size=_shape(rng, 2))]
    if name == "matmul":
        m, k, n = _shape(rng, 3)
        if rng.random() < 0.5:
            return ad.matmul, [rng.normal(size=(m, k)), rng.normal(size=(k, n))]
        b = int(rng.integers(1, 4))
        return ad.matmul, [rng.normal(size=(m, k)), rng.normal(size=(b, k, n))]
    if name == "conv1d":
        b, ci, co = _shape(rng, 3, 1, 3)
        k = int(rng.integers(1, 4))
        d = int(rng.integers(1, 4))
        t = int(rng.integers(3, 9))
        return (lambda x, w: ad.conv1d(x, w, d)), [rng.normal(size=(b, ci, t)), rng.normal(size=(co, ci, k))]
    if name == "conv1d_bx":
        b, ci, co = _shape(rng, 3, 1, 3)
        k, d, t = int(rng.integers(1, 4)), int(rng.integers(1, 3)), int(rng.integers(3, 8))
        return (lambda g, w: record("conv1d_bx", g, w, dilation=d)), [
            rng.normal(size=(b, co, t)),
            rng.normal(size=(co, ci, k)),
        ]
    if name == "conv1d_bw":
        b, ci, co = _shape(rng, 3, 1, 3)
        k, d, t = int(rng.integers(1, 4)), int(rng.integers(1, 3)), int(rng.integers(3, 8))
        return (lambda x, g: record("conv1d_bw", x, g, dilation=d, k=k)), [
            rng.normal(size=(b, ci, t)),
            rng.normal(size=(b, co, t)),
        ]
    if name == "relu":
        return ad.relu, [_away_from_zero(rng, _shape(rng, 2))]
    if name == "mean":
        s = _shape(rng, 3)
        axis = (0, 2) if rng.random() < 0.5 else 1
        return (lambda x: ad.mean(x, axis=axis)), [rng.normal(size=s)]
    if name == "var":
        s = _shape(rng, 3, 2, 4)
        axis = (0, 2) if rng.random() < 0.5 else 1
        return (lambda x: ad.var(x, axis=axis)), [rng.normal(size=s)]
    if name == "sum":
        return (lambda x: ad.sum_(x, axis=0, keepdims=True)), [rng.normal(size=_shape(rng, 2))]
    if name == "broadcast":
        s = _shape(rng, 2)
        return (lambda x: ad.broadcast_to(x, (3,) + s)), [rng.normal(size=(1, s[1]))]
    if name == "concat":
        a, b, c = _shape(rng, 3)
        return (lambda x, y: ad.concat([x, y], axis=1)), [rng.normal(size=(a, b)), rng.normal(size=(a, c))]
    if name == "slice":
        s = _shape(rng, 2, 2, 5)
        key = (slice(0, s[0] - 1), slice(1, None))
        return (lambda x: ad.slice_(x, key)), [rng.normal(size=s)]
    if name == "sort":
        s = _shape(rng, 2, 2, 5)
        return (lambda x: ad.sort(x, axis=0)), [_distinct(rng, s)]
    if name == "log":
        return ad.log, [rng.uniform(0.5, 3.0, size=_shape(rng, 2))]
    if name == "exp":
        return ad.exp, [rng.normal(size=_shape(rng, 2))]
    if name == "sqrt":
        return ad.sqrt, [rng.uniform(0.5, 3.0, size=_shape(rng, 2))]
    if name == "softmax":
        return (lambda x: ad.softmax(x, axis=1)), [rng.normal(size=_shape(rng, 3))]
    if name == "cross_entropy":
        b, c, t = _shape(rng, 3, 2, 4)
        labels = rng.integers(0, c, size=(b, t))
        return (lambda x: ad.cross_entropy(x, labels, axis=1)), [rng.normal(size=(b, c, t))]
    if name == "squared_error":
        s = _shape(rng, 2)
        return ad.squared_error, [rng.normal(size=s), rng.normal(size=s)]
    if name == "frobenius_sq":
        return ad.frobenius_sq, [rng.normal(size=_shape(rng, 2))]
    if name == "transpose":
        return (lambda x: ad.transpose(x, (2, 0, 1))), [rng.normal(size=_shape(rng, 3))]
    if name == "reshape":
        a, b = _shape(rng, 2)
        return (lambda x: ad.reshape(x, (b, a))), [rng.normal(size=(a, b))]
    raise KeyError(name)


OPS = [
    "add", "sub", "mul", "div", "scalar_mul", "matmul", "conv1d", "conv1d_bx", "conv1d_bw",
    "relu", "mean", "var", "sum", "broadcast", "concat", "slice", "sort", "log", "exp", "sqrt",
    "softmax", "cross_entropy", "squared_error", "frobenius_sq", "transpose", "reshape",
]


def check_gradients(fn, arrays, rng, tol=1e-4):
    out_shape = fn(*[Tensor(a) for a in arrays]).shape
    probe = rng.normal(size=out_shape)

    def scalar(*arrs):
        return float(np.sum(fn(*[Tensor(a) for a in arrs]).data * probe))

    tape = Tape()
    xs = [tape.variable(a) for a in arrays]
    loss = ad.sum_(ad.mul(fn(*xs), probe))
    grads = backward(tape, loss, xs)
    for i, x in enumerate(xs):
        numeric = central_difference(scalar, arrays, i, step=1e-5)
        assert rel_err(grads[x].data, numeric) < tol, (i, grads[x].data, numeric)


@pytest.mark.parametrize("seed", range(4))
@pytest.mark.parametrize("name", OPS)
def test_op_gradient_matches_finite_differences(name, seed):
    rng = np.random.default_rng(1000 * seed + OPS.index(name))
    fn, arrays = _case(name, rng)
    check_gradients(fn, arrays, rng)


def test_forward_examples():
    np.testing.assert_array_equal(record("add", [1.0, 2.0], [3.0, 4.0]).data, [4.0, 6.0])
    np.testing.assert_array_equal(record("relu", [-1.0, 0.0, 2.0]).data, [0.0, 0.0, 2.0])
    a = np.random.default_rng(0).normal(size=(3, 3))
    np.testing.assert_array_equal(record("matmul", np.eye(3), a).data, a)


def test_simple_backward_examples():
    tape = Tape()
    x = tape.variable([1.0, 2.0, 3.0])
    np.testing.assert_array_equal(backward(tape, ad.sum_(x * x), [x])[x].data, [2.0, 4.0, 6.0])
    y = tape.variable(-1.0)
    assert backward(tape, ad.relu(y), [y])[y].data == 0.0


def test_two_class_softmax_cross_entropy_against_finite_differences():
    rng = np.random.default_rng(3)
    x = rng.normal(size=(5, 4))
    y = rng.integers(0, 2, size=5)
    w0 = rng.normal(size=(2, 4))

    def loss_fn(w):
        logits = ad.matmul(Tensor(x), ad.transpose(w, (1, 0)))
        return ad.cross_entropy(logits, y, axis=1)

    tape = Tape()
    w = tape.variable(w0)
    g = backward(tape, loss_fn(w), [w])[w].data
    numeric = central_difference(lambda a: loss_fn(Tensor(a)).item(), [w0], 0, step=1e-5)
    assert rel_err(g, numeric) < 1e-6


def test_unreachable_parameter_gets_zero_gradient():
    tape = Tape()
    x = tape.variable([1.0, 2.0])
    z = tape.variable(np.ones((2, 2)))
    gm = backward(tape, ad.sum_(x * x), [x, z])
    np.testing.assert_array_equal(gm[z].data, np.zeros((2, 2)))


def test_non_scalar_loss_is_rejected():
    tape = Tape()
    x = tape.variable([1.0, 2.0])
    with pytest.raises(ad.ContractError):
        backward(tape, x * x, [x])


def test_shape_mismatch_and_unknown_op():
    with pytest.raises(ad.ShapeError, match="incompatible"):
        record("add", np.ones(2), np.ones(3))
    with pytest.raises(ad.ShapeError, match="input channels"):
        ad.conv1d(np.ones((1, 13, 5)), np.ones((4, 14, 3)))
    with pytest.raises(ad.ShapeError, match="inner dimensions"):
        ad.matmul(np.ones((2, 3)), np.ones((4, 2)))
    with pytest.raises(ad.UnsupportedOperation):
        record("fft", np.ones(2))


def test_backward_is_deterministic_and_replay_is_exact():
    rng = np.random.default_rng(11)
    tape = Tape()
    x = tape.variable(rng.normal(size=(2, 3, 12)))
    w = tape.variable(rng.normal(size=(4, 3, 3)))
    h = ad.relu(ad.conv1d(x, w, 2))
    loss = ad.sum_(ad.sort(ad.reshape(h, (-1,)), axis=0) * np.linspace(0, 1, h.size))
    g1 = backward(tape, loss, [x, w])
    g2 = backward(tape, loss, [x, w])
    for k in g1:
        assert np.array_equal(g1[k].data, g2[k].data)
    for node, value in zip(tape.nodes, tape.replay()):
        assert np.array_equal(node.value, value)


def test_checkpoint_truncate():
    tape = Tape()
    x = tape.variable(1.0)
    mark = tape.checkpoint()
    _ = x * x
    assert len(tape) == mark + 1
    tape.truncate(mark)
    assert len(tape) == mark


def test_sort_routes_gradient_through_permutation():
    rng = np.random.default_rng(5)
    x0 = rng.normal(size=9)
    v = rng.normal(size=9)
    tape = Tape()
    x = tape.variable(x0)
    g = backward(tape, ad.sum_(ad.sort(x, 0) * v), [x])[x].data
    expected = np.empty(9)
    expected[np.argsort(x0, kind="stable")] = v
    np.testing.assert_array_equal(g, expected)


def test_sort_ties_are_stable():
    tape = Tape()
    x = tape.variable([1.0, 1.0, 0.0])
    g = backward(tape, ad.sum_(ad.sort(x, 0) * np.array([10.0, 20.0, 30.0])), [x])[x].data
    np.testing.assert_array_equal(g, [20.0, 30.0, 10.0])


# ---------------------------------------------------------------- second order


def test_fourth_power_second_derivative():
    tape = Tape()
    w = tape.variable(2.0)
    (g,) = grad(w * w * w * w, [w], create_graph=True)
    assert g.item() == 32.0
    gm = grad_of_grad(tape, g, [g], [w])
    assert gm[w].item() == pytest.approx(48.0, abs=1e-12)


def test_mixed_partial_of_bilinear():
    tape = Tape()
    u = tape.variable(1.5)
    v = tape.variable(-0.7)
    (gu,) = grad(u * v, [u], create_graph=True)
    assert grad_of_grad(tape, gu, [gu], [v])[v].item() == 1.0


def test_one_step_unroll_on_quadratic():
    eta = 0.1
    for w0 in [1.0, -2.5, 3.0]:
        tape = Tape()
        w = tape.variable(w0)
        (g,) = grad(0.5 * (w * w), [w], create_graph=True)
        w1 = w - eta * g
        query = 0.5 * (w1 * w1)
        meta = grad_of_grad(tape, query, [g], [w])[w].item()
        assert meta == pytest.approx(0.81 * w0, abs=1e-12)


def test_second_order_requires_recorded_gradients():
    tape = Tape()
    w = tape.variable(1.0)
    (g,) = grad(w * w * w, [w], create_graph=False)
    with pytest.raises(ad.SecondOrderUnavailable):
        grad_of_grad(tape, g * g, [g], [w])


@settings(max_examples=25, deadline=None)
@given(st.integers(min_value=1, max_value=6), st.integers(min_value=0, max_value=10_000))
def test_hessian_vector_product_on_quadratic(n, seed):
    rng = np.random.default_rng(seed)
    m = rng.normal(size=(n, n))
    a = m @ m.T + np.eye(n)
    b = rng.normal(size=(n, 1))
    v = rng.normal(size=(n, 1))
    tape = Tape()
    x = tape.variable(rng.normal(size=(n, 1)))
    f = 0.5 * ad.sum_(x * ad.matmul(a, x)) + ad.sum_(b * x)
    (g,) = grad(f, [x], create_graph=True)
    hv = grad_of_grad(tape, ad.sum_(g * v), [g], [x])[x].data
    np.testing.assert_allclose(hv, a @ v, atol=1e-8, rtol=0)


def test_hessian_vector_product_through_conv_network():
    rng = np.random.default_rng(21)
    x = rng.normal(size=(2, 3, 10))
    labels = rng.integers(0, 4, size=(2, 10))
    w0 = rng.normal(size=(4, 3, 3)) * 0.5
    v = rng.normal(size=w0.shape)

    def loss(w):
        h = ad.conv1d(Tensor(x), w, 2)
        return ad.cross_entropy(ad.softmax(h, axis=1) * 3.0, labels, axis=1)

    def grad_dot_v(w_arr):
        tape = Tape()
        w = tape.variable(w_arr)
        return float(np.sum(backward(tape, loss(w), [w])[w].data * v))

    tape = Tape()
    w = tape.variable(w0)
    (g,) = grad(loss(w), [w], create_graph=True)
    hv = grad_of_grad(tape, ad.sum_(g * v), [g], [w])[w].data
    numeric = central_difference(grad_dot_v, [w0], 0, step=1e-5)
    assert rel_err(hv, numeric) < 1e-6
