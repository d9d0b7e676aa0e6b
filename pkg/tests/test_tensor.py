import numpy as np
import pytest

from cycreg import tensor as T
from cycreg.losses import mind_loss
from cycreg.tensor import NonFiniteError, ShapeError, Tensor, backward, grad_check


def weighted_sum(out: Tensor, seed: int = 99) -> Tensor:
    """Scalarize with fixed random weights so every output entry matters."""
    w = np.random.default_rng(seed).normal(size=out.shape)
    return T.sum_(T.mul(out, Tensor(w)))


# -- examples ----------------------------------------------------------------


def test_add_example():
    np.testing.assert_array_equal(T.add(Tensor([1, 2]), Tensor([3, 4])).data, [4, 6])


def test_leaky_relu_example():
    np.testing.assert_allclose(T.leaky_relu(Tensor([-1.0, 2.0]), 0.2).data, [-0.2, 2.0])


def test_mul_product_rule():
    a = Tensor([2.0], requires_grad=True)
    b = Tensor([3.0])
    backward(T.sum_(T.mul(a, b)))
    np.testing.assert_array_equal(a.grad, [3.0])


def test_elementwise_dispatch():
    a = Tensor([1.0, -2.0])
    np.testing.assert_array_equal(T.elementwise("abs", a).data, [1.0, 2.0])
    np.testing.assert_array_equal(T.elementwise("scale", a, factor=3).data, [3.0, -6.0])
    np.testing.assert_array_equal(T.elementwise("sub", a, a).data, [0.0, 0.0])
    with pytest.raises(ValueError):
        T.elementwise("tanh", a)


def test_binary_shape_mismatch():
    with pytest.raises(ShapeError):
        T.add(Tensor([1.0, 2.0]), Tensor([1.0, 2.0, 3.0]))


def test_non_finite_is_an_error():
    with pytest.raises(NonFiniteError):
        T.exp(Tensor([1000.0]))
    with pytest.raises(NonFiniteError):
        T.div(Tensor([1.0]), Tensor([0.0]))


def test_mean_example():
    assert T.reduce("mean", Tensor([1.0, 2.0, 3.0])).item() == 2.0


def test_sum_of_empty_is_error():
    with pytest.raises(ShapeError):
        T.reduce("sum", Tensor(np.zeros(0)))


def test_mean_gradient():
    a = Tensor(np.arange(4.0), requires_grad=True)
    backward(T.mean(a))
    np.testing.assert_array_equal(a.grad, [0.25] * 4)


def test_conv_identity_kernel():
    x = np.random.default_rng(0).normal(size=(1, 4, 4))
    k = np.zeros((1, 1, 3, 3))
    k[0, 0, 1, 1] = 1.0
    out = T.conv(Tensor(x), Tensor(k), stride=1)
    np.testing.assert_array_equal(out.data, x)


def test_conv_stride_two_shape():
    out = T.conv(Tensor(np.ones((1, 4, 4))), Tensor(np.ones((1, 1, 3, 3))), stride=2)
    assert out.shape == (1, 2, 2)
    out = T.conv(Tensor(np.ones((1, 5, 5))), Tensor(np.ones((3, 1, 3, 3))), stride=2)
    assert out.shape == (3, 3, 3)


def test_conv_matches_direct_loop():
    rng = np.random.default_rng(1)
    x = rng.normal(size=(2, 5, 6))
    k = rng.normal(size=(3, 2, 3, 3))
    b = rng.normal(size=3)
    for stride in (1, 2):
        got = T.conv(Tensor(x), Tensor(k), Tensor(b), stride=stride).data
        xp = np.pad(x, ((0, 0), (1, 1), (1, 1)))
        rows, cols = range(0, 5, stride), range(0, 6, stride)
        want = np.array(
            [[[np.sum(xp[:, i : i + 3, j : j + 3] * k[o]) + b[o] for j in cols] for i in rows] for o in range(3)]
        )
        np.testing.assert_allclose(got, want, rtol=1e-12, atol=1e-12)


def test_conv_errors():
    with pytest.raises(ShapeError):
        T.conv(Tensor(np.ones((2, 4, 4))), Tensor(np.ones((1, 1, 3, 3))))
    with pytest.raises(ValueError):
        T.conv(Tensor(np.ones((1, 4, 4))), Tensor(np.ones((1, 1, 3, 3))), stride=3)


def test_conv_input_gradient_finite_differences():
    rng = np.random.default_rng(2)
    k = Tensor(rng.normal(size=(1, 1, 3, 3)))
    x = rng.normal(size=(1, 5, 5))
    err = grad_check(lambda t: weighted_sum(T.conv(t, k)), x, eps=1e-6)
    assert err < 1e-6


def test_upsample_examples():
    out = T.upsample_nearest(Tensor([[[1.0, 2.0], [3.0, 4.0]]]), 2)
    np.testing.assert_array_equal(
        out.data[0], [[1, 1, 2, 2], [1, 1, 2, 2], [3, 3, 4, 4], [3, 3, 4, 4]]
    )
    assert T.upsample_nearest(Tensor(np.zeros((3, 5, 5)))).shape == (3, 10, 10)
    x = Tensor(np.ones((1, 2, 2)), requires_grad=True)
    backward(T.sum_(T.upsample_nearest(x)))
    np.testing.assert_array_equal(x.grad, np.full((1, 2, 2), 4.0))
    with pytest.raises(ValueError):
        T.upsample_nearest(x, 3)


def test_concat_channels():
    a = Tensor(np.ones((1, 3, 4)), requires_grad=True)
    b = Tensor(np.zeros((1, 3, 4)), requires_grad=True)
    out = T.concat_channels(a, b)
    assert out.shape == (2, 3, 4)
    g = np.random.default_rng(0).normal(size=out.shape)
    backward(T.sum_(T.mul(out, Tensor(g))))
    np.testing.assert_array_equal(a.grad, g[:1])
    np.testing.assert_array_equal(b.grad, g[1:])
    with pytest.raises(ShapeError):
        T.concat_channels(a, Tensor(np.zeros((1, 2, 4))))


def test_backward_examples():
    a = Tensor([1.0, 2.0], requires_grad=True)
    backward(T.sum_(a))
    np.testing.assert_array_equal(a.grad, [1.0, 1.0])
    a = Tensor([3.0], requires_grad=True)
    backward(T.mean(T.square(a)))
    np.testing.assert_array_equal(a.grad, [6.0])


def test_backward_needs_scalar():
    a = Tensor([1.0, 2.0], requires_grad=True)
    with pytest.raises(ShapeError):
        backward(T.scale(a, 2.0))


def test_grad_check_examples():
    assert grad_check(T.sum_, np.random.default_rng(0).normal(size=6)) < 1e-8
    fixed = Tensor(np.random.default_rng(1).random((1, 8, 8)))
    point = np.random.default_rng(2).random((1, 8, 8))
    assert grad_check(lambda t: mind_loss(t, fixed), point, eps=1e-6) < 1e-4
    with pytest.raises(ValueError):
        grad_check(T.sum_, np.ones(3), eps=1.0)


def test_grad_check_rejects_nondeterminism():
    rng = np.random.default_rng(0)
    with pytest.raises(RuntimeError):
        grad_check(lambda t: T.scale(T.sum_(t), rng.random()), np.ones(3))


# -- per-op gradient integrity --------------------------------------------------

rng = np.random.default_rng(7)
X = rng.normal(size=(2, 6, 5))
Y = rng.normal(size=(2, 6, 5))
POS = rng.uniform(0.5, 2.0, size=(2, 6, 5))
ONE = rng.normal(size=(1, 6, 5))
KERN = rng.normal(size=(3, 2, 3, 3))

OPS = {
    "add": lambda t: T.add(t, Tensor(Y)),
    "sub": lambda t: T.sub(Tensor(Y), t),
    "mul": lambda t: T.mul(t, t),
    "div": lambda t: T.div(Tensor(Y), T.add(T.square(t), Tensor(POS))),
    "scale": lambda t: T.scale(t, -1.7),
    "exp": lambda t: T.exp(t),
    "abs": lambda t: T.abs_(t),
    "square": lambda t: T.square(t),
    "leaky_relu": lambda t: T.leaky_relu(t, 0.2),
    "clamp_min": lambda t: T.clamp_min(t, 0.1),
    "mean": lambda t: T.mean(T.square(t)),
    "diff": lambda t: T.diff(t, 2),
    "shift": lambda t: T.shift(t, (2, -1)),
    "stencil": lambda t: T.stencil(t, np.arange(9.0).reshape(3, 3)),
    "channel_mean": lambda t: T.channel_mean(t),
    "channel_max": lambda t: T.channel_max(t),
    "take_channels": lambda t: T.take_channels(t, 1, 2),
    "conv_s1": lambda t: T.conv(t, Tensor(KERN), Tensor(np.ones(3))),
    "conv_s2": lambda t: T.conv(t, Tensor(KERN), stride=2),
    "upsample": lambda t: T.upsample_nearest(t),
    "concat": lambda t: T.concat_channels(t, T.square(t)),
}


@pytest.mark.parametrize("name", sorted(OPS))
def test_op_gradient(name):
    op = OPS[name]
    err = grad_check(lambda t: weighted_sum(op(t)), X, eps=1e-6)
    assert err < 1e-5, f"{name}: {err}"


def test_expand_channels_gradient():
    err = grad_check(lambda t: weighted_sum(T.expand_channels(t, 3)), ONE, eps=1e-6)
    assert err < 1e-5


def test_conv_kernel_and_bias_gradients():
    x = Tensor(X)
    kern = np.random.default_rng(4).normal(size=(3, 2, 3, 3))
    bias = np.random.default_rng(5).normal(size=3)
    for stride in (1, 2):
        assert grad_check(lambda k: weighted_sum(T.conv(x, k, Tensor(bias), stride=stride)), kern) < 1e-5
        assert grad_check(lambda b: weighted_sum(T.conv(x, Tensor(kern), b, stride=stride)), bias) < 1e-5


def test_conv_3d_gradient():
    r = np.random.default_rng(6)
    x = r.normal(size=(1, 4, 4, 4))
    k = Tensor(r.normal(size=(2, 1, 3, 3, 3)))
    assert grad_check(lambda t: weighted_sum(T.conv(t, k, stride=2)), x) < 1e-5


def test_shift_clamps_to_edge():
    x = Tensor(np.arange(5.0)[None, :, None] * np.ones((1, 5, 2)))
    np.testing.assert_array_equal(T.shift(x, (2, 0)).data[0, :, 0], [2, 3, 4, 4, 4])
    np.testing.assert_array_equal(T.shift(x, (-1, 0)).data[0, :, 0], [0, 0, 1, 2, 3])


# -- properties ---------------------------------------------------------------


def test_backward_is_linear_in_the_loss():
    r = np.random.default_rng(8)
    x0 = r.normal(size=(1, 6, 6))
    k = Tensor(r.normal(size=(1, 1, 3, 3)))

    def loss_a(t):
        return T.mean(T.square(T.conv(t, k)))

    def loss_b(t):
        return T.sum_(T.abs_(t))

    grads = []
    for fn in (loss_a, loss_b, lambda t: T.add(loss_a(t), loss_b(t))):
        x = Tensor(x0.copy(), requires_grad=True)
        backward(fn(x))
        grads.append(x.grad)
    np.testing.assert_allclose(grads[2], grads[0] + grads[1], rtol=1e-13, atol=1e-15)


def test_replay_is_bit_identical():
    def run():
        r = np.random.default_rng(11)
        x = Tensor(r.normal(size=(2, 8, 8)), requires_grad=True)
        k = Tensor(r.normal(size=(4, 2, 3, 3)), requires_grad=True)
        loss = T.mean(T.leaky_relu(T.conv(x, k, stride=2)))
        backward(loss)
        return loss.item(), x.grad.copy(), k.grad.copy()

    a, b = run(), run()
    assert a[0] == b[0]
    np.testing.assert_array_equal(a[1], b[1])
    np.testing.assert_array_equal(a[2], b[2])


def test_reused_node_accumulates():
    a = Tensor([2.0], requires_grad=True)
    b = T.square(a)
    backward(T.sum_(T.add(b, b)))
    np.testing.assert_array_equal(a.grad, [8.0])


def test_frozen_leaf_gets_no_gradient():
    a = Tensor([1.0, 2.0], requires_grad=True)
    c = Tensor([3.0, 4.0])
    backward(T.sum_(T.mul(a, c)))
    assert c.grad is None
