import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from deepsimreg import tensor as T
from deepsimreg.tensor import Tensor

from conftest import gradcheck


def test_conv_identity_kernel():
    x = np.arange(9, dtype=np.float32).reshape(1, 1, 3, 3)
    w = np.zeros((1, 1, 3, 3), dtype=np.float32)
    w[0, 0, 1, 1] = 1
    out = T.conv2d(Tensor(x), Tensor(w), Tensor([0.0]), padding=1)
    np.testing.assert_array_equal(out.data, x)


def test_conv_zero_kernel():
    x = np.random.default_rng(0).standard_normal((2, 3, 5, 5))
    out = T.conv2d(Tensor(x), Tensor(np.zeros((4, 3, 3, 3))), Tensor(np.zeros(4)), padding=1)
    assert out.shape == (2, 4, 5, 5)
    assert not out.data.any()


def test_conv_pointwise_arithmetic():
    x = Tensor([[[[1, 2], [3, 4]]]])
    out = T.conv2d(x, Tensor(np.full((1, 1, 1, 1), 2.0)), Tensor([1.0]))
    np.testing.assert_array_equal(out.data[0, 0], [[3, 5], [7, 9]])


def test_conv_is_cross_correlation():
    # a kernel with a single off-centre tap reads the neighbour, not the mirrored one
    x = np.zeros((1, 1, 3, 3))
    x[0, 0, 1, 2] = 1.0
    w = np.zeros((1, 1, 3, 3))
    w[0, 0, 1, 2] = 1.0
    out = T.conv2d(Tensor(x), Tensor(w), None, padding=1)
    assert out.data[0, 0, 1, 1] == 1.0


def test_conv_output_extent():
    out = T.conv2d(Tensor(np.ones((1, 2, 7, 6))), Tensor(np.ones((3, 2, 3, 3))), None, padding=0)
    assert out.shape == (1, 3, 5, 4)


def test_conv_channel_mismatch_rejected():
    with pytest.raises(ValueError, match="channel mismatch"):
        T.conv2d(Tensor(np.ones((1, 2, 4, 4))), Tensor(np.ones((1, 3, 3, 3))), None, padding=1)


def test_conv_even_kernel_rejected():
    with pytest.raises(ValueError):
        T.conv2d(Tensor(np.ones((1, 1, 4, 4))), Tensor(np.ones((1, 1, 2, 2))), None)


def test_pool_examples():
    out = T.pool_avg2x2(Tensor([[[[0, 2], [4, 6]]]]))
    np.testing.assert_array_equal(out.data, [[[[3]]]])
    c = T.pool_avg2x2(Tensor(np.full((1, 2, 4, 6), 0.7)))
    np.testing.assert_allclose(c.data, 0.7, rtol=1e-6)


def test_pool_gradient_is_quarter():
    x = Tensor(np.random.default_rng(1).random((1, 1, 4, 4)), requires_grad=True)
    T.pool_avg2x2(x).sum().backward()
    np.testing.assert_array_equal(x.grad, 0.25)


def test_pool_odd_rejected():
    with pytest.raises(ValueError):
        T.pool_avg2x2(Tensor(np.ones((1, 1, 3, 4))))


def test_upsample_example():
    np.testing.assert_array_equal(T.upsample_nn2x(Tensor([[[[5]]]])).data, [[[[5, 5], [5, 5]]]])


@settings(max_examples=30, deadline=None)
@given(arrays(np.float64, (2, 3, 3, 4), elements=st.floats(-10, 10)))
def test_pool_inverts_upsample(x):
    with T.default_dtype(np.float64):
        np.testing.assert_allclose(T.pool_avg2x2(T.upsample_nn2x(Tensor(x))).data, x, rtol=1e-12, atol=1e-12)


def test_concat_order_and_slicing():
    a = Tensor(np.ones((1, 1, 2, 2)))
    b = Tensor(np.zeros((1, 1, 2, 2)))
    c = T.concat_channels(a, b)
    assert c.shape == (1, 2, 2, 2)
    np.testing.assert_array_equal(c.data[:, 0], 1)
    np.testing.assert_array_equal(c.data[:, 1], 0)
    x = Tensor(np.random.default_rng(0).random((2, 3, 4, 4)))
    np.testing.assert_array_equal(T.concat_channels(x, Tensor(np.zeros((2, 2, 4, 4))))[:, :3].data, x.data)


def test_concat_spatial_mismatch_rejected():
    with pytest.raises(ValueError):
        T.concat_channels(Tensor(np.ones((1, 1, 2, 2))), Tensor(np.ones((1, 1, 2, 4))))


def test_activation_values():
    x = Tensor([-1.0, 3.0])
    np.testing.assert_allclose(T.map_activation(x, "leaky_relu").data, [-0.2, 3.0], rtol=1e-6)
    assert T.map_activation(Tensor([0.0]), "sigmoid").data[0] == 0.5
    sm = T.map_activation(Tensor(np.full((1, 4, 2, 2), 1.3)), "softmax_channels")
    np.testing.assert_allclose(sm.data, 0.25, rtol=1e-6)
    assert T.map_activation(x, "linear") is x
    with pytest.raises(ValueError):
        T.map_activation(x, "tanh")


@settings(max_examples=30, deadline=None)
@given(arrays(np.float64, (2, 5, 3, 3), elements=st.floats(-30, 30)))
def test_softmax_sums_to_one(x):
    s = T.softmax_channels(Tensor(x, dtype=np.float64)).data.sum(axis=1)
    assert np.all(np.abs(s - 1) <= 1e-6)


def test_batch_norm_train_statistics():
    rng = np.random.default_rng(0)
    x = Tensor(rng.normal(3.0, 2.0, (4, 3, 5, 5)))
    rm, rv = np.zeros(3, np.float32), np.ones(3, np.float32)
    out = T.batch_norm2d(x, Tensor(np.ones(3)), Tensor(np.zeros(3)), rm, rv, training=True).data
    np.testing.assert_allclose(out.mean(axis=(0, 2, 3)), 0, atol=1e-5)
    np.testing.assert_allclose(out.var(axis=(0, 2, 3)), 1, atol=1e-3)
    # running statistics moved 10% of the way towards the batch statistics
    np.testing.assert_allclose(rm, 0.1 * x.data.mean(axis=(0, 2, 3)), rtol=1e-5)


def test_batch_norm_zero_gamma_and_eval_mode():
    x = Tensor(np.random.default_rng(0).random((2, 2, 3, 3)))
    beta = Tensor([0.5, -1.0])
    out = T.batch_norm2d(x, Tensor(np.zeros(2)), beta, np.zeros(2), np.ones(2), training=True)
    np.testing.assert_allclose(out.data, np.broadcast_to(beta.data.reshape(1, 2, 1, 1), x.shape))
    rm, rv = np.array([1.0, 2.0]), np.array([4.0, 9.0])
    ev = T.batch_norm2d(x, Tensor(np.ones(2)), Tensor(np.zeros(2)), rm, rv, training=False)
    np.testing.assert_allclose(ev.data, (x.data - rm.reshape(1, 2, 1, 1)) / np.sqrt(rv.reshape(1, 2, 1, 1) + 1e-5), rtol=1e-5)


def test_batch_norm_constant_channel_is_finite():
    out = T.batch_norm2d(Tensor(np.ones((2, 1, 2, 2))), Tensor([1.0]), Tensor([0.0]), np.zeros(1), np.ones(1), True)
    assert np.all(np.isfinite(out.data))


def test_dropout_modes():
    x = Tensor(np.ones((3, 3)))
    rng = np.random.default_rng(0)
    assert T.dropout(x, 0.0, True, rng) is x
    assert T.dropout(x, 0.7, False, rng) is x
    with pytest.raises(ValueError):
        T.dropout(x, 1.0, True, rng)


def test_dropout_rate_monte_carlo():
    rng = np.random.default_rng(1234)
    p = 0.1
    out = T.dropout(Tensor(np.ones(10 ** 6)), p, True, rng).data
    assert abs((out == 0).mean() - p) <= 0.005
    np.testing.assert_allclose(out[out != 0], 1 / (1 - p), rtol=1e-6)


def test_mean_and_self_difference():
    assert T.mean(Tensor([1, 2, 3, 4])).item() == 2.5
    x = Tensor(np.random.default_rng(0).random(5), requires_grad=True)
    d = x - x
    assert not d.data.any()
    d.sum().backward()
    assert not x.grad.any()


def test_incompatible_shapes_rejected():
    with pytest.raises(ValueError):
        Tensor(np.ones((2, 3))) + Tensor(np.ones((3, 2)))


def test_backward_examples():
    x = Tensor([1.0, -2.0, 3.0], requires_grad=True)
    x.sum().backward()
    np.testing.assert_array_equal(x.grad, 1)
    x.zero_grad()
    T.tsum(x * x).backward()
    np.testing.assert_array_equal(x.grad, 2 * x.data)


def test_backward_accumulates():
    x = Tensor([0.5, 1.5], requires_grad=True)
    loss = T.tsum(T.square(x) * 3.0)
    loss.backward()
    once = x.grad.copy()
    loss.backward()
    np.testing.assert_array_equal(x.grad, 2 * once)
    for _ in range(2):
        loss.backward()
    np.testing.assert_array_equal(x.grad, 4 * once)


def test_backward_non_scalar_rejected():
    x = Tensor([1.0, 2.0], requires_grad=True)
    with pytest.raises(ValueError, match="scalar"):
        (x * 2.0).backward()


def test_shared_subgraph_gradient():
    # y feeds two branches; its gradient must be the sum of both
    x = Tensor([2.0], requires_grad=True)
    y = x * x
    (y * 3.0 + y).sum().backward()
    np.testing.assert_allclose(x.grad, [16.0])


def test_no_grad_records_nothing():
    x = Tensor([1.0], requires_grad=True)
    with T.no_grad():
        y = x * 2.0
    assert not y.requires_grad


def test_adam_zero_grad_keeps_params():
    p = Tensor([1.0, -2.0], requires_grad=True)
    p.grad = np.zeros(2, np.float32)
    T.adam_step([p], T.AdamState(lr=0.1))
    np.testing.assert_array_equal(p.data, [1.0, -2.0])


def test_adam_first_step_closed_form():
    with T.default_dtype(np.float64):
        p = Tensor([0.0], requires_grad=True)
    p.grad = np.array([1.0])
    T.adam_step([p], T.AdamState(lr=0.1))
    assert abs(p.data[0] + 0.1) <= 1e-6
    assert p.grad is not None  # the optimizer does not clear gradients


def test_adam_minimizes_quadratic():
    with T.default_dtype(np.float64):
        x = Tensor([1.0], requires_grad=True)
    state = T.AdamState(lr=0.1)
    for _ in range(100):
        x.zero_grad()
        T.tsum(T.square(x)).backward()
        T.adam_step([x], state)
    assert abs(x.data[0]) < 0.5
    assert state.step == 100


def test_adam_missing_grad_rejected():
    with pytest.raises(ValueError):
        T.adam_step([Tensor([1.0], requires_grad=True)], T.AdamState())


RNG = np.random.default_rng(7)
ONEHOT = np.eye(3)[RNG.integers(0, 3, (2, 3, 3))].transpose(0, 3, 1, 2)

GRAD_CASES = {
    "conv2d": (lambda x, w, b: T.conv2d(x, w, b, padding=1),
               [RNG.standard_normal((2, 2, 4, 5)), RNG.standard_normal((3, 2, 3, 3)), RNG.standard_normal(3)]),
    "conv2d_valid": (lambda x, w: T.conv2d(x, w, None, padding=0),
                     [RNG.standard_normal((1, 2, 5, 5)), RNG.standard_normal((2, 2, 3, 3))]),
    "pool": (T.pool_avg2x2, [RNG.standard_normal((2, 2, 4, 4))]),
    "upsample": (T.upsample_nn2x, [RNG.standard_normal((1, 2, 3, 2))]),
    "concat": (T.concat_channels, [RNG.standard_normal((1, 2, 3, 3)), RNG.standard_normal((1, 1, 3, 3))]),
    "leaky_relu": (T.leaky_relu, [RNG.standard_normal((3, 4))]),
    "sigmoid": (T.sigmoid, [RNG.standard_normal((3, 4))]),
    "softmax": (T.softmax_channels, [RNG.standard_normal((2, 4, 2, 3))]),
    "batch_norm_train": (lambda x, g, b: T.batch_norm2d(x, g, b, np.zeros(2), np.ones(2), True),
                         [RNG.standard_normal((2, 2, 3, 3)), RNG.random(2) + 0.5, RNG.standard_normal(2)]),
    "batch_norm_eval": (lambda x, g, b: T.batch_norm2d(x, g, b, np.array([0.1, -0.2]), np.array([1.5, 0.7]), False),
                        [RNG.standard_normal((2, 2, 3, 3)), RNG.random(2) + 0.5, RNG.standard_normal(2)]),
    "dropout": (lambda x: T.dropout(x, 0.3, True, np.random.default_rng(5)), [RNG.standard_normal((4, 5))]),
    "add_broadcast": (lambda a, b: a + b, [RNG.standard_normal((2, 3, 4)), RNG.standard_normal((3, 1))]),
    "sub": (lambda a, b: a - b, [RNG.standard_normal((2, 3)), RNG.standard_normal((2, 3))]),
    "mul_broadcast": (lambda a, b: a * b, [RNG.standard_normal((2, 3, 4)), RNG.standard_normal((1, 3, 1))]),
    "div": (lambda a, b: a / b, [RNG.standard_normal((2, 3)), RNG.random((2, 3)) + 0.5]),
    "scalar_mul": (lambda a: T.scalar_mul(a, -1.7), [RNG.standard_normal((3,))]),
    "sum_axis": (lambda a: T.tsum(a, axis=1), [RNG.standard_normal((2, 3, 4))]),
    "mean_axes": (lambda a: T.mean(a, axis=(0, 2), keepdims=True), [RNG.standard_normal((2, 3, 4))]),
    "sqrt": (T.sqrt, [RNG.random((3, 3)) + 0.1]),
    "square": (T.square, [RNG.standard_normal((3, 3))]),
    "clamp_min": (lambda a: T.clamp_min(a, 0.3), [RNG.random((4, 4))]),
    "box_sum": (lambda a: T.box_sum2d(a, 3), [RNG.standard_normal((1, 2, 5, 6))]),
    "getitem": (lambda a: a[:, 1:, :-1], [RNG.standard_normal((2, 3, 4))]),
    "cross_entropy": (lambda a: T.softmax_cross_entropy(a, ONEHOT),
                      [RNG.standard_normal((2, 3, 3, 3))]),
}


@pytest.mark.parametrize("name", sorted(GRAD_CASES))
def test_gradients_double_precision(name):
    fn, inputs = GRAD_CASES[name]
    assert gradcheck(fn, inputs) <= 1e-5


@pytest.mark.parametrize("name", sorted(GRAD_CASES))
def test_gradients_single_precision(name):
    fn, inputs = GRAD_CASES[name]
    assert gradcheck(fn, inputs, dtype=np.float32) <= 1e-3


def test_forward_determinism():
    from deepsimreg.networks import autoencoder_config, build_unet

    x = np.random.default_rng(0).random((2, 1, 16, 16)).astype(np.float32)
    outs = []
    for _ in range(2):
        net = build_unet(autoencoder_config((4, 8)), seed=3)
        outs.append(net(x).data)
    np.testing.assert_array_equal(outs[0], outs[1])


def test_double_precision_configuration():
    with T.default_dtype(np.float64):
        assert Tensor([1.0]).dtype == np.float64
    assert Tensor([1.0]).dtype == np.float32
    with pytest.raises(ValueError):
        T.set_default_dtype(np.int32)
