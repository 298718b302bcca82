import io
import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from hypothesis.extra import numpy as hnp

from spikeformer.autodiff import (Tape, Tensor, Parameter, avg_pool_2x2, backward, batch_norm, conv2d,
                                  count_macs, grad_check, layer_norm, linear, log_softmax, no_grad, softmax,
                                  stop_gradient, surrogate_forward, surrogate_spike, NonDeterministicError)
from spikeformer.autodiff import ops, tensorio
from spikeformer.autodiff.spike import SurrogateConfig, sigma, sigma_prime


def P(a):
    return Parameter(np.asarray(a, dtype=np.float64))


finite = st.floats(-3, 3, allow_nan=False, allow_infinity=False)


# -- tensor and tape ---------------------------------------------------------------

def test_product_of_extents_matches_data_length():
    t = Tensor(np.zeros((2, 3, 4)))
    assert t.size == 24 and t.shape == (2, 3, 4)


def test_every_reachable_leaf_gets_grad_of_its_shape():
    a, b, c = P(np.ones((2, 3))), P(np.ones(3)), P(2.0)
    out = ((a * b + c) * a).sum()
    out.backward()
    for t in (a, b, c):
        assert t.grad is not None and t.grad.shape == t.shape


def test_tape_visits_diamond_nodes_once():
    x = P([1.0, 2.0])
    y = x * 3.0
    z = y + y * y  # y is shared by two consumers
    tape = Tape.from_output(z.sum())
    ids = [id(t) for t, _ in tape.nodes]
    assert len(ids) == len(set(ids))
    backward(z.sum())
    # d/dx (3x + 9x^2) = 3 + 18x
    np.testing.assert_allclose(x.grad, [21.0, 39.0])


def test_grads_accumulate_across_backward_calls():
    x = P([1.0])
    (x * 2.0).sum().backward()
    (x * 3.0).sum().backward()
    assert x.grad[0] == 5.0


def test_no_grad_records_nothing():
    x = P([1.0])
    with no_grad():
        y = x * 2.0
    assert not y.requires_grad


def test_backward_on_constant_raises():
    with pytest.raises(RuntimeError):
        Tensor(np.ones(1)).backward()


def test_long_chain_does_not_recurse():
    x = P([1.0])
    y = x
    for _ in range(5000):
        y = y * 1.0
    y.sum().backward()
    assert x.grad[0] == 1.0


# -- elementwise ops --------------------------------------------------------------

def test_broadcast_add_reduces_grad_to_operand_shape():
    a, b = P(np.ones((2, 3))), P(np.ones(3))
    (a + b).sum().backward()
    np.testing.assert_array_equal(b.grad, [2.0, 2.0, 2.0])


@settings(max_examples=25, deadline=None)
@given(hnp.arrays(np.float64, (2, 3), elements=st.floats(0.2, 3)), hnp.arrays(np.float64, (3,), elements=finite))
def test_composed_elementwise_graph_matches_finite_differences(a, b):
    def f(x, y):
        return (ops.exp(y * 0.3) * ops.log(x) / (x + 1.0) - ops.softplus(y) * x ** 2 + ops.relu(x - 1.0)).sum()

    assert grad_check(f, [P(a), P(b)]) < 1e-4


@settings(max_examples=20, deadline=None)
@given(st.integers(0, 2**31 - 1))
def test_shape_ops_match_finite_differences(seed):
    rng = np.random.default_rng(seed)
    x = P(rng.normal(size=(2, 3, 4)))
    w = Tensor(rng.normal(size=(3, 2, 4)))

    def f(x):
        y = ops.transpose(x, (1, 0, 2)) * w
        parts = [y[:, 0], y[:, 1]]
        z = ops.concat([ops.stack(parts, axis=0), ops.swapaxes(y, 0, 1)], axis=1)
        return (z.reshape(-1) * z.reshape(-1)).mean() + x[[0, 1, 1], 2].sum()

    assert grad_check(f, x) < 1e-4


def test_fancy_index_with_repeats_accumulates():
    x = P([1.0, 2.0, 3.0])
    x[[0, 0, 2]].sum().backward()
    np.testing.assert_array_equal(x.grad, [2.0, 0.0, 1.0])


def test_matmul_counts_macs():
    a, b = Tensor(np.ones((2, 5, 3))), Tensor(np.ones((3, 4)))
    with count_macs() as box:
        ops.matmul(a, b)
    assert box[0] == 2 * 5 * 3 * 4


# -- surrogate spike and detach -----------------------------------------------------

def test_heaviside_forward_examples():
    out = surrogate_spike(Tensor(np.array([0.0, 0.5, -0.5, 1e-12])))
    np.testing.assert_array_equal(out.data, [0.0, 1.0, 0.0, 1.0])


def test_surrogate_backward_at_zero_is_half_alpha():
    x = P([0.0])
    surrogate_spike(x, SurrogateConfig(2.0)).sum().backward()
    assert x.grad[0] == 1.0


@settings(max_examples=50, deadline=None)
@given(hnp.arrays(np.float64, 7, elements=st.floats(-4, 4)), st.floats(0.5, 4))
def test_spike_output_is_binary_and_backward_is_sigma_prime(x, alpha):
    t = P(x)
    out = surrogate_spike(t, SurrogateConfig(alpha))
    assert set(np.unique(out.data)) <= {0.0, 1.0}
    out.sum().backward()
    ref = alpha / (2 * (1 + (math.pi * alpha * x / 2) ** 2))
    np.testing.assert_allclose(t.grad, ref, rtol=0, atol=1e-12)


def test_non_finite_spike_input_rejected():
    with pytest.raises(ValueError, match="non-finite"):
        surrogate_spike(Tensor(np.array([0.0, np.nan])))


def test_alpha_must_be_positive():
    with pytest.raises(ValueError):
        SurrogateConfig(0.0)


def test_surrogate_forward_uses_sigma():
    x = np.array([-1.0, 0.0, 0.3])
    with surrogate_forward():
        out = surrogate_spike(Tensor(x))
    np.testing.assert_allclose(out.data, np.arctan(math.pi * x) / math.pi + 0.5)
    assert sigma(np.array(0.0), 2.0) == 0.5


def test_sigma_prime_is_derivative_of_sigma():
    x = np.linspace(-2, 2, 41)
    h = 1e-6
    numeric = (sigma(x + h, 2.0) - sigma(x - h, 2.0)) / (2 * h)
    np.testing.assert_allclose(sigma_prime(x, 2.0), numeric, atol=1e-8)


def test_stop_gradient_forward_is_identity():
    x = P([1.5, -2.0])
    np.testing.assert_array_equal(stop_gradient(x).data, x.data)


def test_stop_gradient_severs_one_branch_of_product():
    x = P([1.5, -2.0])
    (stop_gradient(x) * x).sum().backward()
    np.testing.assert_array_equal(x.grad, [1.5, -2.0])


def test_sum_of_detached_has_zero_grad():
    x = P([1.0, 2.0])
    (stop_gradient(x).sum() + (x * 0.0).sum()).backward()
    np.testing.assert_array_equal(x.grad, [0.0, 0.0])


@settings(max_examples=20, deadline=None)
@given(st.integers(0, 2**31 - 1))
def test_detached_edge_equals_removed_edge(seed):
    rng = np.random.default_rng(seed)
    xv, wv = rng.normal(size=4), rng.normal(size=4)

    def graph(detach: bool):
        x, w = P(xv), P(wv)
        h = x * w
        cut = stop_gradient(h) if detach else Tensor(h.data.copy())
        (ops.exp(h) * cut + h).sum().backward()
        return x.grad, w.grad

    for a, b in zip(graph(True), graph(False)):
        np.testing.assert_array_equal(a, b)


# -- fused layers -------------------------------------------------------------------

def test_linear_examples():
    np.testing.assert_array_equal(linear(Tensor(np.array([1.0, 2.0])), Tensor(np.eye(2)), Tensor(np.zeros(2))).data,
                                  [1.0, 2.0])
    out = linear(Tensor(np.array([1.0, 1.0])), Tensor(np.array([[1.0], [-1.0]])), Tensor(np.array([0.5])))
    np.testing.assert_array_equal(out.data, [0.5])


def test_linear_shape_error_names_both_shapes():
    with pytest.raises(ValueError, match=r"\(2, 3\).*\(4, 5\)"):
        linear(Tensor(np.ones((2, 3))), Tensor(np.ones((4, 5))))


def test_linear_gradcheck():
    rng = np.random.default_rng(0)
    x, w, b = P(rng.normal(size=(2, 3, 4))), P(rng.normal(size=(4, 5))), P(rng.normal(size=5))
    assert grad_check(lambda x, w, b: (linear(x, w, b) ** 2).sum(), [x, w, b]) < 1e-4


def test_softmax_examples():
    np.testing.assert_allclose(softmax(Tensor(np.zeros(3))).data, [1 / 3] * 3)
    np.testing.assert_allclose(softmax(Tensor(np.array([1000.0, 0.0]))).data, [1.0, 0.0])
    np.testing.assert_allclose(softmax(Tensor(np.array([math.log(2), 0.0]))).data, [2 / 3, 1 / 3])


@settings(max_examples=30, deadline=None)
@given(hnp.arrays(np.float64, (3, 5), elements=st.floats(-50, 50)))
def test_softmax_slices_sum_to_one(x):
    y = softmax(Tensor(x), axis=-1).data
    assert (y >= 0).all()
    np.testing.assert_allclose(y.sum(axis=-1), 1.0, atol=1e-6)
    np.testing.assert_allclose(np.exp(log_softmax(Tensor(x)).data), y, atol=1e-12)


def test_softmax_and_log_softmax_gradcheck():
    rng = np.random.default_rng(1)
    x, w = P(rng.normal(size=(3, 4))), Tensor(rng.normal(size=(3, 4)))
    assert grad_check(lambda x: (softmax(x, axis=0) * w).sum() + (log_softmax(x) * w).sum(), x) < 1e-4


def test_layer_norm_examples():
    ones, zeros = Tensor(np.ones(2)), Tensor(np.zeros(2))
    np.testing.assert_array_equal(layer_norm(Tensor(np.full(2, 3.0)), ones, zeros).data, [0.0, 0.0])
    np.testing.assert_allclose(layer_norm(Tensor(np.array([1.0, -1.0])), ones, zeros, eps=0.0).data, [1.0, -1.0])


def test_layer_norm_statistics_follow_affine():
    rng = np.random.default_rng(2)
    d = 64
    gamma, beta = rng.uniform(0.5, 2, d), rng.normal(size=d)
    x = rng.normal(3, 5, size=(4000, d))
    y = layer_norm(Tensor(x), Tensor(gamma), Tensor(beta)).data
    np.testing.assert_allclose(y.mean(axis=0), beta, atol=0.1)
    np.testing.assert_allclose(y.std(axis=0), gamma, rtol=0.05)
    plain = layer_norm(Tensor(x), Tensor(np.ones(d)), Tensor(np.zeros(d))).data
    assert np.abs(plain.mean(axis=-1)).max() <= 1e-6


def test_layer_norm_then_linear_gradcheck():
    rng = np.random.default_rng(3)
    x, g, b, w = P(rng.normal(size=(3, 6))), P(rng.normal(size=6)), P(rng.normal(size=6)), P(rng.normal(size=(6, 2)))
    assert grad_check(lambda x, g, b, w: (linear(layer_norm(x, g, b), w) ** 2).sum(), [x, g, b, w]) < 1e-4


def test_batch_norm_constant_input_gives_beta():
    x = Tensor(np.full((4, 3, 2, 2), 7.0))
    beta = np.array([0.1, -0.2, 0.3])
    out = batch_norm(x, Tensor(np.ones(3)), Tensor(beta), np.zeros(3), np.ones(3), training=True)
    np.testing.assert_allclose(out.data, np.broadcast_to(beta.reshape(1, 3, 1, 1), x.shape))


def test_batch_norm_eval_identity_with_unit_stats():
    x = np.random.default_rng(4).normal(size=(2, 3, 4, 4))
    out = batch_norm(Tensor(x), Tensor(np.ones(3)), Tensor(np.zeros(3)), np.zeros(3), np.ones(3), training=False)
    np.testing.assert_allclose(out.data, x / math.sqrt(1 + 1e-5), rtol=1e-12)


def test_batch_norm_statistics_match_brute_force():
    rng = np.random.default_rng(5)
    x = rng.normal(2, 3, size=(6, 2, 5, 5))
    rm, rv = np.zeros(2), np.ones(2)
    out = batch_norm(Tensor(x), Tensor(np.ones(2)), Tensor(np.zeros(2)), rm, rv, training=True).data
    for c in range(2):
        vals = x[:, c].ravel()
        mu = sum(vals) / len(vals)
        var = sum((v - mu) ** 2 for v in vals) / len(vals)
        np.testing.assert_allclose(out[:, c], (x[:, c] - mu) / math.sqrt(var + 1e-5), atol=1e-6)
        assert abs(rm[c] - 0.1 * mu) < 1e-6
        assert abs(rv[c] - (0.9 + 0.1 * var * len(vals) / (len(vals) - 1))) < 1e-6


def test_batch_norm_channel_mismatch():
    with pytest.raises(ValueError, match="channels"):
        batch_norm(Tensor(np.ones((1, 3, 2, 2))), Tensor(np.ones(2)), Tensor(np.zeros(2)), np.zeros(2),
                   np.ones(2), training=True)


def test_batch_norm_gradcheck():
    rng = np.random.default_rng(6)
    x, g, b = P(rng.normal(size=(3, 2, 3, 3))), P(rng.normal(size=2)), P(rng.normal(size=2))
    w = Tensor(rng.normal(size=(3, 2, 3, 3)))
    rm, rv = np.zeros(2), np.ones(2)
    assert grad_check(lambda x, g, b: (batch_norm(x, g, b, rm, rv, True) * w).sum(), [x, g, b]) < 1e-4


def _direct_conv(x, k, stride, pad):
    b, cin, h, w = x.shape
    cout, _, kk, _ = k.shape
    xp = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
    ho, wo = (h + 2 * pad - kk) // stride + 1, (w + 2 * pad - kk) // stride + 1
    out = np.zeros((b, cout, ho, wo))
    for i in range(ho):
        for j in range(wo):
            patch = xp[:, :, i * stride:i * stride + kk, j * stride:j * stride + kk]
            out[:, :, i, j] = np.einsum("bchw,ochw->bo", patch, k)
    return out


def test_conv_identity_kernel():
    x = np.random.default_rng(7).normal(size=(2, 3, 5, 5))
    k = np.eye(3).reshape(3, 3, 1, 1)
    np.testing.assert_array_equal(conv2d(Tensor(x), Tensor(k)).data, x)


def test_conv_ones_center_is_nine():
    out = conv2d(Tensor(np.ones((1, 1, 3, 3))), Tensor(np.ones((1, 1, 3, 3)))).data
    assert out[0, 0, 1, 1] == 9.0 and out[0, 0, 0, 0] == 4.0


def test_conv_stride_two_halves_extent():
    out = conv2d(Tensor(np.zeros((1, 2, 128, 128), np.float32)), Tensor(np.zeros((4, 2, 3, 3), np.float32)), stride=2)
    assert out.shape == (1, 4, 64, 64)


@pytest.mark.parametrize("k,stride,h,w", [(3, 1, 6, 6), (3, 2, 7, 6), (5, 2, 8, 9), (1, 1, 4, 4), (1, 2, 5, 5)])
def test_conv_matches_direct_loop_and_finite_differences(k, stride, h, w):
    rng = np.random.default_rng(k * 10 + stride)
    x, kern = P(rng.normal(size=(2, 3, h, w))), P(rng.normal(size=(4, 3, k, k)))
    np.testing.assert_allclose(conv2d(x, kern, stride).data, _direct_conv(x.data, kern.data, stride, k // 2),
                               atol=1e-12)
    wt = Tensor(rng.normal(size=conv2d(x, kern, stride).shape))
    assert grad_check(lambda x, kern: (conv2d(x, kern, stride) * wt).sum(), [x, kern]) < 1e-4


def test_conv_extent_underflow():
    with pytest.raises(ValueError, match="underflow"):
        conv2d(Tensor(np.ones((1, 1, 1, 1))), Tensor(np.ones((1, 1, 5, 5))), padding=0)


def test_avg_pool_examples():
    x = np.array([[1.0, 2.0], [3.0, 4.0]]).reshape(1, 1, 2, 2)
    assert avg_pool_2x2(Tensor(x)).data.item() == 2.5
    np.testing.assert_array_equal(avg_pool_2x2(Tensor(np.full((1, 2, 4, 4), 3.0))).data, np.full((1, 2, 2, 2), 3.0))


@settings(max_examples=20, deadline=None)
@given(hnp.arrays(np.float64, (2, 3, 4, 6), elements=finite))
def test_avg_pool_conserves_sum_and_spreads_quarter_grads(x):
    t = P(x)
    out = avg_pool_2x2(t)
    np.testing.assert_allclose(out.data.sum() * 4, x.sum(), atol=1e-9)
    out.sum().backward()
    np.testing.assert_array_equal(t.grad, np.full(x.shape, 0.25))


def test_avg_pool_odd_extent():
    with pytest.raises(ValueError, match="even"):
        avg_pool_2x2(Tensor(np.ones((1, 1, 3, 4))))


# -- grad_check itself -----------------------------------------------------------------

def test_grad_check_square():
    x = P([1.0, 2.0])
    assert grad_check(lambda x: (x * x).sum(), x) < 1e-6
    (x * x).sum().backward()
    np.testing.assert_allclose(x.grad, [2.0, 4.0])


def test_grad_check_through_surrogate_spike():
    x = P(np.linspace(-1, 1, 9))
    assert grad_check(lambda x: (surrogate_spike(x) * x).sum(), x) < 1e-4


def test_grad_check_rejects_nondeterministic_function():
    rng = np.random.default_rng(0)
    with pytest.raises(NonDeterministicError):
        grad_check(lambda x: (x * float(rng.random())).sum(), P([1.0]))


def test_grad_check_catches_wrong_backward():
    from spikeformer.autodiff.tensor import make_result

    def bad_square(x):
        return make_result(x.data ** 2, (x,), lambda g: (g * 3 * x.data,), "bad")

    assert grad_check(lambda x: bad_square(x).sum(), P([1.0, 2.0])) > 0.1


# -- tensor file format ---------------------------------------------------------------

def test_tensor_dump_layout():
    buf = tensorio.dumps(np.array([[1.0, 2.0, 3.0]]))
    assert buf[:4] == b"SPKT" and buf[4] == 1 and buf[5] == 2
    assert buf[6:14] == (1).to_bytes(4, "little") + (3).to_bytes(4, "little")
    np.testing.assert_array_equal(np.frombuffer(buf[14:], "<f4"), [1, 2, 3])


@settings(max_examples=30, deadline=None)
@given(hnp.arrays(np.float32, hnp.array_shapes(min_dims=0, max_dims=4, max_side=4),
                  elements=st.floats(-1e6, 1e6, width=32)))
def test_tensor_round_trip(a):
    out = tensorio.loads(tensorio.dumps(a))
    assert out.shape == a.shape and out.dtype == np.float32
    np.testing.assert_array_equal(out, a)


def test_tensor_read_errors():
    buf = tensorio.dumps(np.ones((2, 2)))
    with pytest.raises(tensorio.TensorFormatError, match="truncated"):
        tensorio.read(io.BytesIO(buf[:-1]))
    with pytest.raises(tensorio.TensorFormatError, match="magic"):
        tensorio.loads(b"XXXX" + buf[4:])
    with pytest.raises(tensorio.TensorFormatError, match="version"):
        tensorio.loads(buf[:4] + b"\x02" + buf[5:])
