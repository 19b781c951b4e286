import numpy as np
import pytest

from tspretrain import tensor as T
from tspretrain.rng import SeededRng
from tspretrain.tensor import Tensor

from gradcheck import assert_grads_match


def rnd(seed=0):
    return np.random.default_rng(seed)


# ---------------------------------------------------------------------------
# forward values frozen by hand computation


def test_conv1d_same_is_causal():
    x = Tensor([[1.0, 2.0, 3.0, 4.0]])
    k = Tensor(np.ones((1, 1, 2)))
    out = T.conv1d(x, k, padding="same")
    np.testing.assert_allclose(out.data, [[1.0, 3.0, 5.0, 7.0]])


def test_conv1d_same_dilated():
    x = Tensor([[1.0, 2.0, 3.0, 4.0, 5.0]])
    k = Tensor(np.ones((1, 1, 2)))
    out = T.conv1d(x, k, dilation=2)
    np.testing.assert_allclose(out.data, [[1.0, 2.0, 4.0, 6.0, 8.0]])


def test_conv1d_valid():
    x = Tensor([[1.0, 2.0, 3.0, 4.0, 5.0]])
    k = Tensor(np.ones((1, 1, 2)))
    out = T.conv1d(x, k, padding="valid")
    np.testing.assert_allclose(out.data, [[3.0, 5.0, 7.0, 9.0]])
    assert out.data.shape == (1, 4)


def test_conv1d_valid_receptive_field_too_large():
    x = Tensor([[1.0, 2.0, 3.0]])
    k = Tensor(np.ones((1, 1, 3)))
    with pytest.raises(ValueError):
        T.conv1d(x, k, dilation=2, padding="valid")


def test_conv1d_bias_and_batched():
    x = Tensor(rnd(1).normal(size=(2, 3, 5)))
    k = Tensor(rnd(2).normal(size=(4, 3, 3)))
    b = Tensor(np.arange(4.0))
    out = T.conv1d(x, k, bias=b)
    assert out.data.shape == (2, 4, 5)
    no_bias = T.conv1d(x, k)
    np.testing.assert_allclose(out.data, no_bias.data + np.arange(4.0)[None, :, None])


def test_conv1d_channel_mismatch():
    with pytest.raises(ValueError):
        T.conv1d(Tensor(np.zeros((2, 5))), Tensor(np.zeros((1, 3, 2))))


def test_layer_norm_values():
    out = T.layer_norm(Tensor([1.0, 2.0, 3.0]), Tensor(np.ones(3)), Tensor(np.zeros(3)))
    np.testing.assert_allclose(out.data, [-1.2247, 0.0, 1.2247], atol=1e-3)


def test_layer_norm_gamma_beta():
    out = T.layer_norm(Tensor([1.0, 2.0, 3.0]), Tensor(2.0 * np.ones(3)), Tensor(np.ones(3)))
    np.testing.assert_allclose(out.data, [1.0 - 2 * 1.2247, 1.0, 1.0 + 2 * 1.2247], atol=1e-2)


def test_layer_norm_rejects_bad_epsilon():
    with pytest.raises(ValueError):
        T.layer_norm(Tensor([1.0]), Tensor([1.0]), Tensor([0.0]), epsilon=0.0)


def test_softmax_rows_sum_to_one():
    x = Tensor(rnd(3).normal(size=(4, 7)) * 10)
    out = T.softmax(x)
    np.testing.assert_allclose(out.data.sum(axis=-1), np.ones(4), atol=1e-6)
    assert np.all(out.data > 0)


def test_softmax_shift_invariant():
    x = rnd(4).normal(size=(2, 5))
    a = T.softmax(Tensor(x)).data
    b = T.softmax(Tensor(x + 100.0)).data
    np.testing.assert_allclose(a, b, atol=1e-6)


def test_cross_entropy_uniform_is_log_v():
    loss = T.softmax_cross_entropy(Tensor(np.zeros((3, 4))), [0, 1, 2])
    np.testing.assert_allclose(float(loss.data), np.log(4.0), atol=1e-6)


def test_cross_entropy_two_way():
    loss = T.softmax_cross_entropy(Tensor(np.zeros(2)), 0)
    np.testing.assert_allclose(float(loss.data), np.log(2.0), atol=1e-6)


def test_cross_entropy_target_out_of_range():
    with pytest.raises(ValueError):
        T.softmax_cross_entropy(Tensor(np.zeros((1, 3))), [3])


def test_cross_entropy_extreme_logits_finite():
    logits = Tensor(np.array([[1000.0, -1000.0], [-1000.0, 1000.0]]))
    loss = T.softmax_cross_entropy(logits, [0, 1])
    assert np.isfinite(float(loss.data))
    np.testing.assert_allclose(float(loss.data), 0.0, atol=1e-6)


def test_bce_with_logits_at_zero():
    loss = T.bce_with_logits(Tensor(np.zeros(4)), np.array([0.0, 1.0, 0.0, 1.0]))
    np.testing.assert_allclose(float(loss.data), np.log(2.0), atol=1e-6)


def test_bce_extreme_logits_finite():
    loss = T.bce_with_logits(Tensor(np.array([1000.0, -1000.0])), np.array([1.0, 0.0]))
    np.testing.assert_allclose(float(loss.data), 0.0, atol=1e-6)


def test_gelu_fixed_points():
    out = T.gelu(Tensor(np.array([0.0, 100.0, -100.0, 1.0])))
    np.testing.assert_allclose(out.data[:3], [0.0, 100.0, 0.0], atol=1e-6)
    np.testing.assert_allclose(out.data[3], 0.8413447, atol=1e-6)


def test_relu_values():
    out = T.relu(Tensor(np.array([-2.0, 0.0, 3.0])))
    np.testing.assert_allclose(out.data, [0.0, 0.0, 3.0])


def test_take_rows_gathers():
    table = Tensor(np.arange(12.0).reshape(4, 3))
    out = T.take_rows(table, np.array([[0, 2], [3, 3]]))
    assert out.data.shape == (2, 2, 3)
    np.testing.assert_allclose(out.data[1, 0], [9.0, 10.0, 11.0])


def test_take_rows_accumulates_duplicates():
    table = Tensor(np.zeros((3, 2)), requires_grad=True)
    out = T.take_rows(table, np.array([1, 1, 1]))
    T.reduce_sum(out).backward()
    np.testing.assert_allclose(table.grad, [[0, 0], [3, 3], [0, 0]])


def test_take_positions():
    x = Tensor(np.arange(24.0).reshape(2, 3, 4))
    out = T.take_positions(x, np.array([0, 1]), np.array([2, 0]))
    np.testing.assert_allclose(out.data, [[8, 9, 10, 11], [12, 13, 14, 15]])


def test_tile_last():
    out = T.tile_last(Tensor(np.array([[1.0, 2.0]])), 3)
    assert out.data.shape == (1, 2, 3)
    np.testing.assert_allclose(out.data[0, 1], [2.0, 2.0, 2.0])


def test_dropout_eval_is_identity():
    x = Tensor(rnd(5).normal(size=(3, 3)))
    out = T.dropout(x, 0.5, SeededRng(1), train=False)
    np.testing.assert_array_equal(out.data, x.data)


def test_dropout_scales_kept_values():
    x = Tensor(np.ones((100, 100)))
    out = T.dropout(x, 0.4, SeededRng(7), train=True)
    kept = out.data != 0
    assert abs(kept.mean() - 0.6) < 0.02
    np.testing.assert_allclose(out.data[kept], 1.0 / 0.6, atol=1e-6)


def test_backward_requires_scalar():
    x = Tensor(np.ones(3), requires_grad=True)
    with pytest.raises(ValueError):
        (x * 2.0).backward()


def test_unreachable_leaf_gets_zero_grad():
    a = Tensor(np.ones(2), requires_grad=True)
    b = Tensor(np.ones(2), requires_grad=True)
    loss = T.reduce_sum(a * 3.0)
    T.autodiff_backward(loss, leaves=[a, b])
    np.testing.assert_allclose(a.grad, [3.0, 3.0])
    np.testing.assert_allclose(b.grad, [0.0, 0.0])


def test_fanout_accumulates():
    x = Tensor(np.array([2.0]), requires_grad=True)
    y = x * x + x * 3.0
    T.reduce_sum(y).backward()
    np.testing.assert_allclose(x.grad, [7.0])


def test_record_topological_order():
    x = Tensor(np.array([1.0]), requires_grad=True)
    y = x * 2.0
    z = y + y * 3.0
    record = T.ComputationRecord.trace(z)
    order = {id(n): i for i, n in enumerate(record.nodes)}
    for node in record.nodes:
        for parent in node._parents:
            assert order[id(parent)] < order[id(node)]
    assert record.nodes[-1] is z
    assert x in record.leaves()


def test_forward_replay_is_bitwise_identical():
    x = rnd(11).normal(size=(2, 4, 8)).astype(np.float32)
    w = rnd(12).normal(size=(8, 8)).astype(np.float32)

    def run():
        out = T.gelu(Tensor(x) @ Tensor(w))
        return T.layer_norm(out, Tensor(np.ones(8, np.float32)), Tensor(np.zeros(8, np.float32))).data

    assert run().tobytes() == run().tobytes()


def test_stop_gradient_blocks_flow():
    x = Tensor(np.array([3.0]), requires_grad=True)
    y = x * 2.0
    loss = T.reduce_sum(x * y.detach())
    loss.backward()
    np.testing.assert_allclose(x.grad, [6.0])


# ---------------------------------------------------------------------------
# gradient checks against central differences


def test_grad_add_mul_broadcast():
    assert_grads_match(
        lambda ts: T.reduce_sum((ts[0] + ts[1]) * ts[2]),
        [rnd(0).normal(size=(3, 4)), rnd(1).normal(size=(4,)), rnd(2).normal(size=(3, 1))],
    )


def test_grad_sub_pow():
    assert_grads_match(
        lambda ts: T.reduce_sum((ts[0] - ts[1]) ** 2.0),
        [rnd(3).normal(size=(2, 5)), rnd(4).normal(size=(2, 5))],
    )


def test_grad_matmul():
    assert_grads_match(
        lambda ts: T.reduce_sum(ts[0] @ ts[1]),
        [rnd(5).normal(size=(3, 4)), rnd(6).normal(size=(4, 2))],
    )


def test_grad_batched_matmul():
    assert_grads_match(
        lambda ts: T.reduce_sum((ts[0] @ ts[1]) ** 2.0),
        [rnd(7).normal(size=(2, 3, 4)), rnd(8).normal(size=(2, 4, 3))],
    )


def test_grad_reshape_transpose():
    assert_grads_match(
        lambda ts: T.reduce_sum(T.transpose(T.reshape(ts[0], (2, 6)), (1, 0)) ** 2.0),
        [rnd(9).normal(size=(3, 4))],
    )


def test_grad_mean_axis():
    assert_grads_match(
        lambda ts: T.reduce_sum(T.reduce_mean(ts[0], axis=1) ** 2.0),
        [rnd(10).normal(size=(3, 5))],
    )


def test_grad_relu_gelu_sigmoid():
    x = rnd(11).normal(size=(4, 4)) + 0.3  # keep clear of the relu kink
    x[np.abs(x) < 0.05] = 0.2
    assert_grads_match(lambda ts: T.reduce_sum(T.relu(ts[0]) ** 2.0), [x])
    assert_grads_match(lambda ts: T.reduce_sum(T.gelu(ts[0])), [rnd(12).normal(size=(4, 4))])
    assert_grads_match(lambda ts: T.reduce_sum(T.sigmoid(ts[0]) ** 2.0), [rnd(13).normal(size=(6,))])


def test_grad_softmax():
    assert_grads_match(
        lambda ts: T.reduce_sum(T.softmax(ts[0]) ** 2.0),
        [rnd(14).normal(size=(3, 6))],
    )


def test_grad_layer_norm():
    assert_grads_match(
        lambda ts: T.reduce_sum(T.layer_norm(ts[0], ts[1], ts[2]) ** 2.0),
        [rnd(15).normal(size=(4, 6)), 1.0 + 0.1 * rnd(16).normal(size=(6,)), 0.1 * rnd(17).normal(size=(6,))],
    )


def test_grad_conv1d_same():
    assert_grads_match(
        lambda ts: T.reduce_sum(T.conv1d(ts[0], ts[1], bias=ts[2]) ** 2.0),
        [rnd(18).normal(size=(2, 3, 6)), rnd(19).normal(size=(4, 3, 3)), rnd(20).normal(size=(4,))],
    )


def test_grad_conv1d_dilated_valid():
    assert_grads_match(
        lambda ts: T.reduce_sum(T.conv1d(ts[0], ts[1], dilation=2, padding="valid") ** 2.0),
        [rnd(21).normal(size=(1, 2, 9)), rnd(22).normal(size=(3, 2, 3))],
    )


def test_conv1d_cl_matches_channels_first():
    x = rnd(40).normal(size=(2, 3, 7)).astype(np.float32)  # [B, C, T]
    k = rnd(41).normal(size=(4, 3, 3)).astype(np.float32)
    b = rnd(42).normal(size=(4,)).astype(np.float32)
    for dilation, padding in [(1, "same"), (2, "same"), (1, "valid"), (3, "same")]:
        cf = T.conv1d(Tensor(x), Tensor(k), bias=Tensor(b), dilation=dilation, padding=padding)
        cl = T.conv1d_cl(Tensor(x.transpose(0, 2, 1)), Tensor(k), bias=Tensor(b),
                         dilation=dilation, padding=padding)
        np.testing.assert_allclose(cl.data, cf.data.transpose(0, 2, 1), rtol=1e-5, atol=1e-5)


def test_conv1d_cl_dilation_exceeding_length():
    # receptive field wider than the sequence: "same" still works (taps fall
    # entirely into the implicit left pad and contribute nothing)
    x = rnd(43).normal(size=(1, 3, 2)).astype(np.float32)
    k = rnd(44).normal(size=(2, 2, 3)).astype(np.float32)
    cf = T.conv1d(Tensor(x.transpose(0, 2, 1)), Tensor(k), dilation=4)
    cl = T.conv1d_cl(Tensor(x), Tensor(k), dilation=4)
    np.testing.assert_allclose(cl.data, cf.data.transpose(0, 2, 1), rtol=1e-5, atol=1e-5)


def test_grad_conv1d_cl_same():
    assert_grads_match(
        lambda ts: T.reduce_sum(T.conv1d_cl(ts[0], ts[1], bias=ts[2]) ** 2.0),
        [rnd(45).normal(size=(2, 6, 3)), rnd(46).normal(size=(4, 3, 3)), rnd(47).normal(size=(4,))],
    )


def test_grad_conv1d_cl_dilated_valid():
    assert_grads_match(
        lambda ts: T.reduce_sum(T.conv1d_cl(ts[0], ts[1], dilation=2, padding="valid") ** 2.0),
        [rnd(48).normal(size=(1, 9, 2)), rnd(49).normal(size=(3, 2, 3))],
    )


def test_tile_axis1_values():
    out = T.tile_axis1(Tensor([[1.0, 2.0], [3.0, 4.0]]), 3)
    assert out.data.shape == (2, 3, 2)
    np.testing.assert_allclose(out.data[0], [[1.0, 2.0]] * 3)
    np.testing.assert_allclose(out.data[1], [[3.0, 4.0]] * 3)


def test_grad_tile_axis1():
    assert_grads_match(
        lambda ts: T.reduce_sum(T.tile_axis1(ts[0], 4) ** 2.0),
        [rnd(50).normal(size=(3, 5))],
    )


def test_grad_cross_entropy():
    assert_grads_match(
        lambda ts: T.softmax_cross_entropy(ts[0], [2, 0, 1]),
        [rnd(23).normal(size=(3, 5))],
    )


def test_grad_bce():
    targets = np.array([[1.0, 0.0, 1.0], [0.0, 1.0, 0.0]])
    assert_grads_match(
        lambda ts: T.bce_with_logits(ts[0], targets),
        [rnd(24).normal(size=(2, 3))],
    )


def test_grad_take_rows_and_positions():
    idx = np.array([0, 2, 2, 1])
    assert_grads_match(
        lambda ts: T.reduce_sum(T.take_rows(ts[0], idx) ** 2.0),
        [rnd(25).normal(size=(3, 4))],
    )
    bi, pi = np.array([0, 1, 1]), np.array([1, 0, 2])
    assert_grads_match(
        lambda ts: T.reduce_sum(T.take_positions(ts[0], bi, pi) ** 2.0),
        [rnd(26).normal(size=(2, 3, 4))],
    )


def test_grad_tile_last():
    assert_grads_match(
        lambda ts: T.reduce_sum(T.tile_last(ts[0], 4) ** 2.0),
        [rnd(27).normal(size=(2, 3))],
    )
