"""Per-operation gradient checks and frozen-value oracles."""

import numpy as np
import pytest

from tonetrans import ops
from tonetrans.gradcheck import finite_difference_check
from tonetrans.tensor import ShapeError, Tensor

TOL = 1e-4
RNG = np.random.default_rng(42)


def t(shape, lo=-1.0, hi=1.0, grad=True):
    return Tensor(RNG.uniform(lo, hi, size=shape), requires_grad=grad)


def check(build, params):
    err = finite_difference_check(build, params)
    assert err <= TOL, f"finite-difference relative error {err:.3e} > {TOL}"


# --- elementwise and arithmetic -------------------------------------------


def test_fd_add_sub_mul_neg_scale():
    a, b = t((3, 4)), t((3, 4))
    check(lambda: ops.sum_all(ops.add(a, b)), {"a": a, "b": b})
    check(lambda: ops.sum_all(ops.sub(a, b)), {"a": a, "b": b})
    check(lambda: ops.sum_all(ops.mul(a, b)), {"a": a, "b": b})
    check(lambda: ops.sum_all(ops.neg(a)), {"a": a})
    check(lambda: ops.sum_all(ops.scale(a, 2.5)), {"a": a})


def test_fd_add_broadcast():
    a, b = t((3, 4)), t((4,))
    check(lambda: ops.sum_all(ops.add(a, b)), {"a": a, "b": b})
    c = t((1, 4))
    check(lambda: ops.sum_all(ops.mul(a, c)), {"a": a, "c": c})


def test_fd_relu_away_from_kink():
    a = Tensor(np.array([[-0.9, -0.4, 0.3], [0.8, -0.2, 0.6]]), requires_grad=True)
    check(lambda: ops.sum_all(ops.relu(a)), {"a": a})


def test_fd_absolute_away_from_kink():
    a = Tensor(np.array([-0.7, 0.5, -0.3, 0.9]), requires_grad=True)
    check(lambda: ops.sum_all(ops.absolute(a)), {"a": a})


def test_fd_sqrt_positive():
    a = t((3, 3), lo=0.5, hi=2.0)
    check(lambda: ops.sum_all(ops.sqrt(a)), {"a": a})


def test_relu_forward():
    a = Tensor(np.array([-1.0, 0.0, 2.0]))
    np.testing.assert_array_equal(ops.relu(a).data, [0.0, 0.0, 2.0])


# --- shape ops -------------------------------------------------------------


def test_fd_reshape_swapaxes():
    a = t((2, 6))
    check(lambda: ops.sum_all(ops.mul(ops.reshape(a, (3, 4)),
                                      ops.reshape(a, (3, 4)))), {"a": a})
    b = t((2, 3, 4))
    check(lambda: ops.sum_all(ops.mul(ops.swapaxes(b, 1, 2),
                                      ops.swapaxes(b, 1, 2))), {"b": b})


def test_fd_slice_pad():
    a = t((4, 5))
    check(lambda: ops.sum_all(ops.mul(ops.slice_axis(a, 0, 1, 3),
                                      ops.slice_axis(a, 0, 1, 3))), {"a": a})
    check(lambda: ops.sum_all(ops.mul(ops.pad_axis(a, 0, 6),
                                      ops.pad_axis(a, 0, 6))), {"a": a})


def test_pad_then_slice_roundtrip():
    a = t((2, 3))
    out = ops.slice_axis(ops.pad_axis(a, 1, 5), 1, 0, 3)
    np.testing.assert_array_equal(out.data, a.data)


# --- reductions ------------------------------------------------------------


def test_fd_reductions():
    a = t((3, 4))
    check(lambda: ops.sum_all(ops.mul(a, a)), {"a": a})
    check(lambda: ops.mean_all(ops.mul(a, a)), {"a": a})
    check(lambda: ops.sum_all(ops.mul(ops.sum_axis(a, axis=-1),
                                      ops.sum_axis(a, axis=-1))), {"a": a})


# --- matmul and lookup -----------------------------------------------------


def test_fd_matmul_2d_and_batched():
    a, b = t((3, 4)), t((4, 5))
    check(lambda: ops.sum_all(ops.matmul(a, b)), {"a": a, "b": b})
    c, d = t((2, 3, 4)), t((4, 5))
    check(lambda: ops.sum_all(ops.matmul(c, d)), {"c": c, "d": d})
    e = t((2, 4, 5))
    check(lambda: ops.sum_all(ops.matmul(c, e)), {"c": c, "e": e})


def test_matmul_rejects_vectors():
    with pytest.raises(ShapeError):
        ops.matmul(t((3,)), t((3, 2)))


def test_fd_embedding_lookup():
    table = t((7, 4))
    ids = np.array([[0, 3, 3], [6, 1, 0]])
    check(lambda: ops.sum_all(ops.mul(ops.embedding_lookup(table, ids),
                                      ops.embedding_lookup(table, ids))),
          {"table": table})


def test_embedding_repeated_ids_accumulate():
    table = Tensor(np.zeros((3, 2)), requires_grad=True)
    from tonetrans.tensor import gradient_of
    out = ops.sum_all(ops.embedding_lookup(table, np.array([1, 1, 1])))
    grads = gradient_of(out, {"t": table})
    np.testing.assert_array_equal(grads["t"], [[0, 0], [3, 3], [0, 0]])


# --- gradient routing ------------------------------------------------------


def test_stop_gradient_blocks_backward():
    from tonetrans.tensor import gradient_of
    a = Tensor(np.array([2.0, 3.0]), requires_grad=True)
    loss = ops.sum_all(ops.mul(ops.stop_gradient(a), a))
    grads = gradient_of(loss, {"a": a})
    # only the un-stopped factor contributes: d/da sg(a)*a = sg(a)
    np.testing.assert_allclose(grads["a"], a.data)


def test_stop_gradient_forward_identity():
    a = Tensor(np.array([1.0, -2.0]), requires_grad=True)
    np.testing.assert_array_equal(ops.stop_gradient(a).data, a.data)


def test_straight_through_routes_gradient_to_latent():
    from tonetrans.tensor import gradient_of
    latent = Tensor(np.array([1.0, 2.0]), requires_grad=True)
    quantized = Tensor(np.array([10.0, 20.0]), requires_grad=True)
    out = ops.straight_through(latent, quantized)
    np.testing.assert_array_equal(out.data, quantized.data)  # forward: quantized
    loss = ops.sum_all(ops.mul(out, out))
    grads = gradient_of(loss, {"latent": latent, "quantized": quantized})
    np.testing.assert_allclose(grads["latent"], 2 * quantized.data)
    np.testing.assert_array_equal(grads["quantized"], 0.0)


def test_straight_through_shape_mismatch():
    with pytest.raises(ShapeError):
        ops.straight_through(t((2, 3)), t((3, 2)))


# --- normalization ---------------------------------------------------------


def test_l2_normalize_unit_vector_fixed_point():
    v = Tensor(np.array([[0.6, 0.8]]))
    np.testing.assert_allclose(ops.l2_normalize(v).data, [[0.6, 0.8]], atol=1e-12)


def test_l2_normalize_scales_to_unit():
    v = Tensor(np.array([[3.0, 4.0]]))
    np.testing.assert_allclose(ops.l2_normalize(v).data, [[0.6, 0.8]], atol=1e-12)


def test_l2_normalize_zero_row_passes_through():
    v = Tensor(np.array([[0.0, 0.0], [3.0, 4.0]]), requires_grad=True)
    out = ops.l2_normalize(v)
    np.testing.assert_allclose(out.data[0], [0.0, 0.0])
    np.testing.assert_allclose(out.data[1], [0.6, 0.8])


def test_fd_l2_normalize():
    v = t((4, 5), lo=0.2, hi=1.0)
    check(lambda: ops.sum_all(ops.mul(ops.l2_normalize(v),
                                      Tensor(np.arange(20.0).reshape(4, 5)))), {"v": v})


def test_fd_layer_norm():
    x = t((2, 3, 8))
    g = Tensor(RNG.uniform(0.5, 1.5, 8), requires_grad=True)
    b = t((8,))
    probe = Tensor(RNG.uniform(-1, 1, (2, 3, 8)))  # fixed outside the closure
    check(lambda: ops.sum_all(ops.mul(ops.layer_norm(x, g, b), probe)),
          {"x": x, "g": g, "b": b})


def test_layer_norm_constant_rows_give_bias():
    x = Tensor(np.full((2, 4), 3.7))
    g = Tensor(np.ones(4))
    b = Tensor(np.array([0.1, 0.2, 0.3, 0.4]))
    out = ops.layer_norm(x, g, b)
    np.testing.assert_allclose(out.data, np.broadcast_to(b.data, (2, 4)), atol=1e-6)


def test_layer_norm_output_standardized():
    x = t((5, 16))
    out = ops.layer_norm(x, Tensor(np.ones(16)), Tensor(np.zeros(16))).data
    np.testing.assert_allclose(out.mean(axis=-1), 0.0, atol=1e-10)
    np.testing.assert_allclose(out.std(axis=-1), 1.0, atol=1e-3)


# --- softmax and losses ----------------------------------------------------


def test_fd_softmax():
    x = t((3, 6))
    w = Tensor(RNG.uniform(-1, 1, (3, 6)))
    check(lambda: ops.sum_all(ops.mul(ops.softmax(x), w)), {"x": x})


def test_softmax_rows_sum_to_one_and_shift_invariant():
    x = RNG.uniform(-5, 5, (4, 7))
    p1 = ops.softmax(Tensor(x)).data
    p2 = ops.softmax(Tensor(x + 1000.0)).data
    np.testing.assert_allclose(p1.sum(axis=-1), 1.0, atol=1e-12)
    np.testing.assert_allclose(p1, p2, atol=1e-12)


def test_cross_entropy_confident_correct_is_tiny():
    logits = Tensor(np.array([[10.0, -10.0]]))
    loss = ops.cross_entropy(logits, np.array([0]))
    assert loss.data == pytest.approx(np.log1p(np.exp(-20.0)), rel=1e-6)
    assert loss.data == pytest.approx(2.0611536181902037e-9, rel=1e-3)


def test_cross_entropy_uniform_logits():
    logits = Tensor(np.zeros((1, 5)))
    loss = ops.cross_entropy(logits, np.array([3]))
    assert loss.data == pytest.approx(np.log(5.0), rel=1e-12)


def test_cross_entropy_rejects_out_of_range_labels():
    with pytest.raises((ValueError, ShapeError)):
        ops.cross_entropy(Tensor(np.zeros((2, 3))), np.array([0, 3]))


def test_fd_cross_entropy():
    logits = t((4, 6))
    labels = np.array([0, 5, 2, 2])
    check(lambda: ops.cross_entropy(logits, labels), {"logits": logits})


def test_fd_cross_entropy_masked():
    logits = t((2, 3, 5))
    labels = np.array([[0, 1, 2], [3, 4, 0]])
    mask = np.array([[1.0, 1.0, 0.0], [1.0, 0.0, 0.0]])
    check(lambda: ops.cross_entropy(logits, labels, mask=mask), {"logits": logits})


def test_cross_entropy_mask_excludes_positions():
    logits = np.zeros((1, 2, 3))
    logits[0, 1] = [100.0, 0.0, 0.0]  # wrong and confident, but masked out
    labels = np.array([[1, 2]])
    mask = np.array([[1.0, 0.0]])
    loss = ops.cross_entropy(Tensor(logits), labels, mask=mask)
    assert loss.data == pytest.approx(np.log(3.0), rel=1e-12)


def test_fd_mean_abs_error():
    a = t((2, 4, 3))
    b = Tensor(RNG.uniform(-1, 1, (2, 4, 3)))
    check(lambda: ops.mean_abs_error(a, b), {"a": a})


def test_mean_abs_error_value():
    a = Tensor(np.array([[1.0, 2.0], [3.0, 4.0]]))
    b = Tensor(np.array([[0.0, 0.0], [0.0, 0.0]]))
    assert ops.mean_abs_error(a, b).data == pytest.approx(2.5)


def test_mean_abs_error_mask():
    a = Tensor(np.array([[[1.0, 1.0], [99.0, 99.0]]]))
    b = Tensor(np.zeros((1, 2, 2)))
    mask = np.array([[1.0, 0.0]])
    assert ops.mean_abs_error(a, b, mask=mask).data == pytest.approx(1.0)


# --- structured ops --------------------------------------------------------


def test_conv_transpose_length_law():
    x = t((2, 5, 3))
    k = t((4, 3, 6))
    out = ops.conv_transpose_1d(x, k, stride=4)
    assert out.shape == (2, 20, 6)


def test_fd_conv_transpose():
    x, k = t((1, 3, 2)), t((2, 2, 4))
    probe = Tensor(RNG.uniform(-1, 1, (1, 6, 4)))
    check(lambda: ops.sum_all(ops.mul(ops.conv_transpose_1d(x, k, stride=2),
                                      probe)),
          {"x": x, "k": k})


def test_conv_transpose_equals_project_and_unstack():
    # kernel width == stride means each input position independently expands
    x = RNG.uniform(-1, 1, (1, 4, 3))
    k = RNG.uniform(-1, 1, (2, 3, 5))
    out = ops.conv_transpose_1d(Tensor(x), Tensor(k), stride=2).data
    proj = np.einsum("bmc,scd->bmsd", x, k).reshape(1, 8, 5)
    np.testing.assert_allclose(out, proj, atol=1e-12)


def test_fd_multi_head_attention():
    d, h = 8, 2
    x = t((1, 4, d))
    ws = {n: t((d, d)) for n in ("wq", "wk", "wv", "wo")}
    bs = {n: t((d,)) for n in ("bq", "bk", "bv", "bo")}
    probe = Tensor(RNG.uniform(-1, 1, (1, 4, d)))

    def build():
        out = ops.multi_head_attention(
            x, x, ws["wq"], bs["bq"], ws["wk"], bs["bk"],
            ws["wv"], bs["bv"], ws["wo"], bs["bo"], num_heads=h)
        return ops.sum_all(ops.mul(out, probe))

    check(build, {"x": x, **ws, **bs})


def test_attention_mask_blocks_positions():
    d = 4
    rng = np.random.default_rng(7)
    x = Tensor(rng.standard_normal((1, 3, d)))
    eye = Tensor(np.eye(d))
    zero = Tensor(np.zeros(d))
    mask = np.zeros((1, 1, 3, 3))
    mask[..., 2] = ops.NEG_INF  # nobody may attend to position 2
    out = ops.multi_head_attention(x, x, eye, zero, eye, zero, eye, zero,
                                   eye, zero, num_heads=1, mask=mask)
    x2 = x.data.copy()
    x2[0, 2] = 999.0  # perturbing the blocked position changes nothing
    out2 = ops.multi_head_attention(
        Tensor(x2), Tensor(x2), eye, zero, eye, zero, eye, zero, eye, zero,
        num_heads=1, mask=mask)
    np.testing.assert_allclose(out.data[0, :2], out2.data[0, :2], atol=1e-9)
