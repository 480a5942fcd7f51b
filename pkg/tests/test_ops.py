import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from octnet import ops
from octnet.errors import ShapeError, SpecError
from oracles import naive_conv2d, naive_depthwise, naive_matmul


def rel_err(a, b):
    return np.max(np.abs(a - b)) / max(np.max(np.abs(b)), 1e-12)


def test_conv_all_ones_sums_to_nine():
    out = ops.conv2d(np.ones((1, 3, 3, 1)), np.ones((3, 3, 1, 1)), np.zeros(1))
    assert out.shape == (1, 1, 1, 1)
    assert out.item() == 9.0


def test_conv_identity_kernel(rng):
    x = rng.standard_normal((2, 5, 4, 3))
    k = np.eye(3).reshape(1, 1, 3, 3)
    np.testing.assert_array_equal(ops.conv2d(x, k, np.zeros(3)), x)
    x32 = x.astype(np.float32)
    out = ops.conv2d(x32, k.astype(np.float32))
    assert rel_err(out, x32) <= 1e-6


def test_conv_same_padding_matches_naive(rng):
    x = rng.standard_normal((1, 8, 8, 3))
    w = rng.standard_normal((3, 3, 3, 4))
    b = rng.standard_normal(4)
    out = ops.conv2d(x, w, b, 1, "same")
    assert out.shape == (1, 8, 8, 4)
    assert rel_err(out, naive_conv2d(x, w, b, 1, "same")) < 1e-5


@settings(max_examples=100, deadline=None)
@given(st.data())
def test_conv_matches_naive_oracle(data):
    seed = data.draw(st.integers(0, 2**31 - 1))
    r = np.random.default_rng(seed)
    k = data.draw(st.integers(1, 4))
    stride = data.draw(st.integers(1, 3))
    pad = data.draw(st.sampled_from(["valid", "same"]))
    h = data.draw(st.integers(k, 8))
    w = data.draw(st.integers(k, 8))
    cin, cout = data.draw(st.integers(1, 4)), data.draw(st.integers(1, 4))
    x = r.standard_normal((data.draw(st.integers(1, 2)), h, w, cin))
    kern = r.standard_normal((k, k, cin, cout))
    b = r.standard_normal(cout)
    assert rel_err(ops.conv2d(x, kern, b, stride, pad), naive_conv2d(x, kern, b, stride, pad)) < 1e-5


def test_conv_shape_mismatch_names_both_shapes():
    with pytest.raises(ShapeError, match=r"\(1, 4, 4, 2\).*\(3, 3, 3, 1\)"):
        ops.conv2d(np.zeros((1, 4, 4, 2)), np.zeros((3, 3, 3, 1)))


def test_conv_kernel_larger_than_input():
    with pytest.raises(SpecError):
        ops.conv2d(np.zeros((1, 2, 2, 1)), np.zeros((3, 3, 1, 1)))


@given(st.integers(1, 32), st.integers(1, 32), st.integers(1, 32))
def test_valid_output_dim_matches_enumeration(size, k, s):
    # count window start positions that fit
    starts = [p for p in range(0, size, s) if p + k <= size]
    if not starts:
        with pytest.raises(SpecError):
            ops.pad_amounts(size, k, s, "valid")
    else:
        assert ops.pad_amounts(size, k, s, "valid")[0] == len(starts) == ops.valid_output_dim(size, k, s)


@given(st.integers(1, 32), st.integers(1, 7))
def test_same_padding_stride1_keeps_size(size, k):
    out, before, after = ops.pad_amounts(size, k, 1, "same")
    assert out == size
    assert after - before in (0, 1)


def test_separable_double_identity(rng):
    x = rng.standard_normal((1, 5, 5, 3))
    pw = np.eye(3).reshape(1, 1, 3, 3)
    dw = np.ones((1, 1, 3, 1))
    for order in ("pointwise_first", "depthwise_first"):
        np.testing.assert_allclose(ops.depthwise_separable_conv(x, pw, dw, order), x, rtol=0, atol=1e-12)


def test_separable_constant_input_gives_nine_c():
    x = np.full((1, 6, 6, 2), 0.7)
    out = ops.depthwise_separable_conv(x, np.eye(2).reshape(1, 1, 2, 2), np.ones((3, 3, 2, 1)),
                                       "pointwise_first", padding="valid")
    np.testing.assert_allclose(out, 9 * 0.7)


@settings(max_examples=100, deadline=None)
@given(st.integers(0, 2**31 - 1), st.sampled_from(["pointwise_first", "depthwise_first"]),
       st.integers(1, 2), st.sampled_from(["valid", "same"]))
def test_separable_equals_composition(seed, order, stride, pad):
    r = np.random.default_rng(seed)
    cin, cm = int(r.integers(1, 4)), int(r.integers(1, 4))
    h, w = int(r.integers(3, 9)), int(r.integers(3, 9))
    x = r.standard_normal((1, h, w, cin))
    pw = r.standard_normal((1, 1, cin, cm))
    if order == "pointwise_first":
        dw = r.standard_normal((3, 3, cm, 1))
        expect = naive_depthwise(naive_conv2d(x, pw, None, 1, "valid"), dw, stride, pad)
        composed = ops.depthwise_conv2d(ops.conv2d(x, pw), dw, None, stride, pad)
    else:
        dw = r.standard_normal((3, 3, cin, 1))
        expect = naive_conv2d(naive_depthwise(x, dw, stride, pad), pw, None, 1, "valid")
        composed = ops.conv2d(ops.depthwise_conv2d(x, dw, None, stride, pad), pw)
    got = ops.depthwise_separable_conv(x, pw, dw, order, stride, pad)
    assert rel_err(got, expect) < 1e-5
    assert rel_err(got, composed) < 1e-12


def test_separable_channel_chain_mismatch():
    with pytest.raises(ShapeError, match="channel chain"):
        ops.depthwise_separable_conv(np.zeros((1, 4, 4, 2)), np.zeros((1, 1, 2, 3)), np.zeros((3, 3, 2, 1)),
                                     "pointwise_first")


def test_max_pool_of_four():
    out = ops.max_pool2d(np.array([1.0, 2, 3, 4]).reshape(1, 2, 2, 1), 2, 2)
    assert out.ravel().tolist() == [4.0]


def test_max_pool_constant():
    np.testing.assert_array_equal(ops.max_pool2d(np.full((1, 6, 6, 2), 3.5), 2), np.full((1, 3, 3, 2), 3.5))


def test_max_pool_invalid_spec():
    with pytest.raises(SpecError):
        ops.max_pool2d(np.zeros((1, 1, 1, 1)), 2, 2)


def test_vanilla_shape_chain_to_7x7():
    x = np.zeros((1, 150, 150, 1))
    for _ in range(4):
        x = ops.conv2d(x, np.zeros((3, 3, 1, 1)))
        x = ops.max_pool2d(x, 2, 2)
    assert x.shape[1:3] == (7, 7)


@given(st.integers(0, 10_000), st.integers(1, 3), st.integers(1, 3))
def test_max_pool_bounds(seed, size, stride):
    x = np.random.default_rng(seed).standard_normal((1, 7, 7, 2))
    out = ops.max_pool2d(x, size, stride)
    assert out.max() <= x.max()
    for i in range(out.shape[1]):
        for j in range(out.shape[2]):
            win = x[:, i * stride:i * stride + size, j * stride:j * stride + size, :]
            np.testing.assert_array_equal(out[:, i, j, :], win.max(axis=(1, 2)))


def test_max_pool_tie_goes_to_first():
    x = np.ones((1, 2, 2, 1))
    out = ops.max_pool2d(x, 2)
    g = ops.max_pool2d_backward(x, out, np.ones_like(out), 2)
    assert g.ravel().tolist() == [1.0, 0.0, 0.0, 0.0]


def test_dense_identity_and_bias(rng):
    x = rng.standard_normal((3, 4))
    np.testing.assert_array_equal(ops.dense(x, np.eye(4), np.zeros(4)), x)
    b = np.array([1.0, -2.0, 3.0])
    np.testing.assert_array_equal(ops.dense(x, np.zeros((4, 3)), b), np.tile(b, (3, 1)))


def test_dense_matches_naive(rng):
    a, b = rng.standard_normal((4, 6)), rng.standard_normal((6, 3))
    np.testing.assert_allclose(ops.dense(a, b), naive_matmul(a, b), atol=1e-6)


def test_dense_mismatch():
    with pytest.raises(ShapeError):
        ops.dense(np.zeros((2, 3)), np.zeros((4, 2)))


def test_activation_definitions():
    assert ops.activation(np.array([-1.0, 0, 2]), "relu").tolist() == [0, 0, 2]
    assert ops.activation(np.array([7.0, 3, -1]), "relu6").tolist() == [6, 3, 0]
    np.testing.assert_allclose(ops.activation(np.zeros(4), "softmax"), [0.25] * 4)


@given(st.integers(0, 10_000), st.floats(-50, 50))
def test_softmax_normalized_and_shift_invariant(seed, shift):
    x = np.random.default_rng(seed).standard_normal((3, 5)) * 10
    s = ops.softmax(x)
    assert np.all(s > 0)
    np.testing.assert_allclose(s.sum(axis=1), 1.0, atol=1e-6)
    np.testing.assert_allclose(ops.softmax(x + shift), s, atol=1e-6)


def test_softmax_stable_for_huge_logits():
    s = ops.softmax(np.array([[1000.0, 0.0, -1000.0]]))
    assert np.isfinite(s).all()
    assert s[0, 0] == pytest.approx(1.0)


def test_check_finite_reports_index():
    x = np.zeros((2, 3))
    x[1, 2] = np.nan
    with pytest.raises(Exception, match=r"\(1, 2\)"):
        ops.check_finite(x)


def test_conv_batch_independence(rng):
    # each batch element must not depend on the others
    x = rng.standard_normal((3, 6, 6, 2))
    k = rng.standard_normal((3, 3, 2, 2))
    full = ops.conv2d(x, k, None, 1, "same")
    for i in range(3):
        np.testing.assert_array_equal(full[i:i + 1], ops.conv2d(x[i:i + 1], k, None, 1, "same"))
