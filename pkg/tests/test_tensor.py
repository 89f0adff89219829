import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from tristream import tensor as tn
from tristream.gradcheck import check
from tristream.tensor import NonFiniteError, ShapeError, Tensor

from oracles import conv3d_loops, matmul_loops, maxpool3d_loops


def leaf(arr, dtype=np.float64):
    return Tensor(np.asarray(arr), requires_grad=True, dtype=dtype)


# ---------------------------------------------------------------------------
# storage
# ---------------------------------------------------------------------------


def test_default_storage_is_float32():
    assert Tensor([1.0, 2.0]).data.dtype == np.float32


def test_precision_context_switches_and_restores():
    with tn.precision(np.float64):
        assert Tensor([1.0]).data.dtype == np.float64
    assert Tensor([1.0]).data.dtype == np.float32


def test_nonfinite_leaf_rejected():
    with pytest.raises(NonFiniteError):
        Tensor([1.0, np.nan])


def test_nonfinite_op_output_rejected():
    x = Tensor([1e30, 1e30])
    with np.errstate(over="ignore"), pytest.raises(NonFiniteError, match="mul"):
        tn.mul(x, x)


def test_no_grad_builds_no_graph():
    x = leaf([1.0, 2.0])
    with tn.no_grad():
        y = tn.mul(x, x)
    assert not y.requires_grad and y._parents == ()


# ---------------------------------------------------------------------------
# conv3d
# ---------------------------------------------------------------------------


def test_conv3d_zero_input_gives_zero():
    rng = np.random.default_rng(0)
    x = Tensor(np.zeros((1, 2, 3, 4, 4)))
    w = Tensor(rng.standard_normal((3, 2, 3, 3, 3)))
    out = tn.conv3d(x, w, Tensor(np.zeros(3)), padding=1)
    assert out.shape == (1, 3, 3, 4, 4)
    assert not out.data.any()


def test_conv3d_unit_kernel():
    v, w, b = 1.5, -2.0, 0.25
    out = tn.conv3d(Tensor(np.full((1, 1, 1, 1, 1), v)), Tensor(np.full((1, 1, 1, 1, 1), w)), Tensor([b]))
    assert out.data.item() == pytest.approx(v * w + b)


def test_conv3d_matches_loop_oracle_reference_case():
    rng = np.random.default_rng(1)
    x = rng.standard_normal((1, 2, 4, 5, 5))
    w = rng.standard_normal((3, 2, 3, 3, 3))
    b = rng.standard_normal(3)
    with tn.precision(np.float64):
        out = tn.conv3d(Tensor(x), Tensor(w), Tensor(b), stride=(1, 2, 2), padding=(1, 1, 1))
    ref = conv3d_loops(x, w, b, (1, 2, 2), (1, 1, 1))
    assert out.shape == ref.shape == (1, 3, 4, 3, 3)
    np.testing.assert_allclose(out.data, ref, atol=1e-5)


def test_conv3d_dilation_matches_oracle():
    rng = np.random.default_rng(2)
    x = rng.standard_normal((2, 2, 5, 6, 6))
    w = rng.standard_normal((2, 2, 1, 3, 3))
    with tn.precision(np.float64):
        out = tn.conv3d(Tensor(x), Tensor(w), padding=(0, 2, 2), dilation=(1, 2, 2))
    np.testing.assert_allclose(out.data, conv3d_loops(x, w, None, (1, 1, 1), (0, 2, 2), (1, 2, 2)), atol=1e-10)


def test_conv3d_channel_mismatch_names_axis():
    with pytest.raises(ShapeError, match="channel axis"):
        tn.conv3d(Tensor(np.zeros((1, 2, 3, 3, 3))), Tensor(np.zeros((1, 3, 1, 1, 1))))


def test_conv3d_kernel_larger_than_padded_input():
    with pytest.raises(ShapeError, match="axis W"):
        tn.conv3d(Tensor(np.zeros((1, 1, 3, 3, 2))), Tensor(np.zeros((1, 1, 1, 1, 3))))


def test_conv3d_output_size_formula():
    # floor((T + 2p - d(k-1) - 1)/s) + 1 per axis
    assert tn.conv_output_size((9, 10, 11), (3, 3, 3), (2, 2, 2), (1, 0, 2), (1, 2, 1)) == (5, 3, 7)


# ---------------------------------------------------------------------------
# maxpool3d
# ---------------------------------------------------------------------------


def test_maxpool_2x2_picks_max():
    x = Tensor(np.array([[1.0, 2.0], [3.0, 4.0]]).reshape(1, 1, 1, 2, 2))
    assert tn.maxpool3d(x, (1, 2, 2)).data.item() == 4.0


def test_maxpool_constant_input_grad_to_first_index():
    x = leaf(np.full((1, 1, 2, 2, 2), 3.0))
    out = tn.maxpool3d(x, 2)
    assert out.data.item() == 3.0
    out.backward()
    expected = np.zeros(8)
    expected[0] = 1.0
    np.testing.assert_array_equal(x.grad.reshape(-1), expected)


def test_maxpool_matches_exhaustive_window_oracle():
    rng = np.random.default_rng(3)
    x = rng.standard_normal((1, 1, 4, 4, 4))
    out = tn.maxpool3d(leaf(x), 2)
    ref, _ = maxpool3d_loops(x, (2, 2, 2), (2, 2, 2))
    np.testing.assert_allclose(out.data, ref)


def test_maxpool_backward_routes_to_oracle_argmax():
    rng = np.random.default_rng(4)
    x = rng.integers(0, 3, size=(2, 2, 3, 4, 5)).astype(np.float64)  # many ties
    t = leaf(x)
    out = tn.maxpool3d(t, (2, 2, 2), (1, 2, 1))
    g = rng.standard_normal(out.shape)
    out.backward(g)
    _, arg = maxpool3d_loops(x, (2, 2, 2), (1, 2, 1))
    ref = np.zeros_like(x)
    for idx in np.ndindex(arg.shape):
        n, c = idx[:2]
        ref[n, c].reshape(-1)[arg[idx]] += g[idx]
    np.testing.assert_allclose(t.grad, ref)


# ---------------------------------------------------------------------------
# matmul
# ---------------------------------------------------------------------------


def test_matmul_identity():
    x = np.arange(12.0).reshape(3, 4)
    np.testing.assert_array_equal(tn.matmul(Tensor(np.eye(3)), Tensor(x)).data, x)


def test_matmul_scalars():
    assert tn.matmul(Tensor([[2.0]]), Tensor([[-3.5]])).data.item() == -7.0


def test_matmul_loop_oracle():
    rng = np.random.default_rng(5)
    a, b = rng.standard_normal((3, 4)), rng.standard_normal((4, 2))
    with tn.precision(np.float64):
        out = tn.matmul(Tensor(a), Tensor(b))
    np.testing.assert_allclose(out.data, matmul_loops(a, b), atol=1e-6)


def test_matmul_inner_mismatch():
    with pytest.raises(ShapeError):
        tn.matmul(Tensor(np.zeros((2, 3))), Tensor(np.zeros((4, 2))))


def test_batched_matmul_with_shared_matrix_grad():
    rng = np.random.default_rng(6)
    a, b = leaf(rng.standard_normal((2, 3, 4))), leaf(rng.standard_normal((4, 5)))
    assert check(tn.matmul, [a, b], rng) < 1e-6


# ---------------------------------------------------------------------------
# softmax / layernorm / elementwise / dropout
# ---------------------------------------------------------------------------


def test_softmax_uniform():
    np.testing.assert_allclose(tn.softmax(Tensor(np.zeros(5))).data, np.full(5, 0.2), atol=1e-7)


def test_softmax_analytic_pair():
    with tn.precision(np.float64):
        out = tn.softmax(Tensor([0.0, math.log(3.0)]))
    np.testing.assert_allclose(out.data, [0.25, 0.75], atol=1e-12)


def test_softmax_shift_invariant():
    x = np.random.default_rng(7).standard_normal((3, 6))
    with tn.precision(np.float64):
        a = tn.softmax(Tensor(x), axis=1).data
        b = tn.softmax(Tensor(x + 1000.0), axis=1).data
    np.testing.assert_allclose(a, b, atol=1e-6)


@settings(max_examples=50, deadline=None)
@given(st.lists(st.floats(-50, 50), min_size=1, max_size=12), st.floats(-500, 500))
def test_softmax_is_simplex_and_shift_invariant(values, shift):
    with tn.precision(np.float64):
        p = tn.softmax(Tensor(values)).data
        q = tn.softmax(Tensor(np.asarray(values) + shift)).data
    assert (p >= 0).all()
    assert abs(p.sum() - 1.0) <= 1e-6
    np.testing.assert_allclose(p, q, atol=1e-6)


def test_layernorm_constant_slice_is_zero():
    out = tn.layernorm(Tensor(np.full((2, 4), 7.0)), Tensor(np.ones(4)), Tensor(np.zeros(4)))
    assert np.all(out.data == 0.0)


def test_layernorm_two_values():
    with tn.precision(np.float64):
        out = tn.layernorm(Tensor([1.0, 3.0]), Tensor(np.ones(2)), Tensor(np.zeros(2)), eps=1e-12)
    np.testing.assert_allclose(out.data, [-1.0, 1.0], atol=1e-9)


def test_layernorm_definitional_oracle():
    rng = np.random.default_rng(8)
    x, g, s = rng.standard_normal((3, 5)), rng.standard_normal(5), rng.standard_normal(5)
    with tn.precision(np.float64):
        out = tn.layernorm(Tensor(x), Tensor(g), Tensor(s))
    ref = np.zeros_like(x)
    for r in range(3):
        mu = sum(x[r]) / 5
        var = sum((v - mu) ** 2 for v in x[r]) / 5
        for j in range(5):
            ref[r, j] = (x[r, j] - mu) / math.sqrt(var + 1e-5) * g[j] + s[j]
    np.testing.assert_allclose(out.data, ref, atol=1e-6)


def test_elementwise_analytic_values():
    assert tn.relu(Tensor([-1.0])).data.item() == 0.0
    assert tn.sigmoid(Tensor([0.0])).data.item() == 0.5
    assert tn.tanh(Tensor([0.0])).data.item() == 0.0


def test_add_shape_mismatch_names_axis():
    with pytest.raises(ShapeError, match="axis 1"):
        tn.add(Tensor(np.zeros((2, 3))), Tensor(np.zeros((2, 4))))


def test_dropout_identity_cases():
    x = Tensor(np.random.default_rng(9).standard_normal(100))
    rng = np.random.default_rng(0)
    np.testing.assert_array_equal(tn.dropout(x, 0.0, True, rng).data, x.data)
    np.testing.assert_array_equal(tn.dropout(x, 0.7, False, rng).data, x.data)


def test_dropout_keep_fraction_and_scale():
    x = Tensor(np.ones(100_000))
    out = tn.dropout(x, 0.5, True, np.random.default_rng(123)).data
    kept = out != 0
    assert abs(kept.mean() - 0.5) <= 0.01
    np.testing.assert_allclose(out[kept], 2.0)


# ---------------------------------------------------------------------------
# backward
# ---------------------------------------------------------------------------


def test_backward_sum_gives_ones():
    x = leaf(np.random.default_rng(0).standard_normal((3, 4)))
    tn.sum(x).backward()
    np.testing.assert_array_equal(x.grad, np.ones((3, 4)))


def test_backward_half_square_gives_x():
    x = leaf(np.random.default_rng(1).standard_normal(6))
    tn.scale(tn.sum(tn.mul(x, x)), 0.5).backward()
    np.testing.assert_allclose(x.grad, x.data)


def test_fanout_accumulates():
    x = leaf([1.0, -2.0, 3.0])
    y = tn.add(tn.mul(x, x), tn.scale(x, 3.0))  # x feeds three consumers
    tn.sum(y).backward()
    np.testing.assert_allclose(x.grad, 2 * x.data + 3.0)


def test_backward_requires_scalar():
    with pytest.raises(ShapeError):
        tn.mul(leaf([1.0, 2.0]), leaf([1.0, 2.0])).backward()


def test_composite_graph_vs_finite_differences():
    rng = np.random.default_rng(11)
    x = leaf(rng.standard_normal((2, 2, 2, 4, 4)))
    w = leaf(rng.standard_normal((3, 2, 1, 3, 3)))
    fc = leaf(rng.standard_normal((3 * 2 * 2 * 2, 4)))
    labels = np.array([1, 3])

    def f(x, w, fc):
        h = tn.maxpool3d(tn.relu(tn.conv3d(x, w, padding=(0, 1, 1))), (1, 2, 2))
        return tn.cross_entropy(tn.matmul(tn.reshape(h, (2, -1)), fc), labels)

    assert check(f, [x, w, fc], rng) <= 3e-3


def test_cross_entropy_value():
    logits = np.array([[1.0, 2.0, 0.5], [0.1, -1.0, 0.3]])
    labels = np.array([2, 0])
    with tn.precision(np.float64):
        loss = tn.cross_entropy(Tensor(logits), labels).data.item()
    ref = np.mean([-(logits[i, labels[i]] - math.log(sum(math.exp(v) for v in logits[i]))) for i in range(2)])
    assert loss == pytest.approx(ref, abs=1e-12)


def test_bce_with_logits_value():
    z, y = np.array([[0.3, -2.0]]), np.array([[1.0, 0.0]])
    with tn.precision(np.float64):
        loss = tn.bce_with_logits(Tensor(z), y).data.item()
    s = 1 / (1 + np.exp(-z))
    assert loss == pytest.approx(float(np.mean(-(y * np.log(s) + (1 - y) * np.log(1 - s)))), abs=1e-12)
