import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra import numpy as hnp

from tsdistill import autograd as ag
from tsdistill.autograd import Tensor

from gradcheck import OPS, TOL, check_op

SEEDS = range(20)


@pytest.mark.parametrize("name", sorted(OPS))
def test_gradients_match_finite_differences(name):
    worst = max(check_op(name, seed) for seed in SEEDS)
    assert worst < TOL, f"{name}: max abs diff {worst:.2e}"


def test_matmul_examples():
    eye = Tensor([[1.0, 0.0], [0.0, 1.0]])
    b = Tensor([[3.0, 4.0], [5.0, 6.0]])
    np.testing.assert_array_equal((eye @ b).data, b.data)
    assert (Tensor([[1.0, 2.0]]) @ Tensor([[3.0], [4.0]])).data.tolist() == [[11.0]]


def test_matmul_shape_mismatch():
    with pytest.raises(ValueError, match="mismatch"):
        Tensor(np.ones((2, 3))) @ Tensor(np.ones((2, 3)))


def test_conv1d_box_filter_on_impulse():
    x = Tensor(np.array([0, 0, 1, 0, 0], np.float32).reshape(1, 1, 5))
    w = Tensor(np.ones((1, 1, 3), np.float32))
    out = ag.conv1d_same(x, w, Tensor(np.zeros(1)))
    assert out.data.ravel().tolist() == [0, 1, 1, 1, 0]


def test_conv1d_delta_kernel_is_identity():
    x = np.random.default_rng(0).standard_normal((2, 1, 9)).astype(np.float32)
    w = Tensor(np.array([0, 1, 0], np.float32).reshape(1, 1, 3))
    out = ag.conv1d_same(Tensor(x), w, Tensor(np.zeros(1)))
    np.testing.assert_array_equal(out.data, x)


def test_conv1d_even_kernel_rejected():
    with pytest.raises(ValueError, match="odd"):
        ag.conv1d_same(Tensor(np.ones((1, 1, 5))), Tensor(np.ones((1, 1, 2))), Tensor(np.zeros(1)))


def test_layer_norm_examples():
    one, zero = Tensor(np.ones(4)), Tensor(np.zeros(4))
    out = ag.layer_norm(Tensor(np.full((1, 4), 3.0)), one, zero, 1e-5)
    np.testing.assert_array_equal(out.data, 0.0)
    with ag.precision(np.float64):
        out = ag.layer_norm(Tensor([[1.0, 3.0]]), Tensor(np.ones(2)), Tensor(np.zeros(2)), 1e-12)
    np.testing.assert_allclose(out.data, [[-1.0, 1.0]], atol=1e-9)


def test_softmax_examples():
    np.testing.assert_allclose(ag.softmax(Tensor(np.zeros(3))).data, 1 / 3, atol=1e-7)
    x = np.array([3.0, -2.0], np.float32)
    np.testing.assert_allclose(ag.softmax(Tensor(x + 1000)).data, ag.softmax(Tensor(x)).data, atol=1e-7)
    for bad in (0.0, -1.0):
        with pytest.raises(ValueError, match="temperature"):
            ag.softmax(Tensor(x), temperature=bad)


@settings(max_examples=50, deadline=None)
@given(hnp.arrays(np.float64, hnp.array_shapes(min_dims=1, max_dims=3, max_side=6),
                  elements=st.floats(-30, 30)),
       st.floats(0.05, 5.0))
def test_softmax_rows_sum_to_one_and_match_log(x, tau):
    with ag.precision(np.float64):
        p = ag.softmax(Tensor(x), temperature=tau).data
        lp = ag.log_softmax(Tensor(x), temperature=tau).data
    np.testing.assert_allclose(p.sum(axis=-1), 1.0, atol=1e-6)
    assert np.all(np.isfinite(lp))
    well_scaled = p > 1e-30
    np.testing.assert_allclose(lp[well_scaled], np.log(p[well_scaled]), atol=1e-5)


def test_gelu_and_resize_examples():
    assert ag.gelu(Tensor(np.zeros(1))).data[0] == 0.0
    out = ag.linear_resize(Tensor(np.array([[0.0, 1.0, 2.0, 3.0]])), 7)
    np.testing.assert_allclose(out.data, [[0, 0.5, 1, 1.5, 2, 2.5, 3]], atol=1e-7)
    x = Tensor(np.arange(5.0).reshape(1, 5))
    assert ag.linear_resize(x, 5) is x
    with pytest.raises(ValueError):
        ag.linear_resize(x, 1)


@settings(max_examples=40, deadline=None)
@given(st.integers(2, 40), st.integers(2, 60), st.integers(0, 10_000))
def test_resize_preserves_endpoints_and_matches_numpy(n_in, n_out, seed):
    x = np.random.default_rng(seed).standard_normal((2, n_in))
    with ag.precision(np.float64):
        out = ag.linear_resize(Tensor(x), n_out).data
    np.testing.assert_allclose(out[:, 0], x[:, 0], atol=1e-12)
    np.testing.assert_allclose(out[:, -1], x[:, -1], atol=1e-12)
    np.testing.assert_allclose(out, ag.resize_array(x, n_out), atol=1e-12)
    grid = np.linspace(0, n_in - 1, n_out)
    np.testing.assert_allclose(out[0], np.interp(grid, np.arange(n_in), x[0]), atol=1e-12)


def test_dropout_train_and_eval():
    x = Tensor(np.ones((200, 50), np.float32))
    assert ag.dropout(x, 0.1, training=False) is x
    a = ag.dropout(x, 0.1, training=True, rng=np.random.default_rng(3)).data
    b = ag.dropout(x, 0.1, training=True, rng=np.random.default_rng(3)).data
    np.testing.assert_array_equal(a, b)
    kept = a[a != 0]
    np.testing.assert_allclose(kept, 1 / 0.9, rtol=1e-6)
    assert abs((a == 0).mean() - 0.1) < 0.01
    with pytest.raises(ValueError):
        ag.dropout(x, 0.1, training=True)
    with pytest.raises(ValueError):
        ag.dropout(x, 1.0, training=True, rng=np.random.default_rng(0))


def test_backward_twice_raises():
    x = Tensor(np.ones(3), requires_grad=True)
    y = (x * x).sum()
    y.backward()
    np.testing.assert_array_equal(x.grad, 2.0)
    with pytest.raises(ag.GraphConsumed):
        y.backward()


def test_gradients_accumulate_across_graphs():
    x = Tensor(np.array([1.0, 2.0]), requires_grad=True)
    (x * 3.0).sum().backward()
    (x * x).sum().backward()
    np.testing.assert_allclose(x.grad, [3 + 2, 3 + 4])


def test_backward_order_is_reverse_recording_order():
    x = Tensor(np.ones(2), requires_grad=True)
    a = ag.exp(x)
    b = a * 2.0
    c = ag.tanh(a)
    out = (b + c).sum()
    visited = []
    for t in (a, b, c, out):
        node = t._node
        node.backward = (lambda f, seq: lambda g: (visited.append(seq), f(g))[1])(node.backward, node.seq)
    out.backward()
    assert len(visited) >= 4
    assert visited == sorted(visited, reverse=True)


def test_no_grad_records_nothing():
    x = Tensor(np.ones(2), requires_grad=True)
    with ag.no_grad():
        y = x * 2.0
    assert not y.requires_grad and y.is_leaf


def test_sum_accumulates_in_float64():
    x = np.full(100_000, 0.1, np.float32)
    out = ag.tsum(Tensor(x)).item()
    assert abs(out - 0.1 * len(x)) < 1e-2


def test_norm_subgradient_at_zero():
    x = Tensor(np.zeros((1, 3)), requires_grad=True)
    ag.norm(x, axis=-1).sum().backward()
    np.testing.assert_array_equal(x.grad, 0.0)


def test_ops_keep_finite_outputs():
    rng = np.random.default_rng(0)
    big = Tensor(rng.standard_normal((4, 8)).astype(np.float32) * 1e4)
    for out in (ag.softmax(big), ag.log_softmax(big), ag.gelu(big), ag.tanh(big)):
        assert np.all(np.isfinite(out.data))
