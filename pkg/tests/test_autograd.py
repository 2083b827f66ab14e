import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from adaptseg import autograd as ag
from adaptseg.autograd import DimensionError, Tensor
from adaptseg.gradcheck import finite_diff_check


def leaf(x):
    return Tensor(np.asarray(x, dtype=np.float64), requires_grad=True)


# -- matmul ----------------------------------------------------------------------------


def test_matmul_identity_and_zero():
    a = Tensor(np.array([[1.5, -2.0], [0.25, 4.0]]))
    assert np.array_equal(ag.matmul(a, Tensor(np.eye(2))).data, a.data)
    assert np.array_equal(ag.matmul(a, Tensor(np.zeros((2, 2)))).data, np.zeros((2, 2)))


def test_matmul_hand_example():
    out = ag.matmul(Tensor(np.array([[1.0, 2], [3, 4]])), Tensor(np.array([[5.0, 6], [7, 8]])))
    assert out.data.tolist() == [[19, 22], [43, 50]]


def test_matmul_batched_matches_loop():
    rng = np.random.default_rng(0)
    a, b = rng.normal(size=(3, 2, 4, 5)), rng.normal(size=(5, 6))
    out = ag.matmul(Tensor(a), Tensor(b)).data
    for i in range(3):
        for j in range(2):
            np.testing.assert_allclose(out[i, j], a[i, j] @ b, rtol=1e-13)


def test_matmul_shape_error_names_both_shapes():
    with pytest.raises(DimensionError, match=r"\(2, 3\).*\(4, 5\)"):
        ag.matmul(Tensor(np.zeros((2, 3))), Tensor(np.zeros((4, 5))))


# -- softmax / layer norm / relu ------------------------------------------------------------


def test_softmax_constant_is_uniform():
    np.testing.assert_allclose(ag.softmax(Tensor(np.full(4, 7.0))).data, np.full(4, 0.25))


def test_softmax_two_values():
    np.testing.assert_allclose(ag.softmax(Tensor(np.array([0.0, np.log(2.0)]))).data, [1 / 3, 2 / 3], rtol=1e-14)


@settings(max_examples=200, deadline=None)
@given(arrays(np.float64, st.tuples(st.integers(1, 4), st.integers(1, 6)), elements=st.floats(-50, 50)), st.integers(0, 1))
def test_softmax_sums_to_one(x, axis):
    s = ag.softmax(Tensor(x), axis=axis).data.sum(axis=axis)
    assert np.all(np.abs(s - 1.0) <= 1e-12)


def test_layer_norm_constant_slice_is_zero():
    out = ag.layer_norm(Tensor(np.full((2, 5), 3.0)), Tensor(np.ones(5)), Tensor(np.zeros(5)))
    assert np.array_equal(out.data, np.zeros((2, 5)))


def test_layer_norm_two_values():
    out = ag.layer_norm(Tensor(np.array([1.0, 3.0])), Tensor(np.ones(2)), Tensor(np.zeros(2)), eps=1e-12)
    np.testing.assert_allclose(out.data, [-1.0, 1.0], rtol=1e-10)


def test_layer_norm_zero_gamma_gives_beta():
    beta = np.array([0.5, -1.0, 2.0])
    out = ag.layer_norm(Tensor(np.random.default_rng(1).normal(size=(4, 3))), Tensor(np.zeros(3)), Tensor(beta))
    assert np.array_equal(out.data, np.broadcast_to(beta, (4, 3)))


def test_layer_norm_default_eps():
    x = np.array([0.0, 1.0])
    out = ag.layer_norm(Tensor(x), Tensor(np.ones(2)), Tensor(np.zeros(2))).data
    np.testing.assert_allclose(out, (x - 0.5) / np.sqrt(0.25 + 1e-5), rtol=1e-14)


def test_relu_definition():
    assert ag.relu(Tensor(np.array([-1.0, 0.0, 2.0]))).data.tolist() == [0, 0, 2]
    x = np.array([0.5, 3.0, 1e-9])
    assert np.array_equal(ag.relu(Tensor(x)).data, x)


# -- transpose ------------------------------------------------------------------------------


def test_transpose_identity_perm():
    x = np.arange(24.0).reshape(2, 3, 4)
    assert np.array_equal(ag.transpose_axes(Tensor(x), (0, 1, 2)).data, x)


def test_transpose_shape_law():
    assert ag.transpose_axes(Tensor(np.zeros((2, 3, 4))), (1, 0, 2)).shape == (3, 2, 4)


def test_transpose_inverse_roundtrip():
    x = np.random.default_rng(0).normal(size=(3, 4, 5))
    perm = (2, 0, 1)
    inv = tuple(np.argsort(perm))
    back = ag.transpose_axes(ag.transpose_axes(Tensor(x), perm), inv).data
    assert np.array_equal(back, x)


def test_transpose_is_a_copy():
    x = Tensor(np.arange(6.0).reshape(2, 3))
    y = ag.transpose_axes(x, (1, 0))
    assert y.data.flags["C_CONTIGUOUS"]
    assert not np.shares_memory(x.data, y.data)


@pytest.mark.parametrize("perm", [(0, 0, 1), (0, 1), (0, 1, 3)])
def test_transpose_invalid_perm(perm):
    with pytest.raises((DimensionError, ValueError)):
        ag.transpose_axes(Tensor(np.zeros((2, 3, 4))), perm)


# -- backward -------------------------------------------------------------------------------


def test_backward_sum_gives_ones():
    x = leaf(np.random.default_rng(0).normal(size=(3, 2)))
    ag.backward(ag.sum_(x))
    assert np.array_equal(x.grad, np.ones((3, 2)))


def test_backward_square_at_three():
    x = leaf([3.0])
    ag.backward(ag.sum_(x * x))
    assert x.grad.tolist() == [6.0]


def test_backward_rejects_non_scalar():
    x = leaf([1.0, 2.0])
    with pytest.raises(ValueError):
        ag.backward(x * 2.0)


def test_backward_accumulates_over_shared_leaf():
    x = leaf([2.0, -1.0])
    loss = ag.sum_(x * 3.0) + ag.sum_(ag.exp(x))
    ag.backward(loss)
    np.testing.assert_allclose(x.grad, 3.0 + np.exp([2.0, -1.0]), rtol=1e-15)


def test_unused_input_gets_zero_grad():
    x, y = leaf([1.0, 2.0]), leaf([[5.0]])
    ag.backward(ag.sum_(x * x), inputs=[x, y])
    assert np.array_equal(y.grad, np.zeros((1, 1)))


def test_composite_mlp_matches_finite_differences():
    rng = np.random.default_rng(3)
    x = leaf(rng.normal(size=(4, 5)))
    w1, b1 = leaf(rng.normal(size=(5, 7))), leaf(rng.normal(size=7))
    w2, b2 = leaf(rng.normal(size=(7, 2))), leaf(rng.normal(size=2))

    def f(x, w1, b1, w2, b2):
        h = ag.gelu(ag.linear(x, w1, b1))
        return ag.mean(ag.square(ag.tanh(ag.linear(h, w2, b2))))

    rep = finite_diff_check(f, [x, w1, b1, w2, b2], h=1e-5, tol=1e-6)
    assert rep.passed, rep.max_rel_err


def test_replay_is_bitwise_deterministic():
    def run():
        rng = np.random.default_rng(42)
        x = leaf(rng.normal(size=(3, 4)))
        w = leaf(rng.normal(size=(4, 4)))
        y = ag.softmax(ag.matmul(x, w)) * ag.sigmoid(x)
        loss = ag.sum_(ag.square(ag.layer_norm(y, Tensor(np.ones(4)), Tensor(np.zeros(4)))))
        ag.backward(loss)
        return y.data, x.grad, w.grad

    a, b = run(), run()
    for u, v in zip(a, b):
        assert np.array_equal(u, v)


def test_no_grad_builds_no_graph():
    x = leaf([1.0, 2.0])
    with ag.no_grad():
        y = ag.exp(x)
    assert not y.requires_grad


def test_graph_tape_is_topological():
    x = leaf([1.0, 2.0])
    y = ag.exp(x) * x
    tape = ag.graph_tape(ag.sum_(y))
    ids = [node_id for node_id, _, _ in tape]
    assert ids == sorted(ids)
    position = {node_id: i for i, (node_id, _, _) in enumerate(tape)}
    for node_id, parents, _ in tape:
        assert all(position[p] < position[node_id] for p in parents if p in position)


def test_broadcast_grad_unbroadcasts():
    a = leaf(np.ones((3, 4)))
    b = leaf(np.ones((4,)))
    ag.backward(ag.sum_(a * b))
    assert b.grad.shape == (4,)
    assert np.array_equal(b.grad, np.full(4, 3.0))


def test_index_with_repeats_accumulates():
    x = leaf([1.0, 2.0, 3.0])
    ag.backward(ag.sum_(ag.index(x, np.array([0, 0, 2]))))
    assert x.grad.tolist() == [2.0, 0.0, 1.0]
