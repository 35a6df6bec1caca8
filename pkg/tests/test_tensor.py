import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from gratt import tensor as T
from gratt.tensor import Tape, Tensor


def leaf(a):
    return Tensor(a, requires_grad=True)


# ---------------------------------------------------------------- construction

def test_rank_above_three_rejected():
    with pytest.raises(ValueError, match="rank"):
        Tensor(np.zeros((1, 1, 1, 1)))


def test_values_are_float64_row_major():
    t = Tensor([[1, 2], [3, 4]])
    assert t.data.dtype == np.float64 and t.data.flags.c_contiguous
    assert t.size == 4 and t.shape == (2, 2)


# ---------------------------------------------------------------- matmul

def test_matmul_identity():
    out = T.matmul(Tensor(np.eye(2)), Tensor([[3, 4], [5, 6]]))
    np.testing.assert_array_equal(out.data, [[3, 4], [5, 6]])


def test_matmul_hand_value():
    assert T.matmul(Tensor([[1, 2]]), Tensor([[3], [4]])).data.tolist() == [[11.0]]


def test_matmul_shape_error_reports_both_shapes():
    with pytest.raises(ValueError, match=r"\(2, 3\).*\(2, 3\)"):
        T.matmul(Tensor(np.zeros((2, 3))), Tensor(np.zeros((2, 3))))


def test_matmul_gradient_of_sum():
    rng = np.random.default_rng(0)
    err = T.grad_check(lambda a, b: T.total(T.matmul(a, b)), [Tensor(rng.normal(size=(4, 5))), Tensor(rng.normal(size=(5, 3)))])
    assert err < 1e-6


def test_matmul_chain_depth_three():
    rng = np.random.default_rng(1)
    xs = [Tensor(rng.normal(size=s)) for s in [(3, 4), (4, 4), (4, 2)]]
    err = T.grad_check(lambda a, b, c: T.total(T.matmul(T.matmul(a, b), c)), xs)
    assert err < 1e-6


# ---------------------------------------------------------------- softmax

def test_softmax_symmetry():
    np.testing.assert_allclose(T.softmax_rows(Tensor([[0.0, 0.0]])).data, [[0.5, 0.5]])


def test_softmax_large_inputs_do_not_overflow():
    out = T.softmax_rows(Tensor([[1000.0, 1000.0, 1000.0]])).data
    np.testing.assert_allclose(out, [[1 / 3] * 3], atol=1e-15)


def test_softmax_rejects_all_masked_row():
    with pytest.raises(ValueError, match="entirely -inf"):
        T.softmax_rows(Tensor([[0.0, 1.0], [-np.inf, -np.inf]]))


def test_softmax_rejects_nan():
    with pytest.raises(ValueError):
        T.softmax_rows(Tensor([[np.nan, 0.0]]))


def test_softmax_gradient():
    rng = np.random.default_rng(2)
    w = Tensor(rng.normal(size=(3, 4)))
    err = T.grad_check(lambda x: T.total(T.mul(T.softmax_rows(x), w)), [Tensor(rng.normal(size=(3, 4)))])
    assert err < 1e-6


@settings(max_examples=60, deadline=None)
@given(arrays(np.float64, st.tuples(st.integers(1, 5), st.integers(1, 6)), elements=st.floats(-700, 700)))
def test_softmax_rows_sum_to_one(x):
    s = T.softmax_rows(Tensor(x)).data
    assert (s >= 0).all()
    np.testing.assert_allclose(s.sum(axis=1), 1.0, atol=1e-12)


# ---------------------------------------------------------------- elementwise

def test_sigmoid_zero():
    assert T.elementwise("sigmoid", Tensor(0.0)).item() == 0.5


@pytest.mark.parametrize("x", [-2.0, 0.0, 3.5])
def test_log_exp_inverse(x):
    assert abs(T.elementwise("log", T.elementwise("exp", Tensor(x))).item() - x) < 1e-12


def test_log_rejects_non_positive():
    with pytest.raises(ValueError):
        T.elementwise("log", Tensor([1.0, 0.0]))


def test_sigmoid_gradient_at_1_2():
    assert T.grad_check(lambda x: T.sigmoid(x), [Tensor(1.2)]) < 1e-7


def test_sigmoid_extreme_inputs_are_finite():
    out = T.sigmoid(Tensor([-800.0, 800.0])).data
    assert np.isfinite(out).all() and out[0] == 0.0 and out[1] == 1.0


def test_elementwise_dispatch_and_arity():
    x, y = Tensor([1.0, -2.0]), Tensor([3.0, 4.0])
    np.testing.assert_array_equal(T.elementwise("add", x, y).data, [4.0, 2.0])
    np.testing.assert_array_equal(T.elementwise("sub", x, y).data, [-2.0, -6.0])
    np.testing.assert_array_equal(T.elementwise("mul", x, y).data, [3.0, -8.0])
    np.testing.assert_array_equal(T.elementwise("relu", x).data, [1.0, 0.0])
    np.testing.assert_array_equal(T.elementwise("scale", x, 2.0).data, [2.0, -4.0])
    with pytest.raises(ValueError):
        T.elementwise("sigmoid", x, y)
    with pytest.raises(ValueError):
        T.elementwise("add", x)
    with pytest.raises(ValueError):
        T.elementwise("tanh", x)


def test_only_scalar_broadcasting():
    T.add(Tensor(np.ones((2, 3))), Tensor(2.0))
    with pytest.raises(ValueError, match="neither is a scalar"):
        T.add(Tensor(np.ones((2, 3))), Tensor(np.ones(3)))


# ---------------------------------------------------------------- layer norm

def test_layer_norm_constant_row_is_zero():
    out = T.layer_norm(Tensor([[2.0, 2.0, 2.0]]), Tensor(np.ones(3)), Tensor(np.zeros(3))).data
    np.testing.assert_array_equal(out, 0.0)


def test_layer_norm_normalized_row():
    out = T.layer_norm(Tensor([[1.0, -1.0]]), Tensor(np.ones(2)), Tensor(np.zeros(2))).data
    np.testing.assert_allclose(out, [[1.0, -1.0]], atol=1e-5)


def test_layer_norm_rows_standardized():
    rng = np.random.default_rng(3)
    out = T.layer_norm(Tensor(rng.normal(3, 2, (4, 7))), Tensor(np.ones(7)), Tensor(np.zeros(7))).data
    np.testing.assert_allclose(out.mean(axis=1), 0.0, atol=1e-12)
    np.testing.assert_allclose(out.var(axis=1), 1.0, atol=1e-4)


def test_layer_norm_gradient():
    rng = np.random.default_rng(4)
    w = Tensor(rng.normal(size=(2, 6)))
    xs = [Tensor(rng.normal(size=(2, 6))), Tensor(rng.normal(size=6)), Tensor(rng.normal(size=6))]
    assert T.grad_check(lambda x, g, b: T.total(T.mul(T.layer_norm(x, g, b), w)), xs) < 1e-5


def test_layer_norm_needs_two_features():
    with pytest.raises(ValueError):
        T.layer_norm(Tensor([[1.0]]), Tensor([1.0]), Tensor([0.0]))


# ---------------------------------------------------------------- backward

def test_linear_loss_gradient_is_input():
    w, x = leaf([1.0, -2.0, 0.5]), Tensor([3.0, 4.0, 5.0])
    with Tape() as tape:
        loss = T.total(T.mul(w, x))
    tape.backward(loss)
    np.testing.assert_array_equal(w.grad, x.data)


def test_product_rule_at_zero():
    w = leaf(0.0)
    with Tape():
        loss = T.mul(T.sigmoid(w), w)
    T.backward(loss)
    assert w.grad == 0.5


def test_diamond_graph_sums_paths():
    # y = a*b, z = a+b, loss = y*z -> dL/da = b*z + y, dL/db = a*z + y
    a, b = leaf(2.0), leaf(-3.0)
    with Tape() as tape:
        y, z = T.mul(a, b), T.add(a, b)
        loss = T.mul(y, z)
    tape.backward(loss)
    assert a.grad == -3.0 * -1.0 + -6.0
    assert b.grad == 2.0 * -1.0 + -6.0


def test_second_backward_without_reset_rejected():
    a = leaf(1.0)
    with Tape() as tape:
        loss = T.mul(a, a)
    tape.backward(loss)
    with pytest.raises(RuntimeError, match="reset"):
        tape.backward(loss)
    tape.reset()
    assert len(tape) == 0


def test_non_scalar_loss_rejected():
    a = leaf([1.0, 2.0])
    with Tape() as tape:
        out = T.scale(a, 2.0)
    with pytest.raises(ValueError, match="scalar"):
        tape.backward(out)


def test_nothing_recorded_without_tape():
    out = T.mul(leaf(2.0), leaf(3.0))
    with pytest.raises(ValueError):
        T.backward(out)


def test_tape_is_topologically_ordered():
    rng = np.random.default_rng(5)
    x = leaf(rng.normal(size=(3, 4)))
    with Tape() as tape:
        h = T.relu(T.matmul(x, Tensor(rng.normal(size=(4, 4)))))
        T.total(T.add(h, T.sigmoid(h)))
    for i, node in enumerate(tape.nodes):
        for p in node.parents:
            if p._tape is tape:
                assert p.node_id < i


def test_grad_shape_matches_values():
    rng = np.random.default_rng(6)
    x, w = leaf(rng.normal(size=(3, 4))), leaf(rng.normal(size=(4, 2)))
    with Tape() as tape:
        loss = T.total(T.matmul(x, w))
    tape.backward(loss)
    assert x.grad.shape == x.shape and w.grad.shape == w.shape


# ---------------------------------------------------------------- row plumbing

def test_select_rows_is_exact_copy():
    rng = np.random.default_rng(7)
    cur, prev = rng.normal(size=(4, 3)), rng.normal(size=(4, 3))
    out = T.select_rows(Tensor(cur), Tensor(prev), [1, 0, 0, 1]).data
    assert np.array_equal(out[[0, 3]], cur[[0, 3]]) and np.array_equal(out[[1, 2]], prev[[1, 2]])


def test_select_rows_straight_through_gradient():
    cur, prev, soft = leaf([[1.0, 2.0], [3.0, 4.0]]), leaf([[0.5, 0.0], [1.0, 1.0]]), leaf([0.7, 0.2])
    with Tape() as tape:
        loss = T.total(T.select_rows(cur, prev, [True, False], soft))
    tape.backward(loss)
    np.testing.assert_array_equal(soft.grad, [2.5, 5.0])
    np.testing.assert_array_equal(cur.grad, [[1, 1], [0, 0]])


def test_take_rows_repeated_indices_accumulate():
    x = leaf(np.arange(6.0).reshape(3, 2))
    with Tape() as tape:
        loss = T.total(T.take_rows(x, [2, 2, 0]))
    tape.backward(loss)
    np.testing.assert_array_equal(x.grad, [[1, 1], [0, 0], [2, 2]])


def test_heads_round_trip():
    x = np.arange(24.0).reshape(3, 8)
    np.testing.assert_array_equal(T.merge_heads(T.split_heads(Tensor(x), 4)).data, x)
    with pytest.raises(ValueError):
        T.split_heads(Tensor(x), 3)


# ---------------------------------------------------------------- grad_check itself

def test_grad_check_quadratic():
    assert T.grad_check(lambda x: T.mul(x, x), [Tensor(3.0)], eps=1e-5) < 1e-9


def test_grad_check_rejects_nondeterministic_fn():
    rng = np.random.default_rng(0)
    with pytest.raises(ValueError, match="deterministic"):
        T.grad_check(lambda x: T.mul(x, Tensor(rng.normal())), [Tensor(1.0)])


def test_grad_check_detects_wrong_gradient():
    def bad(x):
        return T._result(x.data**2, (x,), lambda g: (g * x.data,))

    assert T.grad_check(lambda x: T.total(bad(x)), [Tensor([1.0, 2.0])]) > 0.1


def test_determinism_bit_identical():
    def run():
        rng = np.random.default_rng(9)
        x = leaf(rng.normal(size=(4, 4)))
        with Tape() as tape:
            loss = T.total(T.softmax_rows(T.matmul(x, x)))
        tape.backward(loss)
        return loss.item(), x.grad.tobytes()

    assert run() == run()
