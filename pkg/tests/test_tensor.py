import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from a2asr import tensor as T
from a2asr.tensor import Tensor


def leaf(a):
    return Tensor(np.asarray(a, dtype=np.float64), requires_grad=True)


# -- matmul --------------------------------------------------------------------
def test_matmul_identity():
    out = T.matmul(Tensor(np.eye(2)), Tensor([[1.0, 2.0], [3.0, 4.0]]))
    np.testing.assert_array_equal(out.data, [[1, 2], [3, 4]])


def test_matmul_gradient_of_sum():
    a, b = leaf(np.eye(2)), leaf([[1.0, 2.0], [3.0, 4.0]])
    grads = T.backward(T.matmul(a, b).sum())
    np.testing.assert_array_equal(grads[a], np.ones((2, 2)) @ b.data.T)
    np.testing.assert_array_equal(grads[b], a.data.T @ np.ones((2, 2)))


def test_matmul_finite_difference(rng):
    a, b = rng.normal(size=(3, 4)), rng.normal(size=(4, 2))
    assert T.grad_check(lambda x: T.matmul(x, Tensor(b)).sum(), Tensor(a)) < 1e-6
    assert T.grad_check(lambda x: T.matmul(Tensor(a), x).sum(), Tensor(b)) < 1e-6


def test_matmul_shape_error_names_shapes():
    with pytest.raises(ValueError, match=r"\(2, 3\).*\(2, 3\)"):
        T.matmul(Tensor(np.ones((2, 3))), Tensor(np.ones((2, 3))))


def test_batched_matmul_with_shared_weight(rng):
    w, xs = rng.normal(size=(4, 3)), Tensor(rng.normal(size=(2, 5, 4)))
    assert T.grad_check(lambda x: (T.matmul(xs, x) ** 2).sum(), Tensor(w)) < 1e-6


# -- softmax -------------------------------------------------------------------
def test_softmax_symmetry_and_oracle():
    np.testing.assert_allclose(T.softmax(Tensor([0.0, 0.0])).data, [0.5, 0.5])
    np.testing.assert_allclose(T.softmax(Tensor([1.0, 2.0, 3.0])).data, [0.0900, 0.2447, 0.6652], atol=5e-5)


def test_softmax_shift_invariance(rng):
    x = rng.normal(size=5)
    np.testing.assert_allclose(T.softmax(Tensor(x + 100.0)).data, T.softmax(Tensor(x)).data, atol=1e-15)


def test_log_softmax_matches_log_of_softmax(rng):
    x = rng.normal(size=(3, 7)) * 5
    np.testing.assert_allclose(T.log_softmax(Tensor(x)).data, np.log(T.softmax(Tensor(x)).data), atol=1e-12)


def test_softmax_rejects_nan():
    with pytest.raises(FloatingPointError):
        T.softmax(Tensor([0.0, np.nan]))
    with pytest.raises(FloatingPointError):
        T.log_softmax(Tensor([np.nan, 1.0]))


@settings(max_examples=50, deadline=None)
@given(arrays(np.float64, st.integers(1, 12), elements=st.floats(-50, 50)))
def test_softmax_is_probability_vector(x):
    p = T.softmax(Tensor(x)).data
    assert (p >= 0).all()
    assert abs(p.sum() - 1.0) < 1e-12


def test_log_softmax_pick_gradient(rng):
    assert T.grad_check(lambda x: T.log_softmax(x)[0], Tensor(rng.normal(size=6))) < 1e-6


def test_masked_softmax_fully_masked_row_is_zero():
    out = T.masked_softmax(Tensor(np.ones((2, 3))), np.array([[True, False, True], [False, False, False]]))
    np.testing.assert_allclose(out.data[0], [0.5, 0.0, 0.5])
    np.testing.assert_array_equal(out.data[1], 0.0)


# -- layernorm -----------------------------------------------------------------
def test_layernorm_constant_input_is_zero():
    out = T.layernorm(Tensor(np.full(4, 3.0)), Tensor(np.ones(4)), Tensor(np.zeros(4)))
    np.testing.assert_array_equal(out.data, 0.0)


def test_layernorm_zero_gain_returns_bias(rng):
    beta = rng.normal(size=4)
    out = T.layernorm(Tensor(rng.normal(size=(3, 4))), Tensor(np.zeros(4)), Tensor(beta))
    np.testing.assert_array_equal(out.data, np.broadcast_to(beta, (3, 4)))


def test_layernorm_normalises(rng):
    out = T.layernorm(Tensor(rng.normal(size=(5, 8)) * 3 + 1), Tensor(np.ones(8)), Tensor(np.zeros(8)), eps=0.0)
    np.testing.assert_allclose(out.data.mean(-1), 0.0, atol=1e-12)
    np.testing.assert_allclose(out.data.var(-1), 1.0, atol=1e-10)


def test_layernorm_gradients(rng):
    x, g, b = rng.normal(size=(2, 4)), rng.normal(size=4), rng.normal(size=4)
    w = rng.normal(size=(2, 4))
    assert T.grad_check(lambda t: (T.layernorm(t, Tensor(g), Tensor(b)) * Tensor(w)).sum(), Tensor(x)) < 1e-5
    assert T.grad_check(lambda t: (T.layernorm(Tensor(x), t, Tensor(b)) * Tensor(w)).sum(), Tensor(g)) < 1e-5
    assert T.grad_check(lambda t: (T.layernorm(Tensor(x), Tensor(g), t) * Tensor(w)).sum(), Tensor(b)) < 1e-5


# -- backward ------------------------------------------------------------------
def test_backward_sum_and_square(rng):
    x = leaf(rng.normal(size=(2, 3)))
    np.testing.assert_array_equal(T.backward(x.sum())[x], np.ones((2, 3)))
    x = leaf(rng.normal(size=(2, 3)))
    np.testing.assert_array_equal(T.backward((x * x).sum())[x], 2 * x.data)


def test_two_layer_composition(rng):
    w2 = Tensor(rng.normal(size=(5, 2)))
    xin = Tensor(rng.normal(size=(3, 4)))
    f = lambda w1: T.matmul(T.relu(T.matmul(xin, w1)), w2).sum()
    assert T.grad_check(f, Tensor(rng.normal(size=(4, 5)))) < 1e-5


def test_backward_contract_errors():
    x = leaf([1.0, 2.0])
    with pytest.raises(ValueError, match="scalar"):
        T.backward(x * 2.0)
    T.clear_tape()
    with pytest.raises(ValueError, match="tape"):
        T.backward(Tensor(1.0))


def test_unreachable_leaves_are_absent():
    x, y = leaf([1.0]), leaf([2.0])
    grads = T.backward((x * 3.0).sum())
    assert x in grads and y not in grads


def test_no_grad_allocates_no_nodes():
    x = leaf([1.0, 2.0])
    with T.no_grad():
        y = (x * x).sum()
    assert not y.requires_grad and y.is_leaf
    assert not T._tape()
    z = Tensor([1.0]) * 2.0
    assert z.is_leaf and not T._tape()


def test_backward_is_deterministic(rng):
    x = rng.normal(size=(4, 4))

    def run():
        t = leaf(x)
        return T.backward(T.log_softmax(T.matmul(t, t)).sum())[t]

    np.testing.assert_array_equal(run(), run())


def test_grad_check_sum_is_exact(rng):
    assert T.grad_check(lambda x: x.sum(), Tensor(rng.normal(size=(3, 3)))) < 1e-10


def test_relu_subgradient_at_zero_is_zero():
    x = leaf([0.0, 1.0, -1.0])
    np.testing.assert_array_equal(T.backward(T.relu(x).sum())[x], [0.0, 1.0, 0.0])


def test_precision_switch():
    with T.precision("float32"):
        assert Tensor([1.0]).dtype == np.float32
    assert Tensor([1.0]).dtype == np.float64
    with pytest.raises(ValueError):
        T.set_precision("float16")


def test_embedding_range_check():
    table = Tensor(np.ones((3, 2)))
    with pytest.raises(IndexError):
        T.embedding(table, np.array([3]))


# -- every differentiable op, ten seeds ------------------------------------------
def _op_cases(r):
    other = Tensor(r.normal(size=(3, 4)))
    pos = Tensor(r.uniform(0.5, 2.0, size=(3, 4)))
    w = Tensor(r.normal(size=(3, 4)))
    mask = r.random((3, 4)) > 0.3
    mask[:, 0] = True
    emb_w = Tensor(r.normal(size=(2, 2, 4)))
    return {
        "add": lambda x: ((x + other) * w).sum(),
        "sub": lambda x: ((other - x) * w).sum(),
        "mul": lambda x: (x * other).sum(),
        "div": lambda x: (other / (x * x + 1.0)).sum(),
        "pow": lambda x: ((x * x + 1.0) ** 1.5).sum(),
        "exp": lambda x: (T.exp(x) * w).sum(),
        "log": lambda x: (T.log(x * x + 0.5) * w).sum(),
        "relu": lambda x: (T.relu(x) * w).sum(),
        "where": lambda x: (T.where(mask, x, 0.0) * w).sum(),
        "matmul": lambda x: (T.matmul(x, other.T) * Tensor(np.ones((3, 3)))).sum(),
        "mean": lambda x: (x * w).mean(axis=0).sum(),
        "reshape": lambda x: (x.reshape(4, 3) * w.reshape(4, 3)).sum(),
        "transpose": lambda x: (x.T * w.T).sum(),
        "getitem": lambda x: (x[1:, ::2] * w[1:, ::2]).sum() + (x[np.array([0, 2])] * w[:2]).sum(),
        "concat": lambda x: (T.concat([x, other], axis=1) * T.concat([w, pos], axis=1)).sum(),
        "embedding": lambda x: (T.embedding(x, np.array([[0, 2], [2, 1]])) * emb_w).sum(),
        "softmax": lambda x: (T.softmax(x) * w).sum(),
        "log_softmax": lambda x: (T.log_softmax(x) * w).sum(),
        "masked_softmax": lambda x: (T.masked_softmax(x, mask) * w).sum(),
        "layernorm": lambda x: (T.layernorm(x, pos[0], other[0]) * w).sum(),
    }


@pytest.mark.parametrize("op", sorted(_op_cases(np.random.default_rng(0))))
def test_op_gradients_ten_seeds(op):
    worst = 0.0
    for seed in range(10):
        r = np.random.default_rng(seed)
        f = _op_cases(r)[op]
        worst = max(worst, T.grad_check(f, Tensor(r.normal(size=(3, 4)))))
    assert worst < 1e-5, f"{op}: {worst:.2e}"
