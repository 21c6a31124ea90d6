import numpy as np
import pytest

from dyntok import tensor as T
from helpers import assert_grads, numeric_grad, project


def rand(*shape, seed=0, lo=None):
    x = np.random.default_rng(seed).standard_normal(shape)
    if lo is not None:
        x = np.abs(x) + lo
    return T.Tensor(x, requires_grad=True)


# (name, builder returning (f, inputs))
def _cases():
    a, b = rand(3, 4, seed=1), rand(3, 4, seed=2)
    row = rand(4, seed=3)
    pos = rand(3, 4, seed=4, lo=0.5)
    yield "add_broadcast", lambda: project(T.add(a, row)), [a, row]
    yield "sub", lambda: project(T.sub(a, b)), [a, b]
    yield "mul_broadcast", lambda: project(T.mul(a, row)), [a, row]
    yield "div", lambda: project(T.div(a, pos)), [a, pos]
    yield "square", lambda: project(T.square(a)), [a]
    yield "exp", lambda: project(T.exp(a)), [a]
    yield "log", lambda: project(T.log(pos)), [pos]
    yield "clamp_min_away_from_kink", lambda: project(T.clamp_min(pos, 0.1)), [pos]
    yield "gelu", lambda: project(T.gelu(a)), [a]
    yield "tsum_axis", lambda: project(T.tsum(a, axis=0)), [a]
    yield "tsum_keepdims", lambda: project(T.tsum(a, axis=1, keepdims=True)), [a]
    yield "mean_all", lambda: T.mean(T.square(a)), [a]
    yield "mean_rows", lambda: project(T.mean_rows(a)), [a]
    yield "reshape", lambda: project(T.reshape(a, (2, 6))), [a]
    yield "transpose", lambda: project(T.transpose(a)), [a]
    yield "swap_last", lambda: project(T.swap_last(T.reshape(a, (1, 3, 4)))), [a]
    yield "index_repeated", lambda: project(T.index(a, (np.array([0, 0, 2]), np.array([1, 1, 3])))), [a]
    yield "concat", lambda: project(T.concat([a, b], axis=0)), [a, b]
    yield "concat_last_dim", lambda: project(T.concat_last_dim([a, b])), [a, b]
    x3 = rand(2, 5, 3, seed=5)
    yield "gather_rows", lambda: project(T.gather_rows(x3, np.array([[4, 0, 0], [1, 2, 3]]))), [x3]
    m1, m2 = rand(2, 3, 4, seed=6), rand(4, 5, seed=7)
    yield "matmul_batched", lambda: project(T.matmul(m1, m2)), [m1, m2]
    w, bias = rand(4, 2, seed=8), rand(2, seed=9)
    yield "linear", lambda: project(T.linear(m1, w, bias)), [m1, w, bias]
    yield "softmax_rows", lambda: project(T.softmax_rows(a)), [a]
    yield "log_softmax_rows", lambda: project(T.log_softmax_rows(a)), [a]
    g, be = rand(4, seed=10), rand(4, seed=11)
    yield "layer_norm", lambda: project(T.layer_norm(m1, g, be)), [m1, g, be]


CASES = list(_cases())


@pytest.mark.parametrize("name,f,inputs", CASES, ids=[c[0] for c in CASES])
def test_gradients_match_finite_differences(name, f, inputs):
    assert_grads(f, inputs)


def test_straight_through_passes_gradient_unchanged():
    soft = rand(3, 2)
    hard = (soft.data > 0).astype(float)
    out = T.straight_through(hard, soft)
    np.testing.assert_array_equal(out.data, hard)
    T.backward(project(out))
    w = np.random.default_rng(0).standard_normal((3, 2))
    np.testing.assert_array_equal(soft.grad, w)


def test_softmax_rows_sum_to_one():
    x = T.Tensor(np.random.default_rng(0).standard_normal((50, 17)) * 30)
    s = T.softmax_rows(x).data.sum(axis=-1)
    assert np.max(np.abs(s - 1)) <= 1e-12


def test_softmax_is_shift_invariant_and_stable():
    x = np.random.default_rng(1).standard_normal((4, 6))
    a = T.softmax_rows(T.Tensor(x)).data
    b = T.softmax_rows(T.Tensor(x + 1000.0)).data
    np.testing.assert_allclose(a, b, atol=1e-15)


def test_gradient_accumulates_across_uses_bitwise():
    # f(x) = sum(x*w) used twice == 2x the single-use gradient, bit for bit
    x = rand(5, 3)
    T.backward(T.add(project(x), project(x)))
    twice = x.grad.copy()
    x.grad = None
    T.backward(project(x))
    np.testing.assert_array_equal(twice, x.grad + x.grad)


def test_backward_twice_accumulates_into_leaf():
    x = rand(4)
    T.backward(project(x))
    first = x.grad.copy()
    T.backward(project(x))
    np.testing.assert_array_equal(x.grad, first + first)


def test_diamond_graph_gradient():
    x = rand(3, 3)
    f = lambda: T.tsum(T.mul(T.exp(x), T.softmax_rows(x)))  # noqa: E731
    assert_grads(f, [x])


def test_backward_needs_scalar():
    with pytest.raises(ValueError, match="scalar"):
        T.backward(rand(2, 2))


def test_matmul_shape_error_names_both_shapes():
    with pytest.raises(T.ShapeError, match=r"\(2, 3\).*\(4, 5\)"):
        T.matmul(rand(2, 3), rand(4, 5))


def test_nonfinite_forward_raises():
    with np.errstate(over="ignore", divide="ignore"):
        with pytest.raises(T.NonFiniteError):
            T.exp(T.Tensor(np.array([1000.0])))
        with pytest.raises(T.NonFiniteError):
            T.log(T.Tensor(np.array([0.0, 1.0])))


def test_gather_rows_out_of_range():
    with pytest.raises(IndexError):
        T.gather_rows(rand(1, 3, 2), np.array([[0, 3]]))
    with pytest.raises(T.ShapeError):
        T.gather_rows(rand(2, 3, 2), np.array([[0, 1]]))


def test_no_grad_records_nothing():
    x = rand(2, 2)
    with T.no_grad():
        y = T.mul(x, 2.0)
    assert not y.requires_grad and y._parents == ()


def test_layer_norm_rejects_nonpositive_eps():
    with pytest.raises(ValueError):
        T.layer_norm(rand(2, 3), rand(3), rand(3), eps=0.0)


def test_gelu_matches_tanh_formula():
    v = np.linspace(-6, 6, 101)
    ref = 0.5 * v * (1 + np.tanh(np.sqrt(2 / np.pi) * (v + 0.044715 * v**3)))
    np.testing.assert_allclose(T.gelu(T.Tensor(v)).data, ref, atol=1e-14)


def test_custom_op_routes_gradients():
    x = rand(3)
    out = T.custom_op(np.sin(x.data), (x,), lambda g: (g * np.cos(x.data),))
    T.backward(T.tsum(out))
    np.testing.assert_allclose(x.grad, np.cos(x.data))
    np.testing.assert_allclose(numeric_grad(lambda: T.tsum(T.custom_op(np.sin(x.data), (x,), lambda g: (g,))), x), np.cos(x.data), rtol=1e-8)
