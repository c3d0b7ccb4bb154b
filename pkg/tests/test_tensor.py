import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra import numpy as hnp

from sinklab import tensor as T
from sinklab.errors import ContractError, DimensionError, NumericError
from sinklab.tensor import Tape, Tensor

from oracles import finite_difference, relative_error


def grad_of(fn, *arrays):
    """Tape gradients of scalar fn(*tensors) w.r.t. each array (f64)."""
    ts = [Tensor(np.array(a, dtype=np.float64), requires_grad=True) for a in arrays]
    with Tape() as tape:
        out = fn(*ts)
        tape.backward(out)
    return out, [t.grad for t in ts]


def check_fd(fn, *arrays, tol=1e-6, which=0):
    _, grads = grad_of(fn, *arrays)

    def scalar(x):
        args = [Tensor(a) for a in arrays]
        args[which] = Tensor(x)
        return fn(*args).item()

    num = finite_difference(scalar, arrays[which])
    assert relative_error(grads[which], num) < tol


rng = np.random.default_rng(0)


def test_matmul_identity_and_hand_value():
    m = rng.normal(size=(2, 2))
    assert np.array_equal(T.matmul(Tensor(np.eye(2)), Tensor(m)).data, m)
    assert T.matmul(Tensor([[1.0, 2.0]]), Tensor([[3.0], [4.0]])).data.tolist() == [[11.0]]


def test_matmul_shape_error_names_both_shapes():
    with pytest.raises(DimensionError, match=r"\(2, 3\).*\(4, 5\)"):
        T.matmul(Tensor(np.zeros((2, 3))), Tensor(np.zeros((4, 5))))


def test_matmul_gradient_finite_differences():
    a, b = rng.normal(size=(5, 7)), rng.normal(size=(7, 3))
    check_fd(lambda x, y: T.sum(T.matmul(x, y)), a, b, which=0)
    check_fd(lambda x, y: T.sum(T.matmul(x, y)), a, b, which=1)


def test_batched_matmul_gradient():
    a, b = rng.normal(size=(2, 3, 4, 5)), rng.normal(size=(2, 3, 5, 2))
    w = rng.normal(size=(2, 3, 4, 2))
    fn = lambda x, y: T.sum(T.mul(T.matmul(x, y), Tensor(w)))  # noqa: E731
    check_fd(fn, a, b, which=0, tol=1e-6)
    check_fd(fn, a, b, which=1, tol=1e-6)


def test_silu_sigmoid_values():
    assert T.silu(Tensor(0.0)).item() == 0.0
    assert T.sigmoid(Tensor(0.0)).item() == 0.5


def test_silu_derivative_at_point():
    check_fd(lambda x: T.sum(T.silu(x)), np.array([1.3]))


@pytest.mark.parametrize("op", ["exp", "ln", "sqrt", "sigmoid", "silu", "neg", "scale"])
def test_elementwise_gradients(op):
    x = rng.uniform(0.5, 3.0, size=(4, 3))
    f = {"scale": lambda t: T.scale(t, -2.5)}.get(op, getattr(T, op))
    w = Tensor(rng.normal(size=x.shape))
    check_fd(lambda t: T.sum(T.mul(f(t), w)), x)


@pytest.mark.parametrize("op", ["add", "sub", "mul"])
def test_binary_gradients_same_shape_and_scalar(op):
    f = getattr(T, op)
    a, b = rng.normal(size=(3, 4)), rng.normal(size=(3, 4))
    check_fd(lambda x, y: T.sum(T.mul(f(x, y), x)), a, b, which=1)
    s = np.array(1.7)
    check_fd(lambda x, y: T.sum(f(x, y)), a, s, which=1)


def test_broadcasting_other_than_scalar_rejected():
    with pytest.raises(DimensionError):
        T.add(Tensor(np.zeros((3, 4))), Tensor(np.zeros(4)))


def test_non_finite_forward_is_an_error():
    with pytest.raises(NumericError, match="ln"):
        T.ln(Tensor([-1.0]))
    with pytest.raises(NumericError):
        T.exp(Tensor([1e4]))


def test_softmax_examples():
    assert np.allclose(T.softmax_lastdim(Tensor([0.0, 0.0, 0.0])).data, [1 / 3] * 3, atol=1e-15)
    out = T.softmax_lastdim(Tensor([1000.0, 0.0])).data
    assert abs(out[0] - 1) < 1e-12 and out[1] < 1e-12
    x = np.array([1.0, 2.0, 3.0])
    ref = [np.exp(v) / sum(np.exp(x)) for v in x]
    assert np.allclose(T.softmax_lastdim(Tensor(x)).data, ref, rtol=1e-14)


def test_softmax_gradient():
    w = Tensor(rng.normal(size=(3, 5)))
    check_fd(lambda x: T.sum(T.mul(T.softmax_lastdim(x), w)), rng.normal(size=(3, 5)) * 3)


@settings(max_examples=60, deadline=None)
@given(hnp.arrays(np.float64, hnp.array_shapes(min_dims=1, max_dims=3, max_side=6),
                  elements=st.floats(-1e4, 1e4)))
def test_softmax_rows_sum_to_one(x):
    s = T.softmax_lastdim(Tensor(x)).data.sum(axis=-1)
    assert np.all(np.abs(s - 1) < 1e-6)


@settings(max_examples=40, deadline=None)
@given(hnp.arrays(np.float64, st.integers(2, 8), elements=st.floats(-50, 50)),
       st.integers(0, 7), st.floats(0.01, 10))
def test_softmax_monotone(x, i, delta):
    i %= x.size
    y = x.copy()
    y[i] += delta
    assert T.softmax_lastdim(Tensor(y)).data[i] >= T.softmax_lastdim(Tensor(x)).data[i]


@settings(max_examples=30, deadline=None)
@given(st.integers(1, 5), st.integers(1, 5), st.integers(0, 2**32 - 1))
def test_matmul_identity_associativity(n, m, seed):
    r = np.random.default_rng(seed)
    a, b = r.normal(size=(n, m)), r.normal(size=(m, n))
    ia = T.matmul(T.matmul(Tensor(a), Tensor(np.eye(m))), Tensor(b)).data
    assert np.allclose(ia, a @ b, atol=1e-12)


def test_masked_softmax_and_sigmoid():
    mask = np.tril(np.ones((4, 4), dtype=bool))
    a = T.masked_softmax(Tensor(np.zeros((4, 4))), mask).data
    assert np.allclose(a, mask / mask.sum(axis=1, keepdims=True))
    s = T.masked_sigmoid(Tensor(np.zeros((4, 4))), mask).data
    assert np.array_equal(s, np.where(mask, 0.5, 0.0))
    bad = mask.copy()
    bad[2] = False
    with pytest.raises(ContractError):
        T.masked_softmax(Tensor(np.zeros((4, 4))), bad)


def test_masked_attention_gradients():
    mask = np.tril(np.ones((5, 5), dtype=bool))
    w = Tensor(rng.normal(size=(2, 5, 5)))
    x = rng.normal(size=(2, 5, 5)) * 2
    check_fd(lambda t: T.sum(T.mul(T.masked_softmax(t, mask), w)), x)
    check_fd(lambda t: T.sum(T.mul(T.masked_sigmoid(t, mask), w)), x)


def test_rmsnorm_and_rope_gradients():
    x = rng.normal(size=(2, 3, 8)) * 4
    g = rng.normal(size=8)
    w = Tensor(rng.normal(size=x.shape))
    check_fd(lambda a, b: T.sum(T.mul(T.rmsnorm(a, b, 1e-6), w)), x, g, which=0)
    check_fd(lambda a, b: T.sum(T.mul(T.rmsnorm(a, b, 1e-6), w)), x, g, which=1)
    check_fd(lambda a: T.sum(T.mul(T.rope(a, 10000.0), w)), x)


def test_rope_closed_form_and_isometry():
    out = T.rope(Tensor(np.array([[0.0, 0.0], [1.0, 0.0]])), 10000.0).data
    assert np.allclose(out[1], [np.cos(1.0), np.sin(1.0)], atol=1e-15)
    x = rng.normal(size=(16, 8))
    r = T.rope(Tensor(x), 10000.0).data
    assert np.array_equal(r[0], x[0])
    assert np.allclose(np.linalg.norm(r, axis=1), np.linalg.norm(x, axis=1), atol=1e-12)
    with pytest.raises(DimensionError):
        T.rope(Tensor(np.zeros((4, 3))), 10000.0)


def test_embedding_and_cross_entropy_gradients():
    wgt = rng.normal(size=(6, 4))
    ids = np.array([[0, 3, 3], [5, 0, 1]])
    w = Tensor(rng.normal(size=(2, 3, 4)))
    check_fd(lambda e: T.sum(T.mul(T.embedding(e, ids), w)), wgt)
    tg = np.array([1, 4, 0])
    check_fd(lambda z: T.cross_entropy(z, tg), rng.normal(size=(3, 5)))


def test_position_affine_gradient():
    o = rng.normal(size=(2, 3, 4, 2))
    shift = rng.normal(size=(3, 2))
    w = Tensor(rng.normal(size=o.shape))
    check_fd(lambda t: T.sum(T.mul(T.position_affine(t, 2, 3.0, shift, (0, 2)), w)), o)


def test_backward_basics_and_accumulation():
    x = rng.normal(size=(3, 2))
    _, (g,) = grad_of(lambda t: T.sum(t), x)
    assert np.array_equal(g, np.ones_like(x))
    _, (g,) = grad_of(lambda t: T.sum(T.mul(t, t)), x)
    assert np.allclose(g, 2 * x)
    _, (g,) = grad_of(lambda t: T.sum(T.add(T.mul(t, t), T.scale(t, 3.0))), x)
    assert np.allclose(g, 2 * x + 3)


def test_backward_contract_errors():
    x = Tensor(np.ones(3), requires_grad=True)
    with Tape() as tape:
        y = T.scale(x, 2.0)
        with pytest.raises(ContractError):
            tape.backward(y)
        s = T.sum(y)
    tape.backward(s)
    with pytest.raises(ContractError):
        tape.backward(s)
    with pytest.raises(ContractError):
        T.backward(s)


def test_no_recording_outside_tape():
    x = Tensor(np.ones(3), requires_grad=True)
    y = T.scale(x, 2.0)
    assert not T.grad_enabled() and not y.requires_grad


def test_f32_path_stays_f32():
    x = Tensor(rng.normal(size=(3, 4)).astype(np.float32))
    for f in (T.sigmoid, T.silu, T.exp, T.softmax_lastdim):
        assert f(x).dtype == np.float32


@settings(max_examples=40, deadline=None)
@given(hnp.arrays(np.float64, st.integers(1, 40), elements=st.floats(-60, 60)))
def test_sigmoid_matches_closed_form(x):
    assert np.allclose(T.sigmoid(Tensor(x)).data, 1 / (1 + np.exp(-x)), rtol=1e-13, atol=0)
