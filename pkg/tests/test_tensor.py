import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from oracles import central_difference, max_rel_error
from tcembed.tensor import (
    DegenerateInputError,
    DimensionError,
    NumericDomainError,
    Tensor,
    concat,
    elementwise,
    exp,
    l2_normalize,
    log,
    log_softmax_rows,
    logsumexp_rows,
    make_rng,
    matmul,
    no_grad,
    silu,
    softmax_rows,
    stack,
    take_rows,
)


def test_matmul_identity():
    out = matmul(Tensor([[1.0, 0.0], [0.0, 1.0]]), Tensor([[2.0, 3.0], [4.0, 5.0]]))
    np.testing.assert_array_equal(out.data, [[2, 3], [4, 5]])


def test_matmul_row_times_column():
    assert matmul(Tensor([[1.0, 2.0]]), Tensor([[3.0], [4.0]])).data.tolist() == [[11.0]]


def test_matmul_shape_mismatch():
    with pytest.raises(DimensionError):
        matmul(Tensor(np.ones((2, 3))), Tensor(np.ones((2, 3))))


def test_matmul_gradient_matches_finite_differences(rng):
    a = Tensor(rng.normal(size=(3, 4)), requires_grad=True)
    b = Tensor(rng.normal(size=(4, 2)), requires_grad=True)
    matmul(a, b).sum().backward()
    num_a, num_b = central_difference(lambda: float(np.sum(a.data @ b.data)), [a.data, b.data])
    assert max_rel_error(a.grad, num_a) < 1e-4
    assert max_rel_error(b.grad, num_b) < 1e-4


def test_silu_zero_and_softmax_symmetry():
    assert silu(Tensor([0.0])).data[0] == 0.0
    np.testing.assert_array_equal(softmax_rows(Tensor([[0.0, 0.0]])).data, [[0.5, 0.5]])


def test_exp_gradient(rng):
    x = Tensor(rng.normal(size=5), requires_grad=True)
    exp(x).sum().backward()
    (num,) = central_difference(lambda: float(np.exp(x.data).sum()), [x.data])
    assert max_rel_error(x.grad, num) < 1e-4


def test_domain_errors():
    with pytest.raises(NumericDomainError):
        log(Tensor([1.0, 0.0]))
    with pytest.raises(NumericDomainError):
        Tensor([1.0]) / Tensor([0.0])


def test_elementwise_dispatch():
    out = elementwise("add", Tensor([1.0]), Tensor([2.0]))
    assert out.data.tolist() == [3.0]
    with pytest.raises(ValueError):
        elementwise("tan", Tensor([1.0]))


def test_l2_normalize_examples():
    np.testing.assert_allclose(l2_normalize(Tensor([3.0, 4.0])).data, [0.6, 0.8], rtol=0, atol=1e-15)
    unit = np.array([0.0, 1.0, 0.0])
    np.testing.assert_array_equal(l2_normalize(Tensor(unit)).data, unit)
    with pytest.raises(DegenerateInputError):
        l2_normalize(Tensor([0.0, 0.0]))


def test_backward_linear_and_quadratic():
    x = Tensor([1.0, -2.0, 3.0], requires_grad=True)
    x.sum().backward()
    np.testing.assert_array_equal(x.grad, [1, 1, 1])
    x.zero_grad()
    (x * x).sum().backward()
    np.testing.assert_array_equal(x.grad, 2 * x.data)


def test_backward_accumulates_without_zeroing():
    x = Tensor([1.0, 2.0], requires_grad=True)
    (x * 3.0).sum().backward()
    (x * 3.0).sum().backward()
    np.testing.assert_array_equal(x.grad, [6.0, 6.0])


def test_backward_requires_scalar():
    x = Tensor([1.0, 2.0], requires_grad=True)
    with pytest.raises(ValueError):
        (x * 2.0).backward()


def test_no_grad_records_nothing():
    x = Tensor([1.0], requires_grad=True)
    with no_grad():
        y = x * 2.0
    assert not y.requires_grad


def test_seeded_rng_reproducible():
    a = make_rng(42).normal(size=(4, 4))
    b = make_rng(42).normal(size=(4, 4))
    assert a.tobytes() == b.tobytes()


def _unary_cases():
    return {
        "exp": (exp, np.exp),
        "silu": (silu, lambda z: z / (1 + np.exp(-z))),
        "softmax": (softmax_rows, lambda z: np.exp(z - z.max(-1, keepdims=True))
                    / np.exp(z - z.max(-1, keepdims=True)).sum(-1, keepdims=True)),
        "log_softmax": (log_softmax_rows, lambda z: z - np.log(np.exp(z).sum(-1, keepdims=True))),
        "logsumexp": (logsumexp_rows, lambda z: np.log(np.exp(z).sum(-1))),
        "l2_normalize": (l2_normalize, lambda z: z / np.linalg.norm(z, axis=-1, keepdims=True)),
        "pow": (lambda t: (t * t + 1.0) ** -0.5, lambda z: (z * z + 1.0) ** -0.5),
    }


@pytest.mark.parametrize("name", sorted(_unary_cases()))
def test_unary_gradients_on_random_shapes(name):
    op, ref = _unary_cases()[name]
    rng = np.random.default_rng(7)
    worst = 0.0
    for _ in range(50):
        shape = tuple(rng.integers(1, 5, size=rng.integers(1, 4)))
        x = Tensor(rng.normal(size=shape), requires_grad=True)
        w = rng.normal(size=op(x).shape)
        (op(x) * w).sum().backward()
        (num,) = central_difference(lambda: float((ref(x.data) * w).sum()), [x.data])
        worst = max(worst, max_rel_error(x.grad, num))
    assert worst < 1e-4


@pytest.mark.parametrize("opname", ["add", "sub", "mul", "div", "matmul"])
def test_binary_gradients_with_broadcasting(opname):
    rng = np.random.default_rng(11)
    ops = {
        "add": (lambda a, b: a + b, np.add),
        "sub": (lambda a, b: a - b, np.subtract),
        "mul": (lambda a, b: a * b, np.multiply),
        "div": (lambda a, b: a / b, np.divide),
        "matmul": (matmul, np.matmul),
    }
    op, ref = ops[opname]
    worst = 0.0
    for _ in range(50):
        if opname == "matmul":
            m, k, n = rng.integers(1, 5, size=3)
            batch = tuple(rng.integers(1, 3, size=rng.integers(0, 2)))
            sa, sb = batch + (m, k), (k, n)
        else:
            sa = tuple(rng.integers(1, 4, size=3))
            sb = tuple(s if rng.random() < 0.5 else 1 for s in sa[1:])
        a = Tensor(rng.normal(size=sa), requires_grad=True)
        b = Tensor(rng.uniform(0.5, 2.0, size=sb) * rng.choice([-1, 1], size=sb), requires_grad=True)
        w = rng.normal(size=op(a, b).shape)
        (op(a, b) * w).sum().backward()
        num_a, num_b = central_difference(lambda: float((ref(a.data, b.data) * w).sum()), [a.data, b.data])
        worst = max(worst, max_rel_error(a.grad, num_a), max_rel_error(b.grad, num_b))
    assert worst < 1e-4


def test_shape_op_gradients(rng):
    x = Tensor(rng.normal(size=(2, 3, 4)), requires_grad=True)
    table = Tensor(rng.normal(size=(5, 3)), requires_grad=True)
    w1 = rng.normal(size=(4, 2, 3))
    w2 = rng.normal(size=(2, 2, 3))
    ids = np.array([[0, 4], [4, 1]])

    def value():
        a = (np.transpose(x.data, (2, 0, 1)) * w1).sum()
        b = (np.concatenate([x.data[:, :1, :3], x.data[:, 1:2, :3]], axis=1) * w2).sum()
        c = (table.data[ids] ** 2).sum()
        d = np.stack([x.data[0, 0], x.data[1, 2]]).sum() + x.data.reshape(6, 4)[3].sum()
        return float(a + b + c + d)

    loss = ((x.transpose(2, 0, 1) * Tensor(w1)).sum()
            + (concat([x[:, :1, :3], x[:, 1:2, :3]], axis=1) * Tensor(w2)).sum()
            + (take_rows(table, ids) * take_rows(table, ids)).sum()
            + stack([x[0, 0], x[1, 2]]).sum() + x.reshape(6, 4)[3].sum())
    assert abs(loss.item() - value()) < 1e-12
    loss.backward()
    num_x, num_t = central_difference(value, [x.data, table.data])
    assert max_rel_error(x.grad, num_x) < 1e-4
    assert max_rel_error(table.grad, num_t) < 1e-4


@settings(max_examples=50, deadline=None)
@given(st.integers(1, 6), st.integers(1, 8), st.floats(0.1, 50.0), st.integers(0, 2**31 - 1))
def test_softmax_rows_sum_to_one(rows, cols, scale, seed):
    x = np.random.default_rng(seed).normal(size=(rows, cols)) * scale
    s = softmax_rows(Tensor(x)).data
    assert np.all(s > 0)
    np.testing.assert_allclose(s.sum(axis=1), 1.0, atol=1e-9)


@settings(max_examples=50, deadline=None)
@given(st.integers(1, 6), st.integers(1, 8), st.integers(0, 2**31 - 1))
def test_l2_normalize_unit_rows(rows, cols, seed):
    x = np.random.default_rng(seed).normal(size=(rows, cols)) + 0.1
    n = np.linalg.norm(l2_normalize(Tensor(x)).data, axis=1)
    np.testing.assert_allclose(n, 1.0, atol=1e-9)


def test_gradients_are_finite_after_backward(rng):
    x = Tensor(rng.normal(size=(3, 4)) * 100, requires_grad=True)
    log_softmax_rows(x).sum().backward()
    assert np.all(np.isfinite(x.grad))
    assert x.grad.shape == x.shape
