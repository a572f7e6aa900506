import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from jointasr import numerics as nx
from jointasr.numerics import Tensor, grad_check


def test_logsumexp_examples():
    assert nx.logsumexp([0.0, 0.0, 0.0]) == pytest.approx(math.log(3), abs=1e-12)
    assert nx.logsumexp([1000.0, 1000.0]) == pytest.approx(1000 + math.log(2), abs=1e-9)
    assert nx.logsumexp([-np.inf, 0.0]) == 0.0
    assert nx.logsumexp([-np.inf, -np.inf]) == -np.inf


def test_logsumexp_empty_raises():
    with pytest.raises(ValueError):
        nx.logsumexp([])
    with pytest.raises(ValueError):
        nx.logsumexp(Tensor(np.zeros(0)))


@given(
    st.lists(st.floats(-50, 50), min_size=1, max_size=8),
    st.floats(-1e3, 1e3),
)
def test_logsumexp_shift(v, c):
    assert nx.logsumexp(np.array(v) + c) == pytest.approx(nx.logsumexp(v) + c, abs=1e-12 * max(1, abs(c)) + 1e-12)


def test_log_softmax_examples():
    np.testing.assert_allclose(nx.log_softmax([0.0, 0.0, 0.0, 0.0]), [-math.log(4)] * 4, atol=1e-15)
    out = nx.log_softmax([10.0, 0.0])
    np.testing.assert_allclose(out, [-4.5398899e-5, -10.0000454], rtol=1e-6)


@given(st.lists(st.floats(-30, 30), min_size=1, max_size=10), st.floats(-100, 100))
def test_log_softmax_normalises_and_is_shift_invariant(v, c):
    out = nx.log_softmax(v)
    assert abs(np.exp(out).sum() - 1) <= 1e-12
    np.testing.assert_allclose(nx.log_softmax(np.array(v) + c), out, atol=1e-10)


def test_grad_check_examples():
    assert grad_check(lambda x: (x * x).sum(), Tensor([1.0, 2.0]), 1e-5) <= 1e-8
    x = np.random.default_rng(0).normal(size=5)
    assert grad_check(lambda t: nx.logsumexp(t), Tensor(x), 1e-5) <= 1e-7
    assert grad_check(lambda t: Tensor(3.0), Tensor(x)) == 0.0


def test_grad_check_rejects_vector_output():
    with pytest.raises(ValueError):
        grad_check(lambda t: t * 2.0, Tensor(np.ones(3)))


def test_analytic_gradient_of_sum_of_squares():
    x = Tensor([1.0, 2.0], requires_grad=True)
    (x * x).sum().backward()
    np.testing.assert_array_equal(x.grad, [2.0, 4.0])


# Each primitive, checked on 10 seeded inputs: (name, input shape, function).
PRIMITIVES = [
    ("add", (3, 4), lambda x: (x + x[0:1] * 2.0).sum()),
    ("sub", (3, 4), lambda x: (1.5 - x - x.transpose(1, 0).transpose(1, 0) * 0.5).sum()),
    ("mul", (3, 4), lambda x: (x * x[::-1]).sum()),
    ("div", (3, 4), lambda x: (x / (x * x + 2.0)).sum()),
    ("neg", (5,), lambda x: (-x * x).sum()),
    ("power", (5,), lambda x: ((x * x + 1.0) ** 1.5).sum()),
    ("exp", (5,), lambda x: x.exp().sum()),
    ("log", (5,), lambda x: (x * x + 0.5).log().sum()),
    ("sqrt", (5,), lambda x: nx.sqrt(x * x + 0.5).sum()),
    ("tanh", (5,), lambda x: (x.tanh() * x).sum()),
    ("relu", (5,), lambda x: (x.relu() * x).sum()),
    ("where", (2, 3), lambda x: nx.where(np.array([[1, 0, 1], [0, 1, 0]], bool), x * 2.0, x * x).sum()),
    ("masked_fill", (2, 3), lambda x: (nx.masked_fill(x, np.eye(2, 3, dtype=bool), 0.3) * x).sum()),
    ("matmul", (3, 4), lambda x: ((x @ x.transpose(1, 0)) ** 2).sum()),
    ("batched_matmul", (2, 3, 3), lambda x: (x @ x).sum()),
    ("sum_axis", (3, 4), lambda x: (x.sum(axis=1) ** 2).sum()),
    ("mean", (3, 4), lambda x: (x.mean(axis=0, keepdims=True) * x).sum()),
    ("reshape", (3, 4), lambda x: (x.reshape(2, 6)[1] ** 2).sum()),
    ("swapaxes", (2, 3, 4), lambda x: (x.swapaxes(0, 2)[0] ** 2).sum()),
    ("getitem_fancy", (4, 3), lambda x: (x[np.array([0, 2, 2]), np.array([1, 0, 1])] ** 2).sum()),
    ("concat", (2, 3), lambda x: (nx.concat([x, x * x], axis=1) ** 2).sum()),
    ("stack", (2, 3), lambda x: (nx.stack([x, x.exp()], axis=0) * 0.5).sum()),
    ("logsumexp", (3, 4), lambda x: nx.logsumexp(x, axis=1).sum()),
    ("log_softmax", (3, 4), lambda x: (nx.log_softmax(x, axis=-1) * np.arange(12.0).reshape(3, 4)).sum()),
    ("softmax", (3, 4), lambda x: (nx.softmax(x, axis=0) * np.arange(12.0).reshape(3, 4)).sum()),
    (
        "layer_norm",
        (3, 5),
        lambda x: (nx.layer_norm(x, x[0] * 0.5 + 1.0, x[1] * 0.1) * np.arange(15.0).reshape(3, 5)).sum(),
    ),
]


@pytest.mark.parametrize("name,shape,f", PRIMITIVES, ids=[p[0] for p in PRIMITIVES])
def test_primitive_gradients(name, shape, f):
    for seed in range(10):
        x = np.random.default_rng(seed).normal(size=shape)
        assert grad_check(f, Tensor(x)) <= 1e-6, f"{name} seed {seed}"


def test_matmul_associativity():
    rng = np.random.default_rng(3)
    a, b, c = (Tensor(rng.normal(size=s)) for s in ((3, 4), (4, 5), (5, 2)))
    np.testing.assert_allclose(((a @ b) @ c).data, (a @ (b @ c)).data, atol=1e-10)


def test_fan_out_accumulates():
    x = Tensor([3.0], requires_grad=True)
    y = x * 2.0
    (y + y * y).sum().backward()
    # d/dx (2x + 4x^2) = 2 + 8x
    assert x.grad[0] == pytest.approx(26.0)


def test_backward_order_is_reverse_topological():
    x = Tensor(np.ones(3), requires_grad=True)
    a = x * 2.0
    b = a.exp()
    c = (a + b).sum()
    tape = nx.GradTape(c)
    ids = [n._id for n in tape.nodes]
    assert ids == sorted(ids, reverse=True)
    position = {n._id: i for i, n in enumerate(tape.nodes)}
    for node in tape.nodes:
        for parent in node._parents:
            if parent.requires_grad:
                assert position[parent._id] > position[node._id]


def test_no_grad_builds_no_graph():
    x = Tensor(np.ones(2), requires_grad=True)
    with nx.no_grad():
        y = (x * 3.0).sum()
    assert not y.requires_grad


def test_non_finite_output_is_an_error():
    with pytest.raises(FloatingPointError):
        Tensor([0.0]).log()
    with pytest.raises(FloatingPointError):
        Tensor([1000.0]).exp()


def test_neg_inf_log_probability_is_first_class():
    lse = nx.logsumexp(Tensor([-np.inf, 0.0], requires_grad=True))
    assert lse.item() == 0.0
