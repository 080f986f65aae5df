import numpy as np
import pytest

from survfuse import tensor as T
from survfuse.defaults import LOG_FLOOR
from survfuse.errors import (
    ContractError,
    DimensionError,
    DomainError,
    ParameterError,
    PreconditionError,
)
from survfuse.tensor import Tape, Tensor, grad_check

W_FIXED = Tensor(np.random.default_rng(7).normal(size=(5, 3)))


def test_arithmetic_values():
    a = Tensor([1.0, 2.0])
    b = Tensor([3.0, 4.0])
    np.testing.assert_array_equal((a + b).values, [4.0, 6.0])
    np.testing.assert_array_equal((a * b).values, [3.0, 8.0])
    np.testing.assert_array_equal((a * 2.0).values, [2.0, 4.0])
    np.testing.assert_array_equal((1.0 - a).values, [0.0, -1.0])


def test_shape_mismatch():
    with pytest.raises(DimensionError):
        T.add(Tensor([1.0, 2.0]), Tensor([1.0, 2.0, 3.0]))
    with pytest.raises(DimensionError, match=r"\(2, 3\).*\(2, 3\)"):
        T.matmul(Tensor(np.ones((2, 3))), Tensor(np.ones((2, 3))))


def test_backward_simple():
    x = Tensor([2.0, 3.0], requires_grad=True)
    with Tape() as tape:
        y = T.sum(x * x)
        tape.backward(y)
    np.testing.assert_allclose(x.grad, [4.0, 6.0])


def test_fan_out_accumulates():
    x = Tensor([2.0, -1.0], requires_grad=True)
    with Tape() as tape:
        y = T.sum(x * x + x)
        tape.backward(y)
    np.testing.assert_allclose(x.grad, [5.0, -1.0])


def test_backward_replay_is_identical():
    x = Tensor([0.3, -0.7, 1.1], requires_grad=True)
    with Tape() as tape:
        y = T.sum(T.tanh(x) * T.sigmoid(x))
        tape.backward(y)
        first = x.grad.copy()
        tape.backward(y)
    np.testing.assert_array_equal(x.grad, first)


def test_backward_errors():
    x = Tensor([1.0, 2.0], requires_grad=True)
    with Tape() as tape:
        y = x * 2.0
        with pytest.raises(ContractError):
            tape.backward(y)
    with pytest.raises(ContractError):
        T.backward(T.sum(x))


def test_constant_loss_gives_zero_gradients():
    x = Tensor([1.0, 2.0], requires_grad=True)
    x.grad[:] = 5.0
    with Tape() as tape:
        T.sum(x)
        loss = T.sum(Tensor([1.0, 2.0]))
        tape.backward(loss)
    np.testing.assert_array_equal(x.grad, [0.0, 0.0])


def test_nothing_recorded_without_grad():
    with Tape() as tape:
        T.tanh(Tensor([1.0]))
    assert len(tape) == 0
    assert T.active_tape() is None


@pytest.mark.parametrize(
    "fn",
    [
        lambda x: T.sum(T.tanh(x) * T.sigmoid(x)),
        lambda x: T.sum(T.exp(x * 0.5)),
        lambda x: T.sum(T.log(T.sigmoid(x))),
        lambda x: T.take(T.softmax(x), 2),
        lambda x: T.sum(T.cumprod(T.sigmoid(x))),
        lambda x: T.sum(T.outer(x, T.tanh(x))),
        lambda x: T.sum(T.concat([x, T.slice_(x, 1, 3)]) * 2.0),
        lambda x: T.sum(T.tanh(T.matmul(T.reshape(x, (1, 5)), W_FIXED))),
        lambda x: T.sum(T.tanh(T.transpose(T.repeat_rows(x, 3))) * W_FIXED),
    ],
    ids=["tanh*sigmoid", "exp", "log", "softmax", "cumprod", "outer", "concat",
         "matmul", "repeat"],
)
def test_grad_check_composites(fn):
    x = Tensor(np.random.default_rng(1).normal(size=5))
    assert grad_check(fn, x) < 1e-5


def test_grad_check_relu_away_from_kink():
    x = Tensor([0.5, -1.2, 2.0, -0.3])
    assert grad_check(lambda v: T.sum(T.relu(v) * v), x) < 1e-5


def test_grad_check_matrix_input():
    x = Tensor(np.random.default_rng(2).normal(size=(3, 2)))
    assert grad_check(lambda v: T.sum(T.tanh(T.matmul(v, T.transpose(v)))), x) < 1e-5


@pytest.mark.parametrize("shape", [(3,), (4, 3)], ids=["vector", "bag"])
def test_affine_matches_numpy_and_grad_checks(shape):
    rng = np.random.default_rng(5)
    x = Tensor(rng.normal(size=shape))
    bias = Tensor(rng.normal(size=5))
    expected = x.values @ W_FIXED.values.T + bias.values
    np.testing.assert_allclose(
        T.affine(x, W_FIXED, bias).values, expected, rtol=1e-12
    )

    assert grad_check(lambda v: T.sum(T.tanh(T.affine(v, W_FIXED, bias))), x) < 1e-5
    assert grad_check(lambda w: T.sum(T.tanh(T.affine(x, w, bias))), W_FIXED) < 1e-5
    assert grad_check(lambda b: T.sum(T.tanh(T.affine(x, W_FIXED, b))), bias) < 1e-5


def test_affine_records_one_node():
    x = Tensor(np.ones(3), requires_grad=True)
    with Tape() as tape:
        T.affine(x, W_FIXED, Tensor(np.zeros(5)))
    assert [node.op for node in tape.nodes] == ["affine"]
    with pytest.raises(DimensionError):
        T.affine(Tensor(np.ones(4)), W_FIXED, Tensor(np.zeros(5)))
    with pytest.raises(DimensionError):
        T.affine(x, W_FIXED, Tensor(np.zeros(3)))


def test_grad_check_eps_range():
    with pytest.raises(ParameterError):
        grad_check(lambda v: T.sum(v), Tensor([1.0]), eps=0.1)


def test_softmax():
    s = T.softmax(Tensor([1000.0, 1000.0]))
    np.testing.assert_allclose(s.values, [0.5, 0.5])
    s = T.softmax(Tensor([1.0, 2.0, 3.0]))
    assert s.values.sum() == pytest.approx(1.0)
    with pytest.raises(PreconditionError):
        T.softmax(Tensor(np.zeros(0)))
    with pytest.raises(DimensionError):
        T.softmax(Tensor(np.zeros((2, 2))))


def test_log_clamp():
    x = Tensor([0.0, 1.0], requires_grad=True)
    with Tape() as tape:
        y = T.log(x)
        tape.backward(T.sum(y))
    assert y.values[0] == pytest.approx(np.log(LOG_FLOOR))
    np.testing.assert_allclose(x.grad, [0.0, 1.0])
    with pytest.raises(DomainError):
        T.log(Tensor([-1.0]), floor=None)


def test_elementwise_dispatch():
    np.testing.assert_allclose(
        T.elementwise("tanh", Tensor([0.5])).values, np.tanh([0.5])
    )
    with pytest.raises(ParameterError):
        T.elementwise("cosh", Tensor([0.5]))


def test_cumprod_gradient_with_zero_entry():
    x = Tensor([0.5, 0.0, 2.0], requires_grad=True)
    with Tape() as tape:
        tape.backward(T.sum(T.cumprod(x)))
    np.testing.assert_allclose(x.grad, [1.0, 1.5, 0.0])


def test_scalar_broadcast_gradient():
    s = Tensor(2.0, requires_grad=True)
    x = Tensor([1.0, 2.0, 3.0], requires_grad=True)
    with Tape() as tape:
        tape.backward(T.sum(x * s))
    assert s.grad == pytest.approx(6.0)
    np.testing.assert_allclose(x.grad, [2.0, 2.0, 2.0])


def test_item_requires_single_element():
    with pytest.raises(ContractError):
        Tensor([1.0, 2.0]).item()
