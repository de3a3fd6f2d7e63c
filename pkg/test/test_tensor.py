import numpy as np
import pytest

from caila import tensor as T
from caila.exceptions import (
    ContractError,
    DegenerateInputError,
    DimensionError,
    NonFiniteError,
    ParameterError,
)
from caila.tensor import Tape, Tensor, backward


def run_backward(fn, *tensors):
    tape = Tape()
    with tape.recording():
        out = fn(*tensors)
    backward(out, tape)
    return out


def test_rejects_empty_and_nonfinite():
    with pytest.raises(DimensionError):
        Tensor(np.zeros((0, 3)))
    with pytest.raises(NonFiniteError):
        Tensor([1.0, np.nan])


def test_default_precision_is_single():
    assert Tensor([1.0, 2.0]).data.dtype == np.float32
    with T.precision(np.float64):
        assert Tensor([1.0]).data.dtype == np.float64
    assert Tensor([1.0]).data.dtype == np.float32


def test_grad_only_when_required():
    assert Tensor([1.0]).grad is None
    t = Tensor([1.0, 2.0], requires_grad=True)
    assert np.array_equal(t.grad, np.zeros(2))
    assert not t.received_grad


def test_no_recording_outside_tape():
    a = Tensor([1.0, 2.0], requires_grad=True)
    tape = Tape()
    T.add(a, a)
    assert len(tape) == 0
    with tape.recording():
        T.add(a, a)
    assert len(tape) == 1


def test_add_broadcast_gradient():
    a = Tensor(np.ones((3, 2)), requires_grad=True)
    b = Tensor([1.0, 2.0], requires_grad=True)
    run_backward(lambda x, y: T.sum(T.add(x, y)), a, b)
    assert np.array_equal(a.grad, np.ones((3, 2)))
    assert np.array_equal(b.grad, [3.0, 3.0])


def test_shared_input_accumulates():
    a = Tensor([3.0], requires_grad=True)
    run_backward(lambda x: T.sum(T.mul(x, x)), a)
    assert a.grad[0] == pytest.approx(6.0)


def test_matmul_shape_error():
    with pytest.raises(DimensionError):
        T.matmul(Tensor(np.ones((2, 3))), Tensor(np.ones((2, 3))))


def test_batched_matmul_gradient_matches_numpy():
    rng = np.random.default_rng(0)
    a = Tensor(rng.normal(size=(2, 3, 4)), requires_grad=True)
    b = Tensor(rng.normal(size=(4, 5)), requires_grad=True)
    run_backward(lambda x, y: T.sum(T.matmul(x, y)), a, b)
    assert np.allclose(a.grad, np.broadcast_to(b.data.sum(axis=1), (2, 3, 4)), atol=1e-5)
    assert np.allclose(b.grad, np.broadcast_to(a.data.sum(axis=(0, 1))[:, None], (4, 5)), atol=1e-5)


def test_take_and_place():
    x = Tensor(np.arange(12.0).reshape(2, 3, 2), requires_grad=True)
    v = Tensor(np.full((2, 2), 9.0), requires_grad=True)
    out = run_backward(lambda a, b: T.sum(T.mul(T.place(a, 1, b, axis=1), 2.0)), x, v)
    assert out.item() == pytest.approx(2 * (x.data.sum() - x.data[:, 1].sum() + 36.0))
    assert np.array_equal(x.grad[:, 1], np.zeros((2, 2)))
    assert np.array_equal(v.grad, np.full((2, 2), 2.0))

    rows = T.take(Tensor(np.arange(6.0).reshape(3, 2)), [2, 0, 2])
    assert rows.shape == (3, 2)
    with pytest.raises(DimensionError):
        T.take(Tensor(np.ones((3, 2))), [3])


def test_average_of_equal_tensors():
    x = Tensor([1.0, -2.0])
    assert np.array_equal(T.average([x, x, x]).data, x.data)
    with pytest.raises(ParameterError):
        T.average([])
    with pytest.raises(ParameterError):
        T.average([x, Tensor([1.0, 2.0, 3.0])])


def test_softmax_rows_sum_to_one():
    probs = T.softmax(Tensor([[1.0, 2.0, 3.0], [0.0, 0.0, 0.0]]), temperature=0.5)
    assert np.allclose(probs.data.sum(axis=-1), 1.0)
    with pytest.raises(ParameterError):
        T.softmax(Tensor([1.0]), temperature=0.0)


def test_cross_entropy_sharp_temperature_stays_finite():
    logits = Tensor([[1.0, -1.0, 0.5]])
    losses = T.cross_entropy(logits, [1], temperature=5e-4)
    assert np.isfinite(losses.data).all()
    assert losses.data[0] == pytest.approx(2.0 / 5e-4, rel=1e-4)


def test_cross_entropy_checks_targets():
    with pytest.raises(ContractError):
        T.cross_entropy(Tensor([[1.0, 2.0]]), [2])


def test_l2_normalize():
    unit = T.l2_normalize(Tensor([[3.0, 4.0]]))
    assert np.allclose(unit.data, [[0.6, 0.8]])
    with pytest.raises(DegenerateInputError):
        T.l2_normalize(Tensor([[0.0, 0.0]]))


def test_layer_norm_statistics():
    x = Tensor(np.random.default_rng(0).normal(size=(4, 8)) * 3 + 1)
    out = T.layer_norm(x, Tensor(np.ones(8)), Tensor(np.zeros(8)))
    assert np.allclose(out.data.mean(axis=-1), 0.0, atol=1e-5)
    assert np.allclose(out.data.std(axis=-1), 1.0, atol=1e-3)
    with pytest.raises(DimensionError):
        T.layer_norm(x, Tensor(np.ones(4)), Tensor(np.zeros(4)))


def test_gelu_values():
    out = T.gelu(Tensor([0.0, 1.0, -1.0]))
    assert np.allclose(out.data, [0.0, 0.8413447, -0.1586553], atol=1e-6)


def test_overflow_raises_nonfinite():
    with pytest.raises(NonFiniteError):
        T.mul(Tensor([3e38]), Tensor([10.0]))


def test_backward_needs_scalar():
    x = Tensor([1.0, 2.0], requires_grad=True)
    tape = Tape()
    with tape.recording():
        out = T.mul(x, x)
    with pytest.raises(ContractError):
        backward(out, tape)


def test_retain_grads_on_intermediates():
    x = Tensor([1.0, 2.0], requires_grad=True)
    tape = Tape()
    with tape.recording():
        doubled = T.scale(x, 2.0)
        out = T.sum(doubled)
    backward(out, tape, retain_grads=True)
    assert np.array_equal(doubled.grad, [1.0, 1.0])
    assert np.array_equal(x.grad, [2.0, 2.0])
