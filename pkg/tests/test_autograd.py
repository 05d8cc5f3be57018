import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra import numpy as hnp

from graphmoe import autograd as ag
from graphmoe.autograd import Tape, Tensor
from graphmoe.errors import ContractError, DegenerateInputError, DimensionError

from fd import check_op, numeric_grad, rel_err


def T(x, grad=False):
    return Tensor(np.array(x, dtype=np.float64), requires_grad=grad)


# --------------------------------------------------------------------------
# documented examples
# --------------------------------------------------------------------------


def test_matmul_examples():
    a = T([[1, 2], [3, 4]])
    assert np.array_equal(ag.matmul(T(np.eye(2)), a).data, a.data)
    assert np.array_equal(ag.matmul(a, T([[5], [6]])).data, [[17], [39]])


def test_matmul_shape_error_names_both_shapes():
    with pytest.raises(DimensionError, match=r"\(2, 3\).*\(2, 2\)"):
        ag.matmul(T(np.ones((2, 3))), T(np.ones((2, 2))))


def test_matmul_grad_of_sum():
    rng = np.random.default_rng(0)
    A, B = rng.normal(size=(3, 4)), rng.normal(size=(4, 2))
    a = T(A, grad=True)
    with Tape() as tape:
        loss = ag.sum(ag.matmul(a, T(B)))
    tape.backward(loss)
    num = numeric_grad(lambda: float(np.sum(a.data @ B)), a.data)
    assert rel_err(a.grad, num) < 1e-6


def test_elementwise_examples():
    assert np.array_equal(ag.hadamard(T([1, 2, 3]), T([0, 0, 0])).data, [0, 0, 0])
    assert np.array_equal(ag.add(T([1, 2]), T([3, 4])).data, [4, 6])
    with pytest.raises(DimensionError):
        ag.add(T([1, 2]), T([1, 2, 3]))
    with pytest.raises(DimensionError):
        ag.hadamard(T(np.ones((2, 3))), T(np.ones(3)))  # no implicit broadcasting
    assert np.array_equal(ag.hadamard(T([1, 2]), 2.0).data, [2, 4])  # scalars are fine


def test_activation_examples():
    assert np.allclose(ag.softmax_last(T([0, 0, 0, 0])).data, 0.25, rtol=0, atol=1e-15)
    assert ag.sigmoid(T(0.0)).data == 0.5
    s = ag.softmax_last(T([2.0, 0.0])).data
    assert s[0] == pytest.approx(np.exp(2) / (np.exp(2) + 1), abs=1e-15)
    assert s[0] == pytest.approx(0.8807970779778823, abs=1e-12)
    assert s[1] == pytest.approx(0.11920292202211755, abs=1e-12)


def test_concat_examples():
    assert np.array_equal(ag.concat_last(T([1.0]), T([2.0, 3.0])).data, [1, 2, 3])
    x = T(np.arange(6.0).reshape(2, 3))
    assert np.array_equal(ag.concat_last(x, T(np.zeros((2, 0)))).data, x.data)
    with pytest.raises(DimensionError):
        ag.concat_last(T(np.ones((2, 3))), T(np.ones((3, 1))))


def test_cross_entropy_examples():
    v = 4
    logits = T(np.zeros((1, 3, v)))
    assert float(ag.cross_entropy(logits, np.array([[0, 3, 2]])).data) == pytest.approx(np.log(4), abs=1e-12)
    sharp = np.zeros((1, 1, 5))
    sharp[0, 0, 2] = 1e4
    assert float(ag.cross_entropy(T(sharp), np.array([[2]])).data) < 1e-8
    with pytest.raises(DegenerateInputError):
        ag.cross_entropy(logits, np.zeros((1, 3), dtype=int), np.zeros((1, 3), dtype=bool))


def test_cross_entropy_mask_and_grad():
    rng = np.random.default_rng(3)
    logits = rng.normal(size=(2, 3, 5))
    targets = rng.integers(0, 5, size=(2, 3))
    mask = np.array([[1, 0, 1], [1, 1, 0]], dtype=bool)
    x = T(logits, grad=True)
    with Tape() as tape:
        loss = ag.cross_entropy(x, targets, mask)
    tape.backward(loss)

    def value():
        z = x.data - x.data.max(-1, keepdims=True)
        lp = z - np.log(np.exp(z).sum(-1, keepdims=True))
        nll = -np.take_along_axis(lp, targets[..., None], -1)[..., 0]
        return float(nll[mask].mean())

    assert float(loss.data) == pytest.approx(value(), abs=1e-12)
    assert rel_err(x.grad, numeric_grad(value, x.data)) < 1e-6
    assert np.all(x.grad[~mask] == 0)


# --------------------------------------------------------------------------
# finite-difference sweep over every differentiable op
# --------------------------------------------------------------------------

R = np.random.default_rng(7)
A34, B34, C45 = R.normal(size=(3, 4)), R.normal(size=(3, 4)), R.normal(size=(4, 5))
POS34 = R.uniform(0.5, 2.0, size=(3, 4))
B234 = R.normal(size=(2, 3, 4))
B245 = R.normal(size=(2, 4, 5))

OPS = {
    "matmul": (ag.matmul, (A34, C45)),
    "matmul_batched": (ag.matmul, (B234, C45)),
    "bmm": (ag.bmm, (B234, B245)),
    "add": (ag.add, (A34, B34)),
    "sub": (ag.sub, (A34, B34)),
    "hadamard": (ag.hadamard, (A34, B34)),
    "div": (ag.div, (A34, POS34)),
    "scale": (lambda a: ag.scale(a, -1.7), (A34,)),
    "expand": (lambda a: ag.expand(a, (2, 3, 4)), (A34[:, :1].copy().reshape(3, 1),)),
    "sigmoid": (ag.sigmoid, (A34,)),
    "tanh": (ag.tanh, (A34,)),
    "silu": (ag.silu, (A34,)),
    "softmax_last": (ag.softmax_last, (A34,)),
    "concat_last": (ag.concat_last, (A34, R.normal(size=(3, 2)))),
    "slice_last": (lambda a: ag.slice_last(a, 1, 3), (A34,)),
    "transpose": (lambda a: ag.transpose(a, (2, 0, 1)), (B234,)),
    "reshape": (lambda a: ag.reshape(a, (4, 6)), (B234,)),
    "take_rows": (lambda a: ag.take_rows(a, np.array([2, 0, 2])), (A34,)),
    "scatter_rows": (lambda a: ag.scatter_rows(a, np.array([4, 1, 0]), 5), (A34,)),
    "sum_all": (lambda a: ag.sum(a), (A34,)),
    "sum_last": (lambda a: ag.sum(a, axis=-1, keepdims=True), (A34,)),
    "sum_first": (lambda a: ag.sum(a, axis=0), (A34,)),
    "mean": (ag.mean, (A34,)),
    "masked_fill": (lambda a: ag.masked_fill(a, A34 > 0.5, 0.0), (A34,)),
    "mul_const": (lambda a: ag.mul_const(a, B34), (A34,)),
    "rms_norm": (lambda a, g: ag.rms_norm(a, g), (B234, R.normal(size=4))),
    "rope": (
        lambda a: ag.rope(a, np.cos(np.arange(6).reshape(3, 2) * 0.3), np.sin(np.arange(6).reshape(3, 2) * 0.3)),
        (B234,),
    ),
}


@pytest.mark.parametrize("name", sorted(OPS))
def test_op_gradients_match_finite_differences(name):
    op, arrays = OPS[name]
    assert check_op(op, *arrays) < 1e-4


def test_rms_norm_gain_receives_gradient():
    x = T(B234)
    g = T(R.normal(size=4), grad=True)
    with Tape() as tape:
        loss = ag.sum(ag.mul_const(ag.rms_norm(x, g), B234))
    tape.backward(loss)
    num = numeric_grad(lambda: float(np.sum(B234 * ag.rms_norm(x, g).data)), g.data)
    assert rel_err(g.grad, num) < 1e-6


# --------------------------------------------------------------------------
# properties
# --------------------------------------------------------------------------


@settings(max_examples=60, deadline=None)
@given(hnp.arrays(np.float64, hnp.array_shapes(min_dims=1, max_dims=3, min_side=1, max_side=6),
                  elements=st.floats(-50, 50)))
def test_softmax_rows_sum_to_one(x):
    s = ag.softmax_last(T(x)).data
    assert np.all(s >= 0)
    assert np.all(np.abs(s.sum(axis=-1) - 1.0) <= 1e-12)


def test_softmax_shift_invariance():
    x = R.normal(size=(5, 7))
    assert np.allclose(ag.softmax_last(T(x)).data, ag.softmax_last(T(x + 100.0)).data, atol=1e-14)


def test_forward_is_bit_deterministic():
    def run():
        a, b = T(A34, grad=True), T(C45, grad=True)
        with Tape() as tape:
            y = ag.softmax_last(ag.matmul(ag.tanh(a), b))
            loss = ag.sum(ag.hadamard(y, y))
        tape.backward(loss)
        return y.data.tobytes(), a.grad.tobytes(), b.grad.tobytes()

    assert run() == run()


def test_float32_stays_float32():
    a = Tensor(A34.astype(np.float32), requires_grad=True)
    with Tape() as tape:
        y = ag.scale(ag.softmax_last(ag.silu(a)), 1.0 / np.sqrt(3.0))
        loss = ag.sum(y)
    assert y.dtype == np.float32
    tape.backward(loss)
    assert a.grad.dtype == np.float32


# --------------------------------------------------------------------------
# tape contract
# --------------------------------------------------------------------------


def test_gradients_accumulate_for_reused_leaves():
    a = T([1.0, 2.0], grad=True)
    with Tape() as tape:
        loss = ag.sum(ag.add(ag.hadamard(a, a), a))
    tape.backward(loss)
    assert np.array_equal(a.grad, [3.0, 5.0])


def test_every_grad_leaf_gets_matching_shape():
    a, b = T(A34, grad=True), T(C45, grad=True)
    with Tape() as tape:
        loss = ag.sum(ag.matmul(a, b))
    tape.backward(loss)
    assert a.grad.shape == a.shape and b.grad.shape == b.shape


def test_backward_twice_is_a_contract_error():
    a = T([1.0], grad=True)
    with Tape() as tape:
        loss = ag.sum(ag.scale(a, 2.0))
    tape.backward(loss)
    with pytest.raises(ContractError):
        tape.backward(loss)
    with pytest.raises(ContractError):
        loss.backward()


def test_non_scalar_loss_is_a_contract_error():
    a = T([1.0, 2.0], grad=True)
    with Tape() as tape:
        y = ag.scale(a, 2.0)
    with pytest.raises(ContractError):
        tape.backward(y)


def test_loss_from_another_tape_is_rejected():
    a = T([1.0], grad=True)
    with Tape():
        loss = ag.sum(a)
    with Tape() as other:
        pass
    with pytest.raises(ContractError):
        other.backward(loss)


def test_ops_outside_a_tape_are_not_recorded():
    a = T([1.0], grad=True)
    y = ag.scale(a, 3.0)
    assert y.is_leaf
    with pytest.raises(ContractError):
        y.backward()


def test_tensor_backward_method():
    a = T([1.0, -2.0], grad=True)
    with Tape():
        loss = ag.sum(ag.hadamard(a, a))
    loss.backward()
    assert np.array_equal(a.grad, [2.0, -4.0])


def test_constants_get_no_gradient():
    a, c = T([1.0, 2.0], grad=True), T([3.0, 4.0])
    with Tape() as tape:
        loss = ag.sum(ag.hadamard(a, c))
    tape.backward(loss)
    assert c.grad is None and np.array_equal(a.grad, [3.0, 4.0])
