"""Tensor operations and the gradient tape."""

import math

import numpy as np
import pytest

from mcsd import tensor as T
from mcsd.errors import ContractError, DegenerateRowError, ShapeError
from mcsd.tensor import Tape, Tensor, grad_check
from mcsd.verify import primitive_grad_errors


class TestForwardValues:
    """Hand-computed outputs for small inputs."""

    def test_matmul(self):
        out = Tensor([[1.0, 2.0], [3.0, 4.0]]) @ Tensor([[1.0], [1.0]])
        np.testing.assert_array_equal(out.data, [[3.0], [7.0]])

    def test_batched_matmul_broadcasts_leading_dims(self):
        a = Tensor(np.arange(12.0).reshape(2, 2, 3))
        b = Tensor(np.ones((3, 1)))
        np.testing.assert_array_equal(a.__matmul__(b).data[:, :, 0], [[3, 12], [21, 30]])

    def test_row_softmax_masks_minus_inf_to_exact_zero(self):
        out = T.row_softmax(Tensor([[0.0, math.log(2.0), -np.inf]]))
        np.testing.assert_allclose(out.data, [[1 / 3, 2 / 3, 0.0]], rtol=0, atol=1e-15)
        assert out.data[0, 2] == 0.0

    def test_row_softmax_all_minus_inf_row_is_rejected(self):
        with pytest.raises(DegenerateRowError):
            T.row_softmax(Tensor([[-np.inf, -np.inf]]))

    def test_sigmoid_and_silu(self):
        x = Tensor([0.0, 2.0])
        np.testing.assert_allclose(T.sigmoid(x).data, [0.5, 1 / (1 + math.exp(-2))], rtol=1e-15)
        np.testing.assert_allclose(T.silu(x).data, [0.0, 2 / (1 + math.exp(-2))], rtol=1e-15)

    def test_sigmoid_saturates_without_overflow(self):
        with np.errstate(over="raise"):
            out = T.sigmoid(Tensor([-1000.0, 1000.0])).data
        np.testing.assert_array_equal(out, [0.0, 1.0])

    def test_gelu_tanh_form(self):
        x = 1.0
        ref = 0.5 * x * (1 + math.tanh(math.sqrt(2 / math.pi) * (x + 0.044715 * x**3)))
        assert T.gelu(Tensor([x])).data[0] == pytest.approx(ref, rel=1e-15)

    def test_rms_norm(self):
        out = T.rms_norm(Tensor([[3.0, 4.0]]), eps=1e-6).data
        rms = math.sqrt(12.5 + 1e-6)
        np.testing.assert_allclose(out, [[3 / rms, 4 / rms]], rtol=1e-15)

    def test_rms_norm_zero_vector_stays_zero(self):
        np.testing.assert_array_equal(T.rms_norm(Tensor(np.zeros((2, 4)))).data, 0.0)

    def test_rms_norm_rejects_nonpositive_eps(self):
        with pytest.raises(ContractError):
            T.rms_norm(Tensor([1.0]), eps=0.0)

    def test_cross_entropy_uniform_logits_is_log_vocab(self):
        loss = T.softmax_cross_entropy(Tensor(np.zeros((3, 7))), np.array([0, 3, 6]))
        assert float(loss.data) == pytest.approx(math.log(7), rel=1e-15)

    def test_embedding_gathers_rows(self):
        w = Tensor(np.arange(6.0).reshape(3, 2))
        np.testing.assert_array_equal(T.embedding(w, np.array([2, 0])).data, [[4, 5], [0, 1]])

    def test_integer_input_becomes_float64(self):
        assert Tensor([1, 2]).dtype == np.float64


class TestShapeRules:
    def test_mismatched_trailing_dims_raise(self):
        with pytest.raises(ShapeError):
            Tensor(np.ones((2, 3))) + Tensor(np.ones((2,)))

    def test_leading_batch_broadcast_is_allowed(self):
        out = Tensor(np.ones((4, 2, 3))) + Tensor(np.ones((2, 3)))
        assert out.shape == (4, 2, 3)

    def test_matmul_inner_mismatch_raises(self):
        with pytest.raises(ShapeError):
            Tensor(np.ones((2, 3))) @ Tensor(np.ones((2, 3)))

    def test_division_by_tensor_unsupported(self):
        with pytest.raises(ContractError):
            Tensor([1.0]) / Tensor([2.0])


class TestTape:
    """Recording happens only under an active tape."""

    def test_no_tape_no_graph(self):
        x = Tensor([1.0, 2.0], requires_grad=True)
        y = x * x
        assert not y.requires_grad

    def test_product_rule(self):
        x = Tensor([3.0], requires_grad=True)
        with Tape() as tape:
            y = T.sum_all(x * x * x)
        tape.backward(y)
        np.testing.assert_allclose(x.grad, [27.0])

    def test_reused_input_accumulates(self):
        x = Tensor([2.0], requires_grad=True)
        with Tape() as tape:
            y = T.sum_all(x + x * 3.0)
        tape.backward(y)
        np.testing.assert_allclose(x.grad, [4.0])

    def test_broadcast_gradient_sums_over_batch(self):
        b = Tensor(np.zeros(3), requires_grad=True)
        with Tape() as tape:
            y = T.sum_all(Tensor(np.ones((5, 3))) + b)
        tape.backward(y)
        np.testing.assert_array_equal(b.grad, [5.0, 5.0, 5.0])

    def test_embedding_gradient_scatters_repeats(self):
        w = Tensor(np.zeros((3, 2)), requires_grad=True)
        with Tape() as tape:
            y = T.sum_all(T.embedding(w, np.array([1, 1, 2])))
        tape.backward(y)
        np.testing.assert_array_equal(w.grad, [[0, 0], [2, 2], [1, 1]])

    def test_cross_entropy_gradient_is_softmax_minus_onehot(self):
        logits = Tensor(np.array([[0.0, math.log(3.0)]]), requires_grad=True)
        with Tape() as tape:
            loss = T.softmax_cross_entropy(logits, np.array([0]))
        tape.backward(loss)
        np.testing.assert_allclose(logits.grad, [[0.25 - 1.0, 0.75]], rtol=1e-14)

    def test_backward_requires_scalar(self):
        x = Tensor([1.0, 2.0], requires_grad=True)
        with Tape() as tape:
            y = x * 2.0
        with pytest.raises(ContractError):
            tape.backward(y)


class TestGradCheck:
    def test_every_primitive_within_tolerance(self):
        errs = primitive_grad_errors(seed=3)
        assert max(errs.values()) <= 1e-6, errs

    def test_grad_check_detects_a_wrong_gradient(self):
        def bad_square(x):
            def backward(g):
                return (g * 3.0 * x.data,)  # should be 2x
            return T.sum_all(T._result(x.data**2, (x,), backward))

        assert grad_check(bad_square, Tensor([1.0, 2.0])) > 0.4

    def test_grad_check_requires_float64(self):
        with pytest.raises(ContractError):
            grad_check(T.sum_all, Tensor(np.ones(2, dtype=np.float32)))
