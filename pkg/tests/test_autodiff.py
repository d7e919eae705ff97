"""Tests for the tape-based autodiff engine."""

import math

import numpy as np
import pytest

from mmdr.autodiff import (
    Tape,
    Tensor,
    add,
    analytic_gradients,
    bce_with_logits,
    check_gradients,
    concat,
    constant,
    cosine_sim_matrix,
    div_scalar,
    dropout,
    embedding_lookup,
    l2_normalize,
    matmul,
    mean_pool_masked,
    numerical_gradient,
    parameter,
    reshape,
    scale,
    sigmoid,
    softmax_cross_entropy_rows,
    stack,
    sum_all,
    tanh,
    transpose,
)
from mmdr.errors import DegenerateInputError, DimensionError, NumericalError, TokenIndexError

GRAD_TOL = 1e-4
SEEDS = range(10)


def readout(t: Tensor) -> Tensor:
    """Fixed random nonlinear scalar of any tensor, so every input entry gets a distinct gradient."""
    flat = reshape(t, (1, t.size))
    weights = constant(np.random.default_rng(1234).normal(size=(t.size, 1)))
    return sum_all(matmul(tanh(flat), weights))


def _op_cases(rng: np.random.Generator):
    """(name, fn, params) triples built from one seeded generator."""
    x = parameter(rng.normal(size=(3, 4)))
    y = parameter(rng.normal(size=(3, 4)))
    b = parameter(rng.normal(size=(4,)))
    w = parameter(rng.normal(size=(4, 2)))
    table = parameter(rng.normal(size=(6, 4)))
    logits = parameter(rng.normal(size=(4, 5)) * 2.0)
    z = parameter(rng.normal(size=(6, 1)) * 2.0)
    targets = rng.integers(0, 5, size=4)
    labels = rng.integers(0, 2, size=6)
    ids = [0, 2, 2, 5]
    mask = [1, 0, 1, 1, 0]
    rows = parameter(rng.normal(size=(5, 4)))
    return [
        ("add_broadcast", lambda: readout(add(x, b)), [x, b]),
        ("scale", lambda: readout(scale(x, 1.7)), [x]),
        ("div_scalar", lambda: readout(div_scalar(x, 0.3)), [x]),
        ("tanh", lambda: readout(tanh(x)), [x]),
        ("sum_all", lambda: sum_all(tanh(x)), [x]),
        ("reshape", lambda: readout(reshape(x, (2, 6))), [x]),
        ("transpose", lambda: readout(transpose(x)), [x]),
        ("concat_rows", lambda: readout(concat([x, y], axis=0)), [x, y]),
        ("concat_cols", lambda: readout(concat([x, y], axis=1)), [x, y]),
        ("stack", lambda: readout(stack([x, y])), [x, y]),
        ("dropout", lambda: readout(dropout(x, 0.3, True, np.random.default_rng(5))), [x]),
        ("matmul", lambda: readout(matmul(x, w)), [x, w]),
        ("embedding_lookup", lambda: readout(embedding_lookup(table, ids)), [table]),
        ("mean_pool_masked", lambda: readout(mean_pool_masked(rows, mask)), [rows]),
        ("l2_normalize", lambda: readout(l2_normalize(x)), [x]),
        ("cosine_sim_matrix", lambda: readout(cosine_sim_matrix(x, y)), [x, y]),
        ("softmax_cross_entropy_rows", lambda: softmax_cross_entropy_rows(logits, targets), [logits]),
        ("bce_with_logits", lambda: bce_with_logits(z, labels), [z]),
    ]


OP_NAMES = [name for name, _, _ in _op_cases(np.random.default_rng(0))]


@pytest.mark.filterwarnings("error::DeprecationWarning")
class TestGradients:
    """Central finite differences against the tape."""

    @pytest.mark.parametrize("seed", SEEDS)
    @pytest.mark.parametrize("op", OP_NAMES)
    def test_op_gradient(self, op, seed):
        cases = {name: (fn, params) for name, fn, params in _op_cases(np.random.default_rng(seed))}
        fn, params = cases[op]
        assert check_gradients(fn, params) < GRAD_TOL

    def test_numerical_gradient_of_quadratic(self):
        x = parameter([1.0, -2.0, 3.0])
        grad = numerical_gradient(lambda: sum_all(matmul(reshape(x, (1, 3)), reshape(x, (3, 1)))), x)
        np.testing.assert_allclose(grad, [2.0, -4.0, 6.0], atol=1e-6)

    def test_reused_input_accumulates(self):
        x = parameter(np.ones((2, 2)))
        (grad,) = analytic_gradients(lambda: sum_all(add(x, x)), [x])
        np.testing.assert_array_equal(grad, np.full((2, 2), 2.0))

    def test_backward_accumulates_across_tapes(self):
        x = parameter(np.ones(3))
        for _ in range(2):
            with Tape() as tape:
                loss = sum_all(scale(x, 3.0))
            tape.backward(loss)
        np.testing.assert_array_equal(x.grad, np.full(3, 6.0))

    def test_embedding_scatter_adds_repeated_ids(self):
        table = parameter(np.zeros((4, 2)))
        with Tape() as tape:
            loss = sum_all(embedding_lookup(table, [1, 1, 3]))
        tape.backward(loss)
        np.testing.assert_array_equal(table.grad, [[0, 0], [2, 2], [0, 0], [1, 1]])

    def test_constants_receive_no_gradient(self):
        x = parameter(np.ones((2, 2)))
        c = constant(np.ones((2, 2)))
        with Tape() as tape:
            loss = sum_all(add(x, c))
        tape.backward(loss)
        assert c.grad is None
        assert x.grad is not None


class TestTape:
    def test_ops_outside_tape_are_not_recorded(self):
        x = parameter(np.ones(3))
        out = tanh(x)
        assert not out.requires_grad
        assert out.node is None

    def test_only_tracked_ops_are_recorded(self):
        x = parameter(np.ones((2, 2)))
        c = constant(np.ones((2, 2)))
        with Tape() as tape:
            tanh(c)
            tanh(x)
        assert len(tape) == 1

    def test_backward_needs_scalar(self):
        x = parameter(np.ones(3))
        with Tape() as tape:
            out = tanh(x)
        with pytest.raises(DimensionError):
            tape.backward(out)

    def test_backward_rejects_foreign_loss(self):
        x = parameter(np.ones(3))
        with Tape():
            loss = sum_all(x)
        with pytest.raises(ValueError):
            Tape().backward(loss)

    def test_nested_tapes_record_innermost(self):
        x = parameter(np.ones(2))
        with Tape() as outer:
            with Tape() as inner:
                sum_all(x)
        assert len(inner) == 1
        assert len(outer) == 0


class TestScalarShapes:
    def test_python_scalar_stays_zero_dimensional(self):
        assert Tensor(3.0).shape == ()
        assert Tensor(3.0).item() == 3.0

    @pytest.mark.parametrize(
        "loss",
        [
            lambda: sum_all(constant(np.ones((2, 3)))),
            lambda: softmax_cross_entropy_rows(constant(np.zeros((3, 4))), [0, 1, 2]),
            lambda: bce_with_logits(constant([[0.5], [-1.0]]), [1, 0]),
        ],
    )
    def test_losses_are_zero_dimensional(self, loss):
        assert loss().shape == ()

    @pytest.mark.filterwarnings("error::DeprecationWarning")
    def test_backward_through_scalar_losses(self):
        logits = parameter(np.random.default_rng(0).normal(size=(3, 4)))
        with Tape() as tape:
            intent = bce_with_logits(reshape(logits, (12, 1)), [1] * 12)
            loss = add(softmax_cross_entropy_rows(logits, [0, 1, 2]), intent)
        tape.backward(loss)
        assert loss.shape == ()
        assert logits.grad is not None and logits.grad.shape == (3, 4)


class TestClosedForms:
    def test_uniform_cross_entropy_is_log_n(self):
        loss = softmax_cross_entropy_rows(constant(np.zeros((3, 5))), [0, 1, 2])
        assert loss.item() == pytest.approx(math.log(5), abs=1e-12)

    @pytest.mark.parametrize("n", range(1, 65))
    def test_uniform_cross_entropy_for_every_width(self, n):
        loss = softmax_cross_entropy_rows(constant(np.full((2, n), 0.37)), [0, n - 1])
        assert abs(loss.item() - math.log(n)) < 1e-12

    def test_bce_positive_logit(self):
        loss = bce_with_logits(constant([[3.0]]), [1])
        assert loss.item() == pytest.approx(math.log1p(math.exp(-3.0)), abs=1e-12)
        assert loss.item() == pytest.approx(0.048587, abs=1e-6)

    def test_bce_at_zero_logit_is_log_2(self):
        loss = bce_with_logits(constant(np.zeros((4, 1))), [0, 1, 1, 0])
        assert loss.item() == pytest.approx(math.log(2), abs=1e-12)

    def test_bce_is_stable_for_large_logits(self):
        loss = bce_with_logits(constant([[800.0], [-800.0]]), [1, 0])
        assert loss.item() == pytest.approx(0.0, abs=1e-12)

    def test_cross_entropy_is_stable_for_large_logits(self):
        loss = softmax_cross_entropy_rows(constant([[1000.0, 0.0]]), [0])
        assert loss.item() == pytest.approx(0.0, abs=1e-12)

    def test_sigmoid_symmetry(self):
        z = np.linspace(-30, 30, 61)
        np.testing.assert_allclose(sigmoid(z) + sigmoid(-z), 1.0, atol=1e-15)
        assert sigmoid(0.0) == 0.5

    def test_l2_normalize_rows_are_unit(self):
        out = l2_normalize(constant(np.random.default_rng(0).normal(size=(4, 3))))
        np.testing.assert_allclose(np.linalg.norm(out.data, axis=1), 1.0, atol=1e-12)

    def test_masked_mean_ignores_masked_rows(self):
        x = constant([[1.0, 1.0], [100.0, 100.0], [3.0, 5.0]])
        np.testing.assert_allclose(mean_pool_masked(x, [1, 0, 1]).data, [2.0, 3.0])

    def test_dropout_is_identity_in_eval_mode(self):
        x = constant(np.ones((2, 3)))
        assert dropout(x, 0.5, False) is x

    def test_dropout_keeps_expectation(self):
        x = constant(np.ones((200, 50)))
        out = dropout(x, 0.5, True, np.random.default_rng(0))
        assert set(np.unique(out.data)) <= {0.0, 2.0}
        assert out.data.mean() == pytest.approx(1.0, abs=0.05)


class TestErrors:
    def test_matmul_inner_dimension(self):
        with pytest.raises(DimensionError):
            matmul(constant(np.ones((2, 3))), constant(np.ones((2, 3))))

    def test_add_incompatible_shapes(self):
        with pytest.raises(DimensionError):
            add(constant(np.ones((2, 3))), constant(np.ones((3, 2))))

    def test_token_outside_vocabulary(self):
        with pytest.raises(TokenIndexError):
            embedding_lookup(constant(np.ones((4, 2))), [1, 4])

    def test_negative_token(self):
        with pytest.raises(TokenIndexError):
            embedding_lookup(constant(np.ones((4, 2))), [-1])

    def test_empty_mask(self):
        with pytest.raises(DegenerateInputError):
            mean_pool_masked(constant(np.ones((3, 2))), [0, 0, 0])

    def test_zero_norm_row(self):
        with pytest.raises(DegenerateInputError):
            l2_normalize(constant([[0.0, 0.0], [1.0, 0.0]]))

    def test_non_positive_divisor(self):
        with pytest.raises(DegenerateInputError):
            div_scalar(constant([1.0]), 0.0)

    def test_overflow_from_finite_inputs(self):
        with pytest.raises(NumericalError):
            scale(constant([1e308]), 10.0)

    def test_zero_sized_tensor(self):
        with pytest.raises(DimensionError):
            Tensor(np.zeros((0, 3)))

    def test_cross_entropy_target_range(self):
        with pytest.raises(DimensionError):
            softmax_cross_entropy_rows(constant(np.zeros((2, 3))), [0, 3])
