# tests/test_autograd.py

from __future__ import annotations

import numpy as np
import pytest
from hypothesis import assume, given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from attention_reid.autograd import (
    Tape,
    add,
    apply_activation,
    finite_difference_check,
    l2_normalize,
    matmul,
    max_reduce,
    mul,
    reduce_sum,
    sigmoid,
    softmax,
    softmax_cross_entropy,
    take,
    tanh,
)
from attention_reid.errors import (
    ConfigurationError,
    DegenerateInputError,
    DimensionError,
    NumericalError,
    UsageError,
)

finite = st.floats(min_value=-5.0, max_value=5.0, allow_nan=False, allow_infinity=False)


def _vector(n: int):
    return arrays(np.float64, n, elements=finite)


def test_matmul_identity_and_hand_computed():
    tape = Tape()
    eye = tape.constant([[1.0, 0.0], [0.0, 1.0]])
    col = tape.constant([[3.0], [4.0]])
    assert np.array_equal(matmul(eye, col).data, [[3.0], [4.0]])
    assert matmul(tape.constant([[1.0, 2.0]]), col).data.tolist() == [[11.0]]


def test_matmul_shape_mismatch_names_both_shapes():
    tape = Tape()
    with pytest.raises(DimensionError, match=r"\(2, 3\).*\(2, 3\)"):
        matmul(tape.constant(np.ones((2, 3))), tape.constant(np.ones((2, 3))))


def test_matmul_gradient_matches_finite_differences():
    rng = np.random.default_rng(0)
    b = rng.standard_normal((4, 2))

    def f(x):
        return reduce_sum(matmul(x, x.tape.constant(b)))

    assert finite_difference_check(f, rng.standard_normal((3, 4))).max_relative_error < 1e-6


def test_activation_values_at_zero():
    tape = Tape()
    zero = tape.constant([0.0])
    assert abs(sigmoid(zero).item() - 0.5) < 1e-15
    assert tanh(zero).item() == 0.0


def test_unknown_activation_is_a_configuration_error():
    tape = Tape()
    with pytest.raises(ConfigurationError):
        apply_activation(tape.constant([1.0]), "softplus")


def test_sigmoid_gradient_at_3_7():
    check = finite_difference_check(lambda x: reduce_sum(sigmoid(x)), [3.7])
    assert check.max_relative_error < 1e-6


def test_softmax_examples():
    tape = Tape()
    assert np.allclose(softmax(tape.constant([0.0, 0.0, 0.0, 0.0])).data, 0.25, atol=1e-15)
    c = 1.3
    out = softmax(tape.constant([c, c + np.log(2.0)])).data
    assert np.allclose(out, [1 / 3, 2 / 3], atol=1e-12)
    big = softmax(tape.constant([1000.0, 1001.0])).data
    assert np.all(np.isfinite(big))
    e = np.e
    assert np.allclose(big, [1 / (1 + e), e / (1 + e)], atol=1e-12)


def test_softmax_of_empty_input_is_a_dimension_error():
    tape = Tape()
    with pytest.raises(DimensionError):
        softmax(tape.constant(np.zeros(0)))


@settings(max_examples=200)
@given(_vector(6), st.floats(min_value=-50.0, max_value=50.0))
def test_softmax_is_a_distribution_and_shift_invariant(x, shift):
    tape = Tape()
    y = softmax(tape.constant(x)).data
    assert np.all(y > 0) and np.all(y <= 1)
    assert abs(y.sum() - 1.0) < 1e-12
    assert np.allclose(softmax(tape.constant(x + shift)).data, y, atol=1e-12)


def test_l2_normalize_examples():
    tape = Tape()
    assert np.allclose(l2_normalize(tape.constant([3.0, 4.0])).data, [0.6, 0.8], atol=1e-15)
    assert np.allclose(l2_normalize(tape.constant([0.0, 0.0, 7.0])).data, [0.0, 0.0, 1.0])


def test_l2_normalize_of_a_dead_vector_is_degenerate():
    tape = Tape()
    with pytest.raises(DegenerateInputError):
        l2_normalize(tape.constant([0.0, 0.0, 0.0]))


@settings(max_examples=200)
@given(_vector(5), st.floats(min_value=1e-3, max_value=1e3))
def test_l2_normalize_unit_norm_and_direction(x, c):
    assume(np.linalg.norm(x) > 1e-6)
    tape = Tape()
    y = l2_normalize(tape.constant(x)).data
    assert abs(np.linalg.norm(y) - 1.0) < 1e-10
    assert np.allclose(l2_normalize(tape.constant(c * x)).data, y, atol=1e-10)


def test_l2_normalize_gradient_of_dot_product():
    rng = np.random.default_rng(3)
    v = rng.standard_normal(6)

    def f(x):
        return reduce_sum(mul(l2_normalize(x), v))

    assert finite_difference_check(f, rng.standard_normal(6)).max_relative_error < 1e-5


def test_backward_of_a_leaf_is_one():
    tape = Tape()
    x = tape.variable([2.5])
    tape.backward(x)
    assert x.grad.tolist() == [1.0]


def test_backward_of_quadratic():
    tape = Tape()
    x = tape.variable([1.0, 2.0])
    reduce_sum(mul(x, x)).backward()
    assert x.grad.tolist() == [2.0, 4.0]


def test_backward_needs_a_scalar_root():
    tape = Tape()
    x = tape.variable([1.0, 2.0])
    with pytest.raises(UsageError):
        tape.backward(mul(x, x))


def test_two_consumers_sum_their_gradients():
    value = np.array([0.3, -1.2, 2.0])

    def grad(build):
        tape = Tape()
        x = tape.variable(value)
        tape.backward(build(x))
        return x.grad

    both = grad(lambda x: add(reduce_sum(sigmoid(x)), reduce_sum(mul(x, x))))
    first = grad(lambda x: reduce_sum(sigmoid(x)))
    second = grad(lambda x: reduce_sum(mul(x, x)))
    assert np.allclose(both, first + second, atol=1e-15)


def test_take_with_repeated_indices_accumulates():
    tape = Tape()
    x = tape.variable([[1.0, 2.0], [3.0, 4.0]])
    reduce_sum(take(x, [0, 0, 1])).backward()
    assert x.grad.tolist() == [[2.0, 2.0], [1.0, 1.0]]


def test_max_reduce_routes_gradient_to_first_maximum():
    tape = Tape()
    x = tape.variable([[1.0, 5.0, 5.0]])
    reduce_sum(max_reduce(x, axis=1)).backward()
    assert x.grad.tolist() == [[0.0, 1.0, 0.0]]


def test_non_finite_forward_value_raises_when_checking():
    tape = Tape(check_finite=True)
    x = tape.variable([np.inf])
    with pytest.raises(NumericalError):
        add(x, 1.0)


def test_operands_from_different_tapes_are_rejected():
    a = Tape().variable([1.0])
    b = Tape().variable([1.0])
    with pytest.raises(UsageError):
        add(a, b)


def test_item_rejects_non_scalars():
    with pytest.raises(UsageError):
        Tape().constant([1.0, 2.0]).item()


def test_finite_difference_of_a_linear_function_is_exact():
    rng = np.random.default_rng(1)
    check = finite_difference_check(lambda x: reduce_sum(x), rng.uniform(-1, 1, 8))
    assert check.max_relative_error < 1e-9
    assert check.coordinates == 8


def test_finite_difference_of_squared_norm():
    rng = np.random.default_rng(2)
    check = finite_difference_check(lambda x: reduce_sum(mul(x, x)), rng.uniform(-1, 1, 8))
    assert check.max_relative_error < 1e-7


def test_finite_difference_of_softmax_cross_entropy():
    rng = np.random.default_rng(4)
    labels = [0, 2, 1]
    check = finite_difference_check(lambda x: softmax_cross_entropy(x, labels), rng.standard_normal((3, 4)))
    assert check.max_relative_error < 1e-6


def test_finite_difference_rejects_bad_step():
    with pytest.raises(UsageError):
        finite_difference_check(lambda x: reduce_sum(x), [1.0], step=0.0)
