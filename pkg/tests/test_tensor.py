import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from vpnlab.errors import ConfigurationError, NumericHealthError, UsageError
from vpnlab.netcore.gradcheck import check_gradients, relative_error
from vpnlab.netcore.params import ParamStore
from vpnlab.netcore.tensor import (
    Tensor,
    add,
    backward,
    concat,
    constant,
    elu,
    mul,
    no_grad,
    reshape,
    sigmoid,
    square,
    sub,
    sum_all,
    take,
)

finite = st.floats(min_value=-5.0, max_value=5.0, allow_nan=False, allow_infinity=False)


def leaf(values: list[float]) -> Tensor:
    return Tensor(np.asarray(values, dtype=np.float64), dtype=np.dtype(np.float64)).requires_grad_()


def test_backward_needs_scalar_loss(float64: None) -> None:
    x = leaf([1.0, 2.0])
    with pytest.raises(UsageError):
        backward(square(x))


def test_backward_needs_recorded_graph(float64: None) -> None:
    with pytest.raises(UsageError):
        backward(constant(3.0))


def test_no_grad_records_nothing(float64: None) -> None:
    x = leaf([1.0, 2.0])
    with no_grad():
        loss = sum_all(square(x))
    assert loss.backward_fn is None
    with pytest.raises(UsageError):
        backward(loss)


def test_square_gradient(float64: None) -> None:
    x = leaf([1.0, -2.0, 3.0])
    backward(sum_all(square(x)))
    np.testing.assert_allclose(x.grad, [2.0, -4.0, 6.0])


def test_shared_subexpression_accumulates(float64: None) -> None:
    x = leaf([1.0, 2.0])
    y = mul(x, x)
    backward(sum_all(add(y, y)))
    np.testing.assert_allclose(x.grad, [4.0, 8.0])


def test_sub_negates_second_gradient(float64: None) -> None:
    a = leaf([1.0, 2.0])
    b = leaf([5.0, 7.0])
    backward(sum_all(sub(a, b)))
    np.testing.assert_allclose(a.grad, [1.0, 1.0])
    np.testing.assert_allclose(b.grad, [-1.0, -1.0])


def test_scalar_broadcast_gradient_sums(float64: None) -> None:
    x = leaf([1.0, 2.0, 3.0])
    scale = leaf([2.0])
    backward(sum_all(mul(x, scale)))
    np.testing.assert_allclose(scale.grad, [6.0])
    np.testing.assert_allclose(x.grad, [2.0, 2.0, 2.0])


def test_take_repeated_indices_sum(float64: None) -> None:
    x = leaf([1.0, 2.0, 3.0])
    backward(sum_all(take(x, [2, 0, 2])))
    np.testing.assert_allclose(x.grad, [1.0, 0.0, 2.0])


def test_concat_splits_gradient(float64: None) -> None:
    a = leaf([1.0, 2.0])
    b = leaf([3.0])
    weights = constant([1.0, 10.0, 100.0])
    backward(sum_all(mul(concat([a, b]), weights)))
    np.testing.assert_allclose(a.grad, [1.0, 10.0])
    np.testing.assert_allclose(b.grad, [100.0])


def test_elementwise_shape_mismatch() -> None:
    with pytest.raises(ConfigurationError):
        add(constant(np.zeros(2)), constant(np.zeros(3)))


def test_reshape_rejects_bad_shape() -> None:
    with pytest.raises(ConfigurationError):
        reshape(constant(np.zeros(6)), (4,))


def test_elu_values(float64: None) -> None:
    y = elu(constant([-1.0, 0.0, 2.0]))
    np.testing.assert_allclose(y.data, [np.exp(-1.0) - 1.0, 0.0, 2.0])


def test_sigmoid_saturates_without_overflow(float64: None) -> None:
    y = sigmoid(constant([-1000.0, 0.0, 1000.0]))
    np.testing.assert_allclose(y.data, [0.0, 0.5, 1.0])


def test_non_finite_values_raise_in_debug_mode(float64: None, debug_mode: None) -> None:
    with np.errstate(over="ignore"), pytest.raises(NumericHealthError) as info:
        mul(constant([1e200]), constant([1e200]))
    assert info.value.diagnostic["inf"] == 1.0


def test_relative_error_floor() -> None:
    assert relative_error(np.array([1e-9]), np.array([0.0])) == pytest.approx(1e-5)
    assert relative_error(np.array([1.0]), np.array([1.0])) == 0.0


def test_relative_error_absolute_allowance() -> None:
    analytic, numeric = np.array([2e-5, -1e-5]), np.array([2e-5 + 3e-10, -1e-5])
    assert relative_error(analytic, numeric) == pytest.approx(3e-6)
    assert relative_error(analytic, numeric, atol=1e-9) == 0.0
    assert relative_error(np.array([1e-5]), np.array([-1e-5]), atol=1e-9) == pytest.approx(0.2)


@settings(max_examples=50, deadline=None)
@given(arrays(np.float64, st.integers(1, 6), elements=finite))
def test_square_gradient_is_twice_input(values: np.ndarray) -> None:
    x = Tensor(values, dtype=np.dtype(np.float64)).requires_grad_()
    backward(sum_all(square(x)))
    np.testing.assert_allclose(x.grad, 2.0 * values)


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 10_000))
def test_composed_ops_match_finite_differences(seed: int) -> None:
    rng = np.random.default_rng(seed)
    store = ParamStore(np.dtype(np.float64))
    a = store.add("a", (2, 3), fan_in=1, rng=rng)
    b = store.add("b", (2, 3), fan_in=1, rng=rng)
    weights = constant(rng.normal(size=(3, 2)))

    def loss() -> Tensor:
        mixed = mul(sigmoid(add(a, b)), elu(sub(a, b)))
        return sum_all(mul(square(reshape(mixed, (3, 2))), weights))

    assert check_gradients(loss, store).passed(1e-6)
