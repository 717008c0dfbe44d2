import numpy as np
import pytest
from numpy.testing import assert_allclose, assert_array_equal

from engine import GradientTape, Tensor, is_grad_enabled, no_grad
from errors import ShapeMismatch


def numeric_gradient(fn, array, h=1e-6):
    grad = np.zeros_like(array)
    for index in np.ndindex(array.shape):
        saved = array[index]
        array[index] = saved + h
        plus = fn()
        array[index] = saved - h
        minus = fn()
        array[index] = saved
        grad[index] = (plus - minus) / (2 * h)
    return grad


def check_gradients(build, *shapes, seed=0):
    """build(*tensors) -> scalar Tensor; compares tape gradients with central differences."""
    rng = np.random.default_rng(seed)
    arrays = [rng.normal(size=s) for s in shapes]
    tensors = [Tensor(a, requires_grad=True) for a in arrays]
    build(*tensors).backward()
    for tensor, array in zip(tensors, arrays):
        expected = numeric_gradient(lambda: build(*[Tensor(a) for a in arrays]).item(), array)
        assert_allclose(tensor.grad, expected, rtol=1e-5, atol=1e-7)


class TestElementwise:
    @pytest.mark.parametrize("seed", range(5))
    def test_add_mul_sub(self, seed):
        check_gradients(lambda a, b: ((a + b) * (a - b) * b).sum(), (3, 4), (3, 4), seed=seed)

    def test_scalar_operands(self):
        check_gradients(lambda a: ((2.0 * a + 1.0) / 4.0 - 3.0).square().mean(), (5,))

    def test_shape_mismatch_raises(self):
        with pytest.raises(ShapeMismatch):
            Tensor(np.ones((2, 3))) + Tensor(np.ones((3, 2)))
        with pytest.raises(ShapeMismatch):
            Tensor(np.ones(3)) / Tensor(np.ones(3))


class TestNonlinearities:
    @pytest.mark.parametrize("seed", range(5))
    def test_sigmoid_and_square(self, seed):
        check_gradients(lambda a: a.sigmoid().square().sum(), (4, 3), seed=seed)

    def test_relu_gradient_is_mask(self):
        x = Tensor(np.array([-1.5, 0.5, 2.0, -0.1]), requires_grad=True)
        x.relu().sum().backward()
        assert_array_equal(x.grad, [0.0, 1.0, 1.0, 0.0])


class TestLayout:
    def test_reshape_permute_index(self):
        check_gradients(lambda a: (a.reshape(3, 2, 2).permute(2, 0, 1)[1:, :, 0].square()).sum(), (4, 3))

    def test_getitem_scatter_adds_repeated_indices(self):
        x = Tensor(np.arange(4.0), requires_grad=True)
        x[np.array([0, 0, 2])].sum().backward()
        assert_array_equal(x.grad, [1.0, 0.0, 1.0, 0.0])

    def test_bad_reshape_raises(self):
        with pytest.raises(ShapeMismatch):
            Tensor(np.ones(6)).reshape(4, 2)
        with pytest.raises(ShapeMismatch):
            Tensor(np.ones((2, 3))).permute(0, 0)


class TestBackward:
    def test_shared_subexpression_accumulates(self):
        x = Tensor(np.array([1.0, 2.0, 3.0]), requires_grad=True)
        y = x * x
        (y + y * 3.0).sum().backward()
        assert_allclose(x.grad, 8.0 * x.data)

    def test_leaf_gradients_accumulate_across_calls(self):
        x = Tensor(np.array([1.0, -2.0]), requires_grad=True)
        (x * 2.0).sum().backward()
        (x * 3.0).sum().backward()
        assert_allclose(x.grad, [5.0, 5.0])
        x.zero_grad()
        assert x.grad is None

    def test_non_scalar_needs_gradient(self):
        x = Tensor(np.ones(3), requires_grad=True)
        with pytest.raises(ShapeMismatch):
            (x * 2.0).backward()
        (x * 2.0).backward(np.array([1.0, 0.0, -1.0]))
        assert_allclose(x.grad, [2.0, 0.0, -2.0])

    def test_constant_backward_raises(self):
        with pytest.raises(ShapeMismatch):
            Tensor(np.ones(1)).sum().backward()

    def test_tape_orders_parents_before_children(self):
        a = Tensor(np.ones(2), requires_grad=True)
        b = a * 2.0
        c = (a + b).sum()
        tape = GradientTape.record(c)
        position = {id(node): i for i, node in enumerate(tape.nodes)}
        assert position[id(a)] < position[id(b)] < position[id(c)]
        assert len(tape) == 4

    def test_long_chain_does_not_recurse(self):
        x = Tensor(np.array([1.0]), requires_grad=True)
        y = x
        for _ in range(5000):
            y = y + 0.0
        y.sum().backward()
        assert_allclose(x.grad, [1.0])


class TestNoGrad:
    def test_no_grad_records_nothing(self):
        x = Tensor(np.ones(3), requires_grad=True)
        with no_grad():
            assert not is_grad_enabled()
            y = (x * 2.0).sum()
        assert is_grad_enabled()
        assert not y.requires_grad
        assert y.is_leaf

    def test_dtype_preserved(self):
        x = Tensor(np.ones(3, dtype=np.float32), requires_grad=True)
        y = (x * 2.0 + 1.0).sigmoid()
        assert y.dtype == np.float32
        y.sum().backward()
        assert x.grad.dtype == np.float32
