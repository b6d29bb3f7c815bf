import numpy as np
import pytest

from wattnet.errors import ContractError, DimensionMismatchError
from wattnet.gradcheck import check_gradients
from wattnet.tensor import Tensor, concat, matmul, no_grad, relu, sigmoid, softmax, tensor


def leaf(rng, *shape):
    return Tensor(rng.standard_normal(shape), requires_grad=True)


class TestArithmetic:
    def test_add_identity(self):
        np.testing.assert_array_equal((tensor([1.0, 2.0]) + tensor([0.0, 0.0])).data, [1, 2])

    def test_add_values(self):
        np.testing.assert_array_equal((tensor([1.0, 2.0]) + tensor([3.0, 4.0])).data, [4, 6])

    def test_mul_grad_hand_case(self):
        a = Tensor([1.0, 2.0], requires_grad=True)
        b = tensor([5.0, 7.0])
        (a * b).sum().backward()
        np.testing.assert_allclose(a.grad, [5, 7])

    def test_broadcast_over_singleton(self, rng):
        a, b = leaf(rng, 3, 1), leaf(rng, 1, 4)
        assert (a + b).shape == (3, 4)
        assert check_gradients(lambda: ((a + b) * (a - b)).sum(), [a, b]) < 1e-6

    def test_shape_mismatch_names_shapes(self):
        with pytest.raises(DimensionMismatchError, match=r"\(2,\).*\(3,\)"):
            tensor([1.0, 2.0]) + tensor([1.0, 2.0, 3.0])

    @pytest.mark.parametrize("op", ["add", "sub", "mul", "div", "pow", "exp", "log", "sqrt", "neg"])
    def test_elementwise_gradients(self, rng, op):
        a = Tensor(rng.uniform(0.5, 2.0, (3, 4)), requires_grad=True)
        b = Tensor(rng.uniform(0.5, 2.0, (3, 4)), requires_grad=True)
        fns = {
            "add": lambda: (a + b).sum(), "sub": lambda: ((a - b) * a).sum(),
            "mul": lambda: (a * b).sum(), "div": lambda: (a / b).sum(),
            "pow": lambda: (a ** 3).sum(), "exp": lambda: a.exp().sum(),
            "log": lambda: a.log().sum(), "sqrt": lambda: a.sqrt().sum(),
            "neg": lambda: (-a * b).sum(),
        }
        assert check_gradients(fns[op], [a, b] if op in ("add", "sub", "mul", "div", "neg") else [a]) < 1e-6


class TestMatmul:
    def test_identity(self):
        m = tensor([[1.0, 2.0], [3.0, 4.0]])
        np.testing.assert_array_equal(matmul(tensor(np.eye(2)), m).data, m.data)

    def test_hand_value(self):
        assert matmul(tensor([[1.0, 2.0]]), tensor([[3.0], [4.0]])).data.tolist() == [[11.0]]

    def test_inner_dim_mismatch(self):
        with pytest.raises(DimensionMismatchError):
            matmul(tensor(np.ones((2, 3))), tensor(np.ones((2, 3))))

    def test_gradient(self, rng):
        a, b = leaf(rng, 3, 3), leaf(rng, 3, 3)
        assert check_gradients(lambda: (a @ b).sum(), [a, b]) < 1e-6


class TestActivations:
    def test_sigmoid_zero(self):
        assert sigmoid(tensor(0.0)).item() == 0.5

    def test_sigmoid_extremes_are_finite(self):
        out = sigmoid(tensor([-1000.0, 1000.0])).data
        assert np.all(np.isfinite(out)) and out[0] >= 0 and out[1] <= 1

    def test_relu(self):
        np.testing.assert_array_equal(relu(tensor([-3.0, 3.0])).data, [0, 3])

    def test_softmax_uniform(self):
        out = softmax(tensor(np.zeros((1, 5))), axis=1).data
        np.testing.assert_allclose(out, 0.2)
        assert abs(out.sum() - 1.0) < 1e-12

    def test_softmax_rows(self, rng):
        out = softmax(tensor(rng.standard_normal((6, 5)) * 30), axis=1).data
        assert np.all(out > 0)
        np.testing.assert_allclose(out.sum(axis=1), 1.0, atol=1e-9)

    def test_softmax_bad_axis(self):
        with pytest.raises(ContractError):
            softmax(tensor(np.zeros((2, 3))), axis=4)

    @pytest.mark.parametrize("fn", ["relu", "sigmoid", "softmax"])
    def test_gradients(self, rng, fn):
        x = leaf(rng, 4, 5)
        w = tensor(rng.standard_normal((4, 5)))
        f = {"relu": lambda: (relu(x) * w).sum(), "sigmoid": lambda: (sigmoid(x) * w).sum(),
             "softmax": lambda: (softmax(x, axis=1) * w).sum()}[fn]
        assert check_gradients(f, [x]) < 1e-6


class TestReductionsAndShapes:
    def test_mean_sum_reshape_transpose_gradients(self, rng):
        x = leaf(rng, 2, 3, 4)
        w = tensor(rng.standard_normal((4, 3, 2)))
        assert check_gradients(lambda: (x.mean(axis=(1,)).sum() + (x.transpose(2, 1, 0) * w).sum()), [x]) < 1e-6
        assert check_gradients(lambda: (x.reshape(6, 4) ** 2).sum(axis=0).sum(), [x]) < 1e-6

    def test_max_grad_goes_to_first_index(self):
        x = Tensor([[1.0, 3.0, 3.0]], requires_grad=True)
        x.max(axis=1).sum().backward()
        np.testing.assert_array_equal(x.grad, [[0, 1, 0]])

    def test_concat_gradient(self, rng):
        a, b = leaf(rng, 2, 3), leaf(rng, 2, 2)
        w = tensor(rng.standard_normal((2, 5)))
        assert check_gradients(lambda: (concat([a, b], axis=1) * w).sum(), [a, b]) < 1e-6

    def test_clip_gradient_zero_outside(self):
        x = Tensor([-2.0, 0.5, 2.0], requires_grad=True)
        x.clip(-1.0, 1.0).sum().backward()
        np.testing.assert_array_equal(x.grad, [0, 1, 0])


class TestBackward:
    def test_sum_gives_ones(self, rng):
        x = leaf(rng, 2, 3, 4)
        x.sum().backward()
        np.testing.assert_array_equal(x.grad, np.ones((2, 3, 4)))

    def test_square_hand_case(self):
        x = Tensor([1.0, -2.0], requires_grad=True)
        (x * x).sum().backward()
        np.testing.assert_array_equal(x.grad, [2, -4])

    def test_non_scalar_loss(self, rng):
        with pytest.raises(ContractError):
            (leaf(rng, 3) * 2).backward()

    def test_fan_out_accumulates(self):
        x = Tensor([3.0], requires_grad=True)
        y = x * 2
        (y + y * y).sum().backward()  # d/dx (2x + 4x^2) = 2 + 8x
        np.testing.assert_allclose(x.grad, [26.0])

    def test_every_reachable_leaf_gets_grad(self, rng):
        a, b, c = leaf(rng, 2), leaf(rng, 2), leaf(rng, 2)
        ((a * b).sum() + c.sum() * 0.0).backward()
        for t in (a, b, c):
            assert t.grad is not None and t.grad.shape == t.shape

    def test_no_grad_builds_no_tape(self, rng):
        x = leaf(rng, 3)
        with no_grad():
            y = x * 2
        assert not y.requires_grad

    def test_deterministic_forward(self, rng):
        data = rng.standard_normal((3, 4))
        r1 = softmax(tensor(data) @ tensor(data.T), axis=1).data
        r2 = softmax(tensor(data) @ tensor(data.T), axis=1).data
        assert r1.tobytes() == r2.tobytes()
