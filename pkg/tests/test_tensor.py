"""Tensor core: shapes, forward values, NaN policy, and gradient oracles."""

import numpy as np
import pytest

from conftest import check_gradients
from ennbench import ContractError, NonFiniteError, ShapeError, Tensor, conv2d, index_contract


class TestMatmul:
    def test_identity(self, rng):
        a = rng.standard_normal((2, 2)).astype(np.float32)
        eye = Tensor(np.eye(2, dtype=np.float32))
        out = eye.matmul(Tensor(a))
        np.testing.assert_array_equal(out.data, a)

    def test_hand_product(self):
        out = Tensor([[1.0, 2.0], [3.0, 4.0]]).matmul(Tensor([[1.0], [1.0]]))
        np.testing.assert_array_equal(out.data, [[3.0], [7.0]])

    def test_shape_mismatch_names_both_shapes(self):
        with pytest.raises(ShapeError, match=r"\(2, 3\).*\(2, 3\)"):
            Tensor(np.zeros((2, 3))).matmul(Tensor(np.zeros((2, 3))))

    def test_gradients_match_finite_differences(self, rng):
        a = rng.standard_normal((3, 4))
        b = rng.standard_normal((4, 2))
        check_gradients(lambda ts: ts[0].matmul(ts[1]).sum(), [a, b])

    def test_grad_of_sum_is_transpose_broadcast(self, rng):
        # d sum(AB) / dA = B^T summed over output columns, i.e. rows of ones @ B^T
        a = rng.standard_normal((3, 4))
        b = rng.standard_normal((4, 2))
        ta, tb = Tensor(a, requires_grad=True), Tensor(b, requires_grad=True)
        ta.matmul(tb).sum().backward()
        np.testing.assert_allclose(ta.grad, np.ones((3, 2)) @ b.T, rtol=1e-12)


class TestConv2d:
    def test_all_ones_full_kernel(self):
        x = Tensor(np.ones((1, 1, 3, 3), dtype=np.float32))
        k = Tensor(np.ones((1, 1, 3, 3), dtype=np.float32))
        out = conv2d(x, k)
        assert out.shape == (1, 1, 1, 1)
        assert out.data[0, 0, 0, 0] == 9.0

    def test_delta_kernel_is_identity_crop(self, rng):
        x = rng.standard_normal((2, 1, 5, 5)).astype(np.float32)
        k = np.zeros((1, 1, 3, 3), dtype=np.float32)
        k[0, 0, 1, 1] = 1.0
        out = conv2d(Tensor(x), Tensor(k))
        np.testing.assert_array_equal(out.data[:, 0], x[:, 0, 1:4, 1:4])

    def test_kernel_larger_than_input(self):
        with pytest.raises(ShapeError, match="larger than input"):
            conv2d(Tensor(np.zeros((1, 1, 2, 2))), Tensor(np.zeros((1, 1, 3, 3))))

    def test_output_shape_with_stride(self):
        out = conv2d(Tensor(np.zeros((1, 1, 16, 16), dtype=np.float32)),
                     Tensor(np.zeros((4, 1, 3, 3), dtype=np.float32)), stride=2)
        assert out.shape == (1, 4, 7, 7)

    @pytest.mark.parametrize("stride", [1, 2])
    def test_gradients_match_finite_differences(self, rng, stride):
        x = rng.standard_normal((2, 1, 5, 5))
        k = rng.standard_normal((3, 1, 3, 3))
        check_gradients(lambda ts: conv2d(ts[0], ts[1], stride=stride).sum(), [x, k])


class TestLogSoftmax:
    def test_uniform_logits(self):
        out = Tensor([[0.0, 0.0, 0.0]]).log_softmax()
        np.testing.assert_allclose(out.data, -np.log(3.0), rtol=1e-6)

    def test_extreme_logits_no_overflow(self):
        out = Tensor([[1000.0, 0.0]]).log_softmax()
        np.testing.assert_allclose(out.data[0], [0.0, -1000.0], atol=1e-6)

    def test_rows_exponentiate_to_one(self, rng):
        for _ in range(20):
            x = Tensor(rng.standard_normal((4, 7)).astype(np.float32) * 10)
            total = np.exp(x.log_softmax().data).sum(axis=1)
            np.testing.assert_allclose(total, 1.0, atol=1e-6)

    def test_gradients_match_finite_differences(self, rng):
        x = rng.standard_normal((3, 5))
        w = rng.standard_normal((5, 1))
        check_gradients(
            lambda ts: ts[0].log_softmax().matmul(ts[1]).sum(), [x, w])


class TestBackward:
    def test_sum_grad_is_ones(self, rng):
        w = Tensor(rng.standard_normal((3, 4)).astype(np.float32), requires_grad=True)
        w.sum().backward()
        np.testing.assert_array_equal(w.grad, np.ones((3, 4), dtype=np.float32))

    def test_half_squared_norm_grad_is_w(self, rng):
        data = rng.standard_normal((5,)).astype(np.float32)
        w = Tensor(data, requires_grad=True)
        w.mul(w).sum().scale(0.5).backward()
        np.testing.assert_allclose(w.grad, data, rtol=1e-6)

    def test_non_scalar_raises(self):
        with pytest.raises(ContractError, match="scalar"):
            Tensor(np.zeros((2, 2)), requires_grad=True).backward()

    def test_frozen_parameters_get_no_grad(self, rng):
        w = Tensor(rng.standard_normal((3, 3)).astype(np.float32), requires_grad=False)
        x = Tensor(rng.standard_normal((2, 3)).astype(np.float32), requires_grad=True)
        x.matmul(w).sum().backward()
        assert w.grad is None
        assert x.grad is not None

    def test_diamond_graph_visits_node_once(self):
        # y = a*a + a*a reuses the same product node; its parent must see
        # the fully accumulated gradient exactly once: d/da (2 a^2) = 4a.
        a = Tensor(np.array([3.0], dtype=np.float32), requires_grad=True)
        sq = a.mul(a)
        sq.add(sq).sum().backward()
        np.testing.assert_allclose(a.grad, [12.0], rtol=1e-6)

    def test_two_layer_mlp_against_finite_differences(self, rng):
        x = rng.standard_normal((4, 6))
        w1 = rng.standard_normal((6, 5))
        b1 = rng.standard_normal((5,))
        w2 = rng.standard_normal((5, 3))
        b2 = rng.standard_normal((3,))
        labels = np.array([0, 2, 1, 2])

        def loss(ts):
            xx, tw1, tb1, tw2, tb2 = ts
            h = xx.matmul(tw1).add_bias(tb1).relu()
            logits = h.matmul(tw2).add_bias(tb2)
            return logits.log_softmax().gather_rows(labels).mean().scale(-1.0)

        check_gradients(loss, [x, w1, b1, w2, b2])


class TestNanPolicy:
    def test_nan_input_rejected(self):
        with pytest.raises(NonFiniteError):
            Tensor([np.nan, 1.0])

    @pytest.mark.filterwarnings("ignore:overflow encountered")
    def test_overflow_raises_at_source(self):
        big = Tensor(np.full((2, 2), 3e38, dtype=np.float32))
        with pytest.raises(NonFiniteError, match="add"):
            big.add(big)

    def test_forward_determinism(self, rng):
        x = rng.standard_normal((8, 16)).astype(np.float32)
        w = rng.standard_normal((16, 4)).astype(np.float32)
        one = Tensor(x).matmul(Tensor(w)).log_softmax().data
        two = Tensor(x).matmul(Tensor(w)).log_softmax().data
        np.testing.assert_array_equal(one, two)


class TestMiscOps:
    def test_add_bias_shape_guard(self):
        with pytest.raises(ShapeError):
            Tensor(np.zeros((2, 3))).add_bias(Tensor(np.zeros(4)))

    def test_gather_rows(self):
        x = Tensor([[1.0, 2.0], [3.0, 4.0]])
        np.testing.assert_array_equal(x.gather_rows([1, 0]).data, [2.0, 3.0])

    def test_mean_accumulates_float64(self):
        x = Tensor(np.full(1000, 0.1, dtype=np.float32))
        assert x.mean().dtype == np.float64

    def test_index_contract_forward(self):
        h = Tensor(np.arange(12, dtype=np.float32).reshape(2, 6))  # C=3, d=2
        z = np.array([[1.0, 0.0], [0.0, 2.0]], dtype=np.float32)
        out = index_contract(h, z, classes=3)
        np.testing.assert_array_equal(out.data, [[0.0, 2.0, 4.0], [14.0, 18.0, 22.0]])

    def test_reshape_roundtrip_grads(self, rng):
        x = rng.standard_normal((2, 3, 4))
        check_gradients(lambda ts: ts[0].reshape((6, 4)).sum(), [x])

    @pytest.mark.parametrize("op", ["add", "mul", "add_bias", "add_channel_bias",
                                    "relu", "gather", "contract", "mean"])
    def test_gradients_random_instances(self, rng, op):
        for _ in range(10):
            if op == "add":
                a, b = rng.standard_normal((3, 4)), rng.standard_normal((3, 4))
                check_gradients(lambda ts: ts[0].add(ts[1]).mul(ts[0]).sum(), [a, b])
            elif op == "mul":
                a, b = rng.standard_normal((2, 5)), rng.standard_normal((2, 5))
                check_gradients(lambda ts: ts[0].mul(ts[1]).sum(), [a, b])
            elif op == "add_bias":
                a, b = rng.standard_normal((4, 3)), rng.standard_normal((3,))
                check_gradients(lambda ts: ts[0].add_bias(ts[1]).relu().sum(), [a, b])
            elif op == "add_channel_bias":
                a, b = rng.standard_normal((2, 3, 2, 2)), rng.standard_normal((3,))
                check_gradients(lambda ts: ts[0].add_channel_bias(ts[1]).relu().sum(), [a, b])
            elif op == "relu":
                a = rng.standard_normal((3, 6)) + 0.05  # keep clear of the kink
                check_gradients(lambda ts: ts[0].relu().mul(ts[0]).sum(), [a])
            elif op == "gather":
                a = rng.standard_normal((4, 3))
                idx = rng.integers(0, 3, size=4)
                check_gradients(lambda ts: ts[0].gather_rows(idx).mean(), [a])
            elif op == "contract":
                h = rng.standard_normal((3, 8))
                z = rng.standard_normal((3, 2)).astype(np.float32)
                check_gradients(lambda ts: index_contract(ts[0], z, classes=4).sum(), [h])
            else:
                a = rng.standard_normal((5, 5))
                check_gradients(lambda ts: ts[0].mul(ts[0]).mean(), [a])
