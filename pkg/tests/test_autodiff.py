"""Backward-pass contracts: analytic gradients, graph lifecycle rules, and
the finite-difference checker itself."""

import numpy as np
import pytest

import cst.tensor as T
from cst.errors import DeterminismError, GraphError
from cst.tensor import Tensor, backward, grad_check


class TestBackwardBasics:
    def test_sum_gradient_is_ones(self, f64):
        x = Tensor(np.random.default_rng(0).normal(size=(3, 4)), requires_grad=True)
        backward(x.sum())
        np.testing.assert_array_equal(x.grad, np.ones((3, 4)))

    def test_square_sum_gradient(self, f64):
        x = Tensor(np.array([1.0, 2.0]), requires_grad=True)
        backward((x * x).sum())
        np.testing.assert_allclose(x.grad, [2.0, 4.0], atol=1e-15)

    def test_grad_accumulates_over_reuse(self, f64):
        x = Tensor(np.array([3.0]), requires_grad=True)
        backward((x + x).sum())
        np.testing.assert_allclose(x.grad, [2.0])

    def test_non_scalar_loss_rejected(self):
        x = Tensor(np.ones(3), requires_grad=True)
        with pytest.raises(GraphError):
            backward(x * 2.0)

    def test_repeated_backward_rejected(self, f64):
        x = Tensor(np.ones(3), requires_grad=True)
        loss = (x * x).sum()
        backward(loss)
        with pytest.raises(GraphError):
            backward(loss)

    def test_backward_through_shared_subgraph_rejected_after_release(self, f64):
        x = Tensor(np.ones(3), requires_grad=True)
        mid = x * 2.0
        loss1 = mid.sum()
        loss2 = (mid * mid).sum()
        backward(loss1)
        with pytest.raises(GraphError):
            backward(loss2)

    def test_leaf_grad_shapes(self, f64):
        x = Tensor(np.ones((2, 3, 4)), requires_grad=True)
        backward(T.tsum(T.gelu(x)))
        assert x.grad.shape == (2, 3, 4)

    def test_no_grad_blocks_recording(self, f64):
        x = Tensor(np.ones(3), requires_grad=True)
        with T.no_grad():
            y = (x * x).sum()
        assert not y.requires_grad


class TestRandomMlp:
    def test_mlp_gradients_match_finite_differences(self, f64):
        """Random two-layer net; analytic grads vs central differences."""
        rng = np.random.default_rng(4)
        w1 = Tensor(rng.normal(size=(6, 8)))
        w2 = Tensor(rng.normal(size=(8, 3)))
        target = Tensor(rng.normal(size=(5, 3)))

        def f(x):
            h = T.gelu(T.matmul(x, w1))
            out = T.sigmoid(T.matmul(h, w2))
            d = out - target
            return (d * d).mean()

        x0 = Tensor(rng.normal(size=(5, 6)))
        assert grad_check(f, x0, eps=1e-5) < 1e-4


class TestGradCheck:
    def test_linear_function_has_zero_error(self, f64):
        err = grad_check(lambda x: x.sum(), Tensor(np.random.default_rng(0).normal(size=(7,))), eps=1e-5)
        assert err < 1e-9

    def test_softmax_square_sum_small_error(self, f64):
        w = Tensor(np.random.default_rng(3).normal(size=(8,)))

        def f(x):
            y = T.softmax(x, axis=-1)
            return (y * y).sum()

        err = grad_check(f, Tensor(np.random.default_rng(2).normal(size=(8,))), eps=1e-5)
        assert err < 1e-6

    def test_layer_norm_sum_small_error(self, f64):
        gamma = Tensor(np.random.default_rng(5).normal(size=(8,)))
        beta = Tensor(np.random.default_rng(6).normal(size=(8,)))

        def f(x):
            return T.tsum(T.tabs(T.layer_norm(x, gamma, beta)))

        x0 = Tensor(np.random.default_rng(7).normal(size=(4, 4, 8)))
        assert grad_check(f, x0, eps=1e-5) < 1e-5

    def test_eps_range_enforced(self):
        from cst.errors import ConfigError
        with pytest.raises(ConfigError):
            grad_check(lambda x: x.sum(), Tensor(np.ones(2)), eps=1e-2)

    def test_nondeterministic_function_detected(self, f64):
        state = {"n": 0}

        def f(x):
            state["n"] += 1
            return (x * float(state["n"])).sum()

        with pytest.raises(DeterminismError):
            grad_check(f, Tensor(np.ones(3)), eps=1e-5)

    def test_coordinate_subset(self, f64):
        x = Tensor(np.random.default_rng(1).normal(size=(10,)))
        err = grad_check(lambda t: (t * t).sum(), x, eps=1e-5, coords=[0, 3, 9])
        assert err < 1e-8
