"""Model layer: forward/loss/gradients against finite differences and
closed forms."""

import math

import numpy as np
import pytest

from epkit import backend
from epkit.errors import InvalidInput, NumericalError
from epkit.model import (ModelSpec, ParamLayout, backprop_param_grad, cce_loss,
                         forward, forward_batch, init_params, input_gradient,
                         load_checkpoint, param_jacobian, predict_labels,
                         save_checkpoint, spec_from_json, spec_to_json)
from epkit.numerics import RngState


def fd_param_grad(spec, theta, x, y, h=1e-5):
    out = np.zeros_like(theta)
    for j in range(theta.size):
        tp = theta.copy()
        tp[j] += h
        tm = theta.copy()
        tm[j] -= h
        out[j] = (cce_loss(forward(spec, tp, x), y) -
                  cce_loss(forward(spec, tm, x), y)) / (2 * h)
    return out


def rel_err(a, b):
    scale = max(np.max(np.abs(b)), 1e-12)
    return np.max(np.abs(a - b)) / scale


class TestSpecAndInit:
    def test_spec_validation(self):
        with pytest.raises(InvalidInput):
            ModelSpec((5,))
        with pytest.raises(InvalidInput):
            ModelSpec((5, 1))

    def test_layout_bijective(self):
        spec = ModelSpec((4, 3, 2))
        layout = ParamLayout(spec)
        seen = set()
        for layer, (wshape, bshape) in enumerate(
                backend.layer_shapes(spec.layer_sizes)):
            for i in range(wshape[0]):
                for j in range(wshape[1]):
                    seen.add(layout.flat_index(layer, "w", i, j))
            for i in range(bshape[0]):
                seen.add(layout.flat_index(layer, "b", i))
        assert seen == set(range(spec.n_params))

    def test_final_layer_zero_gives_uniform_output(self):
        spec = ModelSpec((7, 5, 3))
        theta = init_params(spec, RngState(0), final_layer_zero=True)
        for seed in range(5):
            x = RngState(seed).normal(size=7) * 3
            logp = forward(spec, theta, x)
            np.testing.assert_allclose(logp, math.log(1 / 3), atol=1e-12)

    def test_same_seed_same_params(self):
        spec = ModelSpec((6, 4, 2))
        a = init_params(spec, RngState(9))
        b = init_params(spec, RngState(9))
        np.testing.assert_array_equal(a, b)

    def test_hidden_weight_variance_he_scaled(self):
        spec = ModelSpec((200, 200, 2))
        theta = init_params(spec, RngState(3), final_layer_zero=True)
        w0, _ = backend.unpack(theta, spec.layer_sizes)[0]
        assert abs(w0.var() - 2.0 / 200) <= 0.1 * (2.0 / 200)


class TestForward:
    def test_probabilities_sum_to_one(self):
        spec = ModelSpec((5, 8, 4))
        theta = init_params(spec, RngState(1))
        X = RngState(2).normal(size=(20, 5))
        logp = forward_batch(spec, theta, X)
        np.testing.assert_allclose(np.exp(logp).sum(axis=1), 1.0, atol=1e-12)

    def test_hand_computed_two_by_two(self):
        # single linear layer: z = W x + b with W = [[1,2],[3,4]], b = (.5,-.5)
        # x = (1,-1) gives z = (-0.5, -1.5); logp = z - logsumexp(z)
        spec = ModelSpec((2, 2))
        theta = backend.pack(
            [(np.array([[1.0, 2.0], [3.0, 4.0]]), np.array([0.5, -0.5]))],
            spec.layer_sizes)
        z = np.array([-0.5, -1.5])
        lse = math.log(math.exp(-0.5) + math.exp(-1.5))
        np.testing.assert_allclose(forward(spec, theta, [1.0, -1.0]), z - lse,
                                   atol=1e-14)

    def test_argmax_shift_invariant(self):
        spec = ModelSpec((4, 6, 3))
        theta = init_params(spec, RngState(5))
        X = RngState(6).normal(size=(30, 4))
        base = predict_labels(spec, theta, X)
        shifted = theta.copy()
        layout = ParamLayout(spec)
        for i in range(3):  # add the same constant to every output bias
            shifted[layout.flat_index(1, "b", i)] += 7.25
        np.testing.assert_array_equal(predict_labels(spec, shifted, X), base)

    def test_nonfinite_raises(self):
        spec = ModelSpec((3, 2))
        theta = init_params(spec, RngState(0))
        theta[0] = np.inf
        with pytest.raises(NumericalError):
            forward(spec, theta, np.ones(3))

    def test_dimension_mismatch(self):
        spec = ModelSpec((3, 2))
        theta = init_params(spec, RngState(0))
        with pytest.raises(InvalidInput):
            forward(spec, theta, np.ones(4))


class TestCceLoss:
    def test_near_perfect_prediction(self):
        y = np.array([0.0, 1.0, 0.0])
        logp = np.log(y + 1e-12)
        assert cce_loss(logp, y) <= 1e-11

    def test_uniform_ten_classes(self):
        logp = np.full(10, math.log(0.1))
        y = np.zeros(10)
        y[4] = 1.0
        assert abs(cce_loss(logp, y) - math.log(10)) <= 1e-12

    def test_output_gradient_is_minus_y(self):
        # dL/d(logp) = -y, checked by finite differences
        y = np.array([0.0, 0.0, 1.0])
        logp = np.log(np.array([0.2, 0.3, 0.5]))
        h = 1e-6
        for k in range(3):
            lp = logp.copy()
            lp[k] += h
            lm = logp.copy()
            lm[k] -= h
            fd = (cce_loss(lp, y) - cce_loss(lm, y)) / (2 * h)
            assert abs(fd - (-y[k])) <= 1e-8


class TestGradients:
    def test_zero_final_layer_bias_gradient(self):
        # with the final layer zeroed the bias gradient is softmax(0) - y
        spec = ModelSpec((6, 4, 3))
        theta = init_params(spec, RngState(2), final_layer_zero=True)
        x = RngState(3).normal(size=6)
        y = np.array([0.0, 1.0, 0.0])
        grad = backprop_param_grad(spec, theta, x, y)
        layout = ParamLayout(spec)
        bias_grad = [grad[layout.flat_index(1, "b", i)] for i in range(3)]
        np.testing.assert_allclose(bias_grad, np.full(3, 1 / 3) - y, atol=1e-12)

    def test_param_grad_finite_differences(self):
        spec = ModelSpec((10, 4, 3))
        theta = init_params(spec, RngState(4))
        x = RngState(5).normal(size=10)
        y = np.zeros(3)
        y[1] = 1.0
        assert rel_err(backprop_param_grad(spec, theta, x, y),
                       fd_param_grad(spec, theta, x, y)) <= 1e-4

    def test_duplicated_point_linearity(self):
        spec = ModelSpec((5, 4, 2))
        theta = init_params(spec, RngState(6))
        x = RngState(7).normal(size=5)
        y = np.array([1.0, 0.0])
        single = backprop_param_grad(spec, theta, x, y)
        summed, _ = backend.weighted_grad_sum(
            theta, spec.layer_sizes, np.vstack([x, x]), -np.vstack([y, y]))
        np.testing.assert_allclose(summed, 2 * single, atol=1e-12)

    def test_jacobian_contraction_identity(self):
        # y^T J equals minus the loss gradient (dL/df = -y)
        spec = ModelSpec((6, 5, 3))
        theta = init_params(spec, RngState(8))
        x = RngState(9).normal(size=6)
        y = np.zeros(3)
        y[2] = 1.0
        jac = param_jacobian(spec, theta, x)
        grad = backprop_param_grad(spec, theta, x, y)
        np.testing.assert_allclose(y @ jac, -grad, atol=1e-12)

    def test_single_class_row_matches_weighted_seed(self):
        # contracting with one class weight reduces to plain backprop on
        # that output
        spec = ModelSpec((4, 3, 2))
        theta = init_params(spec, RngState(10))
        x = RngState(11).normal(size=4)
        jac = param_jacobian(spec, theta, x)
        row = backend.weighted_param_grads(
            theta, spec.layer_sizes, x[None, :], np.array([[1.0, 0.0]]))[0]
        np.testing.assert_allclose(jac[0], row, atol=1e-14)

    def test_jacobian_finite_differences(self):
        spec = ModelSpec((7, 5, 3))
        theta = init_params(spec, RngState(12))
        x = RngState(13).normal(size=7)
        jac = param_jacobian(spec, theta, x)
        h = 1e-5
        idx = RngState(14).integers(0, theta.size, size=25)
        for j in idx:
            tp = theta.copy()
            tp[j] += h
            tm = theta.copy()
            tm[j] -= h
            fd = (forward(spec, tp, x) - forward(spec, tm, x)) / (2 * h)
            assert np.max(np.abs(jac[:, j] - fd)) <= 1e-4 * max(
                1.0, np.max(np.abs(fd)))


class TestInputGradient:
    def test_constant_model_zero_gradient(self):
        spec = ModelSpec((5, 3, 2))
        theta = np.zeros(spec.n_params)
        g = input_gradient(spec, theta, np.ones(5), class_index=0)
        np.testing.assert_allclose(g, 0.0, atol=1e-15)

    def test_finite_differences(self):
        spec = ModelSpec((6, 4, 3))
        theta = init_params(spec, RngState(15))
        x = RngState(16).normal(size=6)
        y = np.array([0.0, 0.0, 1.0])
        g = input_gradient(spec, theta, x, y_one_hot=y)
        h = 1e-6
        fd = np.zeros(6)
        for j in range(6):
            xp = x.copy()
            xp[j] += h
            xm = x.copy()
            xm[j] -= h
            fd[j] = (cce_loss(forward(spec, theta, xp), y) -
                     cce_loss(forward(spec, theta, xm), y)) / (2 * h)
        assert rel_err(g, fd) <= 1e-4

    def test_linear_model_rows(self):
        # for f = logsoftmax(Wx + b), grad_x of class-k log-probability is
        # W_k - sum_j p_j W_j
        spec = ModelSpec((4, 3))
        w = RngState(17).normal(size=(3, 4))
        b = np.zeros(3)
        theta = backend.pack([(w, b)], spec.layer_sizes)
        x = RngState(18).normal(size=4)
        p = np.exp(forward(spec, theta, x))
        for k in range(3):
            g = input_gradient(spec, theta, x, class_index=k)
            np.testing.assert_allclose(g, w[k] - p @ w, atol=1e-12)

    def test_exactly_one_target(self):
        spec = ModelSpec((3, 2))
        theta = init_params(spec, RngState(0))
        with pytest.raises(InvalidInput):
            input_gradient(spec, theta, np.ones(3))


class TestGradientCorrectnessSweep:
    def test_twenty_random_instances(self):
        # analytic parameter and input gradients vs central differences
        for trial in range(20):
            rng = RngState(1000 + trial)
            sizes = (int(rng.integers(3, 9)), int(rng.integers(3, 8)),
                     int(rng.integers(2, 5)))
            spec = ModelSpec(sizes)
            theta = init_params(spec, rng)
            x = rng.normal(size=sizes[0])
            y = np.zeros(sizes[-1])
            y[int(rng.integers(0, sizes[-1]))] = 1.0
            assert rel_err(backprop_param_grad(spec, theta, x, y),
                           fd_param_grad(spec, theta, x, y)) <= 1e-4
            g = input_gradient(spec, theta, x, y_one_hot=y)
            h = 1e-6
            fd = np.zeros(sizes[0])
            for j in range(sizes[0]):
                xp = x.copy()
                xp[j] += h
                xm = x.copy()
                xm[j] -= h
                fd[j] = (cce_loss(forward(spec, theta, xp), y) -
                         cce_loss(forward(spec, theta, xm), y)) / (2 * h)
            assert rel_err(g, fd) <= 1e-4


class TestCheckpointIo:
    def test_binary_roundtrip_bit_exact(self, tmp_path):
        spec = ModelSpec((5, 4, 3))
        theta = init_params(spec, RngState(19))
        path = tmp_path / "model.ckpt"
        save_checkpoint(path, spec, theta)
        spec2, theta2 = load_checkpoint(path)
        assert spec2 == spec
        np.testing.assert_array_equal(theta2, theta)

    def test_bad_magic(self, tmp_path):
        path = tmp_path / "bad.ckpt"
        path.write_bytes(b"NOPE" + b"\0" * 32)
        with pytest.raises(InvalidInput):
            load_checkpoint(path)

    def test_json_roundtrip(self):
        spec = ModelSpec((4, 2))
        theta = init_params(spec, RngState(20))
        text = spec_to_json(spec, theta)
        spec2, theta2 = spec_from_json(text)
        assert spec2 == spec
        np.testing.assert_allclose(theta2, theta, atol=0)
