import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from gwavenet import nn
from gwavenet.nn import (
    Conv,
    Dense,
    Dropout,
    Flatten,
    MaxPool,
    Relu,
    Sigmoid,
    bce_loss,
    l2_penalty,
    sgd_step,
)
from gwavenet.tensor import Rng


def numeric_grad(f, x, h=1e-3):
    """Central finite differences with the actually-applied step width."""
    g = np.zeros(x.shape, np.float64)
    it = np.nditer(x, flags=["multi_index"])
    for _ in it:
        idx = it.multi_index
        orig = x[idx]
        x[idx] = x.dtype.type(orig + h)
        vp = x[idx]
        fp = f()
        x[idx] = x.dtype.type(orig - h)
        vm = x[idx]
        fm = f()
        x[idx] = orig
        g[idx] = (fp - fm) / (float(vp) - float(vm))
    return g


def assert_grads_close(analytic, numeric, rtol=1e-4, atol=1e-6):
    analytic = np.asarray(analytic, np.float64)
    diff = np.abs(analytic - numeric)
    tol = atol + rtol * np.maximum(np.abs(analytic), np.abs(numeric))
    worst = (diff - tol).max()
    assert np.all(diff <= tol), f"gradient mismatch, worst excess {worst:.3g}"


def scalarize(y, coef):
    """Deterministic scalar objective sum(coef * y) for gradient checks."""
    return float((np.asarray(y, np.float64) * coef).sum())


class TestConvGradients:
    @pytest.mark.parametrize("case", range(20))
    def test_conv_dx_dw_db_match_finite_differences(self, case):
        rng = np.random.default_rng(200 + case)
        n = int(rng.integers(1, 3))
        c = int(rng.integers(1, 3))
        f = int(rng.integers(1, 3))
        k = int(rng.choice([1, 3]))
        h = int(rng.integers(k + 1, k + 5))
        padding = "same" if case % 2 else "valid"
        x = rng.standard_normal((n, c, h, h))
        layer = Conv(rng.standard_normal((f, c, k, k)), rng.standard_normal(f), padding=padding)
        out, cache = layer.forward(x)
        coef = rng.standard_normal(out.shape)
        dx, grads = layer.backward(cache, coef.astype(x.dtype))

        assert_grads_close(dx, numeric_grad(lambda: scalarize(layer.forward(x)[0], coef), x))
        assert_grads_close(
            grads["w"], numeric_grad(lambda: scalarize(layer.forward(x)[0], coef), layer.w)
        )
        assert_grads_close(
            grads["b"], numeric_grad(lambda: scalarize(layer.forward(x)[0], coef), layer.b)
        )


class TestDenseGradients:
    @pytest.mark.parametrize("case", range(20))
    def test_dense_matches_finite_differences(self, case):
        rng = np.random.default_rng(300 + case)
        n = int(rng.integers(1, 5))
        din = int(rng.integers(1, 6))
        dout = int(rng.integers(1, 5))
        x = rng.standard_normal((n, din))
        layer = Dense(rng.standard_normal((din, dout)), rng.standard_normal(dout))
        out, cache = layer.forward(x)
        coef = rng.standard_normal(out.shape)
        dx, grads = layer.backward(cache, coef)
        fn = lambda: scalarize(layer.forward(x)[0], coef)
        assert_grads_close(dx, numeric_grad(fn, x))
        assert_grads_close(grads["w"], numeric_grad(fn, layer.w))
        assert_grads_close(grads["b"], numeric_grad(fn, layer.b))

    def test_dense_3_to_2_relative_tolerance(self):
        rng = np.random.default_rng(42)
        x = rng.standard_normal((4, 3))
        layer = Dense(rng.standard_normal((3, 2)), rng.standard_normal(2))
        out, cache = layer.forward(x)
        coef = rng.standard_normal(out.shape)
        _, grads = layer.backward(cache, coef)
        num = numeric_grad(lambda: scalarize(layer.forward(x)[0], coef), layer.w)
        assert np.max(np.abs(grads["w"] - num) / np.maximum(np.abs(num), 1e-8)) < 1e-4


class TestReluAndPoolGradients:
    def test_relu_gate(self):
        layer = Relu()
        x = np.array([[-1.0, 0.0, 2.0]])
        out, cache = layer.forward(x)
        assert np.array_equal(out, [[0.0, 0.0, 2.0]])
        dx, _ = layer.backward(cache, np.array([[1.0, 1.0, 1.0]]))
        assert np.array_equal(dx, [[0.0, 0.0, 1.0]])

    @pytest.mark.parametrize("case", range(20))
    def test_maxpool_matches_finite_differences(self, case):
        rng = np.random.default_rng(400 + case)
        h = int(rng.integers(2, 7))
        w = int(rng.integers(2, 7))
        # distinct values keep the argmax stable under the FD perturbation
        x = rng.permutation(h * w * 2).astype(np.float64).reshape(1, 2, h, w)
        layer = MaxPool()
        out, cache = layer.forward(x)
        coef = rng.standard_normal(out.shape)
        dx, _ = layer.backward(cache, coef)
        assert_grads_close(dx, numeric_grad(lambda: scalarize(layer.forward(x)[0], coef), x))

    def test_maxpool_routes_all_mass_to_argmax(self):
        rng = np.random.default_rng(5)
        x = rng.standard_normal((2, 3, 6, 5)).astype(np.float32)
        layer = MaxPool()
        out, cache = layer.forward(x)
        dy = rng.standard_normal(out.shape).astype(np.float32)
        dx, _ = layer.backward(cache, dy)
        assert dx.astype(np.float64).sum() == pytest.approx(dy.astype(np.float64).sum(), abs=1e-5)
        # nonzero positions must be window maxima
        nz = np.argwhere(dx != 0)
        for n_, c_, i, j in nz:
            win = x[n_, c_, (i // 2) * 2:(i // 2) * 2 + 2, (j // 2) * 2:(j // 2) * 2 + 2]
            assert x[n_, c_, i, j] == win.max()


class TestDropout:
    def test_eval_mode_is_identity(self):
        layer = Dropout(0.5)
        x = np.arange(12, dtype=np.float32).reshape(3, 4)
        out, cache = layer.forward(x, mode="eval")
        assert out is x
        assert cache is None

    def test_train_mode_masks_and_scales(self):
        layer = Dropout(0.5)
        x = np.ones((4, 8), np.float32)
        out, (keep, scale) = layer.forward(x, mode="train", rng=Rng(3))
        assert scale == 2.0
        assert set(np.unique(out)) <= {0.0, 2.0}
        dx, _ = layer.backward((keep, scale), np.ones_like(x))
        assert np.array_equal(dx, out)

    def test_expectation_preserved(self):
        layer = Dropout(0.5)
        x = np.ones((100, 100), np.float32)
        total = 0.0
        for i in range(10):
            out, _ = layer.forward(x, mode="train", rng=Rng(1000 + i))
            total += out.mean()
        assert abs(total / 10 - 1.0) < 0.03

    def test_train_mode_needs_rng(self):
        with pytest.raises(ValueError, match="rng"):
            Dropout(0.5).forward(np.ones((2, 2)), mode="train")

    def test_bad_rate_rejected(self):
        for rate in (-0.1, 1.0, 1.5):
            with pytest.raises(ValueError, match="rate"):
                Dropout(rate)


class TestSigmoid:
    def test_midpoint_and_saturation(self):
        layer = Sigmoid()
        out, _ = layer.forward(np.array([0.0, 40.0, -40.0]))
        assert out[0] == pytest.approx(0.5)
        assert 0.0 < out[2] < out[0] < out[1] < 1.0
        assert np.all(np.isfinite(out))

    def test_matches_finite_differences(self):
        rng = np.random.default_rng(6)
        x = rng.standard_normal((3, 1)) * 3
        layer = Sigmoid()
        out, cache = layer.forward(x)
        coef = rng.standard_normal(out.shape)
        dx, _ = layer.backward(cache, coef)
        assert_grads_close(dx, numeric_grad(lambda: scalarize(layer.forward(x)[0], coef), x))

    def test_composite_with_bce_is_stable_at_saturation(self):
        layer = Sigmoid()
        z = np.array([[500.0], [-500.0]])
        p, cache = layer.forward(z)
        loss, dp = bce_loss(p[:, 0], np.array([0.0, 1.0]))
        dz, _ = layer.backward(cache, dp[:, None])
        assert np.all(np.isfinite(dz))
        # dL/dz = (p - y)/n at the clamp
        assert dz[0, 0] == pytest.approx(0.5, rel=1e-5)
        assert dz[1, 0] == pytest.approx(-0.5, rel=1e-5)


class TestBceLoss:
    def test_half_prediction(self):
        loss, _ = bce_loss(np.array([0.5]), np.array([1.0]))
        assert loss == pytest.approx(math.log(2), abs=1e-9)

    def test_perfect_prediction_loss_tiny(self):
        p = np.array([1.0 - nn.PRED_EPS, nn.PRED_EPS])
        y = np.array([1.0, 0.0])
        loss, _ = bce_loss(p, y)
        assert loss <= 1.7e-6

    def test_gradient_matches_finite_differences(self):
        rng = np.random.default_rng(7)
        p = rng.uniform(0.05, 0.95, 8)
        y = (rng.uniform(size=8) < 0.5).astype(np.float64)
        _, dp = bce_loss(p, y)
        num = numeric_grad(lambda: bce_loss(p, y)[0], p, h=1e-5)
        assert np.max(np.abs(dp - num)) < 1e-5

    def test_bad_labels_rejected(self):
        with pytest.raises(ValueError, match="labels"):
            bce_loss(np.array([0.5]), np.array([0.3]))

    def test_shape_mismatch_rejected(self):
        with pytest.raises(ValueError, match="shapes"):
            bce_loss(np.array([0.5, 0.5]), np.array([1.0]))

    def test_loss_nonnegative_property(self):
        rng = np.random.default_rng(8)
        for _ in range(50):
            p = rng.uniform(0, 1, 5)
            y = (rng.uniform(size=5) < 0.5).astype(np.float64)
            loss, _ = bce_loss(p, y)
            assert loss >= 0.0


class TestL2Penalty:
    def test_zero_lambda(self):
        loss, grad = l2_penalty(np.array([1.0, 2.0]), 0.0)
        assert loss == 0.0
        assert np.array_equal(grad, [0.0, 0.0])

    def test_hand_case(self):
        loss, grad = l2_penalty(np.array([1.0, 2.0]), 0.5)
        assert loss == pytest.approx(2.5)
        assert np.allclose(grad, [1.0, 2.0])

    def test_gradient_matches_finite_differences(self):
        rng = np.random.default_rng(9)
        w = rng.standard_normal(6)
        _, grad = l2_penalty(w, 0.37)
        num = numeric_grad(lambda: l2_penalty(w, 0.37)[0], w, h=1e-5)
        assert np.max(np.abs(grad - num)) < 1e-6

    def test_negative_lambda_rejected(self):
        with pytest.raises(ValueError):
            l2_penalty(np.ones(3), -0.1)


class TestSgdStep:
    def test_zero_lr_is_noop(self):
        layer = Dense(np.ones((2, 2), np.float32), np.zeros(2, np.float32))
        before = layer.w.copy()
        sgd_step([layer], [{"w": np.ones((2, 2), np.float32), "b": np.zeros(2, np.float32)}], 0.0)
        assert np.array_equal(layer.w, before)

    def test_hand_update(self):
        layer = Dense(np.array([[1.0]], np.float32), np.zeros(1, np.float32))
        sgd_step([layer], [{"w": np.array([[0.5]], np.float32), "b": np.zeros(1, np.float32)}], 0.1)
        assert layer.w[0, 0] == pytest.approx(0.95)

    def test_frozen_layer_bit_identical_after_100_steps(self):
        rng = np.random.default_rng(10)
        layer = Conv(
            rng.standard_normal((2, 1, 3, 3)).astype(np.float32),
            np.zeros(2, np.float32),
            trainable=False,
        )
        before = layer.w.tobytes()
        g = {"w": np.ones_like(layer.w), "b": np.ones_like(layer.b)}
        for _ in range(100):
            sgd_step([layer], [g], 0.1)
        assert layer.w.tobytes() == before

    def test_momentum_accumulates(self):
        layer = Dense(np.array([[0.0]], np.float32), np.zeros(1, np.float32))
        g = {"w": np.array([[1.0]], np.float32), "b": np.zeros(1, np.float32)}
        vel = sgd_step([layer], [g], 1.0, momentum=0.5)
        sgd_step([layer], [g], 1.0, momentum=0.5, velocity=vel)
        # steps: 1, then 1.5
        assert layer.w[0, 0] == pytest.approx(-2.5)

    def test_shape_mismatch_rejected(self):
        layer = Dense(np.ones((2, 2), np.float32), np.zeros(2, np.float32))
        with pytest.raises(ValueError, match="shape"):
            sgd_step([layer], [{"w": np.ones((3, 3), np.float32)}], 0.1)


@given(st.integers(0, 2**32 - 1))
@settings(max_examples=20, deadline=None)
def test_dropout_backward_reuses_forward_mask(seed):
    layer = Dropout(0.3)
    x = np.ones((2, 6), np.float32)
    out, cache = layer.forward(x, mode="train", rng=Rng(seed))
    dx, _ = layer.backward(cache, np.ones_like(x))
    assert np.array_equal(dx, out)
