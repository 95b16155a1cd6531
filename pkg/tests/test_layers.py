import math

import mpmath
import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from transferlab.layers import (
    Conv2D,
    Dense,
    Dropout,
    GlobalAvgPool,
    MaxPool2x2,
    ReLU,
    grad_check,
    grad_check_detail,
    loss_grad_check,
    sigmoid_bce,
    softmax_ce,
)
from transferlab.models import ArchSpec, build
from transferlab.tensor import SeededRng

SEEDS = range(20)


def make_conv(ci=2, co=3, seed=0, dtype=np.float64):
    c = Conv2D("conv", ci, co, 3)
    c.init_params(SeededRng(seed), dtype)
    c.params["b"] = SeededRng(seed + 1000).normal(co)
    return c


def make_dense(f=4, o=3, seed=0):
    d = Dense("dense", f, o)
    d.init_params(SeededRng(seed), np.float64)
    d.params["b"] = SeededRng(seed + 1000).normal(o)
    return d


class TestConv2D:
    def test_identity_kernel(self):
        c = Conv2D("c", 1, 1)
        w = np.zeros((1, 1, 3, 3))
        w[0, 0, 1, 1] = 1.0
        c.params = {"W": w, "b": np.zeros(1)}
        x = SeededRng(0).normal((2, 1, 5, 6))
        np.testing.assert_array_equal(c.forward(x), x)

    def test_zero_weights_and_window_sum_gradient(self):
        c = Conv2D("c", 2, 3)
        c.params = {"W": np.zeros((3, 2, 3, 3)), "b": np.zeros(3)}
        x = SeededRng(1).normal((1, 2, 4, 5))
        assert not c.forward(x).any()
        c.backward(np.ones((1, 3, 4, 5)))
        xp = np.pad(x, ((0, 0), (0, 0), (1, 1), (1, 1)))
        expected = np.zeros((2, 3, 3))
        for i in range(4):
            for j in range(5):
                expected += xp[0, :, i:i + 3, j:j + 3]
        for o in range(3):
            np.testing.assert_allclose(c.grads["W"][o], expected, rtol=1e-12)
        np.testing.assert_allclose(c.grads["b"], [20.0, 20.0, 20.0])

    def test_shape_mismatch(self):
        with pytest.raises(ValueError):
            make_conv(ci=2).forward(np.zeros((1, 3, 4, 4)))

    @pytest.mark.parametrize("seed", SEEDS)
    def test_grad_check(self, seed):
        assert grad_check(make_conv(seed=seed), (1, 2, 5, 5), SeededRng(seed)) < 1e-6

    def test_batch_independence(self):
        c = make_conv(ci=2, co=4, dtype=np.float32)
        x = SeededRng(3).normal((7, 2, 9, 9)).astype(np.float32)
        full = c.forward(x)
        for i in range(7):
            assert full[i].tobytes() == c.forward(x[i:i + 1])[0].tobytes()


class TestMaxPool:
    def test_window_max_and_routing(self):
        p = MaxPool2x2("p")
        y = p.forward(np.array([[[[1.0, 2.0], [3.0, 4.0]]]]))
        assert y.item() == 4.0
        np.testing.assert_array_equal(p.backward(np.ones((1, 1, 1, 1)))[0, 0], [[0, 0], [0, 1]])

    def test_tie_goes_to_first(self):
        p = MaxPool2x2("p")
        y = p.forward(np.full((1, 1, 4, 4), 7.0))
        np.testing.assert_array_equal(y, np.full((1, 1, 2, 2), 7.0))
        g = p.backward(np.ones((1, 1, 2, 2)))[0, 0]
        expected = np.zeros((4, 4))
        expected[0::2, 0::2] = 1
        np.testing.assert_array_equal(g, expected)

    def test_odd_extent_padded(self):
        p = MaxPool2x2("p")
        x = np.arange(15.0).reshape(1, 1, 3, 5) + 1
        y = p.forward(x)
        assert y.shape == (1, 1, 2, 3)
        assert y[0, 0, 1, 2] == 15.0
        assert p.backward(np.ones_like(y)).shape == x.shape

    def test_odd_extent_negative_values(self):
        y = MaxPool2x2("p").forward(-np.arange(1.0, 10.0).reshape(1, 1, 3, 3))
        np.testing.assert_array_equal(y[0, 0], [[-1.0, -3.0], [-7.0, -9.0]])

    @pytest.mark.parametrize("seed", SEEDS)
    def test_grad_check(self, seed):
        assert grad_check(MaxPool2x2("p"), (2, 2, 4, 6), SeededRng(seed)) < 1e-6


class TestReLU:
    def test_values(self):
        r = ReLU("r")
        x = np.array([[-2.0, -0.5, 0.0, 0.5, 3.0]])
        np.testing.assert_array_equal(r.forward(x), [[0, 0, 0, 0.5, 3.0]])

    @pytest.mark.parametrize("seed", SEEDS)
    def test_grad_check(self, seed):
        assert grad_check(ReLU("r"), (2, 3, 4, 4), SeededRng(seed)) < 1e-6


class TestDropout:
    def test_rate_zero_identity(self):
        d = Dropout("d", 0.0)
        d.rng = SeededRng(0)
        x = SeededRng(1).normal((4, 5))
        np.testing.assert_array_equal(d.forward(x, train=True), x)
        np.testing.assert_array_equal(d.forward(x, train=False), x)

    def test_eval_identity(self):
        d = Dropout("d", 0.7)
        x = SeededRng(1).normal((4, 5))
        assert d.forward(x, train=False) is x

    def test_zero_fraction(self):
        d = Dropout("d", 0.5)
        d.rng = SeededRng(2)
        y = d.forward(np.ones((100_000, 1)), train=True)
        assert abs(np.mean(y == 0) - 0.5) < 0.01
        assert set(np.unique(y)) == {0.0, 2.0}

    def test_rate_one_rejected(self):
        with pytest.raises(ValueError):
            Dropout("d", 1.0)

    @pytest.mark.parametrize("seed", SEEDS)
    def test_grad_check(self, seed):
        d = Dropout("d", 0.3)
        d.rng = SeededRng(seed + 50)
        assert grad_check(d, (3, 6), SeededRng(seed), train=True) < 1e-6


class TestGlobalAvgPool:
    def test_constant(self):
        assert np.all(GlobalAvgPool("g").forward(np.full((2, 3, 4, 5), 2.5)) == 2.5)

    def test_single_pixel(self):
        x = SeededRng(0).normal((2, 3, 1, 1))
        np.testing.assert_array_equal(GlobalAvgPool("g").forward(x), x[:, :, 0, 0])

    @pytest.mark.parametrize("seed", SEEDS)
    def test_grad_check(self, seed):
        assert grad_check(GlobalAvgPool("g"), (2, 3, 3, 4), SeededRng(seed)) < 1e-6


class TestDense:
    def test_identity(self):
        d = Dense("d", 3, 3)
        d.params = {"W": np.eye(3), "b": np.zeros(3)}
        x = SeededRng(0).normal((4, 3))
        np.testing.assert_array_equal(d.forward(x), x)

    def test_param_count(self):
        d = Dense("d", 512, 1)
        d.init_params(SeededRng(0))
        assert d.param_count() == 513

    @pytest.mark.parametrize("seed", SEEDS)
    def test_grad_check(self, seed):
        assert grad_check(make_dense(seed=seed), (5, 4), SeededRng(seed)) < 1e-6

    def test_frozen_params_skipped(self):
        d = make_dense()
        d.frozen = True
        detail = grad_check_detail(d, (5, 4), SeededRng(0))
        assert set(detail) == {"x"}
        assert detail["x"] < 1e-6
        d.forward(np.ones((2, 4)))
        d.backward(np.ones((2, 3)))
        assert d.grads == {}


class TestLosses:
    @pytest.mark.parametrize("y", [0, 1])
    def test_bce_at_zero(self, y):
        loss, _ = sigmoid_bce(np.zeros((1, 1)), [y])
        assert loss == pytest.approx(math.log(2), abs=1e-12)

    def test_bce_confident_limit(self):
        loss, dz = sigmoid_bce(np.array([[40.0]]), [1])
        assert loss < 1e-15
        assert abs(dz.item()) < 1e-15

    @pytest.mark.parametrize("z", [-50.0, 50.0])
    @pytest.mark.parametrize("y", [0, 1])
    def test_bce_stable_against_mpmath(self, z, y):
        mpmath.mp.dps = 50
        s = 1 / (1 + mpmath.exp(-z))
        ref = -(y * mpmath.log(s) + (1 - y) * mpmath.log(1 - s))
        loss, dz = sigmoid_bce(np.array([[z]]), [y])
        assert math.isfinite(loss)
        assert loss == pytest.approx(float(ref), rel=1e-12, abs=1e-300)

    def test_softmax_uniform(self):
        loss, _ = softmax_ce(np.zeros((3, 4)), [0, 1, 3])
        assert loss == pytest.approx(math.log(4), abs=1e-12)

    def test_softmax_confident(self):
        z = np.array([[0.0, 60.0, 0.0]])
        loss, _ = softmax_ce(z, [1])
        assert loss < 1e-20

    @pytest.mark.parametrize("seed", SEEDS)
    def test_bce_grad_check(self, seed):
        assert loss_grad_check(sigmoid_bce, (6, 1), SeededRng(seed)) < 1e-6

    @pytest.mark.parametrize("seed", SEEDS)
    def test_softmax_grad_check(self, seed):
        assert loss_grad_check(softmax_ce, (6, 4), SeededRng(seed)) < 1e-6

    @settings(max_examples=60, deadline=None)
    @given(st.floats(-30, 30), st.integers(0, 1))
    def test_bce_equals_two_way_softmax(self, z, y):
        # class 1 of logits [0, z] has probability sigma(z)
        a, _ = sigmoid_bce(np.array([[z]]), [y])
        b, _ = softmax_ce(np.array([[0.0, z]]), [y])
        assert abs(a - b) < 1e-10
        assert a >= 0

    @settings(max_examples=40, deadline=None)
    @given(st.lists(st.floats(-100, 100), min_size=2, max_size=6), st.data())
    def test_softmax_nonnegative(self, logits, data):
        label = data.draw(st.integers(0, len(logits) - 1))
        loss, _ = softmax_ce(np.array([logits]), [label])
        assert loss >= 0


class TestModelLevel:
    def test_tiny_model_grad_check(self):
        spec = ArchSpec("small-cnn", (1, 8, 8), "1/8", outputs=1, seed=3)
        model = build(spec, dtype=np.float64)
        detail = grad_check_detail(model, (2, 1, 8, 8), SeededRng(4))
        assert max(detail.values()) < 1e-6
        assert "conv1.W" in detail and "head_dense.b" in detail

    def test_eval_forward_pure(self):
        model = build(ArchSpec("mini", (1, 32, 32), seed=1))
        x = SeededRng(0).uniform((3, 1, 32, 32)).astype(np.float32)
        assert model.forward(x).tobytes() == model.forward(x).tobytes()
