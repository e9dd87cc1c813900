"""NN engine: conv2d, ReLU, L1, Adam, Xavier, grad check harness, checkpoints."""

import numpy as np
import pytest

from slf.nn import (
    AdamState,
    Conv2DLayer,
    Tensor,
    adam_step,
    conv2d_backward,
    conv2d_forward,
    grad_check,
    l1_loss,
    load_checkpoint,
    relu_backward,
    relu_forward,
    save_checkpoint,
    xavier_init,
)


def naive_conv2d(x, w, b):
    """Six nested loops, zero padding 1, stride 1. The brute-force oracle."""
    bs, ci, h, wd = x.shape
    co, _, kh, kw = w.shape
    xp = np.zeros((bs, ci, h + 2, wd + 2))
    xp[:, :, 1:-1, 1:-1] = x
    y = np.zeros((bs, co, h, wd))
    for n in range(bs):
        for o in range(co):
            for i in range(h):
                for j in range(wd):
                    acc = b[o]
                    for c in range(ci):
                        for p in range(3):
                            for q in range(3):
                                acc += xp[n, c, i + p, j + q] * w[o, c, p, q]
                    y[n, o, i, j] = acc
    return y


def make_layer(ci, co, seed=0, dtype=np.float64):
    layer = Conv2DLayer(ci, co, 3, rng=np.random.default_rng(seed), dtype=dtype)
    return layer


class TestConvForward:
    def test_identity_kernel(self):
        layer = make_layer(1, 1)
        layer.kernel.data[:] = 0
        layer.kernel.data[0, 0, 1, 1] = 1.0
        layer.bias.data[:] = 0
        x = np.random.default_rng(1).random((2, 1, 6, 7))
        np.testing.assert_allclose(conv2d_forward(x, layer), x, atol=1e-12)

    def test_box_sum_interior(self):
        layer = make_layer(1, 1)
        layer.kernel.data[:] = 1.0
        layer.bias.data[:] = 0
        x = np.ones((1, 1, 5, 5))
        y = conv2d_forward(x, layer)
        np.testing.assert_allclose(y[0, 0, 1:-1, 1:-1], 9.0, atol=1e-12)
        assert y[0, 0, 0, 0] == 4.0  # corner sees a 2x2 window

    def test_matches_naive_reference(self):
        rng = np.random.default_rng(2)
        x = rng.standard_normal((2, 3, 5, 5))
        layer = make_layer(3, 4, seed=3)
        got = conv2d_forward(x, layer)
        want = naive_conv2d(x, layer.kernel.data, layer.bias.data)
        np.testing.assert_allclose(got, want, atol=1e-6)

    def test_channel_mismatch_rejected(self):
        layer = make_layer(3, 4)
        with pytest.raises(ValueError):
            conv2d_forward(np.zeros((1, 2, 5, 5)), layer)

    def test_linearity_with_zero_bias(self):
        rng = np.random.default_rng(4)
        layer = make_layer(2, 3, seed=5)
        layer.bias.data[:] = 0
        x1 = rng.standard_normal((1, 2, 6, 6))
        x2 = rng.standard_normal((1, 2, 6, 6))
        a, b = 1.7, -0.4
        lhs = conv2d_forward(a * x1 + b * x2, layer)
        rhs = a * conv2d_forward(x1, layer) + b * conv2d_forward(x2, layer)
        np.testing.assert_allclose(lhs, rhs, atol=1e-6)


class TestConvBackward:
    def test_zero_grad_out(self):
        layer = make_layer(2, 3)
        x = np.random.default_rng(6).random((1, 2, 5, 5))
        gx, gw, gb = conv2d_backward(np.zeros((1, 3, 5, 5)), x, layer)
        assert not gx.any() and not gw.any() and not gb.any()

    def test_single_pixel_grad_gives_input_window(self):
        rng = np.random.default_rng(7)
        layer = make_layer(2, 2, seed=8)
        x = rng.standard_normal((1, 2, 6, 6))
        gy = np.zeros((1, 2, 6, 6))
        gy[0, 1, 3, 2] = 1.0
        _, gw, gb = conv2d_backward(gy, x, layer)
        xp = np.zeros((2, 8, 8))
        xp[:, 1:-1, 1:-1] = x[0]
        # dL/dw[1, c, p, q] = xp[c, 3 + p, 2 + q]
        np.testing.assert_allclose(gw[1], xp[:, 3:6, 2:5], atol=1e-12)
        assert not gw[0].any()
        np.testing.assert_allclose(gb, [0.0, 1.0], atol=1e-12)

    def test_finite_differences(self):
        rng = np.random.default_rng(9)
        layer = make_layer(3, 2, seed=10)
        x = rng.standard_normal((2, 3, 5, 6))
        r = rng.standard_normal((2, 2, 5, 6))  # projection making the loss scalar
        gx, gw, gb = conv2d_backward(r, x, layer)

        def loss(xv, wv, bv):
            tmp = Conv2DLayer(3, 2, 3, rng=np.random.default_rng(0), dtype=np.float64)
            tmp.kernel.data[:] = wv
            tmp.bias.data[:] = bv
            return float((conv2d_forward(xv, tmp) * r).sum())

        h = 1e-4
        w0, b0 = layer.kernel.data, layer.bias.data
        for arr, grad, which in [(x, gx, "x"), (w0, gw, "w"), (b0, gb, "b")]:
            flat = arr.ravel()
            picks = rng.choice(flat.size, size=min(20, flat.size), replace=False)
            for k in picks:
                orig = flat[k]
                flat[k] = orig + h
                lp = loss(x, w0, b0)
                flat[k] = orig - h
                lm = loss(x, w0, b0)
                flat[k] = orig
                numeric = (lp - lm) / (2 * h)
                analytic = grad.ravel()[k]
                rel = abs(analytic - numeric) / max(abs(analytic), abs(numeric), 1e-12)
                assert rel < 1e-4, f"{which}[{k}]: {analytic} vs {numeric}"


class TestRelu:
    def test_all_negative(self):
        x = -np.abs(np.random.default_rng(11).standard_normal((3, 4)))
        assert not relu_forward(x).any()
        assert not relu_backward(np.ones_like(x), x).any()

    def test_all_positive(self):
        x = np.abs(np.random.default_rng(12).standard_normal((3, 4))) + 0.1
        np.testing.assert_array_equal(relu_forward(x), x)
        g = np.random.default_rng(13).standard_normal((3, 4))
        np.testing.assert_array_equal(relu_backward(g, x), g)

    def test_finite_differences_away_from_kink(self):
        rng = np.random.default_rng(14)
        x = rng.standard_normal(200)
        x = x[np.abs(x) > 1e-3]
        r = rng.standard_normal(x.size)
        analytic = relu_backward(r, x)
        h = 1e-4
        numeric = ((np.maximum(x + h, 0) - np.maximum(x - h, 0)) / (2 * h)) * r
        rel = np.abs(analytic - numeric) / np.maximum(np.abs(numeric), 1e-12)
        assert rel.max() < 1e-4


class TestL1Loss:
    def test_identical(self):
        x = np.random.default_rng(15).random((4, 5))
        loss, grad = l1_loss(x, x.copy())
        assert loss == 0.0
        assert not grad.any()

    def test_constant_offset(self):
        t = np.zeros((2, 10))
        p = np.full((2, 10), 0.5)
        loss, grad = l1_loss(p, t)
        assert abs(loss - 0.5) < 1e-12
        np.testing.assert_allclose(grad, 1.0 / 20, atol=1e-15)

    def test_finite_differences(self):
        rng = np.random.default_rng(16)
        p = rng.standard_normal(100)
        t = rng.standard_normal(100)
        near_tie = np.abs(p - t) < 1e-3
        p[near_tie] += 0.01
        _, grad = l1_loss(p, t)
        h = 1e-5
        for k in rng.choice(100, size=20, replace=False):
            orig = p[k]
            p[k] = orig + h
            lp, _ = l1_loss(p, t)
            p[k] = orig - h
            lm, _ = l1_loss(p, t)
            p[k] = orig
            numeric = (lp - lm) / (2 * h)
            rel = abs(grad[k] - numeric) / max(abs(numeric), 1e-12)
            assert rel < 1e-3

    def test_shape_mismatch(self):
        with pytest.raises(ValueError):
            l1_loss(np.zeros(3), np.zeros(4))


class TestAdam:
    def test_zero_grads_leave_params(self):
        p = np.array([1.0, -2.0, 3.5], dtype=np.float32)
        before = p.copy()
        state = AdamState.for_params([p])
        adam_step([p], [np.zeros_like(p)], state)
        np.testing.assert_array_equal(p, before)

    def test_first_step_magnitude_is_lr(self):
        p = np.array([0.5], dtype=np.float64)
        g = np.array([0.3])
        state = AdamState.for_params([p], lr_initial=0.0005)
        adam_step([p], [g], state)
        assert abs(abs(p[0] - 0.5) - 0.0005) < 1e-6
        assert p[0] < 0.5  # moved against the gradient

    def test_staircase_schedule(self):
        state = AdamState.for_params([np.zeros(1)], lr_initial=0.0005,
                                     decay_rate=0.5, decay_steps=100)
        state.step = 250
        assert abs(state.learning_rate() - 0.0005 * 0.25) < 1e-15
        state.step = 0
        assert state.learning_rate() == 0.0005
        state.step = 99
        assert state.learning_rate() == 0.0005

    def test_lr_zero_is_bit_identical(self):
        rng = np.random.default_rng(17)
        p = rng.random(50).astype(np.float32)
        raw = p.tobytes()
        state = AdamState.for_params([p], lr_initial=0.0)
        for _ in range(5):
            adam_step([p], [rng.standard_normal(50).astype(np.float32)], state)
        assert p.tobytes() == raw


class TestXavier:
    def test_bound_formula(self):
        rng = np.random.default_rng(18)
        k = xavier_init((64, 12, 3, 3), rng)
        a = np.sqrt(6.0 / (12 * 9 + 64 * 9))
        assert np.abs(k).max() <= a
        assert np.abs(k).max() > 0.9 * a  # actually fills the interval

    def test_reproducible(self):
        a = xavier_init((8, 4, 3, 3), np.random.default_rng(77))
        b = xavier_init((8, 4, 3, 3), np.random.default_rng(77))
        np.testing.assert_array_equal(a, b)

    def test_variance(self):
        rng = np.random.default_rng(19)
        draws = xavier_init((1000, 100), rng)
        a = np.sqrt(6.0 / 1100)
        target = a * a / 3.0
        assert abs(draws.var() - target) < 0.05 * target


class TestGradCheckHarness:
    @staticmethod
    def linear_model(params, x):
        (w,) = params
        loss = float((w * x).sum())
        return loss, [x.copy()]

    def test_linear_model_machine_precision(self):
        x = np.random.default_rng(20).standard_normal((4, 4))
        w = np.random.default_rng(21).standard_normal((4, 4))
        report = grad_check(self.linear_model, [w], x, n_coords=16)
        assert report["max_rel_err"] < 1e-8
        assert report["passed"]

    def test_detects_corrupted_gradient(self):
        def corrupted(params, x):
            loss, grads = self.linear_model(params, x)
            return loss, [g * 1.1 for g in grads]

        x = np.random.default_rng(22).standard_normal((4, 4))
        w = np.random.default_rng(23).standard_normal((4, 4))
        report = grad_check(corrupted, [w], x, tolerance=1e-4, n_coords=16)
        assert report["max_rel_err"] > 1e-4
        assert not report["passed"]


class TestCheckpoint:
    def test_roundtrip(self, tmp_path):
        rng = np.random.default_rng(24)
        config = {"depth": 3, "width": 8, "variant": "final"}
        params = [rng.random((4, 2, 3, 3)).astype(np.float32), rng.random(4).astype(np.float32)]
        state = AdamState.for_params(params)
        state.step = 42
        state.m[0][:] = 0.5
        path = str(tmp_path / "model.ckpt")
        save_checkpoint(path, config, params, adam=state)
        config2, params2, adam2 = load_checkpoint(path)
        assert config2 == config
        for a, b in zip(params, params2):
            np.testing.assert_array_equal(a, b)
        assert adam2.step == 42
        np.testing.assert_array_equal(adam2.m[0], state.m[0])

    def test_no_adam(self, tmp_path):
        path = str(tmp_path / "m.ckpt")
        save_checkpoint(path, {}, [np.zeros(3, dtype=np.float32)])
        _, params, adam = load_checkpoint(path)
        assert adam is None and len(params) == 1

    def test_bad_magic_rejected(self, tmp_path):
        path = tmp_path / "junk.ckpt"
        path.write_bytes(b"NOTACKPT" + b"\x00" * 32)
        with pytest.raises(ValueError):
            load_checkpoint(str(path))

    def test_save_is_deterministic(self, tmp_path):
        params = [np.arange(6, dtype=np.float32).reshape(2, 3)]
        save_checkpoint(str(tmp_path / "a"), {"k": 1}, params)
        save_checkpoint(str(tmp_path / "b"), {"k": 1}, params)
        assert (tmp_path / "a").read_bytes() == (tmp_path / "b").read_bytes()

    def test_magic_prefix(self, tmp_path):
        save_checkpoint(str(tmp_path / "m"), {}, [np.zeros(1, dtype=np.float32)])
        assert (tmp_path / "m").read_bytes()[:8] == b"SLFCKPT1"


class TestTensor:
    def test_grad_shape_checked(self):
        with pytest.raises(ValueError):
            Tensor(np.zeros((2, 3)), grad=np.zeros((3, 2)))

    def test_zero_grad_allocates(self):
        t = Tensor(np.ones((2, 2)))
        t.zero_grad()
        assert t.grad.shape == (2, 2)
        assert not t.grad.any()
