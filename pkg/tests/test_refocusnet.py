"""RefocusNet: construction, parameter budget, variants, gradients."""

import numpy as np
import pytest

from slf.nn import grad_check
from slf.refocusnet import (
    NetworkConfig,
    RefocusNetModel,
    build,
    forward_pass,
    loss_and_grads,
    parameter_count,
    view_average,
)


def tiny_config(variant="final", depth=3, width=8):
    return NetworkConfig(depth=depth, width=width, in_channels=12,
                         variant=variant, input_config="four_rhombus")


class TestConfig:
    def test_defaults(self):
        cfg = NetworkConfig()
        assert cfg.depth == 7 and cfg.width == 64 and cfg.in_channels == 12
        assert cfg.variant == "final" and cfg.n_views == 4

    def test_in_channels_must_match_input_config(self):
        with pytest.raises(ValueError):
            NetworkConfig(in_channels=6, input_config="four_rhombus")
        cfg = NetworkConfig.for_input("two_horizontal")
        assert cfg.in_channels == 6

    def test_bad_variant(self):
        with pytest.raises(ValueError):
            NetworkConfig(variant="resnet")

    def test_roundtrip_dict(self):
        cfg = tiny_config("variant2")
        assert NetworkConfig.from_dict(cfg.to_dict()) == cfg


class TestParameterBudget:
    def test_default_count_near_235k(self):
        n = parameter_count(NetworkConfig())
        assert abs(n - 235_000) <= 0.1 * 235_000
        assert 211_000 <= n <= 259_000

    def test_analytic_matches_built_model(self):
        rng = np.random.default_rng(0)
        for variant in ("final", "variant1", "variant2", "no_skip"):
            for depth, width, icfg in [(3, 8, "four_rhombus"), (5, 16, "eight"),
                                       (1, 4, "two_horizontal")]:
                cfg = NetworkConfig.for_input(icfg, depth=depth, width=width,
                                              variant=variant)
                model = build(cfg, rng)
                actual = sum(t.data.size for t in model.params())
                assert actual == parameter_count(cfg), (variant, depth, width, icfg)

    def test_no_skip_strictly_smaller(self):
        final = parameter_count(NetworkConfig())
        noskip = parameter_count(NetworkConfig(variant="no_skip"))
        assert noskip < final

    def test_tiny_instance(self):
        cfg = NetworkConfig.for_input("two_horizontal", depth=1, width=1)
        # A: 9*6*1+1; B: 1*6+6; head: 9*6*3+3
        assert parameter_count(cfg) == 55 + 12 + 165

    def test_depth3_has_three_residual_layers(self):
        model = build(tiny_config(depth=3), np.random.default_rng(1))
        assert len(model.layers_b) == 3
        assert len(model.layers_a) == 3


class TestViewAverage:
    def test_identical_views_exact(self):
        rng = np.random.default_rng(2)
        block = rng.random((2, 4, 4, 3))
        x = np.concatenate([block] * 4, axis=3)
        np.testing.assert_array_equal(view_average(x, 4), block)

    def test_two_view_grouping(self):
        a = np.zeros((1, 2, 2, 3))
        b = np.ones((1, 2, 2, 3))
        x = np.concatenate([a, b], axis=3)
        np.testing.assert_allclose(view_average(x, 2), 0.5, atol=1e-15)


class TestForward:
    def test_output_shape_and_dtype(self):
        model = build(tiny_config(), np.random.default_rng(3))
        x = np.random.default_rng(4).random((2, 12, 10, 14)).astype(np.float32)
        y = model.forward(x)
        assert y.shape == (2, 3, 10, 14)
        assert y.dtype == np.float32

    def test_channel_mismatch_rejected(self):
        model = build(tiny_config(), np.random.default_rng(5))
        with pytest.raises(ValueError):
            model.forward(np.zeros((1, 9, 8, 8), dtype=np.float32))

    def test_zero_residual_weights_leave_bias_only(self):
        model = build(tiny_config("final"), np.random.default_rng(6))
        for layer in model.layers_b:
            layer.kernel.data[:] = 0
            layer.bias.data[:] = 0
        model.head.kernel.data[:] = 0
        beta = np.array([0.11, -0.2, 0.07], dtype=np.float32)
        model.head.bias.data[:] = beta
        x = np.random.default_rng(7).random((1, 12, 9, 9)).astype(np.float32)
        y = model.forward(x)
        expected = np.broadcast_to(beta.reshape(1, 3, 1, 1), y.shape)
        np.testing.assert_allclose(y, expected, atol=1e-7)

    def test_final_equals_variant2_with_zero_head(self):
        rng = np.random.default_rng(8)
        m_final = build(tiny_config("final"), rng)
        m_v2 = build(tiny_config("variant2"), np.random.default_rng(0))
        arrays = [t.data.copy() for t in m_final.params()][:-2]  # drop head
        m_v2.set_params(arrays)
        m_final.head.kernel.data[:] = 0
        m_final.head.bias.data[:] = 0
        x = np.random.default_rng(9).random((1, 12, 8, 8)).astype(np.float32)
        np.testing.assert_allclose(m_final.forward(x), m_v2.forward(x), atol=1e-7)

    def test_fully_convolutional_crop_commute(self):
        cfg = tiny_config(depth=3)
        model = build(cfg, np.random.default_rng(10))
        x = np.random.default_rng(11).random((1, 12, 40, 40)).astype(np.float64)
        full = model.forward(x)
        sub = model.forward(x[:, :, 10:30, 10:30])
        m = 2 * cfg.depth + 1
        np.testing.assert_allclose(
            sub[:, :, m:-m, m:-m], full[:, :, 10 + m : 30 - m, 10 + m : 30 - m],
            atol=1e-10,
        )

    def test_variant1_uses_input_average(self):
        # with trajectory A producing zero activations, variant1 reduces to
        # the plain view average of its input plus the head bias
        model = build(tiny_config("variant1"), np.random.default_rng(12))
        model.layers_a[0].kernel.data[:] = 0
        model.layers_a[0].bias.data[:] = -1.0  # ReLU kills everything after
        for layer in model.layers_b:
            layer.kernel.data[:] = 0
            layer.bias.data[:] = 0
        model.head.kernel.data[:] = 0
        model.head.bias.data[:] = 0
        x = np.random.default_rng(13).random((1, 12, 8, 8)).astype(np.float32)
        y = model.forward(x)
        views = x.reshape(1, 4, 3, 8, 8)
        np.testing.assert_allclose(y, views.mean(axis=1), atol=1e-7)


class TestGradients:
    def test_all_variants_pass_grad_check(self):
        rng = np.random.default_rng(14)
        x = rng.random((1, 8, 8, 12))
        target = rng.random((1, 8, 8, 3))
        for variant in ("final", "variant1", "variant2", "no_skip"):
            cfg = tiny_config(variant)
            model = build(cfg, np.random.default_rng(15))
            params = [t.data.astype(np.float64) for t in model.params()]

            def model_fn(ps, xin, _cfg=cfg):
                loss, grads, _ = loss_and_grads(_cfg, ps, xin, target)
                return loss, grads

            report = grad_check(model_fn, params, x, tolerance=1e-4, n_coords=200,
                                rng=np.random.default_rng(16))
            assert report["passed"], (variant, report["max_rel_err"], report["worst"])

    def test_backward_matches_public_conv_path(self):
        # channels-first model.forward and the channels-last training path
        # must produce identical outputs
        cfg = tiny_config("final")
        model = build(cfg, np.random.default_rng(17))
        x = np.random.default_rng(18).random((2, 12, 9, 9)).astype(np.float32)
        y1 = model.forward(x)
        xc = np.ascontiguousarray(x.transpose(0, 2, 3, 1))
        y2, _ = forward_pass(cfg, model.param_arrays(), xc, keep_ctx=False)
        np.testing.assert_array_equal(y1, np.ascontiguousarray(y2.transpose(0, 3, 1, 2)))


class TestSetParams:
    def test_shape_guard(self):
        model = build(tiny_config(), np.random.default_rng(19))
        arrays = model.param_arrays()
        arrays[0] = np.zeros((1, 1, 3, 3), dtype=np.float32)
        with pytest.raises(ValueError):
            model.set_params(arrays)

    def test_roundtrip(self):
        model = build(tiny_config(), np.random.default_rng(20))
        arrays = [a.copy() for a in model.param_arrays()]
        model.set_params(arrays)
        for a, b in zip(arrays, model.param_arrays()):
            np.testing.assert_array_equal(a, b)
