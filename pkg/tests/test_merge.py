"""Merge engine tests: pair absorption, BN slicing, and the full pipeline."""

import numpy as np
import pytest

from neuromerge.decompose import Decomposition
from neuromerge.errors import ConfigError, ShapeError
from neuromerge.evaluate import forward
from neuromerge.merge import (
    MergeConfig,
    apply,
    eligible_layers,
    merge_conv_fc_boundary,
    merge_conv_pair,
    merge_fc_pair,
    slice_bn,
)
from neuromerge.model import (
    BatchNorm,
    networks_equal,
    parameter_count,
    validate,
)
from neuromerge.synthetic import (
    planted_conv_network,
    planted_fc_network,
    random_chain_network,
    small_residual_network,
    vgg16_cifar,
    vgg16_plan,
)
from neuromerge.verify import naive_n_mode_product


def make_decomp(z, retained):
    z = np.asarray(z, dtype=np.float32)
    return Decomposition(
        scaling=z,
        retained_indices=np.asarray(retained, dtype=np.int64),
        weight=np.zeros((1, z.shape[0]), dtype=np.float32),
        bias=None,
        warnings=(),
    )


def rel_err(a, b):
    return np.abs(a.astype(np.float64) - b.astype(np.float64)).max() / max(
        np.abs(b.astype(np.float64)).max(), 1e-12
    )


class TestPairAbsorption:
    def test_fc_pair_hand_product(self):
        d = make_decomp([[0.5, 1.0]], [1])
        out = merge_fc_pair(d, np.array([[1.0, 3.0], [2.0, 5.0]], dtype=np.float32))
        np.testing.assert_allclose(out, [[2.5, 6.5]])

    def test_fc_pair_identity(self):
        w = np.random.default_rng(0).standard_normal((3, 4)).astype(np.float32)
        d = make_decomp(np.eye(3), [0, 1, 2])
        np.testing.assert_array_equal(merge_fc_pair(d, w), w)

    def test_fc_pair_zero_column_drops_row(self):
        # neuron 0 pruned without compensation: its row cannot influence the result
        w = np.array([[7.0], [1.0]], dtype=np.float32)
        d = make_decomp([[0.0, 1.0]], [1])
        np.testing.assert_allclose(merge_fc_pair(d, w), [[1.0]])

    def test_fc_pair_shape_mismatch(self):
        with pytest.raises(ShapeError):
            merge_fc_pair(make_decomp([[1.0, 0.0]], [0]), np.zeros((3, 2), dtype=np.float32))

    def test_conv_pair_identity(self):
        w = np.random.default_rng(1).standard_normal((3, 2, 3, 3)).astype(np.float32)
        d = make_decomp(np.eye(2), [0, 1])
        np.testing.assert_array_equal(merge_conv_pair(d, w), w)

    def test_conv_pair_k1_equals_fc_pair(self):
        rng = np.random.default_rng(2)
        z = np.array([[0.5, 1.0]], dtype=np.float32)
        d = make_decomp(z, [1])
        w = rng.standard_normal((3, 2, 1, 1)).astype(np.float32)
        conv_out = merge_conv_pair(d, w)
        fc_out = merge_fc_pair(d, w[:, :, 0, 0].T)  # (n_in=2, n_out=3)
        np.testing.assert_array_equal(conv_out[:, :, 0, 0], fc_out.T)

    def test_conv_pair_matches_mode_product_oracle(self):
        rng = np.random.default_rng(3)
        z = np.array([[0.5, 1.0]], dtype=np.float32)
        d = make_decomp(z, [1])
        w = rng.standard_normal((3, 2, 3, 3)).astype(np.float32)
        want = naive_n_mode_product(w, z, 2)
        np.testing.assert_allclose(merge_conv_pair(d, w), want, rtol=1e-6, atol=1e-7)

    def test_boundary_degenerate_spatial_equals_fc_pair(self):
        rng = np.random.default_rng(4)
        z = rng.uniform(0, 1, (2, 3)).astype(np.float32)
        d = make_decomp(np.array([[1, 0, 0.5], [0, 1, 0]], dtype=np.float32), [0, 1])
        w = rng.standard_normal((3, 4)).astype(np.float32)
        np.testing.assert_array_equal(
            merge_conv_fc_boundary(d, (1, 1), w), merge_fc_pair(d, w)
        )

    def test_boundary_hand_expansion(self):
        d = make_decomp([[2.0, 1.0]], [1])
        w = np.array([[1.0], [2.0], [3.0], [4.0]], dtype=np.float32)
        out = merge_conv_fc_boundary(d, (1, 2), w)
        np.testing.assert_allclose(out, [[5.0], [8.0]])

    def test_boundary_identity(self):
        rng = np.random.default_rng(5)
        w = rng.standard_normal((6, 3)).astype(np.float32)
        d = make_decomp(np.eye(2), [0, 1])
        np.testing.assert_array_equal(merge_conv_fc_boundary(d, (1, 3), w), w)

    def test_boundary_row_count_mismatch(self):
        with pytest.raises(ShapeError):
            merge_conv_fc_boundary(make_decomp([[1.0, 0.0]], [0]), (2, 2), np.zeros((5, 1), dtype=np.float32))


class TestSliceBn:
    def bn(self):
        return BatchNorm("bn", np.array([1.0, 2.0]), np.array([3.0, 4.0]),
                         np.array([5.0, 6.0]), np.array([7.0, 8.0]))

    def test_retain_all(self):
        out = slice_bn(self.bn(), [0, 1])
        assert out.gamma.tolist() == [1.0, 2.0]

    def test_retain_subset(self):
        out = slice_bn(self.bn(), [1])
        assert out.gamma.tolist() == [2.0]
        assert out.beta.tolist() == [4.0]
        assert out.mu.tolist() == [6.0]
        assert out.sigma.tolist() == [8.0]

    def test_out_of_range(self):
        with pytest.raises(ShapeError):
            slice_bn(self.bn(), [2])


class TestApply:
    def test_planted_fc_merge_is_lossless_and_prune_is_not(self):
        rng = np.random.default_rng(10)
        net, plan = planted_fc_network(rng)
        merged, _ = apply(net, MergeConfig(plan=plan, t=-1.0, mode="merge"))
        pruned, _ = apply(net, MergeConfig(plan=plan, t=-1.0, mode="prune"))
        errs_m, errs_p = [], []
        for _ in range(30):
            x = rng.standard_normal(net.input_shape).astype(np.float32)
            y, _ = forward(net, x)
            errs_m.append(rel_err(forward(merged, x)[0], y))
            errs_p.append(rel_err(forward(pruned, x)[0], y))
        assert max(errs_m) < 1e-4
        assert np.median(errs_p) > 1e-2

    def test_planted_conv_merge_is_lossless(self):
        rng = np.random.default_rng(11)
        net, plan = planted_conv_network(rng)
        merged, _ = apply(net, MergeConfig(plan=plan, t=-1.0, mode="merge"))
        for _ in range(20):
            x = rng.standard_normal(net.input_shape).astype(np.float32)
            assert rel_err(forward(merged, x)[0], forward(net, x)[0]) < 1e-4

    def test_unreachable_threshold_makes_merge_equal_prune(self):
        rng = np.random.default_rng(12)
        for _ in range(10):
            net = random_chain_network(rng)
            plan = {name: 0.5 for name in eligible_layers(net)}
            cfg_m = MergeConfig(plan=plan, t=1.5, mode="merge")
            cfg_p = MergeConfig(plan=plan, t=1.5, mode="prune")
            m, _ = apply(net, cfg_m)
            p, _ = apply(net, cfg_p)
            assert networks_equal(m, p)

    def test_topology_of_merge_equals_prune(self):
        rng = np.random.default_rng(13)
        net, plan = planted_conv_network(rng)
        m, _ = apply(net, MergeConfig(plan=plan, t=-1.0, mode="merge"))
        p, _ = apply(net, MergeConfig(plan=plan, t=-1.0, mode="prune"))
        shapes_m = [l.weight.shape for l in m.walk() if hasattr(l, "weight")]
        shapes_p = [l.weight.shape for l in p.walk() if hasattr(l, "weight")]
        assert shapes_m == shapes_p

    def test_report_parameter_totals_consistent(self):
        rng = np.random.default_rng(14)
        net, plan = planted_conv_network(rng)
        out, report = apply(net, MergeConfig(plan=plan, t=-1.0))
        assert report.parameters_before == parameter_count(net)
        assert report.parameters_after == parameter_count(out)
        assert validate(out) == []

    def test_classifier_in_plan_rejected(self):
        rng = np.random.default_rng(15)
        net, plan = planted_fc_network(rng)
        plan = dict(plan, fc3=0.5)
        with pytest.raises(ConfigError, match="classifier"):
            apply(net, MergeConfig(plan=plan))

    def test_unknown_layer_in_plan_rejected(self):
        rng = np.random.default_rng(16)
        net, _ = planted_fc_network(rng)
        with pytest.raises(ConfigError, match="ghost"):
            apply(net, MergeConfig(plan={"ghost": 0.5}))

    def test_ratio_bounds_enforced(self):
        with pytest.raises(ConfigError):
            MergeConfig(plan={"fc1": 1.0})

    def test_residual_internal_layer_prunable(self):
        rng = np.random.default_rng(17)
        net = small_residual_network(rng)
        merged, report = apply(net, MergeConfig(plan={"b1_conv1": 0.5, "b2_conv1": 0.5}, t=-1.0))
        assert validate(merged) == []
        assert {l.name for l in report.layers} == {"b1_conv1", "b2_conv1"}
        x = rng.standard_normal(net.input_shape).astype(np.float32)
        logits, _ = forward(merged, x)
        assert logits.shape == (10,)
        assert np.isfinite(logits).all()

    def test_block_final_conv_rejected(self):
        net = small_residual_network(np.random.default_rng(18))
        with pytest.raises(ConfigError, match="residual sum"):
            apply(net, MergeConfig(plan={"b1_conv2": 0.5}))

    def test_layer_feeding_block_rejected(self):
        net = small_residual_network(np.random.default_rng(19))
        with pytest.raises(ConfigError, match="residual block"):
            apply(net, MergeConfig(plan={"stem": 0.5}))

    def test_shortcut_projection_rejected(self):
        net = small_residual_network(np.random.default_rng(23))
        with pytest.raises(ConfigError, match="shortcut"):
            apply(net, MergeConfig(plan={"b2_short": 0.5}))

    def test_planted_redundancy_inside_residual_block_is_lossless(self):
        # An internal block convolution with planted filter copies and a
        # centered normalization merges exactly: the compensation absorbs
        # into the body's second convolution and the shortcut is untouched.
        from neuromerge.model import (
            AvgPool2d,
            Conv2d,
            Flatten,
            FullyConnected,
            Network,
            Output,
            ReLU,
            ResidualBlock,
        )
        from neuromerge.synthetic import _planted_vectors, _random_bn

        rng = np.random.default_rng(24)
        cin, mid = 8, 16
        vecs = _planted_vectors(rng, mid, 8, cin * 9, noise=0.0)
        body = (
            Conv2d("inner1", vecs.reshape(mid, cin, 3, 3), padding=1),
            _random_bn(rng, "inner_bn1", mid, centered=True),
            ReLU("inner_relu"),
            Conv2d("inner2", (rng.standard_normal((cin, mid, 3, 3)) / 12).astype(np.float32),
                   padding=1),
            _random_bn(rng, "inner_bn2", cin, centered=False),
        )
        net = Network(
            (
                Conv2d("stem", (rng.standard_normal((cin, 3, 3, 3)) / 5).astype(np.float32),
                       padding=1),
                _random_bn(rng, "stem_bn", cin, centered=False),
                ReLU("stem_relu"),
                ResidualBlock("block", body=body),
                ReLU("post_relu"),
                AvgPool2d("gap", 4, 4),
                Flatten("flatten"),
                FullyConnected("fc", (rng.standard_normal((cin * 4, 10)) / 5).astype(np.float32)),
                Output("output"),
            ),
            (3, 8, 8),
        )
        assert validate(net) == []
        merged, report = apply(net, MergeConfig(plan={"inner1": 0.5}, t=-1.0))
        assert merged.find("inner1").weight.shape == (8, cin, 3, 3)
        assert merged.find("inner2").weight.shape == (cin, 8, 3, 3)
        for _ in range(20):
            x = rng.standard_normal(net.input_shape).astype(np.float32)
            assert rel_err(forward(merged, x)[0], forward(net, x)[0]) < 1e-4

    def test_eligible_layers_respects_restrictions(self):
        net = small_residual_network(np.random.default_rng(20))
        assert eligible_layers(net) == ["b1_conv1", "b2_conv1"]

    def test_consecutive_planned_layers_merge_front_to_back(self):
        # Both hidden layers planned: the second decomposition must operate on
        # the already-merged weights, which the lossless planted fixture
        # verifies end to end (any ordering mistake breaks exactness).
        rng = np.random.default_rng(21)
        net, plan = planted_fc_network(rng, sizes=(12, 40, 40, 8), ratios=(0.6, 0.6))
        merged, report = apply(net, MergeConfig(plan=plan, t=-1.0))
        for _ in range(20):
            x = rng.standard_normal(net.input_shape).astype(np.float32)
            assert rel_err(forward(merged, x)[0], forward(net, x)[0]) < 1e-4
        assert [l.name for l in report.layers] == ["fc1", "fc2"]

    def test_next_layer_bias_untouched(self):
        rng = np.random.default_rng(22)
        net, plan = planted_fc_network(rng)
        merged, _ = apply(net, MergeConfig(plan={"fc1": plan["fc1"]}, t=-1.0))
        assert np.array_equal(merged.find("fc2").bias, net.find("fc2").bias)

    def test_vgg16_plan_parameter_accounting(self):
        rng = np.random.default_rng(0)
        net = vgg16_cifar(rng)
        merged, report = apply(net, MergeConfig(plan=vgg16_plan(), t=0.1, lam=0.85))
        assert report.parameters_before == 14_987_722
        assert report.parameters_after == parameter_count(merged)
        assert validate(merged) == []
        # topology: conv1 and conv8..13 halved, classifier input shrunk to 256
        assert merged.find("conv1").weight.shape == (32, 3, 3, 3)
        assert merged.find("conv13").weight.shape == (256, 256, 3, 3)
        assert merged.find("fc1").weight.shape == (256, 512)
