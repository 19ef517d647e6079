"""Forward engine, accuracy, WARE, and feature-dump tests."""

import numpy as np
import pytest

from neuromerge.errors import DegenerateInputError, ShapeError
from neuromerge.evaluate import (
    accuracy,
    dump_feature_maps,
    final_response_layer,
    forward,
    ware,
)
from neuromerge.io import load_feature_map
from neuromerge.merge import MergeConfig, apply
from neuromerge.model import (
    BatchNorm,
    Conv2d,
    Dataset,
    Flatten,
    FullyConnected,
    MaxPool2d,
    Network,
    Output,
    ReLU,
)
from neuromerge.synthetic import (
    labeled_by,
    lenet300,
    planted_fc_network,
    random_inputs,
    small_residual_network,
)


def single_fc_net(weight, bias=None, extra=()):
    layers = (FullyConnected("fc", np.asarray(weight, dtype=np.float32),
                             None if bias is None else np.asarray(bias, dtype=np.float32)),
              *extra, Output("output"))
    return Network(layers, (np.asarray(weight).shape[0],))


class TestForward:
    def test_identity_fc_passthrough(self):
        net = single_fc_net(np.eye(4))
        x = np.random.default_rng(0).standard_normal(4).astype(np.float32)
        logits, _ = forward(net, x)
        np.testing.assert_array_equal(logits, x)

    def test_identity_conv_bn_relu_passthrough(self):
        layers = (
            Conv2d("conv", np.ones((1, 1, 1, 1), dtype=np.float32)),
            BatchNorm("bn", np.ones(1), np.zeros(1), np.zeros(1), np.ones(1)),
            ReLU("relu"),
            Flatten("flatten"),
            FullyConnected("fc", np.eye(9, dtype=np.float32)),
            Output("output"),
        )
        net = Network(layers, (1, 3, 3))
        x = np.abs(np.random.default_rng(1).standard_normal((1, 3, 3))).astype(np.float32)
        logits, taps = forward(net, x, taps=["relu"])
        np.testing.assert_array_equal(taps["relu"], x)
        np.testing.assert_array_equal(logits, x.reshape(-1))

    def test_lenet_shape(self):
        net = lenet300(np.random.default_rng(2))
        logits, _ = forward(net, np.random.default_rng(3).standard_normal(784).astype(np.float32))
        assert logits.shape == (10,)
        assert np.isfinite(logits).all()

    def test_input_shape_mismatch(self):
        net = single_fc_net(np.eye(3))
        with pytest.raises(ShapeError):
            forward(net, np.zeros(4, dtype=np.float32))

    def test_unknown_tap_rejected(self):
        net = single_fc_net(np.eye(3))
        with pytest.raises(ShapeError, match="ghost"):
            forward(net, np.zeros(3, dtype=np.float32), taps=["ghost"])

    def test_deterministic_bitwise(self):
        net = small_residual_network(np.random.default_rng(4))
        x = np.random.default_rng(5).standard_normal(net.input_shape).astype(np.float32)
        a, _ = forward(net, x)
        b, _ = forward(net, x)
        assert a.tobytes() == b.tobytes()

    def test_residual_sum_and_projection(self):
        net = small_residual_network(np.random.default_rng(6))
        x = np.random.default_rng(7).standard_normal(net.input_shape).astype(np.float32)
        logits, taps = forward(net, x, taps=["block2"])
        assert taps["block2"].shape == (16, 4, 4)
        assert np.isfinite(logits).all()

    def test_maxpool_values(self):
        layers = (MaxPool2d("pool", 2, 2), Flatten("f"),
                  FullyConnected("fc", np.eye(1, dtype=np.float32)), Output("output"))
        net = Network(layers, (1, 2, 2))
        x = np.array([[[1.0, 4.0], [3.0, 2.0]]], dtype=np.float32)
        logits, _ = forward(net, x)
        assert logits.tolist() == [4.0]


class TestAccuracy:
    def one_hot_copier(self, n=4):
        return single_fc_net(np.eye(n))

    def test_perfect_on_matching_one_hots(self):
        net = self.one_hot_copier()
        inputs = np.eye(4, dtype=np.float32)
        ds = Dataset(inputs, [0, 1, 2, 3], 4)
        assert accuracy(net, ds) == 1.0

    def test_zero_on_shifted_labels(self):
        net = self.one_hot_copier()
        inputs = np.eye(4, dtype=np.float32)
        ds = Dataset(inputs, [1, 2, 3, 0], 4)
        assert accuracy(net, ds) == 0.0

    def test_empty_dataset_rejected(self):
        net = self.one_hot_copier()
        ds = Dataset(np.zeros((0, 4), dtype=np.float32), [], 4)
        with pytest.raises(ValueError):
            accuracy(net, ds)

    def test_argmax_tie_breaks_to_lower_class(self):
        net = single_fc_net(np.ones((2, 3)))
        ds = Dataset(np.ones((1, 2), dtype=np.float32), [0], 3)
        assert accuracy(net, ds) == 1.0

    def test_top_k_widens_the_match(self):
        # logits rank classes 3 > 2 > 1 > 0 for every input
        net = single_fc_net(np.array([[0.0, 1.0, 2.0, 3.0]]))
        ds = Dataset(np.ones((1, 1), dtype=np.float32), [1], 4)
        assert accuracy(net, ds, top_k=1) == 0.0
        assert accuracy(net, ds, top_k=2) == 0.0
        assert accuracy(net, ds, top_k=3) == 1.0
        with pytest.raises(ValueError):
            accuracy(net, ds, top_k=0)


class TestWare:
    def two_layer_net(self, first_weight):
        layers = (
            FullyConnected("fc1", np.array([[first_weight]], dtype=np.float32)),
            FullyConnected("fc2", np.array([[1.0]], dtype=np.float32)),
            Output("output"),
        )
        return Network(layers, (1,))

    def test_identical_networks_have_zero_ware(self):
        rng = np.random.default_rng(8)
        net, _ = planted_fc_network(rng)
        ds = labeled_by(net, random_inputs(rng, net, 5))
        assert ware(net, net, ds) == 0.0

    def test_single_response_hand_value(self):
        original = self.two_layer_net(2.0)
        compressed = self.two_layer_net(1.0)
        ds = Dataset(np.ones((1, 1), dtype=np.float32), [0], 1)
        assert ware(original, compressed, ds) == pytest.approx(0.5)

    def test_default_tap_is_layer_feeding_classifier(self):
        original = self.two_layer_net(2.0)
        assert final_response_layer(original) == "fc1"

    def test_all_responses_skipped_raises(self):
        original = self.two_layer_net(0.0)
        compressed = self.two_layer_net(1.0)
        ds = Dataset(np.ones((1, 1), dtype=np.float32), [0], 1)
        with pytest.raises(DegenerateInputError):
            ware(original, compressed, ds)

    def test_retained_restriction_maps_index_space(self):
        rng = np.random.default_rng(9)
        net, plan = planted_fc_network(rng)
        merged, report = apply(net, MergeConfig(plan=plan, t=-1.0))
        ds = labeled_by(net, random_inputs(rng, net, 6))
        idx = next(l.retained_indices for l in report.layers if l.name == "fc2")
        value = ware(net, merged, ds, retained=idx)
        assert value < 1e-4  # lossless fixture
        with pytest.raises(ShapeError):
            ware(net, merged, ds)  # sizes differ without the mapping

    def test_merged_beats_pruned_on_planted_fixture(self):
        rng = np.random.default_rng(10)
        net, plan = planted_fc_network(rng, noise=0.05)
        merged, rep_m = apply(net, MergeConfig(plan=plan, t=-1.0, mode="merge"))
        pruned, rep_p = apply(net, MergeConfig(plan=plan, t=-1.0, mode="prune"))
        ds = labeled_by(net, random_inputs(rng, net, 16))
        idx_m = next(l.retained_indices for l in rep_m.layers if l.name == "fc2")
        idx_p = next(l.retained_indices for l in rep_p.layers if l.name == "fc2")
        assert ware(net, merged, ds, retained=idx_m) < ware(net, pruned, ds, retained=idx_p)


class TestFeatureDump:
    def conv_net(self):
        rng = np.random.default_rng(11)
        layers = (
            Conv2d("conv", rng.standard_normal((2, 1, 3, 3)).astype(np.float32), padding=1),
            ReLU("relu"),
            Flatten("flatten"),
            FullyConnected("fc", rng.standard_normal((2 * 4 * 4, 3)).astype(np.float32)),
            Output("output"),
        )
        return Network(layers, (1, 4, 4))

    def test_dump_reload_roundtrip(self, tmp_path):
        net = self.conv_net()
        x = np.random.default_rng(12).standard_normal((1, 4, 4)).astype(np.float32)
        dump_feature_maps(net, x, "relu", tmp_path / "fmap.bin")
        back = load_feature_map(tmp_path / "fmap.bin")
        _, taps = forward(net, x, taps=["relu"])
        assert back.tobytes() == taps["relu"].tobytes()

    def test_nonexistent_layer(self, tmp_path):
        with pytest.raises(ShapeError, match="ghost"):
            dump_feature_maps(self.conv_net(), np.zeros((1, 4, 4), dtype=np.float32),
                              "ghost", tmp_path / "x.bin")

    def test_non_feature_map_layer_rejected(self, tmp_path):
        with pytest.raises(ShapeError, match="rank-3"):
            dump_feature_maps(self.conv_net(), np.zeros((1, 4, 4), dtype=np.float32),
                              "fc", tmp_path / "x.bin")

    def test_dump_is_deterministic(self, tmp_path):
        net = self.conv_net()
        x = np.random.default_rng(13).standard_normal((1, 4, 4)).astype(np.float32)
        dump_feature_maps(net, x, "relu", tmp_path / "a.bin")
        dump_feature_maps(net, x, "relu", tmp_path / "b.bin")
        assert (tmp_path / "a.bin").read_bytes() == (tmp_path / "b.bin").read_bytes()
