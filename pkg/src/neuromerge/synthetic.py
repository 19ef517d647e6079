"""Synthetic network builders: planted-redundancy fixtures and reference shapes.

A planted-redundancy network is constructed so that the neurons a norm
criterion will prune are (near-)exact positive multiples of neurons it will
retain, which makes merging provably lossless and gives pruning a known
handicap. Builders return the network together with the pruning plan they
were planted for.
"""

from __future__ import annotations

import numpy as np

from .criteria import keep_count_for_ratio
from .model import (
    AvgPool2d,
    BatchNorm,
    Conv2d,
    Dataset,
    Flatten,
    FullyConnected,
    MaxPool2d,
    Network,
    Output,
    ReLU,
    ResidualBlock,
)

_PROTO_NORM = (0.95, 1.05)


def _planted_vectors(rng, n_neurons, keep, length, noise, copy_scale=(0.25, 0.45), mean_shift=0.0):
    """(n_neurons, length) rows where pruned rows are scaled copies of retained rows.

    Prototypes are normalized in the l1 norm (the default selection
    criterion), so every copy scores strictly below every prototype and the
    retained set is guaranteed to cover all planted families. ``mean_shift``
    adds a common positive component so that dropped neurons hurt coherently
    instead of cancelling out.
    """
    protos = rng.standard_normal((keep, length)) + mean_shift
    protos /= np.abs(protos).sum(axis=1, keepdims=True)
    protos *= rng.uniform(*_PROTO_NORM, size=(keep, 1))
    positions = rng.permutation(n_neurons)
    proto_pos = np.sort(positions[:keep])
    vecs = np.zeros((n_neurons, length))
    for row, pos in enumerate(proto_pos):
        vecs[pos] = protos[row]
    for pos in positions[keep:]:
        donor = protos[rng.integers(0, keep)]
        direction = donor.copy()
        if noise > 0.0:
            g = rng.standard_normal(length)
            direction = donor + noise * np.linalg.norm(donor) * g / np.linalg.norm(g)
        vecs[pos] = rng.uniform(*copy_scale) * direction
    # Common factor restoring roughly unit l2 norms; orderings are unchanged.
    vecs *= np.sqrt(2.0 * length / np.pi)
    return vecs.astype(np.float32)


def planted_fc_network(rng, sizes=(16, 32, 24, 10), ratios=(0.5, 0.5), noise=0.0):
    """Three dense layers with planted redundancy in the first two.

    Returns (network, plan). Neuron vectors include the bias coordinate, so
    copies replicate the donor's bias scaled by the same factor.
    """
    n_in, h1, h2, n_out = sizes
    layers = []
    plan = {}
    dims = [(n_in, h1, ratios[0]), (h1, h2, ratios[1])]
    for k, (fan_in, fan_out, ratio) in enumerate(dims, start=1):
        keep = keep_count_for_ratio(fan_out, ratio)
        vecs = _planted_vectors(rng, fan_out, keep, fan_in + 1, noise)
        scale = 1.0 / np.sqrt(fan_in)
        weight = (vecs[:, :-1].T * scale).astype(np.float32)
        bias = (vecs[:, -1] * scale).astype(np.float32)
        name = f"fc{k}"
        layers += [FullyConnected(name, weight, bias), ReLU(f"relu{k}")]
        plan[name] = ratio
    w_out = (rng.standard_normal((h2, n_out)) / np.sqrt(h2)).astype(np.float32)
    b_out = (0.01 * rng.standard_normal(n_out)).astype(np.float32)
    layers += [FullyConnected("fc3", w_out, b_out), Output("output")]
    return Network(tuple(layers), (n_in,)), plan


def _random_bn(rng, name, channels, centered=True):
    gamma = rng.uniform(0.5, 1.5, channels).astype(np.float32)
    sigma = rng.uniform(0.5, 1.5, channels).astype(np.float32)
    if centered:
        beta = np.zeros(channels, dtype=np.float32)
        mu = np.zeros(channels, dtype=np.float32)
    else:
        beta = rng.uniform(-0.3, 0.3, channels).astype(np.float32)
        mu = rng.uniform(-0.3, 0.3, channels).astype(np.float32)
    return BatchNorm(name, gamma, beta, mu, sigma)


def planted_conv_network(rng, channels=(24, 24, 24), ratio=0.5, noise=0.0, centered_bn=True):
    """Conv-BN-ReLU stack with planted filter redundancy, ending in a dense classifier.

    Normalization layers are zero-mean/zero-shift by default so a scaled
    copy of a filter stays an exact affine match after normalization.
    Returns (network, plan) with all three convolutions planned.
    """
    c1, c2, c3 = channels
    layers = []
    plan = {}
    in_ch = 3
    for k, (out_ch, kernel) in enumerate(((c1, 3), (c2, 3), (c3, 3)), start=1):
        keep = keep_count_for_ratio(out_ch, ratio)
        # Copies carry substantial weight, with a coherent component, so
        # dropping them uncompensated visibly disturbs the logits.
        vecs = _planted_vectors(rng, out_ch, keep, in_ch * kernel * kernel, noise,
                                copy_scale=(0.45, 0.7), mean_shift=0.4)
        weight = (vecs.reshape(out_ch, in_ch, kernel, kernel) / np.sqrt(in_ch * kernel * kernel)).astype(
            np.float32
        )
        name = f"conv{k}"
        layers += [
            Conv2d(name, weight, stride=1, padding=1),
            _random_bn(rng, f"bn{k}", out_ch, centered=centered_bn),
            ReLU(f"relu{k}"),
        ]
        plan[name] = ratio
        if k == 2:
            layers.append(MaxPool2d("pool1", kernel=2, stride=2))
        in_ch = out_ch
    layers.append(AvgPool2d("pool2", kernel=2, stride=2))
    layers.append(Flatten("flatten"))
    fc_in = c3 * 2 * 2
    w = (rng.standard_normal((fc_in, 10)) / np.sqrt(fc_in)).astype(np.float32)
    b = (0.001 * rng.standard_normal(10)).astype(np.float32)
    layers += [FullyConnected("fc", w, b), Output("output")]
    return Network(tuple(layers), (3, 8, 8)), plan


def random_chain_network(rng):
    """Random valid chain (dense or convolutional) with at least one prunable layer."""
    if rng.random() < 0.5:
        dims = [int(rng.integers(4, 12)) for _ in range(4)]
        layers = []
        for k in range(3):
            w = (rng.standard_normal((dims[k], dims[k + 1])) / np.sqrt(dims[k])).astype(np.float32)
            bias = None
            if rng.random() < 0.7:
                bias = (0.1 * rng.standard_normal(dims[k + 1])).astype(np.float32)
            layers.append(FullyConnected(f"fc{k + 1}", w, bias))
            if k < 2:
                layers.append(ReLU(f"relu{k + 1}"))
        layers.append(Output("output"))
        return Network(tuple(layers), (dims[0],))
    chans = [int(rng.integers(2, 8)) for _ in range(3)]
    size = 6
    layers = []
    in_ch = chans[0]
    for k in range(2):
        w = (rng.standard_normal((chans[k + 1], in_ch, 3, 3)) / 3.0).astype(np.float32)
        layers.append(Conv2d(f"conv{k + 1}", w, stride=1, padding=1))
        if rng.random() < 0.7:
            layers.append(_random_bn(rng, f"bn{k + 1}", chans[k + 1], centered=False))
        layers.append(ReLU(f"relu{k + 1}"))
        in_ch = chans[k + 1]
    layers += [
        MaxPool2d("pool", 2, 2),
        Flatten("flatten"),
        FullyConnected(
            "fc",
            (rng.standard_normal((in_ch * (size // 2) ** 2, 5)) * 0.2).astype(np.float32),
            (0.1 * rng.standard_normal(5)).astype(np.float32),
        ),
        Output("output"),
    ]
    return Network(tuple(layers), (chans[0], size, size))


def random_inputs(rng, net, count):
    return rng.standard_normal((count,) + tuple(net.input_shape)).astype(np.float32)


def labeled_by(net, inputs) -> Dataset:
    """Dataset whose labels are the network's own argmax predictions."""
    from .evaluate import forward

    labels = []
    class_count = None
    for x in inputs:
        logits, _ = forward(net, x)
        labels.append(int(np.argmax(logits)))
        class_count = logits.shape[0]
    return Dataset(np.asarray(inputs, dtype=np.float32), np.asarray(labels), class_count)


def lenet300(rng) -> Network:
    """LeNet-300-100 shape (784-300-100-10, dense, biased), random weights."""
    sizes = (784, 300, 100, 10)
    layers = []
    for k in range(3):
        w = (rng.standard_normal((sizes[k], sizes[k + 1])) / np.sqrt(sizes[k])).astype(np.float32)
        b = (0.01 * rng.standard_normal(sizes[k + 1])).astype(np.float32)
        layers.append(FullyConnected(f"fc{k + 1}", w, b))
        if k < 2:
            layers.append(ReLU(f"relu{k + 1}"))
    layers.append(Output("output"))
    return Network(tuple(layers), (784,))


VGG16_CFG = (64, 64, "M", 128, 128, "M", 256, 256, 256, "M", 512, 512, 512, "M", 512, 512, 512, "M")


def vgg16_cifar(rng, num_classes=10) -> Network:
    """VGG-16 for 32x32 inputs: 13 conv-BN-ReLU stages, 512-512 dense head."""
    layers = []
    in_ch = 3
    conv_idx = 0
    pool_idx = 0
    for item in VGG16_CFG:
        if item == "M":
            pool_idx += 1
            layers.append(MaxPool2d(f"pool{pool_idx}", 2, 2))
            continue
        conv_idx += 1
        out_ch = int(item)
        w = (rng.standard_normal((out_ch, in_ch, 3, 3)) / np.sqrt(in_ch * 9)).astype(np.float32)
        layers += [
            Conv2d(f"conv{conv_idx}", w, stride=1, padding=1),
            _random_bn(rng, f"bn{conv_idx}", out_ch, centered=False),
            ReLU(f"relu{conv_idx}"),
        ]
        in_ch = out_ch
    layers.append(Flatten("flatten"))
    w1 = (rng.standard_normal((512, 512)) / np.sqrt(512)).astype(np.float32)
    layers += [
        FullyConnected("fc1", w1, (0.01 * rng.standard_normal(512)).astype(np.float32)),
        _random_bn(rng, "bn_fc1", 512, centered=False),
        ReLU("relu_fc1"),
    ]
    w2 = (rng.standard_normal((512, num_classes)) / np.sqrt(512)).astype(np.float32)
    layers += [
        FullyConnected("fc2", w2, (0.01 * rng.standard_normal(num_classes)).astype(np.float32)),
        Output("output"),
    ]
    return Network(tuple(layers), (3, 32, 32))


def vgg16_plan(ratio=0.5) -> dict:
    """Half the filters of the first convolution and of the last six."""
    return {"conv1": ratio, **{f"conv{i}": ratio for i in range(8, 14)}}


def small_residual_network(rng) -> Network:
    """Stem conv plus two residual blocks (one identity, one projected shortcut)."""
    def conv(name, cin, cout, k=3, stride=1, padding=1):
        w = (rng.standard_normal((cout, cin, k, k)) / np.sqrt(cin * k * k)).astype(np.float32)
        return Conv2d(name, w, stride=stride, padding=padding)

    layers = [
        conv("stem", 3, 8),
        _random_bn(rng, "stem_bn", 8, centered=False),
        ReLU("stem_relu"),
        ResidualBlock(
            "block1",
            body=(
                conv("b1_conv1", 8, 8),
                _random_bn(rng, "b1_bn1", 8, centered=False),
                ReLU("b1_relu1"),
                conv("b1_conv2", 8, 8),
                _random_bn(rng, "b1_bn2", 8, centered=False),
            ),
        ),
        ReLU("relu_block1"),
        ResidualBlock(
            "block2",
            body=(
                conv("b2_conv1", 8, 16, stride=2),
                _random_bn(rng, "b2_bn1", 16, centered=False),
                ReLU("b2_relu1"),
                conv("b2_conv2", 16, 16),
                _random_bn(rng, "b2_bn2", 16, centered=False),
            ),
            shortcut=(
                conv("b2_short", 8, 16, k=1, stride=2, padding=0),
                _random_bn(rng, "b2_short_bn", 16, centered=False),
            ),
        ),
        ReLU("relu_block2"),
        AvgPool2d("gap", 4, 4),
        Flatten("flatten"),
        FullyConnected(
            "fc",
            (rng.standard_normal((16, 10)) / 4.0).astype(np.float32),
            (0.01 * rng.standard_normal(10)).astype(np.float32),
        ),
        Output("output"),
    ]
    return Network(tuple(layers), (3, 8, 8))
