"""Layer-graph model representation and structural validation.

A network is an ordered chain of layers (plus two-branch residual blocks)
ending in a single Output marker. The weight layer feeding Output is the
classifier. All parameter tensors are float32 numpy arrays and are frozen
(read-only) on construction; transformations build new networks.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Iterator, Optional, Union

import numpy as np

from .errors import ShapeError, ValidationError
from .tensor import conv_output_size


def _frozen(arr, rank=None) -> np.ndarray:
    a = np.ascontiguousarray(arr, dtype=np.float32)
    if rank is not None and a.ndim != rank:
        raise ShapeError(f"expected rank-{rank} array, got shape {a.shape}")
    a.setflags(write=False)
    return a


@dataclass(frozen=True, eq=False)
class FullyConnected:
    """Dense layer: input length = weight rows, output length = weight cols."""

    name: str
    weight: np.ndarray  # (n_in, n_out)
    bias: Optional[np.ndarray] = None  # (n_out,)

    def __post_init__(self):
        object.__setattr__(self, "weight", _frozen(self.weight, rank=2))
        if self.bias is not None:
            object.__setattr__(self, "bias", _frozen(self.bias, rank=1))


@dataclass(frozen=True, eq=False)
class Conv2d:
    """2D convolution, square kernel, zero padding, no bias term."""

    name: str
    weight: np.ndarray  # (n_out, n_in, k, k)
    stride: int = 1
    padding: int = 0

    def __post_init__(self):
        object.__setattr__(self, "weight", _frozen(self.weight, rank=4))


@dataclass(frozen=True, eq=False)
class BatchNorm:
    """Inference-mode normalization: gamma * (x - mu) / sigma + beta, per channel.

    sigma is the precomputed denominator (sqrt of variance plus epsilon),
    so every entry must be strictly positive.
    """

    name: str
    gamma: np.ndarray
    beta: np.ndarray
    mu: np.ndarray
    sigma: np.ndarray

    def __post_init__(self):
        for f in ("gamma", "beta", "mu", "sigma"):
            object.__setattr__(self, f, _frozen(getattr(self, f), rank=1))

    @property
    def channels(self) -> int:
        return self.gamma.shape[0]


@dataclass(frozen=True)
class ReLU:
    name: str


@dataclass(frozen=True)
class MaxPool2d:
    name: str
    kernel: int
    stride: int


@dataclass(frozen=True)
class AvgPool2d:
    name: str
    kernel: int
    stride: int


@dataclass(frozen=True)
class Flatten:
    """Rank-3 feature map to vector, channel-major (channel slowest)."""

    name: str


@dataclass(frozen=True)
class Output:
    """Terminal marker; the weight layer feeding it is the classifier."""

    name: str


Layer = Union[FullyConnected, Conv2d, BatchNorm, ReLU, MaxPool2d, AvgPool2d, Flatten, Output]


@dataclass(frozen=True, eq=False)
class ResidualBlock:
    """Two-branch block: output = body(x) + shortcut(x).

    The shortcut is an empty tuple (identity) or a short projection chain
    (1x1 conv, optionally followed by a BatchNorm).
    """

    name: str
    body: tuple
    shortcut: tuple = ()

    def __post_init__(self):
        object.__setattr__(self, "body", tuple(self.body))
        object.__setattr__(self, "shortcut", tuple(self.shortcut))


Node = Union[Layer, ResidualBlock]


@dataclass(frozen=True, eq=False)
class Network:
    layers: tuple
    input_shape: tuple

    def __post_init__(self):
        object.__setattr__(self, "layers", tuple(self.layers))
        object.__setattr__(self, "input_shape", tuple(int(s) for s in self.input_shape))

    def walk(self) -> Iterator[Layer]:
        """All layers in evaluation order, descending into residual blocks."""
        for node in self.layers:
            if isinstance(node, ResidualBlock):
                yield from node.body
                yield from node.shortcut
            else:
                yield node

    def find(self, name: str) -> Layer:
        for layer in self.walk():
            if layer.name == name:
                return layer
        raise KeyError(f"no layer named {name!r}")

    def classifier_name(self) -> str:
        """Name of the weight layer feeding the Output marker."""
        for node in reversed(self.layers[:-1]):
            if isinstance(node, (FullyConnected, Conv2d)):
                return node.name
            if isinstance(node, ResidualBlock):
                break
        raise ValidationError(["no weight layer feeds the output marker"])


@dataclass(frozen=True, eq=False)
class Dataset:
    """Pre-tensorized evaluation samples: inputs (M, *input_shape), labels (M,)."""

    inputs: np.ndarray
    labels: np.ndarray
    class_count: int

    def __post_init__(self):
        object.__setattr__(self, "inputs", _frozen(self.inputs))
        labels = np.ascontiguousarray(self.labels, dtype=np.uint32)
        labels.setflags(write=False)
        object.__setattr__(self, "labels", labels)
        if labels.shape[0] != self.inputs.shape[0]:
            raise ValidationError([
                f"dataset holds {self.inputs.shape[0]} inputs but {labels.shape[0]} labels"
            ])
        if labels.size and int(labels.max()) >= self.class_count:
            raise ValidationError([
                f"label {int(labels.max())} out of range for {self.class_count} classes"
            ])

    @property
    def sample_count(self) -> int:
        return int(self.inputs.shape[0])


def _shape_after(layer: Layer, shape, diags, prefix="") -> Optional[tuple]:
    """Output shape of ``layer`` on input ``shape``, or None after recording a diagnostic."""
    name = prefix + layer.name
    if isinstance(layer, FullyConnected):
        if len(shape) != 1 or shape[0] != layer.weight.shape[0]:
            diags.append(f"{name}: expects a vector of length {layer.weight.shape[0]}, got {shape}")
            return None
        if layer.bias is not None and layer.bias.shape[0] != layer.weight.shape[1]:
            diags.append(
                f"{name}: bias length {layer.bias.shape[0]} != weight columns {layer.weight.shape[1]}"
            )
            return None
        return (layer.weight.shape[1],)
    if isinstance(layer, Conv2d):
        n, c, k, _ = layer.weight.shape
        if len(shape) != 3 or shape[0] != c:
            diags.append(f"{name}: expects {c} input channels, got {shape}")
            return None
        h = conv_output_size(shape[1], k, layer.stride, layer.padding)
        w = conv_output_size(shape[2], k, layer.stride, layer.padding)
        if h < 1 or w < 1:
            diags.append(f"{name}: kernel {k} does not fit input {shape} with padding {layer.padding}")
            return None
        return (n, h, w)
    if isinstance(layer, BatchNorm):
        if np.any(layer.sigma <= 0):
            diags.append(f"{name}: sigma must be strictly positive")
            return None
        sizes = {layer.gamma.shape[0], layer.beta.shape[0], layer.mu.shape[0], layer.sigma.shape[0]}
        if len(sizes) != 1:
            diags.append(f"{name}: parameter vectors have inconsistent lengths")
            return None
        if len(shape) not in (1, 3) or shape[0] != layer.channels:
            diags.append(f"{name}: normalizes {layer.channels} channels, got {shape}")
            return None
        return shape
    if isinstance(layer, ReLU):
        return shape
    if isinstance(layer, (MaxPool2d, AvgPool2d)):
        if len(shape) != 3:
            diags.append(f"{name}: pooling expects a rank-3 feature map, got {shape}")
            return None
        h = conv_output_size(shape[1], layer.kernel, layer.stride, 0)
        w = conv_output_size(shape[2], layer.kernel, layer.stride, 0)
        if h < 1 or w < 1:
            diags.append(f"{name}: pooling window {layer.kernel} does not fit input {shape}")
            return None
        return (shape[0], h, w)
    if isinstance(layer, Flatten):
        if len(shape) != 3:
            diags.append(f"{name}: flatten expects a rank-3 feature map, got {shape}")
            return None
        return (shape[0] * shape[1] * shape[2],)
    if isinstance(layer, Output):
        return shape
    diags.append(f"{name}: unknown layer kind {type(layer).__name__}")
    return None


def infer_shapes(net: Network):
    """Map layer name -> (input shape, output shape). Raises on a broken chain."""
    diags = []
    shapes = {}

    def run_chain(layers, shape, prefix=""):
        for layer in layers:
            out = _shape_after(layer, shape, diags, prefix)
            if out is None:
                return None
            shapes[layer.name] = (tuple(shape), tuple(out))
            shape = out
        return shape

    shape = tuple(net.input_shape)
    for node in net.layers:
        if isinstance(node, ResidualBlock):
            body_out = run_chain(node.body, shape, prefix=f"{node.name}.")
            short_out = run_chain(node.shortcut, shape, prefix=f"{node.name}.") if node.shortcut else shape
            if body_out is None or short_out is None:
                break
            if tuple(body_out) != tuple(short_out):
                diags.append(
                    f"{node.name}: body output {body_out} != shortcut output {short_out}"
                )
                break
            shapes[node.name] = (tuple(shape), tuple(body_out))
            shape = tuple(body_out)
        else:
            out = _shape_after(node, shape, diags)
            if out is None:
                break
            shapes[node.name] = (tuple(shape), tuple(out))
            shape = out
    if diags:
        raise ValidationError(diags)
    return shapes


def validate(net: Network) -> list:
    """Structural diagnostics; an empty list means the network is well-formed."""
    diags = []
    names = [layer.name for layer in net.walk()]
    seen = set()
    for n in names:
        if n in seen:
            diags.append(f"{n}: duplicate layer name")
        seen.add(n)
    outputs = [l for l in net.walk() if isinstance(l, Output)]
    if len(outputs) != 1:
        diags.append(f"network must contain exactly one output marker, found {len(outputs)}")
    elif not isinstance(net.layers[-1], Output):
        diags.append("output marker must be the final node")
    if diags:
        return diags
    try:
        infer_shapes(net)
    except ValidationError as err:
        diags.extend(err.diagnostics)
    if not diags:
        try:
            net.classifier_name()
        except ValidationError as err:
            diags.extend(err.diagnostics)
    return diags


def require_valid(net: Network) -> Network:
    diags = validate(net)
    if diags:
        raise ValidationError(diags)
    return net


def parameter_count(net: Network) -> int:
    """Learnable parameter total: weights, biases, and BatchNorm gamma/beta.

    BatchNorm running statistics (mu, sigma) are state, not parameters, and
    are excluded, matching the usual deep-learning convention.
    """
    total = 0
    for layer in net.walk():
        if isinstance(layer, FullyConnected):
            total += layer.weight.size
            if layer.bias is not None:
                total += layer.bias.size
        elif isinstance(layer, Conv2d):
            total += layer.weight.size
        elif isinstance(layer, BatchNorm):
            total += layer.gamma.size + layer.beta.size
    return total


def networks_equal(a: Network, b: Network) -> bool:
    """Structural and bitwise equality (float payloads compared as raw bytes)."""
    if a.input_shape != b.input_shape:
        return False

    def node_key(node):
        if isinstance(node, ResidualBlock):
            return ("residual", node.name,
                    tuple(node_key(l) for l in node.body),
                    tuple(node_key(l) for l in node.shortcut))
        if isinstance(node, FullyConnected):
            return ("fc", node.name, node.weight.shape, node.weight.tobytes(),
                    None if node.bias is None else node.bias.tobytes())
        if isinstance(node, Conv2d):
            return ("conv", node.name, node.weight.shape, node.stride, node.padding,
                    node.weight.tobytes())
        if isinstance(node, BatchNorm):
            return ("bn", node.name, node.gamma.tobytes(), node.beta.tobytes(),
                    node.mu.tobytes(), node.sigma.tobytes())
        if isinstance(node, (MaxPool2d, AvgPool2d)):
            return (type(node).__name__, node.name, node.kernel, node.stride)
        return (type(node).__name__, node.name)

    return tuple(node_key(n) for n in a.layers) == tuple(node_key(n) for n in b.layers)
