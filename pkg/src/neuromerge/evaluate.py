"""Reference forward pass and comparison instruments (accuracy, WARE, taps).

Evaluation is deterministic: float64 accumulation inside each layer, float32
activations between layers, per-sample work reduced in sample order.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np

from .errors import DegenerateInputError, ShapeError
from .io import save_feature_map
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
    parameter_count,
)
from .tensor import relu as relu_op
from .tensor import tensor_conv

WARE_RESPONSE_FLOOR = 1e-6


@dataclass
class EvalReport:
    model_id: str
    accuracy: float
    ware: Optional[float]
    parameter_count: int
    sample_count: int

    def to_dict(self) -> dict:
        return {
            "model_id": self.model_id,
            "accuracy": self.accuracy,
            "ware": self.ware,
            "parameter_count": self.parameter_count,
            "sample_count": self.sample_count,
        }


def _pool_windows(x: np.ndarray, kernel: int, stride: int) -> np.ndarray:
    if x.ndim != 3:
        raise ShapeError(f"pooling expects a rank-3 feature map, got shape {x.shape}")
    if x.shape[1] < kernel or x.shape[2] < kernel:
        raise ShapeError(f"pooling window {kernel} does not fit input {x.shape}")
    win = np.lib.stride_tricks.sliding_window_view(x, (kernel, kernel), axis=(1, 2))
    return win[:, ::stride, ::stride]


def _layer_forward(layer, x: np.ndarray) -> np.ndarray:
    if isinstance(layer, FullyConnected):
        if x.ndim != 1 or x.shape[0] != layer.weight.shape[0]:
            raise ShapeError(
                f"{layer.name}: expects a vector of length {layer.weight.shape[0]}, got {x.shape}"
            )
        acc = layer.weight.astype(np.float64).T @ x.astype(np.float64)
        if layer.bias is not None:
            acc = acc + layer.bias.astype(np.float64)
        return acc.astype(np.float32)
    if isinstance(layer, Conv2d):
        return tensor_conv(layer.weight, x, layer.stride, layer.padding)
    if isinstance(layer, BatchNorm):
        if x.shape[0] != layer.channels:
            raise ShapeError(f"{layer.name}: normalizes {layer.channels} channels, got {x.shape}")
        shape = (-1,) + (1,) * (x.ndim - 1)
        g = layer.gamma.astype(np.float64).reshape(shape)
        b = layer.beta.astype(np.float64).reshape(shape)
        mu = layer.mu.astype(np.float64).reshape(shape)
        sg = layer.sigma.astype(np.float64).reshape(shape)
        return (g * (x.astype(np.float64) - mu) / sg + b).astype(np.float32)
    if isinstance(layer, ReLU):
        return relu_op(x)
    if isinstance(layer, MaxPool2d):
        return _pool_windows(x, layer.kernel, layer.stride).max(axis=(3, 4))
    if isinstance(layer, AvgPool2d):
        win = _pool_windows(x, layer.kernel, layer.stride)
        return win.astype(np.float64).mean(axis=(3, 4)).astype(np.float32)
    if isinstance(layer, Flatten):
        if x.ndim != 3:
            raise ShapeError(f"{layer.name}: flatten expects a rank-3 feature map, got {x.shape}")
        return np.ascontiguousarray(x.reshape(-1))
    if isinstance(layer, Output):
        return x
    raise ShapeError(f"cannot evaluate layer kind {type(layer).__name__}")


def forward(net: Network, x: np.ndarray, taps: Optional[Sequence[str]] = None):
    """Evaluate the network on one sample; returns (logits, tapped activations)."""
    x = np.asarray(x, dtype=np.float32)
    if tuple(x.shape) != tuple(net.input_shape):
        raise ShapeError(f"input shape {x.shape} does not match network input {net.input_shape}")
    wanted = set(taps or ())
    captured = {}

    def run_chain(layers, val):
        for layer in layers:
            val = _layer_forward(layer, val)
            if layer.name in wanted:
                captured[layer.name] = val
        return val

    for node in net.layers:
        if isinstance(node, ResidualBlock):
            body = run_chain(node.body, x)
            short = run_chain(node.shortcut, x) if node.shortcut else x
            if body.shape != short.shape:
                raise ShapeError(f"{node.name}: body {body.shape} != shortcut {short.shape}")
            x = (body.astype(np.float64) + short.astype(np.float64)).astype(np.float32)
            if node.name in wanted:
                captured[node.name] = x
        else:
            x = _layer_forward(node, x)
            if node.name in wanted:
                captured[node.name] = x
    missing = wanted - set(captured)
    if missing:
        raise ShapeError(f"tap layer(s) not found: {sorted(missing)}")
    return x, captured


def accuracy(net: Network, data: Dataset, top_k: int = 1) -> float:
    """Fraction of samples whose label is among the top_k logits.

    With the default top_k=1 this is plain argmax accuracy; ranking ties
    resolve toward the lower class index.
    """
    if data.sample_count == 0:
        raise ValueError("accuracy of an empty dataset is undefined")
    if top_k < 1:
        raise ValueError(f"top_k must be >= 1, got {top_k}")
    correct = 0
    for m in range(data.sample_count):
        logits, _ = forward(net, data.inputs[m])
        best = np.argsort(-logits, kind="stable")[:top_k]
        if int(data.labels[m]) in best:
            correct += 1
    return correct / data.sample_count


def final_response_layer(net: Network) -> str:
    """Default measurement point: the layer feeding the classifier."""
    classifier = net.classifier_name()
    prev = None
    for node in net.layers:
        if getattr(node, "name", None) == classifier:
            break
        prev = node
    if prev is None:
        raise ShapeError("no layer precedes the classifier")
    return prev.name


def ware(
    original: Network,
    compressed: Network,
    data: Dataset,
    tap: Optional[str] = None,
    retained: Optional[Sequence[int]] = None,
) -> float:
    """Weighted average reconstruction error at the final response layer.

    Per sample, the mean over responses of |changed - original| / |original|,
    averaged over samples; all response weights are 1. Original responses
    with magnitude <= 1e-6 are skipped (the relative error is undefined
    there) and the response count is reduced accordingly for that sample.
    ``retained`` maps the compressed layer's responses into the original
    layer's index space when the tap layer was itself pruned.
    """
    if data.sample_count < 1:
        raise ValueError("WARE of an empty dataset is undefined")
    tap_orig = tap or final_response_layer(original)
    tap_comp = tap or final_response_layer(compressed)
    idx = None if retained is None else np.asarray(retained, dtype=np.int64)
    per_sample = []
    for m in range(data.sample_count):
        _, taps_o = forward(original, data.inputs[m], taps=[tap_orig])
        _, taps_c = forward(compressed, data.inputs[m], taps=[tap_comp])
        y = taps_o[tap_orig].astype(np.float64).ravel()
        y_hat = taps_c[tap_comp].astype(np.float64).ravel()
        if idx is not None:
            y = y[idx]
        if y.shape != y_hat.shape:
            raise ShapeError(
                f"tap {tap_orig!r}: original has {y.shape[0]} responses, compressed {y_hat.shape[0]}"
                " (pass the retained indices of the compressed layer)"
            )
        valid = np.abs(y) > WARE_RESPONSE_FLOOR
        if not np.any(valid):
            continue
        per_sample.append(float(np.mean(np.abs(y_hat[valid] - y[valid]) / np.abs(y[valid]))))
    if not per_sample:
        raise DegenerateInputError(
            "every response was below the magnitude floor; WARE is undefined"
        )
    return float(np.mean(per_sample))


def dump_feature_maps(net: Network, x: np.ndarray, layer: str, path) -> None:
    """Write the named layer's rank-3 activation as a raw blob plus shape sidecar."""
    _, taps = forward(net, x, taps=[layer])
    fmap = taps[layer]
    if fmap.ndim != 3:
        raise ShapeError(f"{layer}: feature-map dump expects a rank-3 activation, got {fmap.shape}")
    save_feature_map(fmap, path)


def evaluate(net: Network, data: Dataset, model_id: str = "model", top_k: int = 1) -> EvalReport:
    return EvalReport(
        model_id=model_id,
        accuracy=accuracy(net, data, top_k=top_k),
        ware=None,
        parameter_count=parameter_count(net),
        sample_count=data.sample_count,
    )
