"""Layerwise compression pipeline: score, select, decompose, absorb.

For each planned layer the retained neurons become the new weights and the
scaling matrix is folded into the next weight-bearing layer, walking
forward past activation, normalization and pooling nodes (max pooling
commutes with per-channel positive scaling, so it is transparent here).
Prune mode keeps the same topology but absorbs a selection-only scaling
matrix, i.e. downstream dimensions are dropped instead of compensated.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .criteria import Criterion, keep_count_for_ratio, neuron_view, score_neurons, select_retained
from .decompose import BnContext, Decomposition, decompose_conv, decompose_fc
from .errors import ConfigError, ShapeError
from .model import (
    AvgPool2d,
    BatchNorm,
    Conv2d,
    Flatten,
    FullyConnected,
    MaxPool2d,
    Network,
    Output,
    ReLU,
    ResidualBlock,
    infer_shapes,
    parameter_count,
    require_valid,
)

MODES = ("merge", "prune")


@dataclass(frozen=True)
class MergeConfig:
    criterion: Criterion = Criterion.L1_NORM
    plan: dict = field(default_factory=dict)  # layer name -> pruning ratio
    t: float = 0.1
    lam: float = 0.85
    mode: str = "merge"

    def __post_init__(self):
        if self.mode not in MODES:
            raise ConfigError(f"mode must be one of {MODES}, got {self.mode!r}")
        if not 0.0 <= self.lam <= 1.0:
            raise ConfigError(f"lambda must be in [0, 1], got {self.lam}")
        for name, ratio in self.plan.items():
            if not 0.0 <= float(ratio) < 1.0:
                raise ConfigError(f"{name}: pruning ratio must be in [0, 1), got {ratio}")


@dataclass
class LayerReport:
    name: str
    ratio: float
    original: int
    retained: int
    retained_indices: list
    compensated: int
    warnings: list

    def to_dict(self) -> dict:
        return {
            "name": self.name,
            "ratio": self.ratio,
            "original_neurons": self.original,
            "retained_neurons": self.retained,
            "retained_indices": self.retained_indices,
            "compensated_columns": self.compensated,
            "warnings": self.warnings,
        }


@dataclass
class MergeReport:
    mode: str
    criterion: str
    t: float
    lam: float
    layers: list
    parameters_before: int
    parameters_after: int

    def to_dict(self) -> dict:
        return {
            "mode": self.mode,
            "criterion": self.criterion,
            "t": self.t,
            "lambda": self.lam,
            "layers": [l.to_dict() for l in self.layers],
            "parameters_before": self.parameters_before,
            "parameters_after": self.parameters_after,
        }


def merge_fc_pair(decomp: Decomposition, next_weight: np.ndarray) -> np.ndarray:
    """Absorb the scaling matrix into the next dense weight: Z @ W."""
    z = decomp.scaling
    w = np.asarray(next_weight, dtype=np.float32)
    if w.ndim != 2 or z.shape[1] != w.shape[0]:
        raise ShapeError(
            f"scaling matrix {z.shape} cannot multiply next weight {w.shape}"
        )
    return (z.astype(np.float64) @ w.astype(np.float64)).astype(np.float32)


def merge_conv_pair(decomp: Decomposition, next_weight: np.ndarray) -> np.ndarray:
    """Absorb the scaling matrix into the next convolution along its input-channel mode."""
    z = decomp.scaling
    w = np.asarray(next_weight, dtype=np.float32)
    if w.ndim != 4 or w.shape[1] != z.shape[1]:
        raise ShapeError(
            f"scaling matrix {z.shape} does not match next conv input channels {w.shape}"
        )
    prod = np.tensordot(z.astype(np.float64), w.astype(np.float64), axes=([1], [1]))
    return np.moveaxis(prod, 0, 1).astype(np.float32)


def merge_conv_fc_boundary(decomp: Decomposition, spatial, next_fc: np.ndarray) -> np.ndarray:
    """Absorb across a flatten: each channel's block of H*W rows is mixed per the scaling matrix."""
    z = decomp.scaling
    h, w = int(spatial[0]), int(spatial[1])
    mat = np.asarray(next_fc, dtype=np.float32)
    n = z.shape[1]
    if mat.ndim != 2 or mat.shape[0] != n * h * w:
        raise ShapeError(
            f"next dense layer has {mat.shape[0]} input rows, expected {n}*{h}*{w}"
        )
    blocks = mat.reshape(n, h * w, mat.shape[1]).astype(np.float64)
    mixed = np.tensordot(z.astype(np.float64), blocks, axes=([1], [0]))
    return mixed.astype(np.float32).reshape(z.shape[0] * h * w, mat.shape[1])


def slice_bn(bn: BatchNorm, retained_indices) -> BatchNorm:
    """Restrict normalization parameters to the retained channels, order preserved."""
    idx = np.asarray(retained_indices, dtype=np.int64)
    if idx.size == 0 or idx.min() < 0 or idx.max() >= bn.channels:
        raise ShapeError(f"{bn.name}: retained indices out of range for {bn.channels} channels")
    return BatchNorm(bn.name, bn.gamma[idx], bn.beta[idx], bn.mu[idx], bn.sigma[idx])


def _selection_only(z: np.ndarray, retained_indices: np.ndarray) -> np.ndarray:
    sel = np.zeros_like(z)
    for row, col in enumerate(retained_indices):
        sel[row, col] = 1.0
    return sel


class _Chain:
    """Mutable view over one linear run of layers (top level or a block body)."""

    def __init__(self, nodes, label):
        self.nodes = list(nodes)
        self.label = label

    def index_of(self, name):
        for i, node in enumerate(self.nodes):
            if getattr(node, "name", None) == name:
                return i
        return None


def _planned_order(net: Network, plan: dict) -> list:
    order = []
    for layer in net.walk():
        if layer.name in plan:
            order.append(layer.name)
    missing = set(plan) - set(order)
    if missing:
        raise ConfigError(f"plan names unknown layers: {sorted(missing)}")
    return order


def apply(net: Network, cfg: MergeConfig):
    """Compress ``net`` per the plan; returns the new network and a report.

    Residual restriction: only internal body layers may be planned; the
    weight layer whose output joins the shortcut sum has no absorption
    target inside the block and is rejected.
    """
    require_valid(net)
    shapes = infer_shapes(net)
    classifier = net.classifier_name()
    if classifier in cfg.plan:
        raise ConfigError(f"{classifier}: the classifier layer cannot be pruned")

    top = _Chain(net.layers, "network")
    bodies = {}
    for node in net.layers:
        if isinstance(node, ResidualBlock):
            bodies[node.name] = (_Chain(node.body, node.name), node)

    def chain_for(name):
        if top.index_of(name) is not None:
            return top
        for chain, block in bodies.values():
            if chain.index_of(name) is not None:
                return chain
            if any(getattr(l, "name", None) == name for l in block.shortcut):
                raise ConfigError(f"{name}: shortcut projection layers cannot be pruned")
        raise ConfigError(f"plan names unknown layer {name!r}")

    reports = []
    params_before = parameter_count(net)

    for name in _planned_order(net, cfg.plan):
        chain = chain_for(name)
        i = chain.index_of(name)
        layer = chain.nodes[i]
        if not isinstance(layer, (FullyConnected, Conv2d)):
            raise ConfigError(f"{name}: only dense and convolution layers can be pruned")
        ratio = float(cfg.plan[name])
        view = neuron_view(layer)
        n_neurons = view.shape[0]
        keep = keep_count_for_ratio(n_neurons, ratio)
        scores = score_neurons(view, cfg.criterion)
        retained = select_retained(scores, keep)

        bn_ctx = None
        if i + 1 < len(chain.nodes) and isinstance(chain.nodes[i + 1], BatchNorm):
            bn_ctx = BnContext.from_layer(chain.nodes[i + 1], cfg.lam)

        if isinstance(layer, FullyConnected):
            decomp = decompose_fc(layer, retained, cfg.t, bn_ctx)
            chain.nodes[i] = FullyConnected(layer.name, decomp.weight, decomp.bias)
        else:
            decomp = decompose_conv(layer, retained, cfg.t, bn_ctx)
            chain.nodes[i] = Conv2d(layer.name, decomp.weight, layer.stride, layer.padding)

        if bn_ctx is not None:
            chain.nodes[i + 1] = slice_bn(chain.nodes[i + 1], decomp.retained_indices)

        z = decomp.scaling
        if cfg.mode == "prune":
            z = _selection_only(z, decomp.retained_indices)
        absorb_decomp = replace_scaling(decomp, z)

        _absorb(chain, i + 1, name, absorb_decomp, shapes)

        reports.append(
            LayerReport(
                name=name,
                ratio=ratio,
                original=n_neurons,
                retained=int(keep),
                retained_indices=[int(x) for x in decomp.retained_indices],
                compensated=absorb_decomp.compensated_columns,
                warnings=list(decomp.warnings),
            )
        )

    new_layers = []
    for node in top.nodes:
        if isinstance(node, ResidualBlock):
            chain, block = bodies[node.name]
            new_layers.append(ResidualBlock(node.name, tuple(chain.nodes), block.shortcut))
        else:
            new_layers.append(node)
    out = Network(tuple(new_layers), net.input_shape)
    require_valid(out)
    report = MergeReport(
        mode=cfg.mode,
        criterion=cfg.criterion.value,
        t=cfg.t,
        lam=cfg.lam,
        layers=reports,
        parameters_before=params_before,
        parameters_after=parameter_count(out),
    )
    return out, report


def replace_scaling(decomp: Decomposition, z: np.ndarray) -> Decomposition:
    return Decomposition(
        scaling=np.asarray(z, dtype=np.float32),
        retained_indices=decomp.retained_indices,
        weight=decomp.weight,
        bias=decomp.bias,
        warnings=decomp.warnings,
    )


def _absorb(chain: _Chain, start: int, planned: str, decomp: Decomposition, shapes) -> None:
    """Fold the scaling matrix into the next weight-bearing layer of the chain."""
    spatial = None
    j = start
    while j < len(chain.nodes):
        node = chain.nodes[j]
        if isinstance(node, (BatchNorm, ReLU, MaxPool2d, AvgPool2d)):
            j += 1
            continue
        if isinstance(node, Flatten):
            in_shape = shapes[node.name][0]
            spatial = (in_shape[1], in_shape[2])
            j += 1
            continue
        if isinstance(node, FullyConnected):
            if spatial is None or spatial == (1, 1):
                new_w = merge_fc_pair(decomp, node.weight)
            else:
                new_w = merge_conv_fc_boundary(decomp, spatial, node.weight)
            chain.nodes[j] = FullyConnected(node.name, new_w, node.bias)
            return
        if isinstance(node, Conv2d):
            if spatial is not None:
                raise ConfigError(f"{planned}: convolution after flatten is not absorbable")
            new_w = merge_conv_pair(decomp, node.weight)
            chain.nodes[j] = Conv2d(node.name, new_w, node.stride, node.padding)
            return
        if isinstance(node, ResidualBlock):
            raise ConfigError(
                f"{planned}: next weight layer sits inside residual block {node.name!r};"
                " layers feeding a residual block cannot be pruned"
            )
        if isinstance(node, Output):
            raise ConfigError(f"{planned}: no weight layer between it and the output marker")
        raise ConfigError(f"{planned}: unsupported layer {node.name!r} before the next weight layer")
    raise ConfigError(
        f"{planned}: its output joins the residual sum of {chain.label!r}; "
        "only internal block layers can be pruned"
    )


def eligible_layers(net: Network) -> list:
    """Names of layers a uniform-ratio plan may prune, in network order.

    Excludes the classifier and any weight layer whose scaling matrix has no
    absorption target (block-final layers, layers feeding a residual block).
    """
    require_valid(net)
    shapes = infer_shapes(net)
    classifier = net.classifier_name()
    names = []
    chains = [_Chain(net.layers, "network")]
    for node in net.layers:
        if isinstance(node, ResidualBlock):
            chains.append(_Chain(node.body, node.name))
    for chain in chains:
        for i, node in enumerate(chain.nodes):
            if not isinstance(node, (FullyConnected, Conv2d)) or node.name == classifier:
                continue
            probe = _Chain(list(chain.nodes), chain.label)
            dummy = Decomposition(
                scaling=np.eye(
                    neuron_view(node).shape[0], dtype=np.float32
                ),
                retained_indices=np.arange(neuron_view(node).shape[0]),
                weight=node.weight,
                bias=getattr(node, "bias", None),
                warnings=(),
            )
            try:
                _absorb(probe, i + 1, node.name, dummy, shapes)
            except ConfigError:
                continue
            names.append(node.name)
    order = {layer.name: k for k, layer in enumerate(net.walk())}
    return sorted(names, key=lambda n: order[n])
