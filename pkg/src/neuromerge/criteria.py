"""Importance scoring of neurons/filters and retained-set selection.

A layer is viewed as a stack of per-neuron vectors: the columns of a dense
weight matrix (with the bias entry appended when present) or the flattened
filters of a convolution. Higher score means more important; the lowest
scoring neurons are pruned first.
"""

from __future__ import annotations

import enum

import numpy as np

from .errors import ShapeError
from .model import Conv2d, FullyConnected


class Criterion(enum.Enum):
    L1_NORM = "l1"
    L2_NORM = "l2"
    L2_GM = "l2-gm"

    @classmethod
    def from_name(cls, name: str) -> "Criterion":
        for c in cls:
            if c.value == name:
                return c
        raise ValueError(f"unknown criterion {name!r}; choose from {[c.value for c in cls]}")


def neuron_view(layer) -> np.ndarray:
    """Per-neuron vectors as rows: (n_neurons, vector_length), float32.

    Fully connected: one row per output neuron (weight column, bias
    appended when the layer has one). Convolution: one row per filter,
    flattened over (input channel, kernel row, kernel col).
    """
    if isinstance(layer, FullyConnected):
        vecs = layer.weight.T
        if layer.bias is not None:
            vecs = np.concatenate([vecs, layer.bias[:, None]], axis=1)
        return np.ascontiguousarray(vecs, dtype=np.float32)
    if isinstance(layer, Conv2d):
        n = layer.weight.shape[0]
        return np.ascontiguousarray(layer.weight.reshape(n, -1), dtype=np.float32)
    raise ShapeError(f"layer {layer.name!r} has no neuron view ({type(layer).__name__})")


def score_neurons(view: np.ndarray, criterion: Criterion) -> np.ndarray:
    """Importance score per neuron; float64 accumulation throughout."""
    view = np.asarray(view, dtype=np.float64)
    if view.ndim != 2 or view.shape[0] == 0:
        raise ShapeError(f"neuron view must be a non-empty 2D array, got shape {view.shape}")
    if criterion is Criterion.L1_NORM:
        return np.abs(view).sum(axis=1)
    if criterion is Criterion.L2_NORM:
        return np.sqrt((view * view).sum(axis=1))
    if criterion is Criterion.L2_GM:
        # Sum of euclidean distances to every other neuron: filters close to
        # the geometric median of the layer score low and go first. Distances
        # are formed from explicit differences row by row; the gram-matrix
        # shortcut cancels catastrophically for near-identical filters.
        out = np.empty(view.shape[0])
        for i in range(view.shape[0]):
            diff = view - view[i]
            out[i] = np.sqrt((diff * diff).sum(axis=1)).sum()
        return out
    raise ValueError(f"unhandled criterion {criterion}")


def select_retained(scores: np.ndarray, keep_count: int) -> np.ndarray:
    """Indices of the ``keep_count`` largest scores, ascending, ties to the lower index."""
    scores = np.asarray(scores, dtype=np.float64)
    n = scores.shape[0]
    if not 0 < keep_count <= n:
        raise ValueError(f"keep_count must be in 1..{n}, got {keep_count}")
    order = np.argsort(-scores, kind="stable")[:keep_count]
    return np.sort(order)


def keep_count_for_ratio(n_neurons: int, ratio: float) -> int:
    """Retained count for a pruning ratio: N - floor(ratio * N)."""
    if not 0.0 <= ratio < 1.0:
        raise ValueError(f"pruning ratio must be in [0, 1), got {ratio}")
    return n_neurons - int(np.floor(ratio * n_neurons))
