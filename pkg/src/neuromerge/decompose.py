"""Split a layer into retained weights plus a scaling matrix.

For every pruned neuron we search the retained set for the most similar
donor (by cosine similarity, optionally blended with a normalization-aware
bias distance) and record how much of the donor's activation reproduces the
pruned one. The scaling matrix collects those multipliers; columns of
retained neurons carry an exact 1 in their own row.

The scaling matrix always satisfies the structural condition that lets it
commute with ReLU: non-negative entries, at most one strictly positive
entry per column.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np

from .errors import DegenerateInputError, ShapeError
from .model import BatchNorm, Conv2d, FullyConnected
from .criteria import neuron_view


@dataclass(frozen=True)
class SimilarityResult:
    """Best donor for one pruned neuron: retained-set position, cosine, multiplier."""

    index: int
    sim: float
    scale: float


@dataclass(frozen=True, eq=False)
class BnContext:
    """Normalization parameters of the layer following a convolution.

    Vectors are indexed by the convolution's original output channels.
    ``lam`` weights cosine distance against bias distance during donor
    selection (1.0 = cosine only).
    """

    gamma: np.ndarray
    beta: np.ndarray
    mu: np.ndarray
    sigma: np.ndarray
    lam: float = 0.85

    def __post_init__(self):
        for f in ("gamma", "beta", "mu", "sigma"):
            object.__setattr__(self, f, np.asarray(getattr(self, f), dtype=np.float64).ravel())
        if np.any(self.sigma <= 0):
            raise ShapeError("BN sigma entries must be strictly positive")
        if not 0.0 <= self.lam <= 1.0:
            raise ValueError(f"lambda must be in [0, 1], got {self.lam}")

    @classmethod
    def from_layer(cls, bn: BatchNorm, lam: float) -> "BnContext":
        return cls(bn.gamma, bn.beta, bn.mu, bn.sigma, lam)


@dataclass(frozen=True, eq=False)
class Decomposition:
    """Retained weights plus the scaling matrix produced for one layer."""

    scaling: np.ndarray  # (P, N) float32
    retained_indices: np.ndarray  # (P,) ascending original indices
    weight: np.ndarray  # FC: (n_in, P); conv: (P, n_in, k, k)
    bias: Optional[np.ndarray]
    warnings: tuple

    @property
    def compensated_columns(self) -> int:
        pruned = np.setdiff1d(np.arange(self.scaling.shape[1]), self.retained_indices)
        if pruned.size == 0:
            return 0
        return int(np.count_nonzero(self.scaling[:, pruned].max(axis=0) > 0))


def check_scaling_matrix(z: np.ndarray, retained_indices: np.ndarray) -> None:
    """Raise if ``z`` breaks the ReLU-commutation structure or the retained pattern."""
    if np.any(z < 0):
        raise ValueError("scaling matrix has a negative entry")
    if np.any((z > 0).sum(axis=0) > 1):
        raise ValueError("scaling matrix has a column with more than one positive entry")
    for row, col in enumerate(retained_indices):
        column = z[:, col]
        if column[row] != 1.0 or np.count_nonzero(column) != 1:
            raise ValueError(f"retained column {col} must hold exactly a 1 in row {row}")


def _norms(view: np.ndarray) -> np.ndarray:
    v = view.astype(np.float64)
    return np.sqrt((v * v).sum(axis=1))


def _most_similar_impl(w: np.ndarray, wn: float, cand64: np.ndarray, norms: np.ndarray) -> SimilarityResult:
    usable = norms > 0
    if not np.any(usable):
        raise DegenerateInputError("every retained candidate has zero norm")
    sims = np.full(cand64.shape[0], -np.inf)
    sims[usable] = (cand64[usable] @ w) / (norms[usable] * wn)
    idx = int(np.argmax(sims))
    sim = float(np.clip(sims[idx], -1.0, 1.0))
    return SimilarityResult(index=idx, sim=sim, scale=float(wn / norms[idx]))


def most_similar(w_n: np.ndarray, retained: np.ndarray) -> SimilarityResult:
    """Donor with the highest cosine similarity; scale is the norm ratio.

    Zero-norm retained vectors are excluded from the search; ties break
    toward the lower retained index.
    """
    retained = np.asarray(retained, dtype=np.float32)
    if retained.ndim != 2 or retained.shape[0] == 0:
        raise ShapeError("retained set must be a non-empty 2D array")
    w = np.asarray(w_n, dtype=np.float64).ravel()
    if w.shape[0] != retained.shape[1]:
        raise ShapeError(
            f"neuron length {w.shape[0]} does not match retained vectors of length {retained.shape[1]}"
        )
    wn = np.sqrt(np.dot(w, w))
    if wn == 0.0:
        raise DegenerateInputError("zero-norm neuron has no direction to match")
    return _most_similar_impl(w, wn, retained.astype(np.float64), _norms(retained))


def most_similar_bn(
    f_n: np.ndarray,
    retained: np.ndarray,
    bn: BnContext,
    n: int,
    retained_indices: np.ndarray,
) -> SimilarityResult:
    """Donor selection blending cosine distance with the normalization bias distance.

    For each retained candidate the post-normalization response of pruned
    channel ``n`` relates to the candidate's response by an affine map
    response_n = S * response_donor + B, where the pre-normalization scale s
    is the filter norm ratio. Candidates whose S is not strictly positive
    cannot compensate and are skipped. The bias distances |B|/S are min-max
    normalized across surviving candidates and mixed with cosine distance
    using ``bn.lam``. The winner's S becomes the scale.
    """
    retained = np.asarray(retained, dtype=np.float32)
    retained_indices = np.asarray(retained_indices, dtype=np.int64)
    if retained.shape[0] != retained_indices.shape[0]:
        raise ShapeError("retained view and index list disagree in length")
    f = np.asarray(f_n, dtype=np.float64).ravel()
    fn_norm = np.sqrt(np.dot(f, f))
    if fn_norm == 0.0:
        raise DegenerateInputError("zero-norm filter has no direction to match")
    return _most_similar_bn_impl(
        f, fn_norm, retained.astype(np.float64), _norms(retained), bn, n, retained_indices
    )


def _most_similar_bn_impl(f, fn_norm, cand64, norms, bn, n, retained_indices) -> SimilarityResult:
    g_n, b_n = bn.gamma[n], bn.beta[n]
    mu_n, sg_n = bn.mu[n], bn.sigma[n]
    g_o = bn.gamma[retained_indices]
    b_o = bn.beta[retained_indices]
    mu_o = bn.mu[retained_indices]
    sg_o = bn.sigma[retained_indices]

    with np.errstate(divide="ignore", invalid="ignore"):
        s = np.where(norms > 0, fn_norm / norms, np.nan)
        scale_list = s * (g_n / g_o) * (sg_o / sg_n)
        bias = (g_n / sg_n) * (s * (-sg_o * b_o / g_o + mu_o) - mu_n) + b_n
        bias_list = np.abs(bias) / scale_list
        cos_list = 1.0 - np.clip((cand64 @ f) / (norms * fn_norm), -1.0, 1.0)
    usable = (
        (norms > 0)
        & np.isfinite(scale_list)
        & (scale_list > 0.0)
        & np.isfinite(bias_list)
    )
    if not np.any(usable):
        raise DegenerateInputError(f"channel {n}: no retained candidate can compensate")

    vals = bias_list[usable]
    lo, hi = vals.min(), vals.max()
    norm_bias = np.zeros(cand64.shape[0])
    if hi > lo:
        norm_bias[usable] = (bias_list[usable] - lo) / (hi - lo)
    dist = np.where(usable, bn.lam * cos_list + (1.0 - bn.lam) * norm_bias, np.inf)
    idx = int(np.argmin(dist))
    sim = 1.0 - float(cos_list[idx])
    return SimilarityResult(index=idx, sim=sim, scale=float(scale_list[idx]))


def build_scaling_matrix(
    view: np.ndarray,
    retained_indices: np.ndarray,
    t: float,
    bn: Optional[BnContext] = None,
):
    """Scaling matrix (P, N) for a full neuron view and a retained index set.

    Retained neurons get an exact 1 in their own column. Each pruned neuron
    is compensated through its best donor when the cosine similarity reaches
    ``t``; zero-norm pruned neurons and neurons with no usable donor stay
    uncompensated (all-zero column). Returns the matrix and warning records.
    """
    view = np.asarray(view, dtype=np.float32)
    retained_indices = np.sort(np.asarray(retained_indices, dtype=np.int64))
    n_neurons = view.shape[0]
    p = retained_indices.shape[0]
    if p == 0 or np.any(retained_indices < 0) or np.any(retained_indices >= n_neurons):
        raise ValueError(f"retained indices out of range for {n_neurons} neurons")
    retained_view = view[retained_indices]
    z = np.zeros((p, n_neurons), dtype=np.float32)
    warnings = []
    retained_set = set(int(i) for i in retained_indices)
    for row, col in enumerate(retained_indices):
        z[row, col] = 1.0
    norms = _norms(view)
    cand64 = retained_view.astype(np.float64)
    cand_norms = norms[retained_indices]
    for nrn in range(n_neurons):
        if nrn in retained_set:
            continue
        if norms[nrn] == 0.0:
            # Nothing to reconstruct; an uncompensated zero neuron is exact.
            continue
        w64 = view[nrn].astype(np.float64)
        try:
            if bn is None:
                res = _most_similar_impl(w64, norms[nrn], cand64, cand_norms)
            else:
                res = _most_similar_bn_impl(
                    w64, norms[nrn], cand64, cand_norms, bn, nrn, retained_indices
                )
        except DegenerateInputError as err:
            warnings.append(f"neuron {nrn} left uncompensated: {err}")
            continue
        if res.sim >= t:
            z[res.index, nrn] = np.float32(res.scale)
    check_scaling_matrix(z, retained_indices)
    return z, tuple(warnings)


def decompose_fc(
    layer: FullyConnected,
    retained_indices: np.ndarray,
    t: float,
    bn: Optional[BnContext] = None,
) -> Decomposition:
    """Decompose a dense layer; similarity runs on bias-augmented columns."""
    view = neuron_view(layer)
    z, warnings = build_scaling_matrix(view, retained_indices, t, bn)
    retained_indices = np.sort(np.asarray(retained_indices, dtype=np.int64))
    weight = np.ascontiguousarray(layer.weight[:, retained_indices])
    bias = None if layer.bias is None else np.ascontiguousarray(layer.bias[retained_indices])
    return Decomposition(z, retained_indices, weight, bias, warnings)


def decompose_conv(
    layer: Conv2d,
    retained_indices: np.ndarray,
    t: float,
    bn: Optional[BnContext] = None,
) -> Decomposition:
    """Decompose a convolution; similarity runs on flattened filters."""
    view = neuron_view(layer)
    z, warnings = build_scaling_matrix(view, retained_indices, t, bn)
    retained_indices = np.sort(np.asarray(retained_indices, dtype=np.int64))
    weight = np.ascontiguousarray(layer.weight[retained_indices])
    return Decomposition(z, retained_indices, weight, None, warnings)
