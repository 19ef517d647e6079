"""Dense tensor primitives: mode products, tensor-wise convolution, similarity.

Tensors are plain numpy arrays of float32, rank 1 to 4, row-major. Every
reduction (dot products, norms, contractions) accumulates in float64 and the
result is rounded back to float32 storage, so results are reproducible and
independent of how the work could be split across threads.
"""

from __future__ import annotations

import numpy as np

from .errors import DegenerateInputError, ShapeError

MAX_RANK = 4


def as_tensor(data, rank=None) -> np.ndarray:
    """Coerce ``data`` to a float32 tensor of rank 1..4 (optionally a fixed rank)."""
    arr = np.asarray(data, dtype=np.float32)
    if arr.ndim < 1 or arr.ndim > MAX_RANK:
        raise ShapeError(f"tensor rank must be 1..{MAX_RANK}, got {arr.ndim}")
    if rank is not None and arr.ndim != rank:
        raise ShapeError(f"expected rank-{rank} tensor, got shape {arr.shape}")
    return arr


def unfold(x: np.ndarray, mode: int) -> np.ndarray:
    """Mode-n matricization: fibers along ``mode`` (1-based) become columns."""
    x = as_tensor(x)
    if not 1 <= mode <= x.ndim:
        raise ShapeError(f"mode {mode} out of range for rank-{x.ndim} tensor")
    return np.moveaxis(x, mode - 1, 0).reshape(x.shape[mode - 1], -1)


def fold(mat: np.ndarray, mode: int, shape) -> np.ndarray:
    """Inverse of :func:`unfold` for a target ``shape``."""
    shape = tuple(shape)
    moved = [shape[mode - 1]] + [s for i, s in enumerate(shape) if i != mode - 1]
    return np.moveaxis(mat.reshape(moved), 0, mode - 1)


def n_mode_product(x: np.ndarray, u: np.ndarray, mode: int) -> np.ndarray:
    """Contract ``x`` along ``mode`` (1-based) with the rows of matrix ``u``.

    ``u`` has shape (J, I_n) where I_n is the size of ``x`` along ``mode``;
    the result has that mode resized to J. Computed as u @ unfold(x, mode)
    folded back, with float64 accumulation.
    """
    x = as_tensor(x)
    u = np.asarray(u, dtype=np.float32)
    if u.ndim != 2:
        raise ShapeError(f"mode product needs a matrix, got shape {u.shape}")
    if not 1 <= mode <= x.ndim:
        raise ShapeError(f"mode {mode} out of range for rank-{x.ndim} tensor")
    if u.shape[1] != x.shape[mode - 1]:
        raise ShapeError(
            f"matrix columns {u.shape} do not match tensor mode-{mode} size {x.shape}"
        )
    prod = u.astype(np.float64) @ unfold(x, mode).astype(np.float64)
    out_shape = list(x.shape)
    out_shape[mode - 1] = u.shape[0]
    return fold(prod.astype(np.float32), mode, out_shape)


def conv_output_size(size: int, kernel: int, stride: int, padding: int) -> int:
    return (size + 2 * padding - kernel) // stride + 1


def tensor_conv(w: np.ndarray, x: np.ndarray, stride: int = 1, padding: int = 0) -> np.ndarray:
    """Convolve a stack of filters ``w`` (N, C, K, K) with a feature map ``x`` (C, H, W).

    Zero padding, floor output sizing. Each output channel is the 3D
    correlation of one filter with the (padded) input, summed over
    (channel, kernel-row, kernel-col) in that fixed order.
    """
    w = as_tensor(w, rank=4)
    x = as_tensor(x, rank=3)
    n, c, kh, kw = w.shape
    if kh != kw:
        raise ShapeError(f"kernel must be square, got {kh}x{kw}")
    if stride < 1:
        raise ShapeError(f"stride must be positive, got {stride}")
    if padding < 0:
        raise ShapeError(f"padding must be non-negative, got {padding}")
    if x.shape[0] != c:
        raise ShapeError(
            f"input has {x.shape[0]} channels but filters expect {c}"
        )
    h, wid = x.shape[1], x.shape[2]
    if h + 2 * padding < kh or wid + 2 * padding < kw:
        raise ShapeError(
            f"kernel {kh}x{kw} larger than padded input {h + 2 * padding}x{wid + 2 * padding}"
        )
    if padding:
        x = np.pad(x, ((0, 0), (padding, padding), (padding, padding)))
    out_h = (x.shape[1] - kh) // stride + 1
    out_w = (x.shape[2] - kw) // stride + 1
    # im2col: windows laid out (C, K, K) per output position, matching the
    # elementwise summation order channel -> kernel row -> kernel col.
    windows = np.lib.stride_tricks.sliding_window_view(x, (kh, kw), axis=(1, 2))
    windows = windows[:, ::stride, ::stride]  # (C, out_h, out_w, K, K)
    cols = windows.transpose(0, 3, 4, 1, 2).reshape(c * kh * kw, out_h * out_w)
    prod = w.reshape(n, c * kh * kw).astype(np.float64) @ cols.astype(np.float64)
    return prod.astype(np.float32).reshape(n, out_h, out_w)


def relu(x: np.ndarray) -> np.ndarray:
    """Elementwise max(x, 0), preserving shape and dtype."""
    return np.maximum(as_tensor(x), np.float32(0.0))


def l2_norm(a: np.ndarray) -> float:
    """Euclidean norm with float64 accumulation."""
    a = np.asarray(a, dtype=np.float64).ravel()
    return float(np.sqrt(np.dot(a, a)))


def cosine_similarity(a: np.ndarray, b: np.ndarray) -> float:
    """cos(a, b) in [-1, 1], float64 accumulation, clamped against rounding."""
    a = np.asarray(a, dtype=np.float64).ravel()
    b = np.asarray(b, dtype=np.float64).ravel()
    if a.shape != b.shape:
        raise ShapeError(f"vector lengths differ: {a.shape[0]} vs {b.shape[0]}")
    na = np.sqrt(np.dot(a, a))
    nb = np.sqrt(np.dot(b, b))
    if na == 0.0 or nb == 0.0:
        raise DegenerateInputError("cosine similarity undefined for zero-norm vector")
    return float(np.clip(np.dot(a, b) / (na * nb), -1.0, 1.0))
