"""Self-verification suite: the algebraic identities the whole method rests on.

Each check draws random instances from a seeded generator and exercises one
identity: ReLU commuting with a structured scaling matrix (matrix and
tensor form, plus the converse via an explicit counterexample), the two
convolution/mode-product exchange identities, and the affine relation
between normalized responses of proportional channels. Naive loop
implementations of the tensor operators live here as independent oracles.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .tensor import n_mode_product, relu, tensor_conv


@dataclass
class CheckResult:
    name: str
    passed: bool
    trials: int
    detail: str = ""

    def to_dict(self) -> dict:
        return {"name": self.name, "passed": self.passed, "trials": self.trials, "detail": self.detail}


def naive_n_mode_product(x: np.ndarray, u: np.ndarray, mode: int) -> np.ndarray:
    """Triple-loop reference for the mode product; float64 accumulation."""
    x = np.asarray(x, dtype=np.float32)
    u = np.asarray(u, dtype=np.float32)
    out_shape = list(x.shape)
    out_shape[mode - 1] = u.shape[0]
    out = np.zeros(out_shape, dtype=np.float64)
    for j in range(u.shape[0]):
        for i in range(x.shape[mode - 1]):
            src = np.take(x, i, axis=mode - 1).astype(np.float64)
            dst = [slice(None)] * x.ndim
            dst[mode - 1] = j
            out[tuple(dst)] += float(u[j, i]) * src
    return out.astype(np.float32)


def naive_tensor_conv(w: np.ndarray, x: np.ndarray, stride: int = 1, padding: int = 0) -> np.ndarray:
    """Six-nested-loop reference for the tensor-wise convolution."""
    w = np.asarray(w, dtype=np.float32)
    x = np.asarray(x, dtype=np.float32)
    n, c, k, _ = w.shape
    if padding:
        x = np.pad(x, ((0, 0), (padding, padding), (padding, padding)))
    out_h = (x.shape[1] - k) // stride + 1
    out_w = (x.shape[2] - k) // stride + 1
    out = np.zeros((n, out_h, out_w), dtype=np.float32)
    for a in range(n):
        for b in range(out_h):
            for g in range(out_w):
                acc = 0.0
                for cc in range(c):
                    for hh in range(k):
                        for ww in range(k):
                            acc += float(w[a, cc, hh, ww]) * float(
                                x[cc, hh + b * stride, ww + g * stride]
                            )
                out[a, b, g] = np.float32(acc)
    return out


def random_valid_scaling(rng: np.random.Generator, p: int, n: int) -> np.ndarray:
    """Random (p, n) matrix with non-negative entries, <= 1 positive per column."""
    z = np.zeros((p, n), dtype=np.float32)
    for col in range(n):
        if rng.random() < 0.2:
            continue  # all-zero column (a dropped neuron)
        z[rng.integers(0, p), col] = rng.uniform(0.1, 2.0)
    return z


def random_violating_scaling(rng: np.random.Generator, p: int, n: int) -> np.ndarray:
    """As above but with at least one column holding >= 2 positive entries."""
    z = random_valid_scaling(rng, p, n)
    col = int(rng.integers(0, n))
    k = int(rng.integers(2, p + 1))
    rows = rng.choice(p, size=k, replace=False)
    z[:, col] = 0.0
    z[rows, col] = rng.uniform(0.1, 2.0, size=k).astype(np.float32)
    return z


def violation_witness(z: np.ndarray, col: int) -> np.ndarray:
    """Vector on which a structure-violating column provably breaks commutation.

    With the column's positive entries ordered by decreasing value, the
    witness is -1 at all but the smallest and +1/2 at the smallest: the
    pre-activation sum goes negative while the commuted side keeps half the
    smallest entry.
    """
    rows = np.flatnonzero(z[:, col] > 0)
    if rows.size < 2:
        raise ValueError(f"column {col} has fewer than two positive entries")
    order = rows[np.argsort(-z[rows, col], kind="stable")]
    v = np.zeros(z.shape[0], dtype=np.float32)
    v[order[:-1]] = -1.0
    v[order[-1]] = 0.5
    return v


def first_violating_column(z: np.ndarray) -> int:
    counts = (z > 0).sum(axis=0)
    cols = np.flatnonzero(counts >= 2)
    if cols.size == 0:
        raise ValueError("matrix satisfies the column condition")
    return int(cols[0])


def _rel_err(a: np.ndarray, b: np.ndarray) -> float:
    denom = max(float(np.max(np.abs(b))), 1e-12)
    return float(np.max(np.abs(a.astype(np.float64) - b.astype(np.float64)))) / denom


def check_relu_commutation(seed: int = 0, trials: int = 1000, max_dim: int = 32) -> CheckResult:
    """Structured scaling commutes with ReLU exactly, in matrix and mode-1 form."""
    rng = np.random.default_rng(seed)
    for trial in range(trials):
        p = int(rng.integers(1, max_dim + 1))
        n = int(rng.integers(1, max_dim + 1))
        z = random_valid_scaling(rng, p, n)
        v = rng.standard_normal(p).astype(np.float32)
        lhs = relu(n_mode_product(v, z.T, 1))
        rhs = n_mode_product(relu(v), z.T, 1)
        if not np.array_equal(lhs, rhs):
            return CheckResult("relu_commutation", False, trial + 1, f"matrix case differs at trial {trial}")
        feat = rng.standard_normal((p, 3, 2)).astype(np.float32)
        lhs_t = relu(n_mode_product(feat, z.T, 1))
        rhs_t = n_mode_product(relu(feat), z.T, 1)
        if not np.array_equal(lhs_t, rhs_t):
            return CheckResult("relu_commutation", False, trial + 1, f"tensor case differs at trial {trial}")
    return CheckResult("relu_commutation", True, trials)


def check_relu_commutation_converse(seed: int = 0, trials: int = 100, max_dim: int = 32) -> CheckResult:
    """Any column with two positive entries admits a witness breaking commutation."""
    rng = np.random.default_rng(seed + 1)
    for trial in range(trials):
        p = int(rng.integers(2, max_dim + 1))
        n = int(rng.integers(1, max_dim + 1))
        z = random_violating_scaling(rng, p, n)
        col = first_violating_column(z)
        v = violation_witness(z, col)
        lhs = relu(z.T @ v)
        rhs = z.T @ relu(v)
        if np.array_equal(lhs, rhs):
            return CheckResult(
                "relu_commutation_converse", False, trial + 1, f"witness failed at trial {trial}"
            )
    return CheckResult("relu_commutation_converse", True, trials)


def check_conv_identities(seed: int = 0, trials: int = 200, max_dim: int = 8) -> CheckResult:
    """Scaling slides through the convolution on either side of the operator.

    Identity 1: scaling filters first equals scaling the output map.
    Identity 2: scaling the next layer's input channels equals scaling the
    feature map it consumes. Both sides are also cross-checked against the
    naive loop oracles at 1e-5 relative.
    """
    rng = np.random.default_rng(seed + 2)
    tol = 1e-5
    for trial in range(trials):
        p = int(rng.integers(1, max_dim + 1))
        n = int(rng.integers(1, max_dim + 1))
        c = int(rng.integers(1, max_dim + 1))
        k = int(rng.integers(1, 4))
        h = int(rng.integers(k, max_dim + 1))
        w = int(rng.integers(k, max_dim + 1))
        z = rng.standard_normal((p, n)).astype(np.float32)

        y = rng.standard_normal((p, c, k, k)).astype(np.float32)
        x = rng.standard_normal((c, h, w)).astype(np.float32)
        lhs = tensor_conv(n_mode_product(y, z.T, 1), x)
        rhs = n_mode_product(tensor_conv(y, x), z.T, 1)
        if _rel_err(lhs, rhs) > tol:
            return CheckResult("conv_identities", False, trial + 1, f"filter-side identity off at trial {trial}")
        if _rel_err(lhs, naive_tensor_conv(naive_n_mode_product(y, z.T, 1), x)) > tol:
            return CheckResult("conv_identities", False, trial + 1, f"oracle mismatch (lhs) at trial {trial}")
        if _rel_err(rhs, naive_n_mode_product(naive_tensor_conv(y, x), z.T, 1)) > tol:
            return CheckResult("conv_identities", False, trial + 1, f"oracle mismatch (rhs) at trial {trial}")

        m = int(rng.integers(1, max_dim + 1))
        w_next = rng.standard_normal((m, n, k, k)).astype(np.float32)
        feat = rng.standard_normal((p, h, w)).astype(np.float32)
        lhs2 = tensor_conv(w_next, n_mode_product(feat, z.T, 1))
        rhs2 = tensor_conv(n_mode_product(w_next, z, 2), feat)
        if _rel_err(lhs2, rhs2) > tol:
            return CheckResult("conv_identities", False, trial + 1, f"channel-side identity off at trial {trial}")
        if _rel_err(lhs2, naive_tensor_conv(w_next, naive_n_mode_product(feat, z.T, 1))) > tol:
            return CheckResult("conv_identities", False, trial + 1, f"oracle mismatch (lhs2) at trial {trial}")
        if _rel_err(rhs2, naive_tensor_conv(naive_n_mode_product(w_next, z, 2), feat)) > tol:
            return CheckResult("conv_identities", False, trial + 1, f"oracle mismatch (rhs2) at trial {trial}")
    return CheckResult("conv_identities", True, trials)


def bn_affine_terms(s: float, g1: float, b1: float, mu1: float, sg1: float,
                    g2: float, b2: float, mu2: float, sg2: float):
    """Affine coefficients relating normalized responses of channels with x2 = s * x1."""
    scale = s * (g2 / g1) * (sg1 / sg2)
    bias = (g2 / sg2) * (s * (-sg1 * b1 / g1 + mu1) - mu2) + b2
    return scale, bias


def check_bn_affine(seed: int = 0, trials: int = 500) -> CheckResult:
    """Normalized responses of proportional channels differ by an affine map."""
    rng = np.random.default_rng(seed + 3)
    for trial in range(trials):
        s = float(rng.uniform(0.1, 3.0))
        g1, g2 = rng.uniform(0.1, 2.0, size=2)
        sg1, sg2 = rng.uniform(0.1, 2.0, size=2)
        b1, b2 = rng.uniform(-1.0, 1.0, size=2)
        mu1, mu2 = rng.uniform(-1.0, 1.0, size=2)
        x1 = rng.standard_normal(16)
        x2 = s * x1
        lhs = g2 * (x2 - mu2) / sg2 + b2
        scale, bias = bn_affine_terms(s, g1, b1, mu1, sg1, g2, b2, mu2, sg2)
        rhs = scale * (g1 * (x1 - mu1) / sg1 + b1) + bias
        if not np.allclose(lhs, rhs, rtol=1e-5, atol=1e-8):
            return CheckResult("bn_affine", False, trial + 1, f"affine relation off at trial {trial}")
    return CheckResult("bn_affine", True, trials)


def run_all(seed: int = 0) -> list:
    return [
        check_relu_commutation(seed),
        check_relu_commutation_converse(seed),
        check_conv_identities(seed),
        check_bn_affine(seed),
    ]
