"""Donor search and weight decomposition tests."""

import numpy as np
import pytest

from neuromerge.decompose import (
    BnContext,
    build_scaling_matrix,
    check_scaling_matrix,
    decompose_conv,
    decompose_fc,
    most_similar,
    most_similar_bn,
)
from neuromerge.errors import DegenerateInputError
from neuromerge.model import Conv2d, FullyConnected
from neuromerge.verify import bn_affine_terms


def identity_bn(channels, lam=0.85):
    return BnContext(
        gamma=np.ones(channels), beta=np.zeros(channels), mu=np.zeros(channels),
        sigma=np.ones(channels), lam=lam,
    )


class TestMostSimilar:
    def test_parallel_donor_wins(self):
        res = most_similar(np.array([2.0, 4.0]), np.array([[1.0, 2.0], [0.0, 1.0]]))
        assert res.index == 0
        assert res.sim == pytest.approx(1.0)
        assert res.scale == pytest.approx(2.0)

    def test_single_orthogonal_candidate(self):
        res = most_similar(np.array([0.0, 1.0]), np.array([[1.0, 0.0]]))
        assert res.index == 0
        assert res.sim == pytest.approx(0.0)
        assert res.scale == pytest.approx(1.0)

    def test_norm_ratio_scale(self):
        res = most_similar(np.array([3.0, 4.0]), np.array([[6.0, 8.0]]))
        assert res.sim == pytest.approx(1.0)
        assert res.scale == pytest.approx(0.5)

    def test_zero_norm_candidates_excluded(self):
        res = most_similar(np.array([1.0, 0.0]), np.array([[0.0, 0.0], [2.0, 0.0]]))
        assert res.index == 1

    def test_all_zero_candidates_degenerate(self):
        with pytest.raises(DegenerateInputError):
            most_similar(np.array([1.0, 0.0]), np.zeros((3, 2)))

    def test_zero_norm_query_degenerate(self):
        with pytest.raises(DegenerateInputError):
            most_similar(np.zeros(2), np.ones((1, 2)))

    def test_argmax_invariant_to_positive_rescaling(self):
        rng = np.random.default_rng(0)
        for _ in range(20):
            retained = rng.standard_normal((6, 5)).astype(np.float32)
            w = rng.standard_normal(5)
            c = float(rng.uniform(0.1, 10.0))
            a = most_similar(w, retained)
            b = most_similar(c * w, retained)
            assert a.index == b.index
            assert b.scale == pytest.approx(c * a.scale, rel=1e-9)

    def test_tie_breaks_to_lower_index(self):
        retained = np.array([[1.0, 0.0], [2.0, 0.0]])
        res = most_similar(np.array([3.0, 0.0]), retained)
        assert res.index == 0


class TestMostSimilarBn:
    def test_identity_bn_reduces_to_plain_search(self):
        rng = np.random.default_rng(1)
        for _ in range(20):
            retained = rng.standard_normal((5, 7)).astype(np.float32)
            w = rng.standard_normal(7)
            plain = most_similar(w, retained)
            bn = most_similar_bn(w, retained, identity_bn(10), 7, np.arange(5))
            assert bn.index == plain.index
            assert bn.sim == pytest.approx(plain.sim)
            assert bn.scale == pytest.approx(plain.scale)

    def test_affine_coefficients_direct_substitution(self):
        # s=2 with donor gamma 1, sigma 2 and pruned gamma 3, sigma 1.
        scale, bias = bn_affine_terms(2.0, 1.0, 0.0, 0.0, 2.0, 3.0, 0.0, 0.0, 1.0)
        assert scale == pytest.approx(12.0)
        assert bias == pytest.approx(0.0)

        donor = np.array([[1.0, 0.0]], dtype=np.float32)
        pruned = np.array([2.0, 0.0])
        ctx = BnContext(
            gamma=np.array([1.0, 3.0]), beta=np.zeros(2), mu=np.zeros(2),
            sigma=np.array([2.0, 1.0]), lam=0.85,
        )
        res = most_similar_bn(pruned, donor, ctx, 1, np.array([0]))
        assert res.scale == pytest.approx(12.0)
        assert res.sim == pytest.approx(1.0)

    def test_lambda_one_selects_by_cosine_only(self):
        rng = np.random.default_rng(2)
        for _ in range(20):
            retained = rng.standard_normal((6, 5)).astype(np.float32)
            w = rng.standard_normal(5)
            ctx = BnContext(
                gamma=rng.uniform(0.2, 2.0, 7), beta=rng.uniform(-1, 1, 7),
                mu=rng.uniform(-1, 1, 7), sigma=rng.uniform(0.2, 2.0, 7), lam=1.0,
            )
            res = most_similar_bn(w, retained, ctx, 6, np.arange(6))
            plain = most_similar(w, retained)
            assert res.index == plain.index

    def test_negative_gamma_ratio_candidates_skipped(self):
        donor_bad = np.array([2.0, 0.0], dtype=np.float32)
        donor_ok = np.array([1.0, 1.0], dtype=np.float32)
        retained = np.stack([donor_bad, donor_ok])
        ctx = BnContext(
            gamma=np.array([-1.0, 1.0, 1.0]), beta=np.zeros(3), mu=np.zeros(3),
            sigma=np.ones(3), lam=0.85,
        )
        # Candidate 0 has a sign-flipped gamma ratio (scale < 0) and must be skipped
        # even though its cosine similarity to the query is perfect.
        res = most_similar_bn(np.array([4.0, 0.0]), retained, ctx, 2, np.array([0, 1]))
        assert res.index == 1

    def test_all_candidates_skipped_degenerate(self):
        retained = np.array([[1.0, 0.0]], dtype=np.float32)
        ctx = BnContext(
            gamma=np.array([-1.0, 1.0]), beta=np.zeros(2), mu=np.zeros(2),
            sigma=np.ones(2), lam=0.85,
        )
        with pytest.raises(DegenerateInputError):
            most_similar_bn(np.array([1.0, 1.0]), retained, ctx, 1, np.array([0]))


class TestBuildScalingMatrix:
    def test_parallel_column_merged(self):
        layer = FullyConnected("fc", np.array([[1.0, 2.0], [2.0, 4.0]], dtype=np.float32))
        d = decompose_fc(layer, np.array([1]), t=-1.0)
        np.testing.assert_allclose(d.scaling, [[0.5, 1.0]], rtol=1e-6)
        np.testing.assert_array_equal(d.weight, [[2.0], [4.0]])

    def test_unreachable_threshold_is_pure_pruning(self):
        layer = FullyConnected("fc", np.array([[1.0, 2.0], [2.0, 4.0]], dtype=np.float32))
        d = decompose_fc(layer, np.array([1]), t=1.5)
        np.testing.assert_array_equal(d.scaling, [[0.0, 1.0]])
        assert d.compensated_columns == 0

    def test_retain_all_gives_identity(self):
        rng = np.random.default_rng(3)
        layer = FullyConnected("fc", rng.standard_normal((4, 6)).astype(np.float32))
        d = decompose_fc(layer, np.arange(6), t=-1.0)
        np.testing.assert_array_equal(d.scaling, np.eye(6, dtype=np.float32))

    def test_structure_always_holds(self):
        rng = np.random.default_rng(4)
        for _ in range(30):
            n = int(rng.integers(2, 12))
            view = rng.standard_normal((n, 5)).astype(np.float32)
            keep = int(rng.integers(1, n + 1))
            retained = np.sort(rng.choice(n, size=keep, replace=False))
            t = float(rng.uniform(-1, 1.2))
            z, _ = build_scaling_matrix(view, retained, t)
            check_scaling_matrix(z, retained)  # raises on violation

    def test_monotonicity_in_threshold(self):
        rng = np.random.default_rng(5)
        view = rng.standard_normal((10, 6)).astype(np.float32)
        retained = np.array([0, 2, 5, 7])
        compensated = []
        for t in (-1.0, 0.0, 0.5, 0.9, 1.5):
            z, _ = build_scaling_matrix(view, retained, t)
            cols = {int(c) for c in range(10) if c not in {0, 2, 5, 7} and z[:, c].max() > 0}
            compensated.append(cols)
        for earlier, later in zip(compensated, compensated[1:]):
            assert later <= earlier

    def test_exact_redundancy_recovery(self):
        rng = np.random.default_rng(6)
        for _ in range(20):
            donor = rng.standard_normal(8).astype(np.float32)
            c = float(rng.uniform(0.1, 3.0))
            view = np.stack([donor, (c * donor).astype(np.float32), rng.standard_normal(8).astype(np.float32)])
            z, _ = build_scaling_matrix(view, np.array([0, 2]), t=-1.0)
            assert z[0, 1] == pytest.approx(c, abs=1e-6)

    def test_zero_norm_pruned_neuron_left_uncompensated(self):
        view = np.array([[1.0, 0.0], [0.0, 0.0], [0.0, 2.0]], dtype=np.float32)
        z, warnings = build_scaling_matrix(view, np.array([0, 2]), t=-1.0)
        assert not z[:, 1].any()
        assert warnings == ()

    def test_degenerate_search_leaves_column_zero_with_warning(self):
        view = np.array([[0.0, 0.0], [1.0, 1.0]], dtype=np.float32)
        z, warnings = build_scaling_matrix(view, np.array([0]), t=-1.0)
        assert not z[:, 1].any()
        assert len(warnings) == 1 and "uncompensated" in warnings[0]

    def test_fc_bias_participates_in_similarity(self):
        # Columns identical except for bias: with bias appended the donor is
        # no longer a perfect cosine match.
        w = np.array([[1.0, 1.0]], dtype=np.float32)
        b = np.array([0.0, 5.0], dtype=np.float32)
        d = decompose_fc(FullyConnected("fc", w, b), np.array([0]), t=0.999)
        assert d.compensated_columns == 0
        d2 = decompose_fc(FullyConnected("fc", w), np.array([0]), t=0.999)
        assert d2.compensated_columns == 1

    def test_conv_decomposition_slices_filters(self):
        rng = np.random.default_rng(7)
        w = rng.standard_normal((4, 2, 3, 3)).astype(np.float32)
        d = decompose_conv(Conv2d("conv", w, padding=1), np.array([1, 3]), t=-1.0)
        np.testing.assert_array_equal(d.weight, w[[1, 3]])
        assert d.scaling.shape == (2, 4)

    def test_batched_build_matches_per_neuron_search(self):
        # The matrix builder takes a cached fast path; it must agree with the
        # public per-neuron search op exactly, plain and normalization-aware.
        rng = np.random.default_rng(8)
        for trial in range(15):
            n = int(rng.integers(3, 14))
            view = rng.standard_normal((n, 6)).astype(np.float32)
            keep = int(rng.integers(1, n))
            retained = np.sort(rng.choice(n, size=keep, replace=False))
            bn = None
            if trial % 2:
                bn = BnContext(
                    gamma=rng.uniform(0.2, 2.0, n), beta=rng.uniform(-0.5, 0.5, n),
                    mu=rng.uniform(-0.5, 0.5, n), sigma=rng.uniform(0.2, 2.0, n), lam=0.85,
                )
            z, _ = build_scaling_matrix(view, retained, t=-1.0, bn=bn)
            retained_set = set(int(i) for i in retained)
            for nrn in range(n):
                if nrn in retained_set:
                    continue
                if bn is None:
                    res = most_similar(view[nrn], view[retained])
                else:
                    res = most_similar_bn(view[nrn], view[retained], bn, nrn, retained)
                assert z[res.index, nrn] == np.float32(res.scale)

    def test_bn_aware_scale_used_in_matrix(self):
        w = np.zeros((2, 1, 1, 1), dtype=np.float32)
        w[0, 0, 0, 0] = 1.0
        w[1, 0, 0, 0] = 2.0
        ctx = BnContext(
            gamma=np.array([1.0, 3.0]), beta=np.zeros(2), mu=np.zeros(2),
            sigma=np.array([2.0, 1.0]), lam=0.85,
        )
        d = decompose_conv(Conv2d("conv", w), np.array([0]), t=-1.0, bn=ctx)
        # s = 2, gamma ratio 3, sigma ratio 2 -> scale 12
        assert d.scaling[0, 1] == pytest.approx(12.0, rel=1e-6)
