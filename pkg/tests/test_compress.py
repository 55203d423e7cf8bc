"""Attention kernels, multiply accounting, and clustered low-rank factors.

Oracles: the quadratic kernel-attention evaluation (for the linear path),
closed-form multiply counts, numpy's global SVD (for the clustered bound),
and hand-recomputed storage arithmetic.
"""

import numpy as np
import pytest

from tinyshot.compress import (
    AttentionWeights,
    FusedAttentionWeights,
    OpCounter,
    attention_benchmark,
    attention_param_counts,
    compression_ratio,
    decompose,
    elu1,
    fused_attention,
    fused_scores,
    kernel_attention_naive,
    kernel_attention_weights,
    kmeans_rows,
    linear_attention,
    load_clr,
    pack_clr,
    reconstruct,
    reconstruction_error,
    save_clr,
    separate_attention,
    softmax_attention,
    stored_bytes,
    stored_value_count,
    unpack_clr,
)
from tinyshot.errors import EmptyCluster, FormatError, ShapeMismatch


# -- feature map ------------------------------------------------------------

def test_elu1_reference_values():
    x = np.array([-2.0, -0.5, 0.0, 0.5, 3.0])
    out = elu1(x)
    assert out[2] == pytest.approx(1.0)          # phi(0) = 1
    assert out[3] == pytest.approx(1.5)          # x + 1 above zero
    assert out[0] == pytest.approx(np.exp(-2.0)) # e^x below zero
    assert np.all(out > 0.0)
    # continuous across zero
    eps = 1e-9
    assert abs(elu1(np.array([eps]))[0] - elu1(np.array([-eps]))[0]) < 1e-8


def test_elu1_handles_extreme_negatives():
    assert elu1(np.array([-1e6]))[0] == pytest.approx(0.0)
    assert np.isfinite(elu1(np.array([-1e300, 1e300]))).all()


# -- linear vs naive kernel attention ---------------------------------------

def test_linear_matches_naive_seeded_sweep():
    rng = np.random.default_rng(90)
    for _ in range(60):
        n = int(rng.integers(1, 33))
        d = int(rng.integers(1, 17))
        q, k, v = (rng.standard_normal((n, d)) for _ in range(3))
        ref = kernel_attention_naive(q, k, v)
        fast = linear_attention(q, k, v)
        assert np.max(np.abs(ref - fast)) < 1e-8


def test_attention_outputs_are_convex_combinations():
    rng = np.random.default_rng(91)
    q, k, v = (rng.standard_normal((12, 6)) for _ in range(3))
    w = kernel_attention_weights(q, k)
    assert np.all(w >= 0.0)
    assert np.max(np.abs(w.sum(axis=1) - 1.0)) < 1e-8
    out = linear_attention(q, k, v)
    # convexity pins every output coordinate inside the value column range
    assert np.all(out <= v.max(axis=0) + 1e-9)
    assert np.all(out >= v.min(axis=0) - 1e-9)
    assert np.allclose(out, w @ v, atol=1e-10)


def test_single_row_attention_returns_the_value():
    rng = np.random.default_rng(92)
    q, k, v = (rng.standard_normal((1, 5)) for _ in range(3))
    assert np.allclose(linear_attention(q, k, v), v, atol=1e-12)
    assert np.allclose(kernel_attention_naive(q, k, v), v, atol=1e-12)


def test_attention_shape_validation():
    with pytest.raises(ShapeMismatch):
        linear_attention(np.ones((3, 4)), np.ones((3, 5)), np.ones((3, 4)))
    with pytest.raises(ShapeMismatch):
        kernel_attention_naive(np.ones(4), np.ones(4), np.ones(4))


def test_multiply_counts_match_closed_forms():
    rng = np.random.default_rng(93)
    for n, d in ((8, 4), (16, 8), (32, 8), (21, 5)):
        q, k, v = (rng.standard_normal((n, d)) for _ in range(3))
        cn, cl = OpCounter(), OpCounter()
        kernel_attention_naive(q, k, v, cn)
        linear_attention(q, k, v, cl)
        assert cn.multiplies == 2 * n * n * d
        assert cl.multiplies == 2 * n * d * d + n * d


def test_linear_count_scales_linearly_in_n():
    rows = attention_benchmark((16, 32), d=8, seed=1)
    ratio = rows[1]["linear_multiplies"] / rows[0]["linear_multiplies"]
    assert ratio == pytest.approx(2.0)
    naive_ratio = rows[1]["naive_multiplies"] / rows[0]["naive_multiplies"]
    assert naive_ratio == pytest.approx(4.0)
    for row in rows:
        assert row["max_abs_diff"] < 1e-8


def test_softmax_attention_reference():
    rng = np.random.default_rng(94)
    q, k, v = (rng.standard_normal((5, 3)) for _ in range(3))
    s = q @ k.T / np.sqrt(3)
    p = np.exp(s - s.max(axis=1, keepdims=True))
    p /= p.sum(axis=1, keepdims=True)
    assert np.allclose(softmax_attention(q, k, v), p @ v, atol=1e-12)


# -- fused-projection attention ---------------------------------------------

def test_param_accounting_saves_exactly_one_quarter():
    for d in (16, 32, 64):
        counts = attention_param_counts(d)
        assert counts["separate_params"] == 4 * d * d
        assert counts["fused_params"] == 3 * d * d
        assert counts["saving_fraction"] == 0.25


def test_fused_scores_symmetric():
    rng = np.random.default_rng(95)
    for d in (4, 8, 16):
        w = FusedAttentionWeights(*(rng.standard_normal((d, d)) for _ in range(3)))
        s = fused_scores(rng.standard_normal((10, d)), w)
        assert np.max(np.abs(s - s.T)) < 1e-10


def test_fused_equals_separate_when_projections_tie():
    rng = np.random.default_rng(96)
    d = 6
    shared, wv, wo = (rng.standard_normal((d, d)) for _ in range(3))
    x = rng.standard_normal((9, d))
    fused = fused_attention(x, FusedAttentionWeights(shared, wv, wo))
    sep = separate_attention(x, AttentionWeights(shared, shared, wv, wo))
    assert np.allclose(fused, sep, atol=1e-12)


def test_fused_attention_permutation_equivariant():
    rng = np.random.default_rng(97)
    d = 8
    w = FusedAttentionWeights(*(rng.standard_normal((d, d)) for _ in range(3)))
    x = rng.standard_normal((11, d))
    perm = rng.permutation(11)
    assert np.allclose(fused_attention(x[perm], w), fused_attention(x, w)[perm],
                       atol=1e-10)


def test_attention_projection_multiply_counts():
    rng = np.random.default_rng(98)
    n, d = 10, 6
    x = rng.standard_normal((n, d))
    ws = AttentionWeights(*(rng.standard_normal((d, d)) for _ in range(4)))
    wf = FusedAttentionWeights(ws.w_q, ws.w_v, ws.w_o)
    cs, cf = OpCounter(), OpCounter()
    separate_attention(x, ws, cs)
    fused_attention(x, wf, cf)
    assert cs.multiplies == 4 * n * d * d + 2 * n * n * d
    assert cf.multiplies == 3 * n * d * d + 2 * n * n * d


def test_attention_weight_shape_validation():
    with pytest.raises(ShapeMismatch):
        AttentionWeights(np.ones((4, 4)), np.ones((4, 4)), np.ones((4, 3)),
                         np.ones((4, 4)))
    with pytest.raises(ShapeMismatch):
        FusedAttentionWeights(np.ones((4, 4)), np.ones((3, 3)), np.ones((4, 4)))
    w = FusedAttentionWeights(np.ones((4, 4)), np.ones((4, 4)), np.ones((4, 4)))
    with pytest.raises(ShapeMismatch):
        fused_attention(np.ones((5, 3)), w)


# -- k-means ----------------------------------------------------------------

def test_kmeans_one_cluster_is_the_mean():
    rng = np.random.default_rng(100)
    rows = rng.standard_normal((20, 5))
    assignments, centroids = kmeans_rows(rows, 1)
    assert np.all(assignments == 0)
    assert np.allclose(centroids[0], rows.mean(axis=0))


def test_kmeans_separated_blobs_recovered():
    rng = np.random.default_rng(101)
    a = rng.standard_normal((15, 4)) * 0.1 + 10.0
    b = rng.standard_normal((15, 4)) * 0.1 - 10.0
    rows = np.vstack([a, b])
    assignments, _ = kmeans_rows(rows, 2, seed=3)
    assert len(set(assignments[:15])) == 1
    assert len(set(assignments[15:])) == 1
    assert assignments[0] != assignments[15]


def test_kmeans_deterministic_per_seed():
    rng = np.random.default_rng(102)
    rows = rng.standard_normal((30, 6))
    a1, c1 = kmeans_rows(rows, 4, seed=9)
    a2, c2 = kmeans_rows(rows, 4, seed=9)
    assert np.array_equal(a1, a2) and np.array_equal(c1, c2)


def test_kmeans_identical_points_exhaust_reseeds():
    rows = np.ones((6, 3))
    with pytest.raises(EmptyCluster):
        kmeans_rows(rows, 2, seed=0)


def test_kmeans_validation():
    rows = np.ones((4, 2))
    with pytest.raises(ValueError):
        kmeans_rows(rows, 0)
    with pytest.raises(ValueError):
        kmeans_rows(rows, 5)


# -- clustered low-rank ------------------------------------------------------

def test_exact_rank_input_reconstructs_exactly():
    rng = np.random.default_rng(103)
    e = rng.standard_normal((40, 4)) @ rng.standard_normal((4, 12))  # rank 4
    clr = decompose(e, n_clusters=3, rank=4)
    assert reconstruction_error(e, clr) < 1e-8


def test_error_non_increasing_in_rank_and_budget():
    rng = np.random.default_rng(104)
    e = rng.standard_normal((60, 16))
    errs = [reconstruction_error(e, decompose(e, 3, r, seed=5)) for r in range(8)]
    assert all(a >= b - 1e-12 for a, b in zip(errs, errs[1:]))
    assert errs[6] < errs[0]  # strictly better somewhere along the grid
    budgets = [reconstruction_error(e, decompose(e, 3, 2, residual_budget=rb, seed=5))
               for rb in (0, 8, 32, 128, 960)]
    assert all(a >= b - 1e-12 for a, b in zip(budgets, budgets[1:]))
    # patching every entry cancels the error completely
    assert budgets[-1] < 1e-9


def test_error_strictly_decreases_with_rank_on_generic_input():
    rng = np.random.default_rng(105)
    e = rng.standard_normal((48, 10))
    errs = [reconstruction_error(e, decompose(e, 2, r, seed=7)) for r in range(6)]
    assert all(a > b for a, b in zip(errs, errs[1:]))


def test_clustered_beats_global_svd_at_equal_rank():
    """Per-cluster mean-centered SVD can only improve on one global factor
    pair of the same rank (the global fit is one admissible per-cluster fit)."""
    rng = np.random.default_rng(106)
    e = rng.standard_normal((256, 64))
    clr = decompose(e, n_clusters=4, rank=8)
    u, s, vt = np.linalg.svd(e, full_matrices=False)
    global_err = float(np.linalg.norm(e - (u[:, :8] * s[:8]) @ vt[:8]))
    assert reconstruction_error(e, clr) <= global_err


def test_residual_patch_targets_largest_errors():
    rng = np.random.default_rng(107)
    e = rng.standard_normal((30, 8))
    base = decompose(e, 2, 1, residual_budget=0, seed=11)
    patched = decompose(e, 2, 1, residual_budget=10, seed=11)
    err = np.abs(e - reconstruct(base)).ravel()
    worst = set(np.argsort(-err, kind="stable")[:10].tolist())
    assert set(patched.residual_indices.tolist()) == worst
    assert np.all(np.diff(patched.residual_indices) > 0)  # stored sorted
    after = np.abs(e - reconstruct(patched)).ravel()
    assert np.allclose(after[patched.residual_indices], 0.0, atol=1e-12)


def test_rank_zero_keeps_centroids_only():
    rng = np.random.default_rng(108)
    e = rng.standard_normal((12, 5))
    clr = decompose(e, 3, 0)
    assert all(u.shape[1] == 0 for u in clr.factors_u)
    recon = reconstruct(clr)
    for c in range(3):
        members = clr.assignments == c
        assert np.allclose(recon[members], clr.centroids[c])


def test_storage_accounting_unit_exact():
    rng = np.random.default_rng(109)
    e = rng.standard_normal((40, 12))
    clr = decompose(e, 4, 3, residual_budget=17)
    by_hand = clr.centroids.size + sum(u.size + vt.size for u, vt
                                       in zip(clr.factors_u, clr.factors_vt)) + 17
    assert stored_value_count(clr) == by_hand
    assert stored_bytes(clr) == 4 * by_hand + 4 * 40 + 4 * 17
    assert compression_ratio(clr, "values") == pytest.approx((40 * 12) / by_hand)
    assert compression_ratio(clr, "bytes") == pytest.approx(
        (4 * 40 * 12) / (4 * by_hand + 4 * 40 + 4 * 17))
    with pytest.raises(ValueError):
        compression_ratio(clr, "bits")


def test_decompose_validation():
    e = np.ones((6, 4))
    with pytest.raises(ValueError):
        decompose(e, 0, 2)
    with pytest.raises(ValueError):
        decompose(e, 2, 5)
    with pytest.raises(ValueError):
        decompose(e, 2, 2, residual_budget=-1)
    with pytest.raises(ShapeMismatch):
        decompose(np.ones(6), 2, 2)


# -- TVC1 container ----------------------------------------------------------

def test_clr_pack_unpack_stable_and_functional():
    rng = np.random.default_rng(110)
    e = rng.standard_normal((24, 8))
    clr = decompose(e, 3, 2, residual_budget=9)
    blob = pack_clr(clr)
    back = unpack_clr(blob)
    assert pack_clr(back) == blob  # a second round trip is byte-identical
    assert back.shape == clr.shape and back.rank == clr.rank
    assert np.array_equal(back.assignments, clr.assignments)
    # f32 storage: reconstruction agrees to single precision
    assert np.max(np.abs(reconstruct(back) - reconstruct(clr))) < 1e-5


def test_clr_single_byte_corruption_detected():
    rng = np.random.default_rng(111)
    clr = decompose(rng.standard_normal((6, 4)), 2, 1, residual_budget=3)
    blob = pack_clr(clr)
    for pos in range(len(blob)):
        corrupted = bytearray(blob)
        corrupted[pos] ^= 0x40
        with pytest.raises(FormatError):
            unpack_clr(bytes(corrupted))


def test_clr_save_load(tmp_path):
    rng = np.random.default_rng(112)
    clr = decompose(rng.standard_normal((10, 6)), 2, 2)
    path = tmp_path / "f.tvc"
    save_clr(clr, path)
    assert pack_clr(load_clr(path)) == pack_clr(unpack_clr(pack_clr(clr)))
