import numpy as np
import pytest

from biokin.attention import (AttentionError, FeaturePyramid, QuerySet, bilinear_sample, dam_forward,
                              normalize_weights, random_pyramid, random_queries)

from oracles import bilinear_loop, dam_loops


def _one_hot(K, S, M, s, m):
    w = np.zeros((K, S, M))
    w[:, s, m] = 1.0
    return w


def test_grid_node_sample(rng):
    fmap = rng.normal(size=(5, 7, 3))
    # node (row 2, col 3) sits at x = 3/6, y = 2/4
    np.testing.assert_array_equal(bilinear_sample(fmap, [3 / 6, 2 / 4]), fmap[2, 3])


def test_midpoint_is_average(rng):
    fmap = rng.normal(size=(4, 5, 2))
    np.testing.assert_allclose(bilinear_sample(fmap, [1.5 / 4, 1 / 3]), 0.5 * (fmap[1, 1] + fmap[1, 2]),
                               atol=1e-15)


def test_bilinear_vs_corner_oracle(rng):
    fmap = rng.normal(size=(6, 9, 4))
    for x, y in rng.uniform(-0.2, 1.2, (100, 2)):
        np.testing.assert_allclose(bilinear_sample(fmap, [x, y]), bilinear_loop(fmap, x, y), atol=1e-12)


def test_far_outside_reads_zero(rng):
    fmap = rng.normal(size=(4, 4, 2))
    assert np.array_equal(bilinear_sample(fmap, [5.0, -3.0]), np.zeros(2))


def test_normalize_weights(rng):
    np.testing.assert_allclose(normalize_weights(np.zeros((2, 4, 4))), np.full((2, 4, 4), 1 / 16), atol=1e-15)
    raw = rng.normal(size=(5, 3, 2))
    shifted = raw + rng.normal(size=(5, 1, 1))
    np.testing.assert_allclose(normalize_weights(shifted), normalize_weights(raw), atol=1e-14)
    e = np.exp(raw)
    np.testing.assert_allclose(normalize_weights(raw), e / e.sum(axis=(1, 2), keepdims=True), atol=1e-12)
    big = normalize_weights(np.full((1, 2, 2), 1000.0))
    assert np.all(np.isfinite(big))


def test_matches_triple_loop_oracle(rng):
    pyr = random_pyramid(rng, channels=8)
    qs = random_queries(rng, pyr, n_queries=12)
    expect = dam_loops(pyr.levels, qs.reference_points, qs.offsets, qs.weights, qs.projection)
    np.testing.assert_allclose(dam_forward(pyr, qs), expect, atol=1e-10)


def test_one_hot_gather(rng):
    pyr = random_pyramid(rng, channels=5)
    K, S, M = 6, 4, 4
    s, m = 2, 1
    H, W, _ = pyr.levels[s].shape
    rows = rng.integers(0, H, K)
    cols = rng.integers(0, W, K)
    ref = np.full((K, 2), 0.5)
    offsets = np.zeros((K, S, M, 2))
    offsets[:, s, m, 0] = cols / (W - 1) - 0.5
    offsets[:, s, m, 1] = rows / (H - 1) - 0.5
    qs = QuerySet(np.zeros((K, 5)), ref, offsets, _one_hot(K, S, M, s, m), np.eye(5))
    out = dam_forward(pyr, qs)
    np.testing.assert_allclose(out, pyr.levels[s][rows, cols], atol=1e-14)


def test_uniform_over_identical_features():
    levels = tuple(np.ones((4, 4, 3)) * 2.5 for _ in range(2))
    pyr = FeaturePyramid(levels, (1, 4))
    w = np.zeros((1, 2, 2))
    w[0, 0, :] = 0.5
    qs = QuerySet(np.zeros((1, 3)), np.array([[0.3, 0.6]]), np.zeros((1, 2, 2, 2)), w, np.eye(3))
    np.testing.assert_allclose(dam_forward(pyr, qs), [[2.5, 2.5, 2.5]], atol=1e-15)


def test_constant_maps_give_projected_constant(rng):
    c = rng.normal(size=4)
    pyr = FeaturePyramid(tuple(np.broadcast_to(c, (h, h, 4)).copy() for h in (4, 8, 16)), (4, 8, 16))
    qs = random_queries(rng, pyr, n_queries=10, offset_scale=0.0)
    np.testing.assert_allclose(dam_forward(pyr, qs), np.tile(qs.projection @ c, (10, 1)), atol=1e-12)


def test_linear_in_features(rng):
    a_pyr = random_pyramid(rng, channels=4)
    b_pyr = FeaturePyramid(tuple(rng.normal(size=lv.shape) for lv in a_pyr.levels), a_pyr.scale_factors)
    qs = random_queries(rng, a_pyr, n_queries=20)
    a, b = 1.7, -0.3
    mix = FeaturePyramid(tuple(a * x + b * y for x, y in zip(a_pyr.levels, b_pyr.levels)), a_pyr.scale_factors)
    np.testing.assert_allclose(dam_forward(mix, qs), a * dam_forward(a_pyr, qs) + b * dam_forward(b_pyr, qs),
                               atol=1e-10)


def test_query_permutation(rng):
    pyr = random_pyramid(rng, channels=4)
    qs = random_queries(rng, pyr, n_queries=15)
    perm = rng.permutation(15)
    qp = QuerySet(qs.queries[perm], qs.reference_points[perm], qs.offsets[perm], qs.weights[perm], qs.projection)
    np.testing.assert_allclose(dam_forward(pyr, qp), dam_forward(pyr, qs)[perm], atol=1e-14)


def test_output_reconstructs_from_samples(rng):
    pyr = random_pyramid(rng, channels=3)
    qs = random_queries(rng, pyr, n_queries=4)
    qs = QuerySet(qs.queries, qs.reference_points, qs.offsets, qs.weights, np.eye(3))
    out = dam_forward(pyr, qs)
    for k in range(4):
        acc = np.zeros(3)
        for s, lv in enumerate(pyr.levels):
            for m in range(qs.offsets.shape[2]):
                acc += qs.weights[k, s, m] * bilinear_sample(lv, qs.reference_points[k] + qs.offsets[k, s, m])
        np.testing.assert_allclose(out[k], acc, atol=1e-12)
    assert np.allclose(qs.weights.sum(axis=(1, 2)), 1.0)


def test_default_shapes(rng):
    pyr = random_pyramid(rng)
    qs = random_queries(rng, pyr)
    assert qs.queries.shape[0] == 96
    assert pyr.scale_factors == (1, 4, 8, 16)
    assert dam_forward(pyr, qs).shape == (96, pyr.channels)


def test_validation(rng):
    pyr = random_pyramid(rng, channels=4)
    qs = random_queries(rng, pyr, n_queries=3)
    bad_w = qs.weights * 2
    with pytest.raises(AttentionError, match="sum to 1"):
        dam_forward(pyr, QuerySet(qs.queries, qs.reference_points, qs.offsets, bad_w, qs.projection))
    bad_ref = qs.reference_points + 2
    with pytest.raises(AttentionError, match="reference"):
        dam_forward(pyr, QuerySet(qs.queries, bad_ref, qs.offsets, qs.weights, qs.projection))
    with pytest.raises(AttentionError, match="offsets"):
        dam_forward(pyr, QuerySet(qs.queries, qs.reference_points, qs.offsets[:, :2], qs.weights[:, :2],
                                  qs.projection))
    with pytest.raises(AttentionError, match="channel"):
        FeaturePyramid((np.zeros((4, 4, 2)), np.zeros((4, 4, 3))), (1, 2))
    with pytest.raises(AttentionError, match="2x2"):
        FeaturePyramid((np.zeros((1, 4, 2)),), (1,))
