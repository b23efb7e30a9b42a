"""Multi-scale deformable attention over a feature pyramid (forward only).

Each query k samples every level s at ``reference_k + offset_ksm`` (normalized
[0, 1] coordinates shared by all levels), projects the bilinearly interpolated
features with W and sums them under the attention weights::

    out_k = sum_s sum_m alpha_ksm * W @ F_s(ref_k + offset_ksm)

Sampling outside the map reads zeros.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

DEFAULT_QUERIES = 96
DEFAULT_POINTS = 4
DEFAULT_STRIDES = (1, 4, 8, 16)


class AttentionError(ValueError):
    pass


@dataclass(frozen=True)
class FeaturePyramid:
    levels: tuple[np.ndarray, ...]  # each (H_s, W_s, C)
    scale_factors: tuple[int, ...] = DEFAULT_STRIDES

    def __post_init__(self):
        chans = {lv.shape[2] for lv in self.levels}
        if len(chans) != 1:
            raise AttentionError("all levels must share the channel dimension")
        if any(lv.shape[0] < 2 or lv.shape[1] < 2 for lv in self.levels):
            raise AttentionError("each level needs at least 2x2 cells")
        if len(self.scale_factors) != len(self.levels):
            raise AttentionError("one scale factor per level")

    @property
    def channels(self) -> int:
        return self.levels[0].shape[2]


@dataclass(frozen=True)
class QuerySet:
    queries: np.ndarray  # (K, C)
    reference_points: np.ndarray  # (K, 2), (x, y) in [0, 1]
    offsets: np.ndarray  # (K, S, M, 2)
    weights: np.ndarray  # (K, S, M)
    projection: np.ndarray  # (C, C)


def bilinear_sample(fmap: np.ndarray, point) -> np.ndarray:
    """Interpolate ``fmap`` (H, W, C) at normalized ``point = (x, y)``.

    Pixel coordinates are ``x * (W - 1)`` and ``y * (H - 1)``; corners that
    fall outside the grid contribute zero.
    """
    return _sample_many(fmap, np.asarray(point, dtype=float).reshape(1, 2))[0]


def _sample_many(fmap: np.ndarray, points: np.ndarray) -> np.ndarray:
    H, W, C = fmap.shape
    px = points[:, 0] * (W - 1)
    py = points[:, 1] * (H - 1)
    x0 = np.floor(px)
    y0 = np.floor(py)
    fx = px - x0
    fy = py - y0
    x0 = x0.astype(np.int64)
    y0 = y0.astype(np.int64)
    out = np.zeros((len(points), C))
    for dy, wy in ((0, 1.0 - fy), (1, fy)):
        for dx, wx in ((0, 1.0 - fx), (1, fx)):
            xi, yi = x0 + dx, y0 + dy
            inside = (xi >= 0) & (xi < W) & (yi >= 0) & (yi < H)
            w = np.where(inside, wx * wy, 0.0)
            vals = fmap[np.clip(yi, 0, H - 1), np.clip(xi, 0, W - 1)]
            out += w[:, None] * vals
    return out


def normalize_weights(raw: np.ndarray) -> np.ndarray:
    """Softmax over the (level, point) axes of a (K, S, M) array."""
    raw = np.asarray(raw, dtype=float)
    K = raw.shape[0]
    flat = raw.reshape(K, -1)
    e = np.exp(flat - flat.max(axis=1, keepdims=True))
    return (e / e.sum(axis=1, keepdims=True)).reshape(raw.shape)


def _check(pyramid: FeaturePyramid, qs: QuerySet) -> None:
    K = qs.queries.shape[0]
    S = len(pyramid.levels)
    if qs.offsets.shape[:2] != (K, S) or qs.offsets.shape[3] != 2:
        raise AttentionError(f"offsets must be (K, S, M, 2) with K={K}, S={S}, got {qs.offsets.shape}")
    if qs.weights.shape != qs.offsets.shape[:3]:
        raise AttentionError("weights must be (K, S, M)")
    if np.any(qs.weights < 0) or not np.allclose(qs.weights.sum(axis=(1, 2)), 1.0, atol=1e-6, rtol=0):
        raise AttentionError("attention weights must be nonnegative and sum to 1 per query")
    ref = qs.reference_points
    if ref.shape != (K, 2) or np.any(ref < 0) or np.any(ref > 1):
        raise AttentionError("reference points must be (K, 2) inside [0, 1]")
    C = pyramid.channels
    if qs.projection.shape != (C, C):
        raise AttentionError(f"projection must be ({C}, {C})")


def dam_forward(pyramid: FeaturePyramid, qs: QuerySet) -> np.ndarray:
    """Deformable attention output, shape (K, C)."""
    _check(pyramid, qs)
    K, S, M, _ = qs.offsets.shape
    acc = np.zeros((K, pyramid.channels))
    for s, fmap in enumerate(pyramid.levels):
        pts = (qs.reference_points[:, None, :] + qs.offsets[:, s]).reshape(-1, 2)
        feats = _sample_many(fmap, pts).reshape(K, M, -1)
        acc += np.einsum("km,kmc->kc", qs.weights[:, s], feats)
    # W is linear, so it can be applied once after the weighted sum
    return acc @ qs.projection.T


def random_pyramid(rng: np.random.Generator, channels: int = 16, base: int = 2,
                   strides=DEFAULT_STRIDES) -> FeaturePyramid:
    """Synthetic pyramid; a level labelled ``f``x is ``base * f`` rows by ``1.5 * base * f`` columns."""
    levels = []
    for f in strides:
        h = max(2, base * f)
        levels.append(rng.standard_normal((h, max(2, (3 * h) // 2), channels)))
    return FeaturePyramid(tuple(levels), tuple(strides))


def random_queries(rng: np.random.Generator, pyramid: FeaturePyramid, n_queries: int = DEFAULT_QUERIES,
                   n_points: int = DEFAULT_POINTS, offset_scale: float = 0.1) -> QuerySet:
    C = pyramid.channels
    S = len(pyramid.levels)
    return QuerySet(
        queries=rng.standard_normal((n_queries, C)),
        reference_points=rng.random((n_queries, 2)),
        offsets=offset_scale * rng.standard_normal((n_queries, S, n_points, 2)),
        weights=normalize_weights(rng.standard_normal((n_queries, S, n_points))),
        projection=rng.standard_normal((C, C)) / np.sqrt(C),
    )
