"""Pose and body evaluation metrics.

Position metrics take meters and report millimeters.
"""

from __future__ import annotations

import time
from contextlib import contextmanager
from dataclasses import dataclass

import numpy as np

from .skeleton import SkeletonModel


class MetricError(ValueError):
    pass


@dataclass(frozen=True)
class PointSetPair:
    predicted: np.ndarray
    target: np.ndarray
    root_index: int | None = None

    def __post_init__(self):
        p = np.asarray(self.predicted, dtype=float)
        t = np.asarray(self.target, dtype=float)
        if p.shape != t.shape or p.ndim != 2 or p.shape[1] != 3 or p.shape[0] < 1:
            raise MetricError(f"point sets must be matching (N, 3) arrays, got {p.shape} and {t.shape}")
        object.__setattr__(self, "predicted", p)
        object.__setattr__(self, "target", t)


def _mean_dist_mm(a: np.ndarray, b: np.ndarray) -> float:
    return float(np.mean(np.linalg.norm(a - b, axis=1)) * 1000.0)


def mpjpe(pair: PointSetPair) -> float:
    return _mean_dist_mm(pair.predicted, pair.target)


def mve(pair: PointSetPair) -> float:
    """Mean vertex error; the same mean Euclidean distance applied to mesh vertices."""
    return _mean_dist_mm(pair.predicted, pair.target)


def procrustes_align(predicted: np.ndarray, target: np.ndarray, scale: bool = True) -> np.ndarray:
    """Best similarity (or rigid, with ``scale=False``) transform of ``predicted`` onto ``target``."""
    mu_p = predicted.mean(axis=0)
    mu_t = target.mean(axis=0)
    X = predicted - mu_p
    Y = target - mu_t
    var_p = float(np.sum(X * X))
    if var_p == 0.0:
        raise MetricError("degenerate prediction: all points coincide")
    U, S, Vt = np.linalg.svd(X.T @ Y)
    # rank < 2 means the points are collinear and the rotation is not unique
    if S[1] <= 1e-12 * max(S[0], 1e-300):
        raise MetricError("degenerate (collinear) point configuration")
    D = np.eye(3)
    if np.linalg.det(U @ Vt) < 0:
        D[2, 2] = -1.0
    R = (U @ D @ Vt).T
    s = float(np.trace(np.diag(S) @ D) / var_p) if scale else 1.0
    return s * X @ R.T + mu_t


def pa_mpjpe(pair: PointSetPair, scale: bool = True) -> float:
    """MPJPE after Procrustes alignment; similarity by default, rigid when ``scale=False``."""
    if len(pair.predicted) < 3:
        raise MetricError("Procrustes alignment needs at least 3 points")
    return _mean_dist_mm(procrustes_align(pair.predicted, pair.target, scale), pair.target)


def mpblpe(pair: PointSetPair) -> float:
    """Mean per-landmark error after moving both sets' root landmark to the origin."""
    r = pair.root_index
    if r is None or not 0 <= r < len(pair.target):
        raise MetricError(f"invalid root index {r!r}")
    p = pair.predicted - pair.predicted[r]
    t = pair.target - pair.target[r]
    return float(np.mean(np.sqrt(np.sum((p - t) ** 2, axis=1))) * 1000.0)


AXIS_SELECTORS = {"x": (0,), "y": (1,), "z": (2,), "all": (0, 1, 2)}

# substring -> axis for the longest dimension of each segment type
_RULE_KEYWORDS = [
    ("pelvis", "all"),
    ("skull", "x"), ("head", "x"), ("toes", "x"), ("calcn", "x"),
    ("jaw", "z"), ("scapula", "z"), ("clavicle", "z"),
    ("lumbar", "y"), ("thorax", "y"), ("spine", "y"),
    ("femur", "y"), ("tibia", "y"), ("talus", "y"),
    ("humerus", "y"), ("ulna", "y"), ("radius", "y"), ("hand", "y"),
]


@dataclass(frozen=True)
class SegmentAxisRule:
    """Segment name -> axis selector (``x``, ``y``, ``z`` or ``all``)."""

    axes: dict

    def __post_init__(self):
        for name, sel in self.axes.items():
            if sel not in AXIS_SELECTORS:
                raise MetricError(f"segment {name!r}: unknown axis selector {sel!r}")

    def __contains__(self, name) -> bool:
        return name in self.axes

    def __getitem__(self, name) -> str:
        return self.axes[name]


def default_axis_rules(segment_names) -> SegmentAxisRule:
    rules = {}
    for name in segment_names:
        for key, axis in _RULE_KEYWORDS:
            if key in name:
                rules[name] = axis
                break
        else:
            raise MetricError(f"no axis rule for segment {name!r}")
    return SegmentAxisRule(rules)


def segment_dimensions_mm(model: SkeletonModel) -> np.ndarray:
    """Per-segment extent along x, y, z (mm) of the segment's origin, child joints and markers."""
    dims = np.zeros((model.n_joints, 3))
    for i in range(model.n_joints):
        pts = [np.zeros(3)]
        pts += [model.joints[c].rest_offset for c in np.nonzero(model.parents == i)[0]]
        pts += [model.markers[k].local for k in np.nonzero(model.marker_segment == i)[0]]
        pts = np.array(pts)
        dims[i] = (pts.max(axis=0) - pts.min(axis=0)) * 1000.0
    return dims


def mae_body(pred_scales, target_scales, segment_lengths_mm, rules: SegmentAxisRule,
             segment_names) -> float:
    """Mean absolute error (mm) of segment dimensions along each segment's rule axis.

    Dimension = scale component * unscaled dimension; pelvis-style ``all``
    rules contribute all three axes as separate entries.
    """
    ps = np.asarray(pred_scales, dtype=float)
    ts = np.asarray(target_scales, dtype=float)
    L = np.asarray(segment_lengths_mm, dtype=float)
    if ps.shape != ts.shape or ps.shape != L.shape:
        raise MetricError("scale and dimension arrays must share shape (S, 3)")
    errs = []
    for i, name in enumerate(segment_names):
        if name not in rules:
            raise MetricError(f"segment {name!r} has no axis rule")
        for a in AXIS_SELECTORS[rules[name]]:
            errs.append(abs(ps[i, a] - ts[i, a]) * L[i, a])
    return float(np.mean(errs))


def mae_angle(pred_q, target_q) -> float:
    """Mean absolute joint-coordinate error in degrees; no angle wrapping."""
    p = np.asarray(pred_q, dtype=float)
    t = np.asarray(target_q, dtype=float)
    if p.shape != t.shape:
        raise MetricError(f"length mismatch: {p.shape} vs {t.shape}")
    return float(np.mean(np.abs(np.rad2deg(p - t))))


class InferenceTimer:
    """Accumulates wall-clock time per processed frame.

    >>> timer = InferenceTimer()
    >>> with timer.frame():
    ...     pass
    >>> timer.aiti() >= 0
    True
    """

    def __init__(self):
        self.durations: list[float] = []

    @contextmanager
    def frame(self):
        t0 = time.perf_counter()
        try:
            yield
        finally:
            self.durations.append(time.perf_counter() - t0)

    def record(self, seconds: float) -> None:
        self.durations.append(float(seconds))

    def aiti(self) -> float:
        return aiti(self.durations)


def aiti(durations) -> float:
    """Average inference time per image (seconds)."""
    d = list(durations)
    if not d:
        raise MetricError("empty timing run")
    return float(sum(d) / len(d))
