"""Marker-based scaling and inverse kinematics.

Scales are solved once from a calibration frame at a known posture; poses are
then solved frame by frame with fixed scales by damped Gauss-Newton.
"""

from __future__ import annotations

import logging
import warnings
from dataclasses import dataclass, field

import numpy as np

from .kinematics import fk_jacobian, fk_scale_jacobian, forward_kinematics
from .skeleton import Pose, SkeletonModel, apply_scales, clamp_pose

logger = logging.getLogger(__name__)


class IkError(RuntimeError):
    pass


@dataclass
class MarkerFrame:
    positions: dict[str, np.ndarray]
    visibility: dict[str, bool] = field(default_factory=dict)

    def __post_init__(self):
        self.positions = {k: np.asarray(v, dtype=float) for k, v in self.positions.items()}
        for k in self.positions:
            self.visibility.setdefault(k, True)
        for k, v in self.positions.items():
            if self.visibility[k] and not np.all(np.isfinite(v)):
                raise ValueError(f"visible marker {k!r} has non-finite coordinates")

    def visible_names(self) -> list[str]:
        return [k for k, vis in self.visibility.items() if vis and k in self.positions]

    @classmethod
    def from_array(cls, names, positions, visible=None) -> "MarkerFrame":
        positions = np.asarray(positions, dtype=float)
        if visible is None:
            visible = np.ones(len(names), dtype=bool)
        return cls(dict(zip(names, positions)), {n: bool(v) for n, v in zip(names, visible)})


@dataclass(frozen=True)
class IkSettings:
    max_iterations: int = 100
    residual_tol: float = 1e-6
    step_tol: float = 1e-9
    damping_init: float = 1e-3
    damping_factor: float = 10.0
    joint_limit_mode: str = "clamp"
    marker_weights: dict[str, float] | None = None

    def __post_init__(self):
        if self.residual_tol <= 0 or self.step_tol <= 0:
            raise ValueError("tolerances must be positive")
        if self.damping_init <= 0 or self.damping_factor <= 1:
            raise ValueError("damping_init must be > 0 and damping_factor > 1")
        if self.joint_limit_mode != "clamp":
            raise ValueError(f"unsupported joint_limit_mode {self.joint_limit_mode!r}")


@dataclass
class IkSolution:
    pose: Pose
    rms_residual: float
    iterations: int
    converged: bool
    cost_trace: list[float] = field(default_factory=list)
    error: str | None = None


@dataclass
class ScaleResult:
    scales: np.ndarray  # (J, 3)
    solved: np.ndarray  # (J, 3) bool, False where the default 1 was kept
    rms_residual: float
    report: list[str] = field(default_factory=list)


def _frame_rows(model: SkeletonModel, frame: MarkerFrame):
    names = model.marker_names
    unknown = set(frame.positions) - set(names)
    if unknown:
        raise IkError(f"frame contains markers not on the model: {sorted(unknown)}")
    idx = [i for i, n in enumerate(names) if n in frame.positions and frame.visibility.get(n, True)]
    target = np.array([frame.positions[names[i]] for i in idx]).reshape(-1, 3)
    return np.array(idx, dtype=int), target


def solve_scales(model: SkeletonModel, calibration_frame: MarkerFrame,
                 calibration_pose: Pose | None = None, min_markers: int = 2) -> ScaleResult:
    """Least-squares per-segment scales at a fixed calibration posture.

    Marker positions are affine in the scales at a fixed pose, so every
    solvable component is found in one linear solve. Segments with fewer than
    ``min_markers`` visible markers, and components the markers carry no
    information about, keep scale 1 and are listed in the report.
    """
    pose = model.zero_pose() if calibration_pose is None else calibration_pose
    idx, target = _frame_rows(model, calibration_frame)
    if idx.size == 0:
        raise IkError("no visible markers in calibration frame")

    ones = np.ones((model.n_joints, 3))
    base_pos = forward_kinematics(model, pose).marker_world
    dM, _ = fk_scale_jacobian(model, ones, pose)
    rows = (3 * idx[:, None] + np.arange(3)).ravel()
    A = dM[rows]
    # x = x(1) + A (s - 1)
    b = (target - base_pos[idx]).ravel()

    report = []
    solvable = np.zeros((model.n_joints, 3), dtype=bool)
    for j, joint in enumerate(model.joints):
        n_vis = int(np.sum(model.marker_segment[idx] == j))
        if n_vis < min_markers:
            report.append(f"{joint.name}: insufficient markers ({n_vis} visible)")
            continue
        solvable[j] = True
    cols = np.nonzero(solvable.ravel())[0]
    col_norm = np.linalg.norm(A[:, cols], axis=0)
    scale_ref = col_norm.max() if col_norm.size else 0.0
    weak = col_norm <= 1e-9 * max(scale_ref, 1.0)
    for c in cols[weak]:
        report.append(f"{model.joints[c // 3].name}: scale component {'xyz'[c % 3]} unobservable")
    cols = cols[~weak]

    delta = np.zeros(3 * model.n_joints)
    if cols.size:
        sub = A[:, cols]
        sol, _, rank, sv = np.linalg.lstsq(sub, b, rcond=None)
        if rank < cols.size:
            # degenerate layout: drop segments whose block is rank-deficient
            keep = []
            for j in np.unique(cols // 3):
                block = cols[cols // 3 == j]
                if np.linalg.matrix_rank(A[:, block]) == block.size:
                    keep.extend(block.tolist())
                else:
                    report.append(f"{model.joints[j].name}: singular marker layout")
            cols = np.array(keep, dtype=int)
            sol = np.linalg.lstsq(A[:, cols], b, rcond=None)[0] if cols.size else np.zeros(0)
        delta[cols] = sol
    solved = np.zeros(3 * model.n_joints, dtype=bool)
    solved[cols] = True
    scales = 1.0 + delta.reshape(-1, 3)
    if np.any(scales <= 0):
        raise IkError("scale solve produced non-positive scales")
    resid = A @ delta - b
    rms = float(np.sqrt(np.mean(np.sum(resid.reshape(-1, 3) ** 2, axis=1))))
    return ScaleResult(scales, solved.reshape(-1, 3), rms, report)


def _weights(model: SkeletonModel, idx: np.ndarray, settings: IkSettings) -> np.ndarray:
    if not settings.marker_weights:
        return np.ones(idx.size)
    names = model.marker_names
    w = np.array([settings.marker_weights.get(names[i], 1.0) for i in idx], dtype=float)
    if np.any(w < 0):
        raise ValueError("marker weights must be nonnegative")
    return w


def solve_ik_frame(model: SkeletonModel, frame: MarkerFrame, init: Pose | None = None,
                   settings: IkSettings | None = None) -> IkSolution:
    """Levenberg-Marquardt fit of one frame; invisible markers are masked out.

    The pose is clamped to the joint limits after every step and a step is
    accepted only if the weighted cost does not increase.
    """
    settings = settings or IkSettings()
    pose = clamp_pose(model, init if init is not None else model.zero_pose())
    idx, target = _frame_rows(model, frame)
    if idx.size == 0:
        return IkSolution(pose, float("nan"), 0, False, [], "no markers")
    if 3 * idx.size < model.n_dof + 3:
        warnings.warn(f"under-determined frame: {idx.size} visible markers for {model.n_dof + 3} unknowns",
                      stacklevel=2)
    w = _weights(model, idx, settings)
    sw = np.repeat(np.sqrt(w), 3)
    wsum = w.sum()
    rows = (3 * idx[:, None] + np.arange(3)).ravel()

    def residual(p: Pose) -> np.ndarray:
        return sw * (forward_kinematics(model, p).marker_world[idx] - target).ravel()

    def rms_of(cost: float) -> float:
        return float(np.sqrt(cost / wsum)) if wsum > 0 else 0.0

    r = residual(pose)
    cost = float(r @ r)
    trace = [cost]
    mu = settings.damping_init
    x = pose.as_vector()
    converged = False
    it = 0
    while it < settings.max_iterations:
        if not np.isfinite(cost):
            raise IkError(f"non-finite residual at iteration {it}; cost trace {trace}")
        if rms_of(cost) <= settings.residual_tol:
            converged = True
            break
        it += 1
        J = sw[:, None] * fk_jacobian(model, pose)[rows]
        H = J.T @ J
        g = J.T @ r
        diag = np.diag(H).copy()
        diag = np.maximum(diag, 1e-12 * max(diag.max(), 1e-300))
        accepted = False
        while not accepted:
            try:
                step = -np.linalg.solve(H + mu * np.diag(diag), g)
            except np.linalg.LinAlgError:
                step = -np.linalg.lstsq(H + mu * np.diag(diag), g, rcond=None)[0]
            cand = clamp_pose(model, Pose.from_vector(x + step))
            r_c = residual(cand)
            cost_c = float(r_c @ r_c)
            if np.isfinite(cost_c) and cost_c <= cost:
                accepted = True
                moved = np.linalg.norm(cand.as_vector() - x)
                pose, x, r, cost = cand, cand.as_vector(), r_c, cost_c
                mu = max(mu / settings.damping_factor, 1e-15)
            else:
                mu *= settings.damping_factor
                if mu > 1e15:
                    break
        trace.append(cost)
        if not accepted or moved < settings.step_tol:
            converged = True
            break
    if not converged and rms_of(cost) <= settings.residual_tol:
        converged = True
    logger.debug("ik frame: %d iterations, rms %.3g", it, rms_of(cost))
    return IkSolution(pose, rms_of(cost), it, converged, trace)


def solve_ik_sequence(model: SkeletonModel, frames: list[MarkerFrame], settings: IkSettings | None = None,
                      init: Pose | None = None) -> list[IkSolution]:
    """Solve frames in order, warm-starting each from the last successful solution."""
    if not frames:
        raise IkError("empty marker sequence")
    current = init if init is not None else model.zero_pose()
    out = []
    for t, frame in enumerate(frames):
        try:
            sol = solve_ik_frame(model, frame, current, settings)
        except IkError as exc:
            raise IkError(f"frame {t}: {exc}") from exc
        out.append(sol)
        if sol.error is None:
            current = sol.pose
    return out


def scaled_model(model: SkeletonModel, result: ScaleResult) -> SkeletonModel:
    return apply_scales(model, result.scales)
