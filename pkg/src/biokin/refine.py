"""2D keypoint-guided pose refinement at inference time.

The objective is a confidence-weighted squared pixel reprojection error plus a
quadratic anchor to the initial pose parameters::

    F(theta) = sum_j c_j |proj(J_j(theta)) - u_j|^2 + lam * |theta - theta_init|^2

minimised by plain gradient steps ``theta <- theta - eta * grad F``, optionally
with step halving whenever a step would increase F.

``theta`` is the body pose-parameter vector; it stands in for the latent pose
tokens of a trained mesh-recovery network. The map ``theta -> J`` is supplied
by a *joint path* object exposing ``joints(theta)`` and ``jacobian(theta)``.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .kinematics import forward_kinematics, joint_jacobian
from .mesh import BodyMesh, SmplParams, posed_joints, posed_joints_jacobian, regress_joints, shape_vertices
from .skeleton import Pose, SkeletonModel

DEFAULT_FOCAL = 5000.0
ITERATION_PRESETS = (1, 5, 10, 20)


class RefineError(ValueError):
    pass


@dataclass(frozen=True)
class Camera:
    focal: float = DEFAULT_FOCAL
    principal_point: np.ndarray = field(default_factory=lambda: np.zeros(2))
    translation: np.ndarray = field(default_factory=lambda: np.array([0.0, 0.0, 10.0]))

    def __post_init__(self):
        if not self.focal > 0:
            raise RefineError("focal length must be positive")
        object.__setattr__(self, "principal_point", np.asarray(self.principal_point, dtype=float).reshape(2))
        object.__setattr__(self, "translation", np.asarray(self.translation, dtype=float).reshape(3))

    @property
    def rotation(self) -> np.ndarray:
        return np.eye(3)

    def intrinsics(self) -> np.ndarray:
        return np.array([[self.focal, 0.0, self.principal_point[0]],
                         [0.0, self.focal, self.principal_point[1]],
                         [0.0, 0.0, 1.0]])


@dataclass(frozen=True)
class RefineSettings:
    step_size: float = 1e-2
    iterations: int = 10
    lambda_theta: float = 1e-3
    keypoint_confidences: np.ndarray | None = None
    backtracking: bool = True
    max_halvings: int = 20

    def __post_init__(self):
        if not self.step_size >= 0:
            raise RefineError("step size must be >= 0")
        if self.iterations < 1:
            raise RefineError("iterations must be >= 1")
        if self.lambda_theta < 0:
            raise RefineError("lambda_theta must be >= 0")


@dataclass
class RefineState:
    theta_prime: np.ndarray
    theta_init: np.ndarray
    loss_trace: list[float] = field(default_factory=list)
    step_trace: list[float] = field(default_factory=list)


class SmplJointPath:
    """Posed body-mesh joints as a function of the flattened axis-angle pose."""

    def __init__(self, mesh: BodyMesh, beta=None, translation=None):
        self.mesh = mesh
        self.beta = np.zeros(mesh.shape_dirs.shape[2]) if beta is None else np.asarray(beta, dtype=float)
        self.translation = np.zeros(3) if translation is None else np.asarray(translation, dtype=float)
        self.rest_joints = regress_joints(shape_vertices(mesh, self.beta), mesh.joint_regressor)

    @property
    def n_params(self) -> int:
        return 3 * self.mesh.n_joints

    def _params(self, theta):
        return SmplParams(np.asarray(theta).reshape(-1, 3), self.beta, self.translation)

    def joints(self, theta) -> np.ndarray:
        return posed_joints(self.mesh, self._params(theta), self.rest_joints)

    def jacobian(self, theta) -> np.ndarray:
        return posed_joints_jacobian(self.mesh, self._params(theta), self.rest_joints)


class SkeletonJointPath:
    """Skeleton joint centers as a function of the joint coordinates (translation fixed)."""

    def __init__(self, model: SkeletonModel, translation=None):
        self.model = model
        self.translation = np.zeros(3) if translation is None else np.asarray(translation, dtype=float)

    @property
    def n_params(self) -> int:
        return self.model.n_dof

    def joints(self, theta) -> np.ndarray:
        return forward_kinematics(self.model, Pose(theta, self.translation)).joint_world

    def jacobian(self, theta) -> np.ndarray:
        return joint_jacobian(self.model, Pose(theta, self.translation))[:, :self.model.n_dof]


def project(points: np.ndarray, cam: Camera) -> np.ndarray:
    """Pinhole projection of camera-frame points offset by the camera translation."""
    P = np.asarray(points, dtype=float).reshape(-1, 3) + cam.translation
    z = P[:, 2]
    bad = np.nonzero(~(z > 0))[0]
    if bad.size:
        raise RefineError(f"joint {int(bad[0])} is at or behind the camera plane (z = {z[bad[0]]:.6g})")
    return cam.focal * P[:, :2] / z[:, None] + cam.principal_point


def _project_jacobian(points: np.ndarray, cam: Camera) -> np.ndarray:
    """Per-point 2x3 derivative blocks of :func:`project`, shape (J, 2, 3)."""
    P = points + cam.translation
    x, y, z = P.T
    f = cam.focal
    J = np.zeros((len(P), 2, 3))
    J[:, 0, 0] = f / z
    J[:, 0, 2] = -f * x / z**2
    J[:, 1, 1] = f / z
    J[:, 1, 2] = -f * y / z**2
    return J


def _confidences(n: int, settings: RefineSettings, visible) -> np.ndarray:
    c = np.ones(n) if settings.keypoint_confidences is None else np.asarray(settings.keypoint_confidences, float)
    if c.shape != (n,):
        raise RefineError(f"expected {n} confidences, got {c.shape}")
    if visible is not None:
        c = np.where(np.asarray(visible, dtype=bool), c, 0.0)
    if not np.any(c > 0):
        raise RefineError("all joints are invisible")
    return c


def reprojection_error(theta, joints_2d, path, cam: Camera, settings: RefineSettings, visible=None) -> float:
    """The data term alone: confidence-weighted sum of squared pixel errors."""
    c = _confidences(len(joints_2d), settings, visible)
    d = project(path.joints(theta), cam) - joints_2d
    return float(np.sum(c * np.sum(d * d, axis=1)))


def refine_objective(theta_prime, theta_init, joints_2d, path, cam: Camera, settings: RefineSettings,
                     visible=None) -> float:
    theta_prime = np.asarray(theta_prime, dtype=float)
    reg = theta_prime - np.asarray(theta_init, dtype=float)
    return reprojection_error(theta_prime, joints_2d, path, cam, settings, visible) + settings.lambda_theta * float(reg @ reg)


def refine_gradient(theta_prime, theta_init, joints_2d, path, cam: Camera, settings: RefineSettings,
                    visible=None) -> np.ndarray:
    """Analytic gradient chained through projection and the joint path."""
    theta_prime = np.asarray(theta_prime, dtype=float)
    c = _confidences(len(joints_2d), settings, visible)
    pts = path.joints(theta_prime)
    d = project(pts, cam) - joints_2d
    dproj = _project_jacobian(pts, cam)
    g_pts = 2.0 * c[:, None] * np.einsum("jab,ja->jb", dproj, d)  # dF/dpoints (J, 3)
    return path.jacobian(theta_prime).T @ g_pts.ravel() + 2.0 * settings.lambda_theta * (
        theta_prime - np.asarray(theta_init, dtype=float))


def init_state(theta_init, joints_2d, path, cam, settings, visible=None) -> RefineState:
    theta_init = np.asarray(theta_init, dtype=float).copy()
    f0 = refine_objective(theta_init, theta_init, joints_2d, path, cam, settings, visible)
    return RefineState(theta_init.copy(), theta_init, [f0], [])


def refine_step(state: RefineState, joints_2d, path, cam: Camera, settings: RefineSettings,
                visible=None) -> RefineState:
    """One gradient update; appends the new objective value to the trace.

    With backtracking the step is halved (at most ``max_halvings`` times)
    until the objective does not increase; if no such step is found the
    parameters are left unchanged.
    """
    args = (state.theta_init, joints_2d, path, cam, settings, visible)
    g = refine_gradient(state.theta_prime, *args)
    if not np.all(np.isfinite(g)):
        raise RefineError("non-finite gradient")
    f0 = state.loss_trace[-1] if state.loss_trace else refine_objective(state.theta_prime, *args)
    eta = settings.step_size
    theta = state.theta_prime - eta * g
    f = _safe_objective(theta, args)
    if settings.backtracking:
        halvings = 0
        while not f <= f0 and halvings < settings.max_halvings:
            eta *= 0.5
            halvings += 1
            theta = state.theta_prime - eta * g
            f = _safe_objective(theta, args)
        if not f <= f0:
            theta, f, eta = state.theta_prime.copy(), f0, 0.0
    elif not np.isfinite(f):
        raise RefineError("objective became non-finite; reduce the step size")
    return RefineState(theta, state.theta_init, state.loss_trace + [f], state.step_trace + [eta])


def _safe_objective(theta, args) -> float:
    try:
        return refine_objective(theta, *args)
    except RefineError:
        # a trial step that pushes a joint behind the camera counts as an increase
        return float("inf")


def refine(theta_init, joints_2d, path, cam: Camera, settings: RefineSettings | None = None,
           visible=None) -> RefineState:
    """Run ``settings.iterations`` refinement steps from ``theta_init``."""
    settings = settings or RefineSettings()
    joints_2d = np.asarray(joints_2d, dtype=float)
    state = init_state(theta_init, joints_2d, path, cam, settings, visible)
    for _ in range(settings.iterations):
        state = refine_step(state, joints_2d, path, cam, settings, visible)
    return state


@dataclass
class SyntheticProblem:
    theta_true: np.ndarray
    theta_init: np.ndarray
    joints_2d: np.ndarray
    path: SmplJointPath


def synthetic_problem(seed: int, mesh: BodyMesh, cam: Camera | None = None, pose_sd: float = 0.2,
                      perturb_deg: float = 5.0) -> SyntheticProblem:
    """Random body pose, its projected joints, and a start rotated ``perturb_deg`` away at every joint.

    Each joint's axis-angle vector is offset by ``perturb_deg`` degrees
    along a random direction.
    """
    cam = cam or Camera()
    rng = np.random.default_rng(seed)
    path = SmplJointPath(mesh)
    theta_true = pose_sd * rng.standard_normal(path.n_params)
    d = rng.standard_normal((mesh.n_joints, 3))
    d *= np.deg2rad(perturb_deg) / np.linalg.norm(d, axis=1, keepdims=True)
    return SyntheticProblem(theta_true, theta_true + d.ravel(), project(path.joints(theta_true), cam), path)
