"""Rotation algebra and forward kinematics of the skeleton model.

Frame composition for joint ``j`` with parent ``p``::

    world_j = world_p * Trans(rest_offset_j) * Rot(orientation_j) * Rot(dof_j(q))

The root uses ``root_translation + rest_offset`` in place of the parent frame.
Fixed joint orientations are extrinsic X-Y-Z Euler angles, i.e. ``Rz @ Ry @ Rx``.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .skeleton import JointSpec, Pose, SkeletonModel


@dataclass(frozen=True)
class RigidTransform:
    rotation: np.ndarray
    translation: np.ndarray

    def apply(self, points: np.ndarray) -> np.ndarray:
        return np.asarray(points) @ self.rotation.T + self.translation

    def compose(self, other: "RigidTransform") -> "RigidTransform":
        return RigidTransform(self.rotation @ other.rotation,
                              self.rotation @ other.translation + self.translation)


@dataclass(frozen=True)
class FkResult:
    joint_world: np.ndarray  # (J, 3)
    marker_world: np.ndarray  # (M, 3)
    frames: tuple[RigidTransform, ...]


def skew(v: np.ndarray) -> np.ndarray:
    x, y, z = v
    return np.array([[0.0, -z, y], [z, 0.0, -x], [-y, x, 0.0]])


def axis_angle_to_matrix(aa) -> np.ndarray:
    """Rodrigues' formula. ``aa`` is the rotation axis scaled by the angle in radians."""
    aa = np.asarray(aa, dtype=float)
    angle = np.linalg.norm(aa)
    if angle < 1e-12:
        # second-order expansion keeps the map smooth through zero
        K = skew(aa)
        return np.eye(3) + K + 0.5 * K @ K
    K = skew(aa / angle)
    return np.eye(3) + np.sin(angle) * K + (1.0 - np.cos(angle)) * (K @ K)


def axis_rotation(axis: np.ndarray, angle: float) -> np.ndarray:
    """Rotation by ``angle`` about the unit ``axis``."""
    K = skew(axis)
    return np.eye(3) + np.sin(angle) * K + (1.0 - np.cos(angle)) * (K @ K)


def euler_xyz_to_matrix(angles) -> np.ndarray:
    x, y, z = angles
    ex, ey, ez = np.eye(3)
    return axis_rotation(ez, z) @ axis_rotation(ey, y) @ axis_rotation(ex, x)


def dof_rotation(joint: JointSpec, coords) -> np.ndarray:
    """Product of the joint's axis rotations in listed order."""
    coords = np.asarray(coords, dtype=float).reshape(-1)
    if coords.size != joint.n_dof:
        raise ValueError(f"joint {joint.name!r} has {joint.n_dof} DOF, got {coords.size} coordinates")
    R = np.eye(3)
    for axis, c in zip(joint.dof_axes, coords):
        R = R @ axis_rotation(axis, c)
    return R


def decompose_rotation(axes: np.ndarray, R: np.ndarray) -> np.ndarray:
    """Coordinates ``c`` with ``R = R(a1,c1) R(a2,c2) R(a3,c3)`` for orthonormal axes.

    The middle coordinate is returned in [-pi/2, pi/2]. Near ``|c2| = pi/2``
    the first and third coordinates are not separable (gimbal lock).
    """
    axes = np.asarray(axes, dtype=float)
    B = axes.T.copy()
    flip = 1.0
    if np.linalg.det(B) < 0:
        B[:, 2] *= -1.0
        flip = -1.0
    # in the axis basis R becomes Rx(c1) Ry(c2) Rz(c3)
    M = B.T @ R @ B
    c2 = np.arcsin(np.clip(M[0, 2], -1.0, 1.0))
    c1 = np.arctan2(-M[1, 2], M[2, 2])
    c3 = np.arctan2(-M[0, 1], M[0, 0])
    return np.array([c1, c2, flip * c3])


def _local_rotation(joint: JointSpec) -> np.ndarray:
    return euler_xyz_to_matrix(joint.orientation)


def _check_pose(model: SkeletonModel, pose: Pose) -> None:
    if pose.q_r.shape != (model.n_dof,):
        raise ValueError(f"pose has {pose.q_r.size} coordinates, model has {model.n_dof} DOF")


def _frames(model: SkeletonModel, pose: Pose) -> tuple[list[np.ndarray], list[np.ndarray], list[list[np.ndarray]]]:
    """World rotations, world origins and per-DOF world axes of every joint."""
    rots: list[np.ndarray] = []
    origins: list[np.ndarray] = []
    dof_axes_world: list[list[np.ndarray]] = []
    starts, q = model.dof_starts, pose.q_r
    for i, joint in enumerate(model.joints):
        p = model.parents[i]
        if p < 0:
            R_par = np.eye(3)
            origin = pose.root_translation + joint.rest_offset
        else:
            R_par = rots[p]
            origin = origins[p] + R_par @ joint.rest_offset
        R = R_par @ _local_rotation(joint)
        axes_w = []
        for d, axis in enumerate(joint.dof_axes):
            axes_w.append(R @ axis)
            R = R @ axis_rotation(axis, q[starts[i] + d])
        rots.append(R)
        origins.append(origin)
        dof_axes_world.append(axes_w)
    return rots, origins, dof_axes_world


def forward_kinematics(model: SkeletonModel, pose: Pose) -> FkResult:
    _check_pose(model, pose)
    rots, origins, _ = _frames(model, pose)
    frames = tuple(RigidTransform(R, t) for R, t in zip(rots, origins))
    if model.n_markers:
        local = np.array([m.local for m in model.markers])
        R = np.array(rots)[model.marker_segment]
        T = np.array(origins)[model.marker_segment]
        markers = np.einsum("mij,mj->mi", R, local) + T
    else:
        markers = np.zeros((0, 3))
    return FkResult(np.array(origins), markers, frames)


def _point_jacobian(model: SkeletonModel, pose: Pose, points: np.ndarray, owners: np.ndarray) -> np.ndarray:
    """d(points)/d(q_r, root_translation) for points rigidly attached to ``owners``."""
    rots, origins, axes_w = _frames(model, pose)
    n = len(points)
    J = np.zeros((3 * n, model.n_dof + 3))
    # owner -> joint-on-path mask
    on_path = model.ancestors[owners]  # (n, n_joints)
    for j, joint in enumerate(model.joints):
        rows = np.nonzero(on_path[:, j])[0]
        if rows.size == 0 or joint.n_dof == 0:
            continue
        lever = points[rows] - origins[j]
        for d, w in enumerate(axes_w[j]):
            col = model.dof_starts[j] + d
            J[(3 * rows[:, None] + np.arange(3)).ravel(), col] = np.cross(w, lever).ravel()
    J[:, model.n_dof:] = np.tile(np.eye(3), (n, 1))
    return J


def fk_jacobian(model: SkeletonModel, pose: Pose) -> np.ndarray:
    """Analytic marker Jacobian, shape (3*M, DOF+3); rows are x,y,z per marker."""
    _check_pose(model, pose)
    fk = forward_kinematics(model, pose)
    return _point_jacobian(model, pose, fk.marker_world, model.marker_segment)


def joint_jacobian(model: SkeletonModel, pose: Pose) -> np.ndarray:
    """Analytic Jacobian of the joint centers, shape (3*J, DOF+3)."""
    _check_pose(model, pose)
    fk = forward_kinematics(model, pose)
    # a joint center sits at its own frame origin, so its own DOF have zero lever
    return _point_jacobian(model, pose, fk.joint_world, np.arange(model.n_joints))


def fk_scale_jacobian(base: SkeletonModel, scales: np.ndarray, pose: Pose) -> tuple[np.ndarray, np.ndarray]:
    """Derivatives of marker and joint positions w.r.t. segment scales.

    World positions of ``apply_scales(base, scales)`` are linear in the scales
    (rotations do not depend on them). Returns ``(dmarkers, djoints)`` with
    shapes (3*M, 3*J) and (3*J, 3*J); column ``3*a + c`` is scale component
    ``c`` of segment ``a``.
    """
    from .skeleton import apply_scales

    _check_pose(base, pose)
    scaled = apply_scales(base, scales)
    rots, _, _ = _frames(scaled, pose)
    nj, nm = base.n_joints, base.n_markers
    dM = np.zeros((3 * nm, 3 * nj))
    dJ = np.zeros((3 * nj, 3 * nj))
    anc = base.ancestors
    for j, joint in enumerate(base.joints):
        a = base.parents[j]
        if a < 0:
            continue
        block = rots[a] * joint.rest_offset[None, :]
        for k in np.nonzero(anc[:, j])[0]:
            dJ[3 * k:3 * k + 3, 3 * a:3 * a + 3] += block
        for m in np.nonzero(anc[base.marker_segment, j])[0]:
            dM[3 * m:3 * m + 3, 3 * a:3 * a + 3] += block
    for m, (spec, seg) in enumerate(zip(base.markers, base.marker_segment)):
        dM[3 * m:3 * m + 3, 3 * seg:3 * seg + 3] += rots[seg] * spec.local[None, :]
    return dM, dJ
