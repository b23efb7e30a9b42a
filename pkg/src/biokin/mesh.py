"""SMPL-style body mesh: linear shape space, joint regression, linear blend skinning.

Licensed SMPL assets are not bundled. :func:`synthetic_body` builds a small
procedural body with the same tensor layout (24 joints, 10 shape directions)
and :func:`load_body` reads externally supplied assets saved with
:func:`save_body`.
"""

from __future__ import annotations

import io
import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .io import atomic_write_bytes
from .kinematics import axis_angle_to_matrix, skew

SMPL_PARENTS = np.array(
    [-1, 0, 0, 0, 1, 2, 3, 4, 5, 6, 7, 8, 9, 9, 9, 12, 13, 14, 16, 17, 18, 19, 20, 21]
)
SMPL_JOINT_NAMES = [
    "pelvis", "left_hip", "right_hip", "spine1", "left_knee", "right_knee", "spine2",
    "left_ankle", "right_ankle", "spine3", "left_foot", "right_foot", "neck",
    "left_collar", "right_collar", "head", "left_shoulder", "right_shoulder",
    "left_elbow", "right_elbow", "left_wrist", "right_wrist", "left_hand", "right_hand",
]
N_BETAS = 10
N_VIRTUAL_MARKERS = 142


class MeshError(ValueError):
    pass


@dataclass(frozen=True)
class BodyMesh:
    template_vertices: np.ndarray  # (N, 3)
    skin_weights: np.ndarray  # (N, K)
    shape_dirs: np.ndarray  # (N, 3, B)
    joint_regressor: np.ndarray  # (N, K)
    kinematic_parents: np.ndarray  # (K,)
    virtual_marker_indices: np.ndarray  # (M,)

    def __post_init__(self):
        n = self.template_vertices.shape[0]
        w = self.skin_weights
        if np.any(w < 0) or not np.allclose(w.sum(axis=1), 1.0, atol=1e-8, rtol=0):
            raise MeshError("skin weights must be nonnegative with rows summing to 1")
        if not np.allclose(self.joint_regressor.sum(axis=0), 1.0, atol=1e-8, rtol=0):
            raise MeshError("joint regressor columns must sum to 1")
        idx = np.asarray(self.virtual_marker_indices)
        if idx.size and (idx.min() < 0 or idx.max() >= n):
            raise MeshError("virtual marker index out of range")
        if len(np.unique(idx)) != idx.size:
            raise MeshError("virtual marker indices must be distinct")
        if self.shape_dirs.shape[:2] != (n, 3) or self.joint_regressor.shape[0] != n:
            raise MeshError("inconsistent vertex counts")

    @property
    def n_vertices(self) -> int:
        return self.template_vertices.shape[0]

    @property
    def n_joints(self) -> int:
        return self.skin_weights.shape[1]


@dataclass(frozen=True)
class SmplParams:
    theta: np.ndarray  # (24, 3) axis-angle
    beta: np.ndarray  # (10,)
    translation: np.ndarray  # (3,)

    def __post_init__(self):
        object.__setattr__(self, "theta", np.asarray(self.theta, dtype=float).reshape(-1, 3))
        object.__setattr__(self, "beta", np.asarray(self.beta, dtype=float).reshape(-1))
        object.__setattr__(self, "translation", np.asarray(self.translation, dtype=float).reshape(3))

    @classmethod
    def zeros(cls, n_joints: int = 24, n_betas: int = N_BETAS) -> "SmplParams":
        return cls(np.zeros((n_joints, 3)), np.zeros(n_betas), np.zeros(3))


def shape_vertices(mesh: BodyMesh, beta) -> np.ndarray:
    beta = np.asarray(beta, dtype=float)
    if beta.shape != (mesh.shape_dirs.shape[2],):
        raise MeshError(f"expected {mesh.shape_dirs.shape[2]} shape coefficients, got {beta.shape}")
    return mesh.template_vertices + mesh.shape_dirs @ beta


def regress_joints(vertices: np.ndarray, regressor: np.ndarray) -> np.ndarray:
    """Joint k is the W[:, k]-weighted sum of the vertices."""
    vertices = np.asarray(vertices, dtype=float)
    if vertices.ndim != 2 or vertices.shape[1] != 3 or regressor.shape[0] != vertices.shape[0]:
        raise MeshError(f"shape mismatch: vertices {vertices.shape}, regressor {regressor.shape}")
    return regressor.T @ vertices


def _global_transforms(theta: np.ndarray, joints: np.ndarray, parents: np.ndarray):
    """World rotations and joint displacements ``posed_k - rest_k``.

    Displacements are accumulated as ``d_k = d_p + (R_p - I)(J_k - J_p)`` so
    they are exactly zero in the rest pose.
    """
    K = len(parents)
    rots = np.zeros((K, 3, 3))
    disp = np.zeros((K, 3))
    eye = np.eye(3)
    for k in range(K):
        R = axis_angle_to_matrix(theta[k])
        p = parents[k]
        if p < 0:
            rots[k] = R
        else:
            rots[k] = rots[p] @ R
            disp[k] = disp[p] + (rots[p] - eye) @ (joints[k] - joints[p])
    return rots, disp


def skin(mesh: BodyMesh, params: SmplParams) -> tuple[np.ndarray, np.ndarray]:
    """Posed vertices (N, 3) and posed joints (K, 3)."""
    if not (np.all(np.isfinite(params.theta)) and np.all(np.isfinite(params.beta))
            and np.all(np.isfinite(params.translation))):
        raise MeshError("non-finite SMPL parameters")
    if params.theta.shape != (mesh.n_joints, 3):
        raise MeshError(f"theta must be ({mesh.n_joints}, 3), got {params.theta.shape}")
    shaped = shape_vertices(mesh, params.beta)
    joints = regress_joints(shaped, mesh.joint_regressor)
    rots, disp = _global_transforms(params.theta, joints, mesh.kinematic_parents)
    # v' = v + sum_k w_k [(R_k - I)(v - J_k) + d_k]
    rel = rots - np.eye(3)
    W = mesh.skin_weights
    moved = np.einsum("nk,kij,nkj->ni", W, rel, shaped[:, None, :] - joints[None, :, :]) + W @ disp
    return shaped + moved + params.translation, joints + disp + params.translation


def posed_joints(mesh: BodyMesh, params: SmplParams, rest_joints: np.ndarray | None = None) -> np.ndarray:
    """Posed joint centers only (skips vertex skinning)."""
    if rest_joints is None:
        rest_joints = regress_joints(shape_vertices(mesh, params.beta), mesh.joint_regressor)
    _, disp = _global_transforms(params.theta, rest_joints, mesh.kinematic_parents)
    return rest_joints + disp + params.translation


def posed_joints_jacobian(mesh: BodyMesh, params: SmplParams,
                          rest_joints: np.ndarray | None = None) -> np.ndarray:
    """d(posed joints)/d(theta), shape (3K, 3K).

    Rotating joint ``j`` by a small axis-angle increment moves every descendant
    ``k`` by ``-[p_k - p_j]_x A_j J_l(theta_j)``, where ``A_j`` is the parent's
    world rotation and ``J_l`` the left Jacobian of SO(3).
    """
    if rest_joints is None:
        rest_joints = regress_joints(shape_vertices(mesh, params.beta), mesh.joint_regressor)
    parents = mesh.kinematic_parents
    rots, disp = _global_transforms(params.theta, rest_joints, parents)
    trans = rest_joints + disp
    K = len(parents)
    anc = np.zeros((K, K), dtype=bool)
    for k in range(K):
        anc[k, k] = True
        if parents[k] >= 0:
            anc[k] |= anc[parents[k]]
    J = np.zeros((3 * K, 3 * K))
    for j in range(K):
        A = np.eye(3) if parents[j] < 0 else rots[parents[j]]
        M = A @ _left_jacobian(params.theta[j])
        for k in np.nonzero(anc[:, j])[0]:
            if k == j:
                continue
            d = trans[k] - trans[j]
            J[3 * k:3 * k + 3, 3 * j:3 * j + 3] = -skew(d) @ M
    return J


def _left_jacobian(w: np.ndarray) -> np.ndarray:
    phi = np.linalg.norm(w)
    K = skew(w)
    if phi < 1e-6:
        return np.eye(3) + 0.5 * K + K @ K / 6.0
    return (np.eye(3) + (1 - np.cos(phi)) / phi**2 * K
            + (phi - np.sin(phi)) / phi**3 * K @ K)


def extract_virtual_markers(posed_vertices: np.ndarray, indices) -> np.ndarray:
    idx = np.asarray(indices, dtype=int)
    if idx.size and (idx.min() < 0 or idx.max() >= len(posed_vertices)):
        raise MeshError("virtual marker index out of range")
    return posed_vertices[idx]


def default_marker_indices(n_vertices: int, count: int = N_VIRTUAL_MARKERS) -> np.ndarray:
    """Evenly strided vertex sample; ring vertices are laid out joint by joint so this covers the body."""
    if count > n_vertices:
        raise MeshError(f"cannot pick {count} markers from {n_vertices} vertices")
    return np.unique(np.round(np.linspace(0, n_vertices - 1, count)).astype(int))


# rest joint layout (meters), y up, +x to the body's left
_REST_JOINTS = np.array([
    [0.0, 0.92, 0.0], [0.09, 0.83, 0.0], [-0.09, 0.83, 0.0], [0.0, 1.02, -0.01],
    [0.10, 0.47, 0.01], [-0.10, 0.47, 0.01], [0.0, 1.15, -0.01], [0.10, 0.08, -0.02],
    [-0.10, 0.08, -0.02], [0.0, 1.21, 0.0], [0.11, 0.02, 0.10], [-0.11, 0.02, 0.10],
    [0.0, 1.43, -0.02], [0.07, 1.34, -0.01], [-0.07, 1.34, -0.01], [0.0, 1.55, 0.03],
    [0.18, 1.38, -0.02], [-0.18, 1.38, -0.02], [0.44, 1.37, -0.03], [-0.44, 1.37, -0.03],
    [0.69, 1.38, -0.02], [-0.69, 1.38, -0.02], [0.77, 1.38, -0.03], [-0.77, 1.38, -0.03],
])


def synthetic_body(seed: int = 0, ring: int = 8, radius: float = 0.05) -> BodyMesh:
    """Procedural body with SMPL tensor shapes.

    Each joint gets a symmetric vertex ring (so the uniform ring regressor
    reproduces the joint center exactly) and each bone gets a midpoint vertex.
    Shape directions 0 and 1 are height and girth; the rest are smooth random
    fields from ``seed``.
    """
    rng = np.random.default_rng(seed)
    K = len(SMPL_PARENTS)
    verts, owner = [], []
    for k in range(K):
        c = _REST_JOINTS[k]
        p = SMPL_PARENTS[k]
        axis = c - _REST_JOINTS[p] if p >= 0 else np.array([0.0, 1.0, 0.0])
        axis = axis / np.linalg.norm(axis)
        u = np.cross(axis, [0.0, 0.0, 1.0])
        if np.linalg.norm(u) < 1e-6:
            u = np.cross(axis, [1.0, 0.0, 0.0])
        u /= np.linalg.norm(u)
        v = np.cross(axis, u)
        for a in np.arange(ring) * 2 * np.pi / ring:
            verts.append(c + radius * (np.cos(a) * u + np.sin(a) * v))
            owner.append(k)
    n_ring = len(verts)
    for k in range(1, K):
        p = SMPL_PARENTS[k]
        mid = 0.5 * (_REST_JOINTS[k] + _REST_JOINTS[p])
        verts.append(mid + np.array([0.0, 0.0, radius]))
        owner.append(p)
    V = np.array(verts)
    N = len(V)

    d2 = np.sum((V[:, None, :] - _REST_JOINTS[None]) ** 2, axis=2)
    W = np.exp(-d2 / (2 * 0.06**2))
    W[np.arange(N), owner] += 1.0
    W[W < 1e-4] = 0.0
    W /= W.sum(axis=1, keepdims=True)

    R = np.zeros((N, K))
    for i in range(n_ring):
        R[i, owner[i]] = 1.0 / ring

    dirs = np.zeros((N, 3, N_BETAS))
    dirs[:, 1, 0] = 0.05 * V[:, 1]
    radial = V - _REST_JOINTS[owner]
    dirs[:, :, 1] = 0.2 * radial
    freqs = rng.normal(size=(N_BETAS - 2, 3, 3))
    phase = rng.uniform(0, 2 * np.pi, size=(N_BETAS - 2, 3))
    for b in range(N_BETAS - 2):
        dirs[:, :, b + 2] = 0.01 * np.sin(V @ freqs[b].T * 3.0 + phase[b])
    return BodyMesh(V, W, dirs, R, SMPL_PARENTS.copy(), default_marker_indices(N))


def save_body(mesh: BodyMesh, path: str | Path) -> None:
    header = {
        "format": "biokin-body-1",
        "n_vertices": mesh.n_vertices,
        "n_joints": mesh.n_joints,
        "n_betas": int(mesh.shape_dirs.shape[2]),
        "n_markers": int(len(mesh.virtual_marker_indices)),
    }
    buf = io.BytesIO()
    np.savez(buf, header=np.array(json.dumps(header)), template=mesh.template_vertices,
             skin_weights=mesh.skin_weights, shape_dirs=mesh.shape_dirs,
             joint_regressor=mesh.joint_regressor, parents=mesh.kinematic_parents,
             marker_indices=np.asarray(mesh.virtual_marker_indices))
    atomic_write_bytes(path, buf.getvalue())


def load_body(path: str | Path) -> BodyMesh:
    with np.load(path, allow_pickle=False) as data:
        header = json.loads(str(data["header"]))
        mesh = BodyMesh(data["template"], data["skin_weights"], data["shape_dirs"],
                        data["joint_regressor"], data["parents"], data["marker_indices"])
    if (mesh.n_vertices, mesh.n_joints, len(mesh.virtual_marker_indices)) != (
            header["n_vertices"], header["n_joints"], header["n_markers"]):
        raise MeshError(f"{path}: header dimensions disagree with arrays")
    return mesh
