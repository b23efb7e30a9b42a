"""Biomechanical skeleton model: segment tree, joint DOFs, markers and scaling."""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import yaml


class SkeletonError(ValueError):
    """Raised for malformed or inconsistent skeleton definitions."""


class SkeletonParseError(SkeletonError):
    pass


class SkeletonValidationError(SkeletonError):
    pass


@dataclass(frozen=True)
class JointSpec:
    """One rigid segment and the joint connecting it to its parent.

    ``rest_offset`` is the parent-joint-to-this-joint vector in the parent
    segment frame. ``orientation`` holds the fixed X-Y-Z Euler angles (radians)
    of the joint relative to its parent.
    """

    name: str
    parent: str | None
    orientation: np.ndarray
    rest_offset: np.ndarray
    dof_axes: np.ndarray  # (D, 3) unit axes in the joint's local frame
    dof_ranges: np.ndarray  # (D, 2) radians

    @property
    def n_dof(self) -> int:
        return int(self.dof_axes.shape[0])


@dataclass(frozen=True)
class MarkerSpec:
    name: str
    segment: str
    local: np.ndarray


@dataclass(frozen=True)
class Pose:
    q_r: np.ndarray
    root_translation: np.ndarray = field(default_factory=lambda: np.zeros(3))

    def __post_init__(self):
        object.__setattr__(self, "q_r", np.asarray(self.q_r, dtype=float).reshape(-1))
        object.__setattr__(
            self, "root_translation", np.asarray(self.root_translation, dtype=float).reshape(3)
        )

    def as_vector(self) -> np.ndarray:
        return np.concatenate([self.q_r, self.root_translation])

    @classmethod
    def from_vector(cls, x: np.ndarray) -> "Pose":
        x = np.asarray(x, dtype=float)
        return cls(x[:-3].copy(), x[-3:].copy())


@dataclass(frozen=True)
class SkeletonModel:
    """The skeleton tree. Immutable; derived index tables are cached on construction.

    ``joints`` are topologically ordered. ``scales`` records the per-segment
    scale already folded into the offsets and marker positions.
    """

    joints: tuple[JointSpec, ...]
    markers: tuple[MarkerSpec, ...]
    scales: np.ndarray
    name: str = "skeleton"

    def __post_init__(self):
        names = [j.name for j in self.joints]
        index = {n: i for i, n in enumerate(names)}
        parents = np.array(
            [-1 if j.parent is None else index[j.parent] for j in self.joints], dtype=int
        )
        counts = np.array([j.n_dof for j in self.joints], dtype=int)
        starts = np.concatenate([[0], np.cumsum(counts)[:-1]]).astype(int)
        marker_seg = np.array([index[m.segment] for m in self.markers], dtype=int)
        # ancestors[i, j] is True when joint j lies on the root path of joint i (inclusive)
        n = len(names)
        anc = np.zeros((n, n), dtype=bool)
        for i in range(n):
            anc[i, i] = True
            if parents[i] >= 0:
                anc[i] |= anc[parents[i]]
        object.__setattr__(self, "_index", index)
        object.__setattr__(self, "_parents", parents)
        object.__setattr__(self, "_dof_counts", counts)
        object.__setattr__(self, "_dof_starts", starts)
        object.__setattr__(self, "_marker_segment", marker_seg)
        object.__setattr__(self, "_ancestors", anc)

    @property
    def n_joints(self) -> int:
        return len(self.joints)

    @property
    def n_dof(self) -> int:
        return int(self._dof_counts.sum())

    @property
    def n_markers(self) -> int:
        return len(self.markers)

    @property
    def joint_names(self) -> list[str]:
        return [j.name for j in self.joints]

    @property
    def marker_names(self) -> list[str]:
        return [m.name for m in self.markers]

    @property
    def parents(self) -> np.ndarray:
        return self._parents

    @property
    def dof_starts(self) -> np.ndarray:
        return self._dof_starts

    @property
    def dof_counts(self) -> np.ndarray:
        return self._dof_counts

    @property
    def marker_segment(self) -> np.ndarray:
        return self._marker_segment

    @property
    def ancestors(self) -> np.ndarray:
        return self._ancestors

    def joint_index(self, name: str) -> int:
        return self._index[name]

    def dof_ranges(self) -> np.ndarray:
        """(DOF, 2) stacked coordinate limits in DOF order."""
        if self.n_dof == 0:
            return np.zeros((0, 2))
        return np.concatenate([j.dof_ranges for j in self.joints if j.n_dof], axis=0)

    def dof_labels(self) -> list[str]:
        labels = []
        for j in self.joints:
            labels.extend(f"{j.name}_{k}" for k in range(j.n_dof))
        return labels

    def zero_pose(self) -> Pose:
        return Pose(np.zeros(self.n_dof), np.zeros(3))

    def markers_on(self, segment: str) -> list[int]:
        i = self._index[segment]
        return [k for k, s in enumerate(self._marker_segment) if s == i]


def _vec3(value, what: str) -> np.ndarray:
    arr = np.asarray(value, dtype=float)
    if arr.shape != (3,) or not np.all(np.isfinite(arr)):
        raise SkeletonParseError(f"{what}: expected 3 finite numbers, got {value!r}")
    return arr


def skeleton_from_dict(doc: dict) -> SkeletonModel:
    """Build a model from an already-parsed definition document."""
    if not isinstance(doc, dict) or "segments" not in doc:
        raise SkeletonParseError("document must be a mapping with a 'segments' list")
    segs = doc["segments"]
    if not isinstance(segs, list) or not segs:
        raise SkeletonParseError("'segments' must be a nonempty list")

    raw: list[tuple[JointSpec, list[MarkerSpec]]] = []
    seen: set[str] = set()
    for k, seg in enumerate(segs):
        if not isinstance(seg, dict) or "name" not in seg:
            raise SkeletonParseError(f"segment #{k}: missing 'name'")
        name = str(seg["name"])
        if name in seen:
            raise SkeletonValidationError(f"duplicate segment name {name!r}")
        seen.add(name)
        parent = seg.get("parent")
        parent = None if parent in (None, "", "none") else str(parent)
        orient = np.deg2rad(_vec3(seg.get("orientation_deg", [0, 0, 0]), f"{name}.orientation_deg"))
        offset = _vec3(seg.get("offset_m", [0, 0, 0]), f"{name}.offset_m")
        axes, ranges = [], []
        for d, dof in enumerate(seg.get("dof") or []):
            ax = _vec3(dof.get("axis"), f"{name}.dof[{d}].axis")
            norm = np.linalg.norm(ax)
            if norm == 0:
                raise SkeletonValidationError(f"{name}.dof[{d}]: zero axis")
            lo, hi = (float(v) for v in dof.get("range_deg", [-180, 180]))
            if not lo < hi:
                raise SkeletonValidationError(f"{name}.dof[{d}]: empty range [{lo}, {hi}]")
            axes.append(ax / norm)
            ranges.append(np.deg2rad([lo, hi]))
        if len(axes) > 3:
            raise SkeletonValidationError(f"{name}: more than 3 DOF")
        axes_arr = np.array(axes).reshape(-1, 3)
        if len(axes) and np.linalg.matrix_rank(axes_arr, tol=1e-8) < len(axes):
            raise SkeletonValidationError(f"{name}: DOF axes are linearly dependent")
        markers = []
        for mk in seg.get("markers") or []:
            markers.append(MarkerSpec(str(mk["name"]), name, _vec3(mk.get("local_m"), f"marker {mk.get('name')}")))
        joint = JointSpec(name, parent, orient, offset, axes_arr, np.array(ranges).reshape(-1, 2))
        raw.append((joint, markers))

    by_name = {j.name: (j, m) for j, m in raw}
    roots = [j.name for j, _ in raw if j.parent is None]
    if len(roots) != 1:
        raise SkeletonValidationError(f"expected exactly one root, found {len(roots)}")
    for j, _ in raw:
        if j.parent == j.name:
            raise SkeletonValidationError(f"cycle: segment {j.name!r} is its own parent")
        if j.parent is not None and j.parent not in by_name:
            raise SkeletonValidationError(f"segment {j.name!r}: unknown parent {j.parent!r}")

    # topological order, parents first; a document that is already ordered keeps its order
    order: list[str] = []
    placed: set[str] = set()
    pending = [j.name for j, _ in raw]
    while pending:
        ready = next((n for n in pending if by_name[n][0].parent is None or by_name[n][0].parent in placed), None)
        if ready is None:
            raise SkeletonValidationError(f"cycle among segments {pending}")
        order.append(ready)
        placed.add(ready)
        pending.remove(ready)

    joints = tuple(by_name[n][0] for n in order)
    markers = tuple(mk for n in order for mk in by_name[n][1])
    mnames = [m.name for m in markers]
    if len(set(mnames)) != len(mnames):
        raise SkeletonValidationError("duplicate marker names")
    return SkeletonModel(joints, markers, np.ones((len(joints), 3)), str(doc.get("name", "skeleton")))


def load_skeleton(definition_text: str) -> SkeletonModel:
    """Parse a skeleton definition document (YAML or JSON text).

    Angles in the document are degrees and are converted to radians.
    """
    try:
        doc = yaml.safe_load(definition_text)
    except yaml.YAMLError as exc:
        raise SkeletonParseError(f"malformed document: {exc}") from exc
    return skeleton_from_dict(doc)


def load_skeleton_file(path: str | Path) -> SkeletonModel:
    return load_skeleton(Path(path).read_text())


def builtin_skeleton(name: str = "full_body_24") -> SkeletonModel:
    """Load one of the shipped definitions: ``full_body_24`` or ``chain3``."""
    path = Path(__file__).parent / "data" / f"{name}.yaml"
    return load_skeleton_file(path)


def builtin_skeleton_path(name: str = "full_body_24") -> Path:
    return Path(__file__).parent / "data" / f"{name}.yaml"


def apply_scales(model: SkeletonModel, scales) -> SkeletonModel:
    """Scale segment geometry.

    Each segment's child offsets and attached marker positions are multiplied
    componentwise by that segment's scale. The root's own offset is left alone.
    """
    s = np.asarray(scales, dtype=float)
    if s.shape != (model.n_joints, 3):
        raise SkeletonValidationError(f"expected scales of shape ({model.n_joints}, 3), got {s.shape}")
    if not np.all(s > 0):
        raise SkeletonValidationError("scale components must be positive")
    joints = []
    for j, p in zip(model.joints, model.parents):
        off = j.rest_offset if p < 0 else j.rest_offset * s[p]
        joints.append(dataclasses.replace(j, rest_offset=off))
    markers = tuple(
        dataclasses.replace(m, local=m.local * s[seg]) for m, seg in zip(model.markers, model.marker_segment)
    )
    return SkeletonModel(tuple(joints), markers, model.scales * s, model.name)


def clamp_pose(model: SkeletonModel, pose: Pose) -> Pose:
    if pose.q_r.shape != (model.n_dof,):
        raise ValueError(f"pose has {pose.q_r.size} coordinates, model has {model.n_dof} DOF")
    r = model.dof_ranges()
    return Pose(np.minimum(np.maximum(pose.q_r, r[:, 0]), r[:, 1]), pose.root_translation.copy())


def ik_readiness(model: SkeletonModel) -> list[str]:
    """Segments with fewer attached markers than DOF (empty list means IK-ready)."""
    problems = []
    for i, j in enumerate(model.joints):
        n = int(np.sum(model.marker_segment == i))
        if n < j.n_dof:
            problems.append(f"{j.name}: {n} markers for {j.n_dof} DOF")
    return problems


def random_pose(model: SkeletonModel, rng: np.random.Generator, margin: float = 0.0,
                translation_scale: float = 0.0) -> Pose:
    """Uniform pose inside the joint ranges, shrunk by ``margin`` radians at each end."""
    r = model.dof_ranges()
    lo, hi = r[:, 0] + margin, r[:, 1] - margin
    q = lo + (hi - lo) * rng.random(model.n_dof)
    return Pose(q, translation_scale * rng.standard_normal(3))
