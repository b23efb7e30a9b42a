"""CSV formats for markers, poses, scales and 2D keypoints.

All numbers are written with 9 significant digits so repeated runs produce
identical bytes. Writes go to a temporary file that is renamed into place.
"""

from __future__ import annotations

import csv
import io
import os
import tempfile
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .ik import MarkerFrame
from .skeleton import Pose, SkeletonModel

MARKER_HEADER = ["frame", "marker", "x", "y", "z", "visible"]
KEYPOINT_HEADER = ["frame", "joint", "u", "v", "confidence"]
SCALE_HEADER = ["segment", "sx", "sy", "sz", "solved"]


class FormatError(ValueError):
    """Malformed input file; the message starts with ``<file>:<line>:``."""


def fmt(x: float) -> str:
    return "%.9g" % x


def pose_header(n_dof: int) -> list[str]:
    return ["frame"] + [f"coord_{i}" for i in range(n_dof)] + ["tx", "ty", "tz"]


def atomic_write_bytes(path, data: bytes) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.", suffix=".tmp")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def atomic_write_text(path, text: str) -> None:
    atomic_write_bytes(path, text.encode())


def _csv_text(header, rows) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    w.writerows(rows)
    return buf.getvalue()


def _read_rows(path, header):
    """Yield ``(line_number, row)`` after checking the header."""
    path = Path(path)
    try:
        text = path.read_text()
    except OSError as exc:
        raise FormatError(f"{path}: cannot read ({exc.strerror})") from None
    reader = csv.reader(io.StringIO(text))
    try:
        first = next(reader)
    except StopIteration:
        raise FormatError(f"{path}:1: empty file") from None
    if [h.strip() for h in first] != list(header):
        raise FormatError(f"{path}:1: expected header {','.join(header)}")
    for row in reader:
        if not row or all(not c.strip() for c in row):
            continue
        if len(row) != len(header):
            raise FormatError(f"{path}:{reader.line_num}: expected {len(header)} fields, got {len(row)}")
        yield reader.line_num, [c.strip() for c in row]


def _num(path, line, text, kind=float):
    try:
        return kind(text)
    except ValueError:
        raise FormatError(f"{path}:{line}: bad number {text!r}") from None


def _check_frames(path, frames_seen: list[int], lines: list[int]) -> int:
    """Frames must be 0-based, contiguous and non-decreasing in file order."""
    expected = 0
    for f, line in zip(frames_seen, lines):
        if f == expected - 1:
            continue
        if f != expected:
            raise FormatError(f"{path}:{line}: frame {f} out of sequence (expected {expected})")
        expected += 1
    return expected


# markers -------------------------------------------------------------------

def write_markers(path, marker_names, positions, visible) -> None:
    """``positions`` is (F, K, 3) meters, ``visible`` (F, K) bool; hidden markers are written as nan."""
    P = np.asarray(positions, dtype=float)
    V = np.asarray(visible, dtype=bool)
    rows = []
    for f in range(P.shape[0]):
        for k, name in enumerate(marker_names):
            xyz = [fmt(v) for v in P[f, k]] if V[f, k] else ["nan"] * 3
            rows.append([f, name, *xyz, int(V[f, k])])
    atomic_write_text(path, _csv_text(MARKER_HEADER, rows))


def read_markers(path, model: SkeletonModel | None = None) -> list[MarkerFrame]:
    frames: list[dict] = []
    seen, lines = [], []
    known = set(model.marker_names) if model is not None else None
    for line, row in _read_rows(path, MARKER_HEADER):
        f = _num(path, line, row[0], int)
        name = row[1]
        if known is not None and name not in known:
            raise FormatError(f"{path}:{line}: unknown marker {name!r}")
        xyz = np.array([_num(path, line, c) for c in row[2:5]])
        vis = row[5]
        if vis not in ("0", "1"):
            raise FormatError(f"{path}:{line}: visible must be 0 or 1, got {vis!r}")
        if vis == "1" and not np.all(np.isfinite(xyz)):
            raise FormatError(f"{path}:{line}: visible marker with non-finite position")
        seen.append(f)
        lines.append(line)
        while len(frames) <= f:
            frames.append({"pos": {}, "vis": {}})
        if name in frames[f]["pos"]:
            raise FormatError(f"{path}:{line}: duplicate marker {name!r} in frame {f}")
        frames[f]["pos"][name] = np.where(np.isfinite(xyz), xyz, 0.0)
        frames[f]["vis"][name] = vis == "1"
    if not seen:
        raise FormatError(f"{path}:2: no marker rows")
    _check_frames(path, seen, lines)
    return [MarkerFrame(d["pos"], d["vis"]) for d in frames]


# poses ---------------------------------------------------------------------

def write_poses(path, poses: list[Pose | None], n_dof: int) -> None:
    """Failed frames (``None``) are written as rows of nan."""
    rows = []
    for f, p in enumerate(poses):
        vals = ["nan"] * (n_dof + 3) if p is None else [fmt(v) for v in p.as_vector()]
        rows.append([f, *vals])
    atomic_write_text(path, _csv_text(pose_header(n_dof), rows))


def read_poses(path, n_dof: int | None = None) -> np.ndarray:
    """Return an (F, D + 3) array of ``[q_r..., tx, ty, tz]`` rows."""
    path = Path(path)
    if n_dof is None:
        try:
            with open(path) as fh:
                head = fh.readline().strip().split(",")
        except OSError as exc:
            raise FormatError(f"{path}: cannot read ({exc.strerror})") from None
        n_dof = max(len(head) - 4, 0)
    out, seen, lines = [], [], []
    for line, row in _read_rows(path, pose_header(n_dof)):
        seen.append(_num(path, line, row[0], int))
        lines.append(line)
        out.append([_num(path, line, c) for c in row[1:]])
    if not out:
        raise FormatError(f"{path}:2: no pose rows")
    if seen != list(range(len(seen))):
        bad = next(i for i, f in enumerate(seen) if f != i)
        raise FormatError(f"{path}:{lines[bad]}: frame {seen[bad]} out of sequence (expected {bad})")
    return np.array(out)


# scales --------------------------------------------------------------------

def write_scales(path, model: SkeletonModel, scales, solved=None) -> None:
    S = np.asarray(scales, dtype=float).reshape(model.n_joints, 3)
    ok = np.ones(model.n_joints, bool) if solved is None else np.asarray(solved).reshape(model.n_joints, -1).any(axis=1)
    rows = [[name, *(fmt(v) for v in S[i]), int(ok[i])] for i, name in enumerate(model.joint_names)]
    atomic_write_text(path, _csv_text(SCALE_HEADER, rows))


def read_scales(path, model: SkeletonModel) -> np.ndarray:
    S = np.ones((model.n_joints, 3))
    for line, row in _read_rows(path, SCALE_HEADER):
        try:
            i = model.joint_index(row[0])
        except KeyError:
            raise FormatError(f"{path}:{line}: unknown segment {row[0]!r}") from None
        S[i] = [_num(path, line, c) for c in row[1:4]]
        if not np.all(S[i] > 0):
            raise FormatError(f"{path}:{line}: scales must be positive")
    return S


# 2D keypoints ----------------------------------------------------------------

@dataclass
class KeypointTrack:
    uv: np.ndarray  # (F, J, 2) pixels
    confidence: np.ndarray  # (F, J)


def write_keypoints(path, uv, confidence) -> None:
    U = np.asarray(uv, dtype=float)
    C = np.asarray(confidence, dtype=float)
    rows = [[f, j, fmt(U[f, j, 0]), fmt(U[f, j, 1]), fmt(C[f, j])]
            for f in range(U.shape[0]) for j in range(U.shape[1])]
    atomic_write_text(path, _csv_text(KEYPOINT_HEADER, rows))


def read_keypoints(path) -> KeypointTrack:
    entries = {}
    for line, row in _read_rows(path, KEYPOINT_HEADER):
        f = _num(path, line, row[0], int)
        j = _num(path, line, row[1], int)
        u, v, c = (_num(path, line, x) for x in row[2:])
        if f < 0 or j < 0:
            raise FormatError(f"{path}:{line}: negative frame or joint index")
        if not 0.0 <= c <= 1.0:
            raise FormatError(f"{path}:{line}: confidence {c} outside [0, 1]")
        if (f, j) in entries:
            raise FormatError(f"{path}:{line}: duplicate entry for frame {f}, joint {j}")
        entries[(f, j)] = (u, v, c, line)
    if not entries:
        raise FormatError(f"{path}:2: no keypoint rows")
    F = max(k[0] for k in entries) + 1
    J = max(k[1] for k in entries) + 1
    if len(entries) != F * J:
        missing = next((f, j) for f in range(F) for j in range(J) if (f, j) not in entries)
        raise FormatError(f"{path}: missing keypoint for frame {missing[0]}, joint {missing[1]}")
    uv = np.zeros((F, J, 2))
    conf = np.zeros((F, J))
    for (f, j), (u, v, c, _) in entries.items():
        uv[f, j] = (u, v)
        conf[f, j] = c
    return KeypointTrack(uv, conf)


def write_key_values(path, items: dict, table_header=None, table_rows=None) -> None:
    """Key/value report, optionally followed by a delimited table section."""
    lines = []
    for k, v in items.items():
        lines.append(f"{k} = {fmt(v) if isinstance(v, float) else v}")
    if table_header is not None:
        lines.append("")
        lines.append(_csv_text(table_header, table_rows or []).rstrip("\n"))
    atomic_write_text(path, "\n".join(lines) + "\n")
