"""Skeleton topology, pose <-> bone decomposition and pinhole projection.

Poses are root-relative joint positions in millimetres, shape ``(..., j, 3)``.
A pose is decomposed into ``j - 1`` bone lengths and unit bone directions,
one bone per non-root joint, ordered by child-joint index.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field
from typing import Iterable, Sequence

import numpy as np

from .errors import (
    BehindCameraError,
    CycleError,
    DegenerateBoneError,
    ForestError,
    ShapeError,
    ZeroDirectionError,
)

MIN_BONE_LENGTH = 1e-6  # mm
MIN_DEPTH = 1.0  # mm
_RENORM_TOL = 1e-9


@dataclass(frozen=True, eq=False)
class SkeletonTopology:
    joint_names: tuple[str, ...]
    parent: tuple[int, ...]
    root_index: int
    bones: tuple[tuple[int, int], ...] = field(init=False)
    bone_paths: dict[int, tuple[int, ...]] = field(init=False)
    nonadjacent_pairs: tuple[tuple[int, int], ...] = field(init=False)
    # path_matrix[k, b] == 1 iff bone b lies on the root -> k path
    path_matrix: np.ndarray = field(init=False, repr=False)

    def __post_init__(self):
        j = len(self.parent)
        bones = tuple((self.parent[c], c) for c in range(j) if c != self.root_index)
        bone_of_child = {c: b for b, (_, c) in enumerate(bones)}
        paths = {}
        for k in range(j):
            path = []
            node = k
            while node != self.root_index:
                path.append(bone_of_child[node])
                node = self.parent[node]
            paths[k] = tuple(reversed(path))
        M = np.zeros((j, j - 1))
        for k, path in paths.items():
            M[k, list(path)] = 1.0
        M.setflags(write=False)
        adjacent = {tuple(sorted(b)) for b in bones}
        pairs = tuple(
            (a, b) for a in range(j) for b in range(a + 1, j) if (a, b) not in adjacent
        )
        object.__setattr__(self, "bones", bones)
        object.__setattr__(self, "bone_paths", paths)
        object.__setattr__(self, "nonadjacent_pairs", pairs)
        object.__setattr__(self, "path_matrix", M)

    @property
    def num_joints(self) -> int:
        return len(self.parent)

    @property
    def num_bones(self) -> int:
        return len(self.parent) - 1

    def bone_index(self, child: int) -> int:
        for b, (_, c) in enumerate(self.bones):
            if c == child:
                return b
        raise IndexError(f"joint {child} is not the child of any bone")

    def symmetric_bone_pairs(self) -> list[tuple[int, int]]:
        """Pairs of (left, right) bone indices whose child joints mirror each other by name."""
        index = {name: i for i, name in enumerate(self.joint_names)}
        pairs = []
        for b, (_, c) in enumerate(self.bones):
            mirror = _mirror_name(self.joint_names[c])
            if mirror is None or mirror not in index:
                continue
            other = self.bone_index(index[mirror])
            if b < other:
                pairs.append((b, other))
        return pairs

    def topology_hash(self) -> str:
        payload = json.dumps(
            {"names": list(self.joint_names), "parent": list(self.parent), "root": self.root_index},
            sort_keys=True,
        )
        return hashlib.sha256(payload.encode()).hexdigest()[:16]

    def to_dict(self) -> dict:
        return {"names": list(self.joint_names), "parent": list(self.parent), "root": self.root_index}


def _mirror_name(name: str) -> str | None:
    for a, b in (("L", "R"), ("R", "L"), ("l_", "r_"), ("r_", "l_")):
        if name.startswith(a) and len(name) > len(a):
            rest = name[len(a):]
            if a in ("L", "R") and not rest[0].isupper():
                continue
            return b + rest
    return None


def build_topology(parent: Sequence[int], names: Sequence[str], root: int) -> SkeletonTopology:
    parent = [int(p) for p in parent]
    names = [str(n) for n in names]
    j = len(parent)
    if len(names) != j:
        raise ShapeError(f"{len(names)} names for {j} joints")
    if j < 2:
        raise ShapeError("a skeleton needs at least two joints")
    if not 0 <= root < j:
        raise IndexError(f"root {root} out of range for {j} joints")
    if parent[root] != -1:
        node, steps = parent[root], 0
        while 0 <= node < j and node != root and steps <= j:
            node, steps = parent[node], steps + 1
        if node == root:
            raise CycleError(f"root joint {root} lies on a parent cycle")
        raise ForestError(f"root joint {root} has parent {parent[root]}")
    for k, p in enumerate(parent):
        if k == root:
            continue
        if p == -1:
            raise ForestError(f"joint {k} is a second root")
        if not 0 <= p < j:
            raise IndexError(f"parent {p} of joint {k} out of range")
    for k in range(j):
        seen = set()
        node = k
        while node != root:
            if node in seen:
                # a cycle that never reaches the root leaves the root disconnected
                raise ForestError(f"joint {k} is not connected to root {root}")
            seen.add(node)
            node = parent[node]
    return SkeletonTopology(tuple(names), tuple(parent), root)


H36M_NAMES = (
    "Pelvis", "RHip", "RKnee", "RAnkle", "LHip", "LKnee", "LAnkle",
    "Spine", "Thorax", "Neck", "Head",
    "LShoulder", "LElbow", "LWrist", "RShoulder", "RElbow", "RWrist",
)
H36M_PARENT = (-1, 0, 1, 2, 0, 4, 5, 0, 7, 8, 9, 8, 11, 12, 8, 14, 15)

MPI14_NAMES = (
    "Neck", "Head", "RShoulder", "RElbow", "RWrist", "LShoulder", "LElbow", "LWrist",
    "RHip", "RKnee", "RAnkle", "LHip", "LKnee", "LAnkle",
)
MPI14_PARENT = (-1, 0, 0, 2, 3, 0, 5, 6, 0, 8, 9, 0, 11, 12)

# mm, indexed by child joint
_H36M_BASE = {
    "RHip": 130.0, "RKnee": 450.0, "RAnkle": 440.0,
    "LHip": 130.0, "LKnee": 450.0, "LAnkle": 440.0,
    "Spine": 230.0, "Thorax": 250.0, "Neck": 110.0, "Head": 115.0,
    "LShoulder": 150.0, "LElbow": 280.0, "LWrist": 250.0,
    "RShoulder": 150.0, "RElbow": 280.0, "RWrist": 250.0,
}
_MPI14_BASE = {
    "Head": 200.0, "RShoulder": 180.0, "RElbow": 280.0, "RWrist": 250.0,
    "LShoulder": 180.0, "LElbow": 280.0, "LWrist": 250.0,
    "RHip": 520.0, "RKnee": 450.0, "RAnkle": 440.0,
    "LHip": 520.0, "LKnee": 450.0, "LAnkle": 440.0,
}

TOPOLOGIES = {
    "h36m17": (H36M_PARENT, H36M_NAMES, 0, _H36M_BASE),
    "mpi14": (MPI14_PARENT, MPI14_NAMES, 0, _MPI14_BASE),
}


def default_topology(name: str = "h36m17") -> SkeletonTopology:
    parent, names, root, _ = TOPOLOGIES[name]
    return build_topology(parent, names, root)


def base_bone_lengths(topo: SkeletonTopology, name: str = "h36m17") -> np.ndarray:
    table = TOPOLOGIES[name][3]
    return np.array([table[topo.joint_names[c]] for _, c in topo.bones])


@dataclass
class BoneRepresentation:
    lengths: np.ndarray  # (..., j-1)
    directions: np.ndarray  # (..., j-1, 3)


def _check_pose(pose: np.ndarray, topo: SkeletonTopology) -> np.ndarray:
    pose = np.asarray(pose, dtype=np.float64)
    if pose.ndim < 2 or pose.shape[-2:] != (topo.num_joints, 3):
        raise ShapeError(f"pose shape {pose.shape} does not match {topo.num_joints} joints")
    return pose


def bone_vectors(pose: np.ndarray, topo: SkeletonTopology) -> np.ndarray:
    pose = _check_pose(pose, topo)
    par = np.array([p for p, _ in topo.bones])
    chi = np.array([c for _, c in topo.bones])
    return pose[..., chi, :] - pose[..., par, :]


def decompose(pose: np.ndarray, topo: SkeletonTopology) -> BoneRepresentation:
    vec = bone_vectors(pose, topo)
    lengths = np.linalg.norm(vec, axis=-1)
    if np.any(lengths < MIN_BONE_LENGTH):
        bad = np.argwhere(lengths < MIN_BONE_LENGTH)[0]
        raise DegenerateBoneError(f"bone {int(bad[-1])} shorter than {MIN_BONE_LENGTH} mm")
    return BoneRepresentation(lengths, vec / lengths[..., None])


def derived_lengths(pose: np.ndarray, topo: SkeletonTopology, floor: float = MIN_BONE_LENGTH):
    """Bone lengths of (possibly degenerate) poses, clamped at ``floor``.

    Returns ``(lengths, degenerate_mask)``.
    """
    lengths = np.linalg.norm(bone_vectors(pose, topo), axis=-1)
    degenerate = lengths < floor
    return np.maximum(lengths, floor), degenerate


def _unit_directions(directions: np.ndarray) -> np.ndarray:
    norms = np.linalg.norm(directions, axis=-1)
    if np.any(norms < MIN_BONE_LENGTH):
        raise ZeroDirectionError("bone direction with near-zero norm")
    if np.any(np.abs(norms - 1.0) > _RENORM_TOL):
        return directions / norms[..., None]
    return directions


def compose(bones: BoneRepresentation, topo: SkeletonTopology) -> np.ndarray:
    lengths = np.asarray(bones.lengths, dtype=np.float64)
    directions = np.asarray(bones.directions, dtype=np.float64)
    nb = topo.num_bones
    if lengths.shape[-1] != nb or directions.shape[-2:] != (nb, 3):
        raise ShapeError(f"expected {nb} bones, got lengths {lengths.shape}, directions {directions.shape}")
    vec = _unit_directions(directions) * lengths[..., None]
    # J_k = sum over the root->k path of length * direction
    return np.einsum("kb,...bc->...kc", topo.path_matrix, vec)


def joint_shifts(
    bones: BoneRepresentation,
    topo: SkeletonTopology,
    pairs: Iterable[tuple[int, int]] | None = None,
) -> dict[tuple[int, int], np.ndarray]:
    """Displacement J[k2] - J[k1] for each requested pair (default: non-adjacent pairs)."""
    joints = compose(bones, topo)
    pairs = topo.nonadjacent_pairs if pairs is None else pairs
    out = {}
    for a, b in pairs:
        if not (0 <= a < topo.num_joints and 0 <= b < topo.num_joints):
            raise IndexError(f"pair {(a, b)} out of range")
        out[(a, b)] = joints[..., b, :] - joints[..., a, :]
    return out


def shift_array(joints: np.ndarray, topo: SkeletonTopology) -> np.ndarray:
    """Shifts over the non-adjacent pair set as an array ``(..., |P|, 3)``."""
    pairs = np.array(topo.nonadjacent_pairs)
    return joints[..., pairs[:, 1], :] - joints[..., pairs[:, 0], :]


def rescale_pose(pose: np.ndarray, new_lengths: np.ndarray, topo: SkeletonTopology) -> np.ndarray:
    new_lengths = np.asarray(new_lengths, dtype=np.float64)
    if np.any(new_lengths <= 0):
        raise DegenerateBoneError("new bone lengths must be positive")
    rep = decompose(pose, topo)
    target = np.broadcast_to(new_lengths, rep.lengths.shape)
    return compose(BoneRepresentation(target, rep.directions), topo)


@dataclass
class CameraModel:
    fx: float
    fy: float
    cx: float
    cy: float
    rotation: np.ndarray = field(default_factory=lambda: np.eye(3))
    translation: np.ndarray = field(default_factory=lambda: np.zeros(3))
    width: int = 1000
    height: int = 1000

    def __post_init__(self):
        self.rotation = np.asarray(self.rotation, dtype=np.float64).reshape(3, 3)
        self.translation = np.asarray(self.translation, dtype=np.float64).reshape(3)
        R = self.rotation
        if not np.allclose(R @ R.T, np.eye(3), atol=1e-9) or np.linalg.det(R) < 0:
            raise ValueError("camera rotation must be orthonormal with determinant +1")

    def to_dict(self) -> dict:
        return {
            "fx": self.fx, "fy": self.fy, "cx": self.cx, "cy": self.cy,
            "rotation": self.rotation.tolist(), "translation": self.translation.tolist(),
            "width": self.width, "height": self.height,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "CameraModel":
        return cls(**d)


def look_at_camera(eye, target, focal=1000.0, width=1000, height=1000, up=(0.0, 0.0, 1.0)):
    """Camera at ``eye`` (world mm) looking at ``target``; camera y points down in the image."""
    eye = np.asarray(eye, dtype=np.float64)
    forward = np.asarray(target, dtype=np.float64) - eye
    forward /= np.linalg.norm(forward)
    right = np.cross(forward, np.asarray(up, dtype=np.float64))
    right /= np.linalg.norm(right)
    down = np.cross(forward, right)
    R = np.stack([right, down, forward])
    return CameraModel(focal, focal, width / 2, height / 2, R, -R @ eye, width, height)


def camera_points(camera: CameraModel, pose: np.ndarray, root_world: np.ndarray) -> np.ndarray:
    world = np.asarray(pose) + np.asarray(root_world)[..., None, :]
    return world @ camera.rotation.T + camera.translation


def project_pixels(camera: CameraModel, pose: np.ndarray, root_world) -> np.ndarray:
    pts = camera_points(camera, pose, root_world)
    z = pts[..., 2]
    if np.any(z <= MIN_DEPTH):
        raise BehindCameraError(f"point with camera depth {z.min():.3f} mm")
    u = camera.fx * pts[..., 0] / z + camera.cx
    v = camera.fy * pts[..., 1] / z + camera.cy
    return np.stack([u, v], axis=-1)


def normalize_pixels(pixels: np.ndarray, width: float, height: float) -> np.ndarray:
    return np.stack([2.0 * pixels[..., 0] / width - 1.0, 2.0 * pixels[..., 1] / height - 1.0], axis=-1)


def project(camera: CameraModel, pose: np.ndarray, root_world) -> np.ndarray:
    """Normalized keypoints in [-1, 1] (for points inside the image)."""
    return normalize_pixels(project_pixels(camera, pose, root_world), camera.width, camera.height)


def to_camera_frame(pose: np.ndarray, camera: CameraModel) -> np.ndarray:
    """Rotate root-relative world poses into the camera's axes (still root-relative)."""
    return np.asarray(pose) @ camera.rotation.T


def to_world_frame(pose: np.ndarray, camera: CameraModel) -> np.ndarray:
    return np.asarray(pose) @ camera.rotation


@dataclass
class PoseSequence:
    actor_id: str
    poses3d: np.ndarray  # (T, j, 3) root-relative, world axes
    root_world: np.ndarray | None = None  # (T, 3)
    keypoints2d: np.ndarray | None = None  # (T, j, 2) normalized
    visibility: np.ndarray | None = None  # (T, j)
    camera: CameraModel | None = None
    video_id: str = ""

    def __post_init__(self):
        self.poses3d = np.asarray(self.poses3d, dtype=np.float64)
        T = self.poses3d.shape[0]
        for name in ("root_world", "keypoints2d", "visibility"):
            arr = getattr(self, name)
            if arr is None:
                continue
            arr = np.asarray(arr, dtype=np.float64)
            if arr.shape[0] != T:
                raise ShapeError(f"{name} has {arr.shape[0]} frames, poses3d has {T}")
            setattr(self, name, arr)
        if self.visibility is not None and (
            np.any(self.visibility < 0) or np.any(self.visibility > 1)
        ):
            raise ValueError("visibility scores must lie in [0, 1]")

    @property
    def frames(self) -> int:
        return self.poses3d.shape[0]

    def camera_poses(self) -> np.ndarray:
        """Ground-truth poses in camera axes, the frame the networks predict in."""
        if self.camera is None:
            return self.poses3d
        return to_camera_frame(self.poses3d, self.camera)
