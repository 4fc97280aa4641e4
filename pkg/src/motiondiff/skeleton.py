"""Kinematic tree, quaternion forward kinematics, and foot-contact detection."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import torch

from .errors import ShapeError, ValidationError

QUAT_NORM_TOL = 1e-6

# Contact rule defaults: a foot is in contact when it moves less than
# VEL_THRESH per frame and sits lower than HEIGHT_THRESH above the ground
# plane, both with strict "<" comparisons.
DEFAULT_VEL_THRESH = 0.01
DEFAULT_HEIGHT_THRESH = 0.05


# ---------------------------------------------------------------------------
# Quaternion helpers (w, x, y, z convention, numpy)
# ---------------------------------------------------------------------------

def quat_identity(shape=()):
    q = np.zeros(shape + (4,), dtype=np.float64)
    q[..., 0] = 1.0
    return q


def quat_from_axis_angle(axis, angle):
    """Unit quaternion rotating by `angle` (radians) about `axis`.

    Broadcasts: axis (..., 3), angle (...).
    """
    axis = np.asarray(axis, dtype=np.float64)
    angle = np.asarray(angle, dtype=np.float64)
    norm = np.linalg.norm(axis, axis=-1, keepdims=True)
    if np.any(norm < 1e-12):
        raise ValidationError("rotation axis must be non-zero")
    u = axis / norm
    half = angle[..., None] / 2.0
    q = np.concatenate([np.cos(half), np.sin(half) * u], axis=-1)
    return q


def quat_mul(a, b):
    """Hamilton product a * b, broadcasting over leading dims."""
    aw, ax, ay, az = a[..., 0], a[..., 1], a[..., 2], a[..., 3]
    bw, bx, by, bz = b[..., 0], b[..., 1], b[..., 2], b[..., 3]
    return np.stack(
        [
            aw * bw - ax * bx - ay * by - az * bz,
            aw * bx + ax * bw + ay * bz - az * by,
            aw * by - ax * bz + ay * bw + az * bx,
            aw * bz + ax * by - ay * bx + az * bw,
        ],
        axis=-1,
    )


def quat_normalize(q, eps=1e-12):
    q = np.asarray(q, dtype=np.float64)
    return q / np.maximum(np.linalg.norm(q, axis=-1, keepdims=True), eps)


def quat_to_rotmat(q: torch.Tensor) -> torch.Tensor:
    """Unit quaternions (..., 4) -> rotation matrices (..., 3, 3). Differentiable."""
    w, x, y, z = q.unbind(-1)
    xx, yy, zz = x * x, y * y, z * z
    wx, wy, wz = w * x, w * y, w * z
    xy, xz, yz = x * y, x * z, y * z
    m = torch.stack(
        [
            1 - 2 * (yy + zz), 2 * (xy - wz), 2 * (xz + wy),
            2 * (xy + wz), 1 - 2 * (xx + zz), 2 * (yz - wx),
            2 * (xz - wy), 2 * (yz + wx), 1 - 2 * (xx + yy),
        ],
        dim=-1,
    )
    return m.reshape(q.shape[:-1] + (3, 3))


# ---------------------------------------------------------------------------
# Domain types
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class Skeleton:
    """Kinematic tree rooted at joint 0, with rest-pose bone offsets in meters.

    `parent_index[0]` is None; `offsets[j]` is the bone vector from parent j's
    position to joint j in the rest pose. The ground is the plane
    y = ground_height (y-up).
    """

    name: str
    joint_names: tuple
    parent_index: tuple
    offsets: np.ndarray  # (J, 3) float64, read-only
    foot_joints: tuple
    ground_height: float = 0.0
    _topo_order: tuple = field(init=False, repr=False, compare=False, default=())

    def __post_init__(self):
        offsets = np.ascontiguousarray(np.asarray(self.offsets, dtype=np.float64))
        j = len(self.joint_names)
        if offsets.shape != (j, 3):
            raise ShapeError(f"offsets must be ({j}, 3), got {offsets.shape}")
        if len(self.parent_index) != j:
            raise ShapeError("parent_index length must equal joint count")
        if j < 1 or self.parent_index[0] is not None:
            raise ValidationError("joint 0 must be the root (parent None)")
        for i, p in enumerate(self.parent_index[1:], start=1):
            if not isinstance(p, int) or not (0 <= p < j) or p == i:
                raise ValidationError(f"joint {i} has invalid parent {p!r}")
        order = _topological_order(self.parent_index)
        norms = np.linalg.norm(offsets[1:], axis=-1)
        if np.any(norms <= 0.0):
            bad = 1 + int(np.argmin(norms))
            raise ValidationError(f"non-root joint {bad} has zero-length offset")
        for f in self.foot_joints:
            if not (0 <= f < j):
                raise ValidationError(f"foot joint index {f} out of range")
        offsets.setflags(write=False)
        object.__setattr__(self, "offsets", offsets)
        object.__setattr__(self, "joint_names", tuple(self.joint_names))
        object.__setattr__(self, "parent_index", tuple(self.parent_index))
        object.__setattr__(self, "foot_joints", tuple(int(f) for f in self.foot_joints))
        object.__setattr__(self, "_topo_order", order)

    @property
    def num_joints(self) -> int:
        return len(self.joint_names)

    @property
    def topo_order(self) -> tuple:
        """Joint indices in parent-before-child order, starting at the root."""
        return self._topo_order

    def joint_index(self, name: str) -> int:
        try:
            return self.joint_names.index(name)
        except ValueError:
            raise ValidationError(f"unknown joint {name!r}") from None

    def to_json(self) -> dict:
        return {
            "name": self.name,
            "joint_names": list(self.joint_names),
            "parent_index": [None] + [int(p) for p in self.parent_index[1:]],
            "offsets": self.offsets.tolist(),
            "foot_joints": list(self.foot_joints),
            "ground_height": float(self.ground_height),
        }

    @classmethod
    def from_json(cls, data: dict) -> "Skeleton":
        return cls(
            name=data["name"],
            joint_names=tuple(data["joint_names"]),
            parent_index=tuple(data["parent_index"]),
            offsets=np.asarray(data["offsets"], dtype=np.float64),
            foot_joints=tuple(data["foot_joints"]),
            ground_height=float(data["ground_height"]),
        )


def _topological_order(parent_index) -> tuple:
    j = len(parent_index)
    children = {i: [] for i in range(j)}
    for i, p in enumerate(parent_index[1:], start=1):
        children[p].append(i)
    order, stack, seen = [], [0], set()
    while stack:
        node = stack.pop()
        if node in seen:
            raise ValidationError("parent graph contains a cycle")
        seen.add(node)
        order.append(node)
        stack.extend(reversed(children[node]))
    if len(order) != j:
        missing = sorted(set(range(j)) - seen)
        raise ValidationError(f"joints {missing} unreachable from the root")
    return tuple(order)


@dataclass(frozen=True)
class PoseRotations:
    """Per-frame root translation (N, 3) and local unit quaternions (N, J, 4)."""

    root_translation: np.ndarray
    joint_rotation: np.ndarray

    def __post_init__(self):
        root = np.ascontiguousarray(np.asarray(self.root_translation, dtype=np.float64))
        quats = np.ascontiguousarray(np.asarray(self.joint_rotation, dtype=np.float64))
        if root.ndim != 2 or root.shape[1] != 3:
            raise ShapeError(f"root_translation must be (N, 3), got {root.shape}")
        if quats.ndim != 3 or quats.shape[2] != 4:
            raise ShapeError(f"joint_rotation must be (N, J, 4), got {quats.shape}")
        if quats.shape[0] != root.shape[0]:
            raise ShapeError("root_translation and joint_rotation frame counts differ")
        err = np.abs(np.linalg.norm(quats, axis=-1) - 1.0)
        if np.max(err) > QUAT_NORM_TOL:
            raise ValidationError(
                f"quaternion norm deviates from 1 by {np.max(err):.2e} "
                f"(tolerance {QUAT_NORM_TOL:.0e})"
            )
        root.setflags(write=False)
        quats.setflags(write=False)
        object.__setattr__(self, "root_translation", root)
        object.__setattr__(self, "joint_rotation", quats)

    @property
    def num_frames(self) -> int:
        return self.root_translation.shape[0]

    @property
    def num_joints(self) -> int:
        return self.joint_rotation.shape[1]


@dataclass(frozen=True)
class ContactMask:
    """Per-frame binary contact labels, one column per skeleton foot joint."""

    values: np.ndarray  # (N, num_foot) float32 in {0, 1}

    def __post_init__(self):
        v = np.ascontiguousarray(np.asarray(self.values, dtype=np.float32))
        if v.ndim != 2:
            raise ShapeError(f"contact mask must be 2-D, got shape {v.shape}")
        if not np.all((v == 0.0) | (v == 1.0)):
            raise ValidationError("contact mask entries must be exactly 0 or 1")
        v.setflags(write=False)
        object.__setattr__(self, "values", v)

    @property
    def num_frames(self) -> int:
        return self.values.shape[0]


# ---------------------------------------------------------------------------
# Forward kinematics
# ---------------------------------------------------------------------------

def fk_positions(
    skeleton: Skeleton,
    root_translation: torch.Tensor,
    quats: torch.Tensor,
) -> torch.Tensor:
    """Differentiable FK core: (..., 3) root + (..., J, 4) unit quats -> (..., J, 3).

    Assumes quaternions are already normalized; callers that decode them from
    noisy feature channels must renormalize first.
    """
    if quats.shape[-2] != skeleton.num_joints:
        raise ShapeError(
            f"pose has {quats.shape[-2]} joints, skeleton has {skeleton.num_joints}"
        )
    rot = quat_to_rotmat(quats)  # (..., J, 3, 3)
    offsets = torch.tensor(skeleton.offsets, dtype=quats.dtype, device=quats.device)
    global_rot = [None] * skeleton.num_joints
    global_pos = [None] * skeleton.num_joints
    for j in skeleton.topo_order:
        if j == 0:
            global_rot[0] = rot[..., 0, :, :]
            global_pos[0] = root_translation
        else:
            p = skeleton.parent_index[j]
            global_pos[j] = global_pos[p] + (global_rot[p] @ offsets[j])
            global_rot[j] = global_rot[p] @ rot[..., j, :, :]
    return torch.stack(global_pos, dim=-2)


def forward_kinematics(skeleton: Skeleton, pose: PoseRotations) -> np.ndarray:
    """Global joint positions (N, J, 3) for a validated rotation pose."""
    if pose.num_frames < 1:
        raise ValidationError("pose must have at least one frame")
    if pose.num_joints != skeleton.num_joints:
        raise ShapeError(
            f"pose has {pose.num_joints} joints, skeleton has {skeleton.num_joints}"
        )
    # frozen poses hold read-only arrays; torch wants writable buffers
    root = torch.from_numpy(pose.root_translation.copy())
    quats = torch.from_numpy(pose.joint_rotation.copy())
    return fk_positions(skeleton, root, quats).numpy()


def detect_foot_contacts(
    positions: np.ndarray,
    skeleton: Skeleton,
    vel_thresh: float = DEFAULT_VEL_THRESH,
    height_thresh: float = DEFAULT_HEIGHT_THRESH,
) -> ContactMask:
    """Threshold-based contact labels from global joint positions (N, J, 3).

    Frame i is a contact for foot joint j iff the displacement to frame i+1 is
    strictly below vel_thresh and the height above ground is strictly below
    height_thresh. The last frame copies the second-to-last decision.
    """
    positions = np.asarray(positions, dtype=np.float64)
    if positions.ndim != 3 or positions.shape[2] != 3:
        raise ShapeError(f"positions must be (N, J, 3), got {positions.shape}")
    n = positions.shape[0]
    if n < 2:
        raise ValidationError("contact detection needs at least 2 frames")
    feet = positions[:, list(skeleton.foot_joints), :]  # (N, nf, 3)
    disp = np.linalg.norm(feet[1:] - feet[:-1], axis=-1)  # (N-1, nf)
    height = feet[:-1, :, 1] - skeleton.ground_height
    contact = (disp < vel_thresh) & (height < height_thresh)
    full = np.concatenate([contact, contact[-1:]], axis=0)
    return ContactMask(full.astype(np.float32))


# ---------------------------------------------------------------------------
# Default desk-scale skeleton: 17 joints, ankles as feet
# ---------------------------------------------------------------------------

_DESK17 = [
    # name, parent, offset (x left, y up, z forward)
    ("pelvis", None, (0.0, 0.0, 0.0)),
    ("spine", 0, (0.0, 0.12, 0.0)),
    ("chest", 1, (0.0, 0.15, 0.0)),
    ("neck", 2, (0.0, 0.15, 0.0)),
    ("head", 3, (0.0, 0.12, 0.0)),
    ("left_shoulder", 2, (0.18, 0.10, 0.0)),
    ("left_elbow", 5, (0.28, 0.0, 0.0)),
    ("left_wrist", 6, (0.26, 0.0, 0.0)),
    ("right_shoulder", 2, (-0.18, 0.10, 0.0)),
    ("right_elbow", 8, (-0.28, 0.0, 0.0)),
    ("right_wrist", 9, (-0.26, 0.0, 0.0)),
    ("left_hip", 0, (0.10, -0.05, 0.0)),
    ("left_knee", 11, (0.0, -0.42, 0.0)),
    ("left_ankle", 12, (0.0, -0.43, 0.0)),
    ("right_hip", 0, (-0.10, -0.05, 0.0)),
    ("right_knee", 14, (0.0, -0.42, 0.0)),
    ("right_ankle", 15, (0.0, -0.43, 0.0)),
]

# Pelvis height that rests the ankles at y = 0.03 with straight legs.
REST_ROOT_HEIGHT = 0.93


def default_skeleton() -> Skeleton:
    """The 17-joint desk-scale humanoid used by the procedural corpus."""
    return Skeleton(
        name="desk17",
        joint_names=tuple(row[0] for row in _DESK17),
        parent_index=tuple(row[1] for row in _DESK17),
        offsets=np.array([row[2] for row in _DESK17], dtype=np.float64),
        foot_joints=(13, 16),
        ground_height=0.0,
    )
