"""Motion feature representation, normalization, and container file I/O.

A motion is a dense N x F feature matrix with a fixed channel order:

    root linear velocity (3) | joint positions (3J) | joint velocities (3J)
    | joint rotations (4J, unit quaternions) | contact labels (num feet)

Root velocity lives in the world frame, a deliberate simplification over
ego-frame decompositions. Velocities are forward differences with the last
frame repeating the previous one, so the matrix keeps N rows.
"""
from __future__ import annotations

import hashlib
import json
import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Optional, Union

import numpy as np

from .errors import ShapeError, ValidationError
from .skeleton import (
    ContactMask,
    PoseRotations,
    Skeleton,
    forward_kinematics,
    quat_identity,
)

STD_FLOOR = 1e-8
CONTAINER_MAGIC = b"MOTN0001"


# ---------------------------------------------------------------------------
# Feature layout
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class FeatureLayout:
    """Channel slices of the fixed feature order for a given skeleton size."""

    num_joints: int
    num_feet: int

    @classmethod
    def for_skeleton(cls, skeleton: Skeleton) -> "FeatureLayout":
        return cls(num_joints=skeleton.num_joints, num_feet=len(skeleton.foot_joints))

    @property
    def feature_dim(self) -> int:
        return 3 + 10 * self.num_joints + self.num_feet

    @property
    def root_velocity(self) -> slice:
        return slice(0, 3)

    @property
    def positions(self) -> slice:
        return slice(3, 3 + 3 * self.num_joints)

    @property
    def velocities(self) -> slice:
        j = self.num_joints
        return slice(3 + 3 * j, 3 + 6 * j)

    @property
    def rotations(self) -> slice:
        j = self.num_joints
        return slice(3 + 6 * j, 3 + 10 * j)

    @property
    def contacts(self) -> slice:
        return slice(3 + 10 * self.num_joints, self.feature_dim)

    def block_table(self):
        """(name, start, size) rows in channel order, for file headers."""
        j, nf = self.num_joints, self.num_feet
        return [
            ("root_velocity", 0, 3),
            ("joint_positions", 3, 3 * j),
            ("joint_velocities", 3 + 3 * j, 3 * j),
            ("joint_rotations", 3 + 6 * j, 4 * j),
            ("contacts", 3 + 10 * j, nf),
        ]

    def validate_features(self, features: np.ndarray):
        if features.ndim != 2 or features.shape[1] != self.feature_dim:
            raise ShapeError(
                f"expected (N, {self.feature_dim}) features, got {features.shape}"
            )

    def to_json(self) -> dict:
        return {
            "num_joints": self.num_joints,
            "num_feet": self.num_feet,
            "blocks": [list(row) for row in self.block_table()],
        }

    @classmethod
    def from_json(cls, data: dict) -> "FeatureLayout":
        layout = cls(num_joints=int(data["num_joints"]), num_feet=int(data["num_feet"]))
        if data.get("blocks") is not None:
            declared = [tuple(row) for row in data["blocks"]]
            if declared != layout.block_table():
                raise ValidationError("layout block table does not match channel order")
        return layout


# ---------------------------------------------------------------------------
# Core types
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class MotionSequence:
    """An N x F float32 feature matrix plus the identity of its skeleton."""

    features: np.ndarray
    skeleton_ref: str
    fps: float

    def __post_init__(self):
        feats = np.ascontiguousarray(np.asarray(self.features, dtype=np.float32))
        if feats.ndim != 2:
            raise ShapeError(f"features must be 2-D, got shape {feats.shape}")
        if feats.shape[0] < 2:
            raise ValidationError("a motion needs at least 2 frames")
        if not np.all(np.isfinite(feats)):
            raise ValidationError("features contain non-finite values")
        if self.fps <= 0:
            raise ValidationError("fps must be positive")
        feats.setflags(write=False)
        object.__setattr__(self, "features", feats)

    @property
    def num_frames(self) -> int:
        return self.features.shape[0]

    @property
    def num_channels(self) -> int:
        return self.features.shape[1]


@dataclass(frozen=True)
class NullCondition:
    """The empty condition: generate unconditionally."""


@dataclass(frozen=True)
class TextCondition:
    prompt: str

    def __post_init__(self):
        if not isinstance(self.prompt, str) or not self.prompt.strip():
            raise ValidationError("text condition needs a non-empty prompt")


@dataclass(frozen=True)
class ActionCondition:
    class_id: int

    def __post_init__(self):
        if not isinstance(self.class_id, int) or self.class_id < 0:
            raise ValidationError("action class_id must be a non-negative integer")


Condition = Union[NullCondition, TextCondition, ActionCondition]


def condition_to_json(cond: Condition) -> dict:
    if isinstance(cond, NullCondition):
        return {"kind": "null"}
    if isinstance(cond, TextCondition):
        return {"kind": "text", "prompt": cond.prompt}
    if isinstance(cond, ActionCondition):
        return {"kind": "action", "class_id": cond.class_id}
    raise ValidationError(f"not a condition: {cond!r}")


def condition_from_json(data: dict) -> Condition:
    kind = data.get("kind")
    if kind == "null":
        return NullCondition()
    if kind == "text":
        return TextCondition(prompt=data["prompt"])
    if kind == "action":
        return ActionCondition(class_id=int(data["class_id"]))
    raise ValidationError(f"unknown condition kind {kind!r}")


@dataclass(frozen=True)
class DatasetStats:
    """Per-channel mean and epsilon-floored standard deviation."""

    mean: np.ndarray
    std: np.ndarray

    def __post_init__(self):
        mean = np.ascontiguousarray(np.asarray(self.mean, dtype=np.float64))
        std = np.ascontiguousarray(np.asarray(self.std, dtype=np.float64))
        if mean.ndim != 1 or std.shape != mean.shape:
            raise ShapeError("stats mean/std must be matching 1-D vectors")
        if not (np.all(np.isfinite(mean)) and np.all(np.isfinite(std))):
            raise ValidationError("stats contain non-finite values")
        if np.any(std < STD_FLOOR):
            raise ValidationError(f"std entries must be >= {STD_FLOOR} after flooring")
        mean.setflags(write=False)
        std.setflags(write=False)
        object.__setattr__(self, "mean", mean)
        object.__setattr__(self, "std", std)

    @property
    def feature_dim(self) -> int:
        return self.mean.shape[0]

    @classmethod
    def from_motions(cls, motions) -> "DatasetStats":
        """Pooled per-channel moments over all frames of all given motions."""
        if not motions:
            raise ValidationError("cannot compute stats from an empty motion list")
        frames = np.concatenate([m.features.astype(np.float64) for m in motions])
        return cls(
            mean=frames.mean(axis=0),
            std=np.maximum(frames.std(axis=0), STD_FLOOR),
        )

    def to_json(self) -> dict:
        return {"mean": self.mean.tolist(), "std": self.std.tolist()}

    @classmethod
    def from_json(cls, data: dict) -> "DatasetStats":
        return cls(
            mean=np.asarray(data["mean"], dtype=np.float64),
            std=np.asarray(data["std"], dtype=np.float64),
        )


@dataclass(frozen=True)
class ClipLabel:
    class_id: int
    captions: tuple

    def __post_init__(self):
        object.__setattr__(self, "captions", tuple(self.captions))
        if self.class_id < 0:
            raise ValidationError("class_id must be non-negative")


@dataclass(frozen=True)
class LabeledDataset:
    """Motions with action/text labels, train/test splits, and train stats."""

    motions: tuple
    labels: tuple
    class_names: tuple
    train_indices: tuple
    test_indices: tuple
    stats: DatasetStats
    skeleton: Skeleton
    fps: float

    def __post_init__(self):
        object.__setattr__(self, "motions", tuple(self.motions))
        object.__setattr__(self, "labels", tuple(self.labels))
        object.__setattr__(self, "class_names", tuple(self.class_names))
        object.__setattr__(self, "train_indices", tuple(self.train_indices))
        object.__setattr__(self, "test_indices", tuple(self.test_indices))
        n = len(self.motions)
        if len(self.labels) != n:
            raise ShapeError("labels and motions must pair up one-to-one")
        train, test = set(self.train_indices), set(self.test_indices)
        if train & test:
            raise ValidationError("train/test splits overlap")
        if train | test != set(range(n)):
            raise ValidationError("train/test splits must cover every clip index")
        for lab in self.labels:
            if lab.class_id >= len(self.class_names):
                raise ValidationError(
                    f"class_id {lab.class_id} outside {len(self.class_names)} classes"
                )
        layout = FeatureLayout.for_skeleton(self.skeleton)
        for m in self.motions:
            layout.validate_features(m.features)
        if self.stats.feature_dim != layout.feature_dim:
            raise ShapeError("stats dimension does not match the feature layout")

    @property
    def num_classes(self) -> int:
        return len(self.class_names)

    @property
    def layout(self) -> FeatureLayout:
        return FeatureLayout.for_skeleton(self.skeleton)

    def split_motions(self, split: str):
        idx = {"train": self.train_indices, "test": self.test_indices}[split]
        return [self.motions[i] for i in idx]

    def split_labels(self, split: str):
        idx = {"train": self.train_indices, "test": self.test_indices}[split]
        return [self.labels[i] for i in idx]


# ---------------------------------------------------------------------------
# Feature construction and inversion
# ---------------------------------------------------------------------------

def _forward_difference(values: np.ndarray) -> np.ndarray:
    """v[i] = x[i+1] - x[i]; the last row repeats the previous velocity."""
    diff = values[1:] - values[:-1]
    return np.concatenate([diff, diff[-1:]], axis=0)


def features_from_kinematics(
    skeleton: Skeleton,
    pose: PoseRotations,
    contacts: ContactMask,
    fps: float = 20.0,
) -> MotionSequence:
    """Pack rotations, FK positions, velocities and contacts into features."""
    n = pose.num_frames
    if n < 2:
        raise ValidationError("a motion needs at least 2 frames")
    if contacts.num_frames != n:
        raise ShapeError(
            f"contacts have {contacts.num_frames} frames, pose has {n}"
        )
    if contacts.values.shape[1] != len(skeleton.foot_joints):
        raise ShapeError("contact column count must match skeleton foot joints")
    positions = forward_kinematics(skeleton, pose)  # (N, J, 3)
    root_vel = _forward_difference(pose.root_translation)
    joint_vel = _forward_difference(positions)
    features = np.concatenate(
        [
            root_vel,
            positions.reshape(n, -1),
            joint_vel.reshape(n, -1),
            pose.joint_rotation.reshape(n, -1),
            contacts.values.astype(np.float64),
        ],
        axis=1,
    )
    return MotionSequence(
        features=features.astype(np.float32), skeleton_ref=skeleton.name, fps=fps
    )


def kinematics_from_features(skeleton: Skeleton, motion: MotionSequence):
    """Unpack features into (positions, PoseRotations, ContactMask).

    Position channels are authoritative for rendering and metrics; rotation
    channels are renormalized (zero-norm rows fall back to identity); contact
    channels threshold at 0.5.
    """
    layout = FeatureLayout.for_skeleton(skeleton)
    layout.validate_features(motion.features)
    feats = motion.features.astype(np.float64)
    if not np.all(np.isfinite(feats)):
        raise ValidationError("features contain non-finite values")
    n = feats.shape[0]
    positions = feats[:, layout.positions].reshape(n, skeleton.num_joints, 3)
    quats = feats[:, layout.rotations].reshape(n, skeleton.num_joints, 4)
    norms = np.linalg.norm(quats, axis=-1, keepdims=True)
    quats = np.where(norms > 1e-8, quats / np.maximum(norms, 1e-8), quat_identity(quats.shape[:-1]))
    pose = PoseRotations(root_translation=positions[:, 0, :], joint_rotation=quats)
    contacts = ContactMask((feats[:, layout.contacts] > 0.5).astype(np.float32))
    return positions, pose, contacts


def normalize(motion: MotionSequence, stats: DatasetStats) -> MotionSequence:
    """(x - mean) / std per channel."""
    if stats.feature_dim != motion.num_channels:
        raise ShapeError(
            f"stats have {stats.feature_dim} channels, motion has {motion.num_channels}"
        )
    z = (motion.features.astype(np.float64) - stats.mean) / stats.std
    return MotionSequence(z.astype(np.float32), motion.skeleton_ref, motion.fps)


def denormalize(motion: MotionSequence, stats: DatasetStats) -> MotionSequence:
    """x * std + mean per channel; exact inverse of normalize up to float32."""
    if stats.feature_dim != motion.num_channels:
        raise ShapeError(
            f"stats have {stats.feature_dim} channels, motion has {motion.num_channels}"
        )
    x = motion.features.astype(np.float64) * stats.std + stats.mean
    return MotionSequence(x.astype(np.float32), motion.skeleton_ref, motion.fps)


# ---------------------------------------------------------------------------
# Motion container file: JSON header + raw float32 block
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class MotionFile:
    """One motion with its skeleton and optional labels/stats, as stored on disk."""

    motion: MotionSequence
    skeleton: Skeleton
    class_id: Optional[int] = None
    captions: tuple = ()
    stats: Optional[DatasetStats] = None


def _canonical_json(obj) -> bytes:
    return json.dumps(obj, sort_keys=True, separators=(",", ":")).encode("utf-8")


def save_motion(path, motion_file: MotionFile, format: str = "binary") -> Path:
    """Write one motion container, binary (default) or pure-JSON."""
    path = Path(path)
    mf = motion_file
    layout = FeatureLayout.for_skeleton(mf.skeleton)
    layout.validate_features(mf.motion.features)
    header = {
        "format": "motion-container",
        "version": 1,
        "skeleton": mf.skeleton.to_json(),
        "fps": float(mf.motion.fps),
        "layout": layout.to_json(),
        "labels": {
            "class_id": None if mf.class_id is None else int(mf.class_id),
            "captions": list(mf.captions),
        },
        "stats": None if mf.stats is None else mf.stats.to_json(),
    }
    if format == "json":
        header["features"] = [
            [float(v) for v in row] for row in mf.motion.features
        ]
        path.write_bytes(_canonical_json(header))
        return path
    if format != "binary":
        raise ValidationError(f"unknown motion file format {format!r}")
    block = np.ascontiguousarray(mf.motion.features.astype("<f4")).tobytes()
    n, f = mf.motion.features.shape
    header["feature_block"] = {
        "byte_offset": 0,
        "byte_length": len(block),
        "num_frames": n,
        "num_channels": f,
        "dtype": "float32_le",
        "order": "row_major",
    }
    # the declared offset feeds back into header length; iterate to a fixed point
    payload = b""
    for _ in range(8):
        payload = _canonical_json(header)
        offset = len(CONTAINER_MAGIC) + 8 + len(payload)
        if header["feature_block"]["byte_offset"] == offset:
            break
        header["feature_block"]["byte_offset"] = offset
    else:
        raise RuntimeError("container header offset failed to stabilize")
    path.write_bytes(
        CONTAINER_MAGIC + struct.pack("<Q", len(payload)) + payload + block
    )
    return path


def load_motion(path) -> MotionFile:
    """Read a motion container; sniffs binary vs pure-JSON by the first byte."""
    raw = Path(path).read_bytes()
    if not raw:
        raise ValidationError(f"{path}: empty motion file")
    if raw[:1] == b"{":
        header = json.loads(raw.decode("utf-8"))
        if "features" not in header:
            raise ValidationError(f"{path}: JSON motion file lacks 'features'")
        features = np.asarray(header["features"], dtype=np.float32)
    else:
        if raw[: len(CONTAINER_MAGIC)] != CONTAINER_MAGIC:
            raise ValidationError(f"{path}: not a motion container (bad magic)")
        (header_len,) = struct.unpack_from("<Q", raw, len(CONTAINER_MAGIC))
        start = len(CONTAINER_MAGIC) + 8
        if start + header_len > len(raw):
            raise ValidationError(f"{path}: truncated header")
        header = json.loads(raw[start : start + header_len].decode("utf-8"))
        blk = header["feature_block"]
        off, length = int(blk["byte_offset"]), int(blk["byte_length"])
        if blk.get("dtype", "float32_le") != "float32_le":
            raise ValidationError(f"{path}: unsupported block dtype {blk['dtype']!r}")
        if off + length > len(raw):
            raise ValidationError(f"{path}: feature block extends past end of file")
        n, f = int(blk["num_frames"]), int(blk["num_channels"])
        if length != 4 * n * f:
            raise ValidationError(f"{path}: block length disagrees with its shape")
        features = (
            np.frombuffer(raw, dtype="<f4", count=n * f, offset=off)
            .reshape(n, f)
            .astype(np.float32)
        )
    skeleton = Skeleton.from_json(header["skeleton"])
    layout = FeatureLayout.from_json(header["layout"])
    if layout != FeatureLayout.for_skeleton(skeleton):
        raise ValidationError(f"{path}: layout does not match the stored skeleton")
    layout.validate_features(features)
    motion = MotionSequence(
        features=features, skeleton_ref=skeleton.name, fps=float(header["fps"])
    )
    labels = header.get("labels") or {}
    stats = header.get("stats")
    return MotionFile(
        motion=motion,
        skeleton=skeleton,
        class_id=labels.get("class_id"),
        captions=tuple(labels.get("captions", ())),
        stats=None if stats is None else DatasetStats.from_json(stats),
    )


# ---------------------------------------------------------------------------
# Dataset directory: per-clip containers plus an index JSON
# ---------------------------------------------------------------------------

def _sha256(data: bytes) -> str:
    return hashlib.sha256(data).hexdigest()


def save_dataset(dataset: LabeledDataset, out_dir, extra=None) -> Path:
    """Write clips/NNNNNN.motn files plus index.json; returns the index path."""
    out_dir = Path(out_dir)
    clips_dir = out_dir / "clips"
    clips_dir.mkdir(parents=True, exist_ok=True)
    split_of = {}
    for i in dataset.train_indices:
        split_of[i] = "train"
    for i in dataset.test_indices:
        split_of[i] = "test"
    entries = []
    for i, (motion, label) in enumerate(zip(dataset.motions, dataset.labels)):
        rel = f"clips/{i:06d}.motn"
        save_motion(
            out_dir / rel,
            MotionFile(
                motion=motion,
                skeleton=dataset.skeleton,
                class_id=label.class_id,
                captions=label.captions,
            ),
        )
        entries.append(
            {
                "file": rel,
                "class_id": label.class_id,
                "captions": list(label.captions),
                "split": split_of[i],
                "num_frames": motion.num_frames,
                "sha256": _sha256((out_dir / rel).read_bytes()),
            }
        )
    index = {
        "format": "motion-dataset-index",
        "version": 1,
        "skeleton": dataset.skeleton.to_json(),
        "fps": float(dataset.fps),
        "class_names": list(dataset.class_names),
        "stats": dataset.stats.to_json(),
        "clips": entries,
    }
    if extra:
        index["extra"] = extra
    index_path = out_dir / "index.json"
    index_path.write_bytes(_canonical_json(index))
    return index_path


def load_dataset(path, verify_hashes: bool = False) -> LabeledDataset:
    """Load a dataset directory (or its index.json path) back into memory."""
    path = Path(path)
    index_path = path / "index.json" if path.is_dir() else path
    if not index_path.exists():
        raise ValidationError(f"no dataset index at {index_path}")
    index = json.loads(index_path.read_text(encoding="utf-8"))
    if index.get("format") != "motion-dataset-index":
        raise ValidationError(f"{index_path}: not a dataset index")
    base = index_path.parent
    skeleton = Skeleton.from_json(index["skeleton"])
    motions, labels, train_idx, test_idx = [], [], [], []
    for i, entry in enumerate(index["clips"]):
        clip_path = base / entry["file"]
        if verify_hashes and _sha256(clip_path.read_bytes()) != entry["sha256"]:
            raise ValidationError(f"{clip_path}: hash mismatch against the index")
        mf = load_motion(clip_path)
        if mf.skeleton.to_json() != skeleton.to_json():
            raise ValidationError(f"{clip_path}: clip skeleton differs from the index")
        motions.append(mf.motion)
        labels.append(ClipLabel(class_id=int(entry["class_id"]), captions=tuple(entry["captions"])))
        if entry["split"] == "train":
            train_idx.append(i)
        elif entry["split"] == "test":
            test_idx.append(i)
        else:
            raise ValidationError(f"unknown split {entry['split']!r} in the index")
    return LabeledDataset(
        motions=tuple(motions),
        labels=tuple(labels),
        class_names=tuple(index["class_names"]),
        train_indices=tuple(train_idx),
        test_indices=tuple(test_idx),
        stats=DatasetStats.from_json(index["stats"]),
        skeleton=skeleton,
        fps=float(index["fps"]),
    )


def dataset_fingerprint(path) -> str:
    """Stable hex digest of a dataset directory, for manifests and checkpoints."""
    path = Path(path)
    index_path = path / "index.json" if path.is_dir() else path
    return _sha256(index_path.read_bytes())
