"""Mask construction and the editing entry point.

Editing happens purely at sampling time: the observed entries of the
predicted clean signal are overwritten with the (normalized) reference
motion at every reverse step, so they come out pinned exactly while the
rest is generated to agree with them. Masks are per-channel, which lets
temporal in-betweening and spatial body-part editing share one mechanism:

    in-betweening  fix whole frame rows at the start and end of the clip
    body parts     fix every channel belonging to a chosen set of joints
                   (positions, velocities, rotations; root and contact
                   channels ride along iff the root / feet are chosen)

Editing works with or without a condition and uses the same weights and
sampling code path either way.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .diffusion import DEFAULT_GUIDANCE_SCALE, NoiseSchedule, sample
from .errors import ShapeError, ValidationError
from .motion_data import FeatureLayout, MotionSequence, NullCondition
from .skeleton import Skeleton

PRESET_NAMES = ("inbetween", "upper_body", "lower_body")


@dataclass(frozen=True)
class EditMask:
    """(N, F) boolean matrix; True marks entries fixed to the reference.

    All-true is permitted (the edit degenerates to a copy); all-false is
    rejected because nothing would be edited against.
    """

    observed: np.ndarray

    def __post_init__(self):
        obs = np.asarray(self.observed)
        if obs.dtype != np.bool_:
            if not np.isin(obs, (0, 1)).all():
                raise ValidationError("edit mask entries must be boolean (or 0/1)")
            obs = obs.astype(bool)
        if obs.ndim != 2:
            raise ShapeError(f"edit mask must be (frames, channels), got {obs.shape}")
        if not obs.any():
            raise ValidationError("edit mask observes nothing (all-false)")
        obs = obs.copy()
        obs.setflags(write=False)
        object.__setattr__(self, "observed", obs)

    @property
    def num_frames(self) -> int:
        return self.observed.shape[0]

    @property
    def num_channels(self) -> int:
        return self.observed.shape[1]


@dataclass(frozen=True)
class EditSpec:
    reference: MotionSequence
    mask: EditMask

    def __post_init__(self):
        if self.mask.observed.shape != self.reference.features.shape:
            raise ShapeError(
                f"edit mask {self.mask.observed.shape} does not match the "
                f"reference motion {self.reference.features.shape}"
            )


def make_inbetween_mask(
    num_frames: int,
    num_channels: int,
    prefix_frac: float = 0.25,
    suffix_frac: float = 0.25,
) -> EditMask:
    """Fix the first and last fraction of the frames, leave the middle free.

    Frame counts round down (floor), so no more than the requested share is
    ever fixed.
    """
    if num_frames < 4:
        raise ValidationError("in-betweening needs at least 4 frames")
    if prefix_frac < 0 or suffix_frac < 0 or prefix_frac + suffix_frac >= 1:
        raise ValidationError(
            "prefix/suffix fractions must be non-negative and sum below 1"
        )
    n_pre = math.floor(num_frames * prefix_frac)
    n_suf = math.floor(num_frames * suffix_frac)
    observed = np.zeros((num_frames, num_channels), dtype=bool)
    observed[:n_pre] = True
    if n_suf:
        observed[num_frames - n_suf :] = True
    return EditMask(observed)


def _resolve_joints(skeleton: Skeleton, fixed_joints) -> list:
    idx = []
    for j in fixed_joints:
        if isinstance(j, str):
            idx.append(skeleton.joint_index(j))
        else:
            j = int(j)
            if not (0 <= j < skeleton.num_joints):
                raise ValidationError(
                    f"joint index {j} outside skeleton with {skeleton.num_joints} joints"
                )
            idx.append(j)
    return sorted(set(idx))


def make_bodypart_mask(
    num_frames: int,
    skeleton: Skeleton,
    layout: FeatureLayout,
    fixed_joints,
) -> EditMask:
    """Observe every channel of the fixed joints on all frames.

    A fixed joint contributes its position, velocity and rotation channels.
    The root linear-velocity channels are observed iff the root is fixed;
    each contact channel is observed iff its foot joint is fixed.
    """
    joints = _resolve_joints(skeleton, fixed_joints)
    if not joints:
        raise ValidationError("fixed_joints must name at least one joint")
    if layout.num_joints != skeleton.num_joints:
        raise ShapeError("layout and skeleton disagree on joint count")
    observed = np.zeros((num_frames, layout.feature_dim), dtype=bool)
    for j in joints:
        observed[:, layout.positions.start + 3 * j : layout.positions.start + 3 * j + 3] = True
        observed[:, layout.velocities.start + 3 * j : layout.velocities.start + 3 * j + 3] = True
        observed[:, layout.rotations.start + 4 * j : layout.rotations.start + 4 * j + 4] = True
    if 0 in joints:
        observed[:, layout.root_velocity] = True
    for k, foot in enumerate(skeleton.foot_joints):
        if foot in joints:
            observed[:, layout.contacts.start + k] = True
    return EditMask(observed)


def lower_body_joints(skeleton: Skeleton) -> tuple:
    """Joints on a root-to-foot path, excluding the root itself."""
    lower = set()
    for foot in skeleton.foot_joints:
        j = foot
        while j is not None and j != 0:
            lower.add(j)
            j = skeleton.parent_index[j]
    return tuple(sorted(lower))


def upper_body_joints(skeleton: Skeleton) -> tuple:
    """Everything that is neither the root nor on a root-to-foot path."""
    lower = set(lower_body_joints(skeleton))
    return tuple(j for j in range(1, skeleton.num_joints) if j not in lower)


def make_preset_mask(
    name: str,
    num_frames: int,
    skeleton: Skeleton,
    layout: FeatureLayout = None,
    fix_root: bool = True,
    prefix_frac: float = 0.25,
    suffix_frac: float = 0.25,
) -> EditMask:
    """Named masks: "inbetween", "upper_body", "lower_body".

    Body-part preset names denote the part being regenerated; the other
    part is fixed. The root trajectory stays fixed by default in both
    (fix_root=False frees it).
    """
    layout = layout or FeatureLayout.for_skeleton(skeleton)
    if name == "inbetween":
        return make_inbetween_mask(num_frames, layout.feature_dim, prefix_frac, suffix_frac)
    if name == "upper_body":
        fixed = lower_body_joints(skeleton)
    elif name == "lower_body":
        fixed = upper_body_joints(skeleton)
    else:
        raise ValidationError(f"unknown mask preset {name!r}, options: {PRESET_NAMES}")
    if fix_root:
        fixed = (0,) + fixed
    if not fixed:
        raise ValidationError(f"preset {name!r} fixes no joints on this skeleton")
    return make_bodypart_mask(num_frames, skeleton, layout, fixed)


_EDIT_SPEC_KEYS = {
    "preset", "prefix_frac", "suffix_frac", "fix_root",
    "fixed_joints", "observed_channels", "observed_frames",
}


def edit_mask_from_json(data: dict, num_frames: int, skeleton: Skeleton) -> EditMask:
    """Build a mask from a JSON edit-spec dict.

    Exactly one of three forms:
      {"preset": "inbetween", "prefix_frac": .., "suffix_frac": ..}
      {"preset": "upper_body" | "lower_body", "fix_root": ..}
      {"fixed_joints": [names or indices]}
      {"observed_channels": [..] and/or "observed_frames": [..]}
    """
    if not isinstance(data, dict):
        raise ValidationError("edit spec must be a JSON object")
    unknown = set(data) - _EDIT_SPEC_KEYS
    if unknown:
        raise ValidationError(f"unknown edit-spec keys: {sorted(unknown)}")
    layout = FeatureLayout.for_skeleton(skeleton)
    forms = [k for k in ("preset", "fixed_joints") if k in data]
    explicit = {"observed_channels", "observed_frames"} & set(data)
    if len(forms) + bool(explicit) != 1:
        raise ValidationError(
            "edit spec needs exactly one of: preset, fixed_joints, "
            "observed_channels/observed_frames"
        )
    if "preset" in data:
        return make_preset_mask(
            data["preset"],
            num_frames,
            skeleton,
            layout,
            fix_root=data.get("fix_root", True),
            prefix_frac=data.get("prefix_frac", 0.25),
            suffix_frac=data.get("suffix_frac", 0.25),
        )
    if "fixed_joints" in data:
        return make_bodypart_mask(num_frames, skeleton, layout, data["fixed_joints"])
    observed = np.zeros((num_frames, layout.feature_dim), dtype=bool)
    rows = data.get("observed_frames")
    cols = data.get("observed_channels")
    rows = range(num_frames) if rows is None else [int(r) for r in rows]
    cols = range(layout.feature_dim) if cols is None else [int(c) for c in cols]
    for r in rows:
        if not (0 <= r < num_frames):
            raise ValidationError(f"observed frame {r} outside 0..{num_frames - 1}")
    for c in cols:
        if not (0 <= c < layout.feature_dim):
            raise ValidationError(
                f"observed channel {c} outside 0..{layout.feature_dim - 1}"
            )
    observed[np.ix_(list(rows), list(cols))] = True
    return EditMask(observed)


def edit(
    denoiser,
    schedule: NoiseSchedule,
    edit_spec: EditSpec,
    condition=None,
    guidance_scale: float = DEFAULT_GUIDANCE_SCALE,
    rng=None,
) -> MotionSequence:
    """Regenerate the unobserved entries of the reference by sampling.

    Runs the ordinary reverse process with the observed entries of x0_hat
    overwritten each step; no training is involved. Output equals the
    reference on observed entries and is model-generated elsewhere.
    """
    if condition is None:
        condition = NullCondition()
    return sample(
        denoiser,
        condition,
        edit_spec.reference.num_frames,
        schedule,
        guidance_scale=guidance_scale,
        rng=rng,
        edit_spec=edit_spec,
    )
