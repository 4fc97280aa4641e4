"""Procedural labeled motion corpus.

Each clip comes from a parameterized kinematic program: phase-offset sinusoids
and eased ramps on joint quaternions plus a root path, with per-clip randomized
amplitude / speed / phase. Squat, jump and turn keep the feet planted
analytically (hip Rx(theta) with knee Rx(-2*theta) holds the ankle height
fixed), so contact labels from the detector are meaningful rather than noise.

Determinism: the corpus seed spawns one child seed per clip via
numpy.random.SeedSequence, so clips are independent and the whole dataset is
byte-identical for a fixed (config, seed).
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ValidationError
from .motion_data import (
    ClipLabel,
    DatasetStats,
    LabeledDataset,
    features_from_kinematics,
)
from .skeleton import (
    REST_ROOT_HEIGHT,
    PoseRotations,
    default_skeleton,
    detect_foot_contacts,
    forward_kinematics,
    quat_from_axis_angle,
    quat_identity,
    quat_mul,
    quat_normalize,
)

FAMILY_NAMES = (
    "walk",
    "wave",
    "squat",
    "turn",
    "kick",
    "jump-in-place",
    "run-in-place",
    "raise-arms",
)

X_AXIS = np.array([1.0, 0.0, 0.0])
Y_AXIS = np.array([0.0, 1.0, 0.0])
Z_AXIS = np.array([0.0, 0.0, 1.0])

# joint indices of the default 17-joint skeleton
SPINE, CHEST = 1, 2
L_SHOULDER, L_ELBOW = 5, 6
R_SHOULDER, R_ELBOW = 8, 9
L_HIP, L_KNEE, L_ANKLE = 11, 12, 13
R_HIP, R_KNEE, R_ANKLE = 14, 15, 16

THIGH_LEN = 0.42
SHANK_LEN = 0.43
LEG_LEN = THIGH_LEN + SHANK_LEN
HIP_DROP = 0.05  # pelvis-to-hip vertical offset
ANKLE_REST_Y = REST_ROOT_HEIGHT - HIP_DROP - LEG_LEN


def canonical_family(name: str) -> str:
    return name.strip().lower().replace("_", "-")


@dataclass(frozen=True)
class CorpusConfig:
    """Knobs for the procedural generator; defaults give a desk-scale corpus."""

    families: tuple = FAMILY_NAMES
    per_family: int = 16
    min_frames: int = 40
    max_frames: int = 56
    fps: float = 20.0
    test_fraction: float = 0.2
    walk_speed_range: tuple = (0.8, 1.4)

    def __post_init__(self):
        fams = tuple(canonical_family(f) for f in self.families)
        object.__setattr__(self, "families", fams)
        object.__setattr__(self, "walk_speed_range", tuple(self.walk_speed_range))
        unknown = [f for f in fams if f not in FAMILY_NAMES]
        if unknown:
            raise ValidationError(
                f"unknown motion families {unknown}; choose from {list(FAMILY_NAMES)}"
            )
        if len(set(fams)) != len(fams):
            raise ValidationError("families must not repeat")
        if len(fams) < 4:
            raise ValidationError("need at least 4 motion families")
        if self.per_family < 16:
            raise ValidationError("per_family must be at least 16")
        if not (40 <= self.min_frames <= self.max_frames <= 120):
            raise ValidationError("clip lengths must satisfy 40 <= min <= max <= 120")
        if not (0.0 < self.test_fraction <= 0.5):
            raise ValidationError("test_fraction must lie in (0, 0.5]")
        lo, hi = self.walk_speed_range
        if not (0.0 < lo < hi):
            raise ValidationError("walk_speed_range must be an increasing positive pair")
        if self.fps <= 0:
            raise ValidationError("fps must be positive")

    def to_json(self) -> dict:
        return {
            "families": list(self.families),
            "per_family": self.per_family,
            "min_frames": self.min_frames,
            "max_frames": self.max_frames,
            "fps": self.fps,
            "test_fraction": self.test_fraction,
            "walk_speed_range": list(self.walk_speed_range),
        }

    @classmethod
    def from_json(cls, data: dict) -> "CorpusConfig":
        kwargs = dict(data)
        if "families" in kwargs:
            kwargs["families"] = tuple(kwargs["families"])
        if "walk_speed_range" in kwargs:
            kwargs["walk_speed_range"] = tuple(kwargs["walk_speed_range"])
        return cls(**kwargs)


# ---------------------------------------------------------------------------
# Small motion-building helpers
# ---------------------------------------------------------------------------

def _smoothstep(p):
    p = np.clip(p, 0.0, 1.0)
    return p * p * (3.0 - 2.0 * p)


def _rx(angle):
    """Quaternion(s) for rotation about x; angle is scalar or (N,)."""
    return quat_from_axis_angle(np.broadcast_to(X_AXIS, np.shape(angle) + (3,)), angle)


def _ry(angle):
    return quat_from_axis_angle(np.broadcast_to(Y_AXIS, np.shape(angle) + (3,)), angle)


def _rz(angle):
    return quat_from_axis_angle(np.broadcast_to(Z_AXIS, np.shape(angle) + (3,)), angle)


def _standing(n, num_joints):
    trans = np.tile([0.0, REST_ROOT_HEIGHT, 0.0], (n, 1))
    quats = quat_identity((n, num_joints)).copy()
    return trans, quats


def _planted_legs(quats, trans, theta):
    """Hip Rx(theta), knee Rx(-2 theta) on both legs, root lowered to match.

    Keeps both ankles at their rest height for any theta, so squatting and
    crouching read as full-foot contact.
    """
    quats[:, L_HIP] = _rx(theta)
    quats[:, R_HIP] = _rx(theta)
    quats[:, L_KNEE] = _rx(-2.0 * theta)
    quats[:, R_KNEE] = _rx(-2.0 * theta)
    trans[:, 1] = HIP_DROP + LEG_LEN * np.cos(theta) + ANKLE_REST_Y


# ---------------------------------------------------------------------------
# Family programs: rng -> (root translation, local quaternions, caption params)
# ---------------------------------------------------------------------------

def _program_walk(rng, n, fps, cfg):
    lo, hi = cfg.walk_speed_range
    span = hi - lo
    speed = rng.uniform(lo + 0.02 * span, hi - 0.02 * span)
    yaw = rng.uniform(-np.pi, np.pi)
    freq = rng.uniform(1.4, 2.0) * (0.7 + 0.3 * speed / hi)  # steps speed up a bit
    hip_amp = rng.uniform(0.35, 0.55)
    arm_amp = rng.uniform(0.15, 0.35)
    phase = rng.uniform(0.0, 2.0 * np.pi)

    t = np.arange(n) / fps
    heading = np.array([np.sin(yaw), 0.0, np.cos(yaw)])
    trans = np.tile([0.0, REST_ROOT_HEIGHT, 0.0], (n, 1))
    trans += (speed * t)[:, None] * heading

    quats = quat_identity((n, 17)).copy()
    w = 2.0 * np.pi * freq
    swing = hip_amp * np.sin(w * t + phase)
    quats[:, 0] = _ry(np.full(n, yaw))
    quats[:, L_HIP] = _rx(swing)
    quats[:, R_HIP] = _rx(-swing)
    # knees flex only while the leg swings forward
    quats[:, L_KNEE] = _rx(np.maximum(0.0, -swing) * 1.2)
    quats[:, R_KNEE] = _rx(np.maximum(0.0, swing) * 1.2)
    quats[:, L_SHOULDER] = _rx(-arm_amp * np.sin(w * t + phase))
    quats[:, R_SHOULDER] = _rx(arm_amp * np.sin(w * t + phase))
    if speed < lo + 0.33 * span:
        speed_word = "slow"
    elif speed < lo + 0.66 * span:
        speed_word = "steady"
    else:
        speed_word = "brisk"
    return trans, quats, {"speed_word": speed_word, "speed": speed}


def _program_wave(rng, n, fps, cfg):
    side = "left" if rng.random() < 0.5 else "right"
    freq = rng.uniform(1.2, 2.2)
    raise_angle = rng.uniform(1.8, 2.4)
    wave_amp = rng.uniform(0.3, 0.5)
    phase = rng.uniform(0.0, 2.0 * np.pi)

    trans, quats = _standing(n, 17)
    t = np.arange(n) / fps
    ramp = _smoothstep(np.arange(n) / max(4.0, 0.2 * n))  # raise the arm, then wave
    shoulder, elbow, sign = (
        (L_SHOULDER, L_ELBOW, 1.0) if side == "left" else (R_SHOULDER, R_ELBOW, -1.0)
    )
    quats[:, shoulder] = _rz(sign * raise_angle * ramp)
    quats[:, elbow] = _rz(
        sign * ramp * wave_amp * np.sin(2.0 * np.pi * freq * t + phase)
    )
    speed_word = "quickly" if freq > 1.7 else "slowly"
    return trans, quats, {"side": side, "speed_word": speed_word}


def _program_squat(rng, n, fps, cfg):
    depth = rng.uniform(0.5, 0.9)
    cycles = rng.integers(1, 3)
    arms_forward = rng.random() < 0.5

    trans, quats = _standing(n, 17)
    p = np.arange(n) / (n - 1)
    theta = depth * 0.5 * (1.0 - np.cos(2.0 * np.pi * cycles * p))
    _planted_legs(quats, trans, theta)
    if arms_forward:
        lift = 1.3 * np.sin(0.5 * np.pi * _smoothstep(theta / depth))
        quats[:, L_SHOULDER] = _rx(-lift)
        quats[:, R_SHOULDER] = _rx(-lift)
    depth_word = "deep" if depth > 0.7 else "shallow"
    count_word = "once" if cycles == 1 else "twice"
    return trans, quats, {"depth_word": depth_word, "count_word": count_word}


def _program_turn(rng, n, fps, cfg):
    direction = 1.0 if rng.random() < 0.5 else -1.0
    # cap the sweep so planted feet stay under the contact velocity threshold
    max_angle = min(np.pi, 0.95 * n / 15.0)
    total = direction * rng.uniform(np.pi / 2.0, max_angle)
    arm_out = rng.uniform(0.15, 0.35)

    trans, quats = _standing(n, 17)
    p = np.arange(n) / (n - 1)
    quats[:, 0] = _ry(total * _smoothstep(p))
    quats[:, L_SHOULDER] = _rz(np.full(n, arm_out))
    quats[:, R_SHOULDER] = _rz(np.full(n, -arm_out))
    dir_word = "left" if direction > 0 else "right"
    amount_word = "all the way around" if abs(total) > 2.6 else "around"
    return trans, quats, {"dir_word": dir_word, "amount_word": amount_word}


def _program_kick(rng, n, fps, cfg):
    side = "left" if rng.random() < 0.5 else "right"
    kicks = int(rng.integers(1, 3))
    kick_angle = rng.uniform(0.8, 1.2)
    dur = rng.uniform(0.5, 0.8)  # seconds per kick

    trans, quats = _standing(n, 17)
    t = np.arange(n) / fps
    theta = np.zeros(n)
    clip_secs = n / fps
    for k in range(kicks):
        start = (k + 0.5) * clip_secs / (kicks + 1) - dur / 2.0
        p = (t - start) / dur
        window = (p > 0) & (p < 1)
        theta[window] = np.maximum(
            theta[window], kick_angle * np.sin(np.pi * p[window]) ** 2
        )
    hip = L_HIP if side == "left" else R_HIP
    shoulder = R_SHOULDER if side == "left" else L_SHOULDER
    quats[:, hip] = _rx(-theta)  # negative x-rotation swings the leg forward
    quats[:, shoulder] = _rx(-0.3 * theta)  # opposite arm counterbalances
    height_word = "high" if kick_angle > 1.0 else "quick"
    count_word = "once" if kicks == 1 else "twice"
    return trans, quats, {"side": side, "height_word": height_word, "count_word": count_word}


def _program_jump(rng, n, fps, cfg):
    hops = int(rng.integers(1, 4))
    height = rng.uniform(0.15, 0.35)
    crouch = rng.uniform(0.35, 0.55)

    trans, quats = _standing(n, 17)
    theta = np.zeros(n)
    lift = np.zeros(n)
    per = n // hops
    for k in range(hops):
        s, e = k * per, (k + 1) * per if k < hops - 1 else n
        m = e - s
        p = np.arange(m) / max(m - 1, 1)
        # crouch -> flight -> recover, with theta = 0 at the flight boundaries
        down = p < 0.35
        air = (p >= 0.35) & (p < 0.65)
        up = p >= 0.65
        theta[s:e][down] = crouch * np.sin(np.pi * p[down] / 0.35)
        q = (p[air] - 0.35) / 0.3
        lift[s:e][air] = height * 4.0 * q * (1.0 - q)
        theta[s:e][up] = 0.6 * crouch * np.sin(np.pi * (p[up] - 0.65) / 0.35)
    _planted_legs(quats, trans, theta)
    trans[:, 1] += lift
    count_word = {1: "once", 2: "twice", 3: "three times"}[hops]
    height_word = "high" if height > 0.25 else "small"
    return trans, quats, {"count_word": count_word, "height_word": height_word}


def _program_run_in_place(rng, n, fps, cfg):
    freq = rng.uniform(2.2, 3.0)
    lift = rng.uniform(0.6, 0.9)
    arm_amp = rng.uniform(0.3, 0.5)
    phase = rng.uniform(0.0, 2.0 * np.pi)

    trans, quats = _standing(n, 17)
    t = np.arange(n) / fps
    w = 2.0 * np.pi * freq
    left = lift * np.maximum(0.0, np.sin(w * t + phase))
    right = lift * np.maximum(0.0, np.sin(w * t + phase + np.pi))
    quats[:, L_HIP] = _rx(-left)
    quats[:, R_HIP] = _rx(-right)
    quats[:, L_KNEE] = _rx(1.1 * left)
    quats[:, R_KNEE] = _rx(1.1 * right)
    quats[:, L_SHOULDER] = _rx(arm_amp * np.sin(w * t + phase))
    quats[:, R_SHOULDER] = _rx(-arm_amp * np.sin(w * t + phase))
    # bob kept small so the stance foot stays under the contact velocity threshold
    trans[:, 1] += 0.004 * np.sin(2.0 * w * t + 2.0 * phase)
    pace_word = "fast" if freq > 2.6 else "steady"
    return trans, quats, {"pace_word": pace_word}


def _program_raise_arms(rng, n, fps, cfg):
    frontal = rng.random() < 0.5
    top = rng.uniform(2.0, 2.6)
    holds = rng.uniform(0.2, 0.35)

    trans, quats = _standing(n, 17)
    p = np.arange(n) / (n - 1)
    # rise, hold, lower
    up = _smoothstep(p / max(holds, 1e-6))
    down = _smoothstep((1.0 - p) / max(holds, 1e-6))
    angle = top * np.minimum(np.minimum(up, down), 1.0)
    if frontal:
        quats[:, L_SHOULDER] = _rx(-angle)
        quats[:, R_SHOULDER] = _rx(-angle)
    else:
        quats[:, L_SHOULDER] = _rz(angle)
        quats[:, R_SHOULDER] = _rz(-angle)
    style_word = "in front" if frontal else "out to the sides"
    return trans, quats, {"style_word": style_word}


_PROGRAMS = {
    "walk": _program_walk,
    "wave": _program_wave,
    "squat": _program_squat,
    "turn": _program_turn,
    "kick": _program_kick,
    "jump-in-place": _program_jump,
    "run-in-place": _program_run_in_place,
    "raise-arms": _program_raise_arms,
}

_CAPTION_TEMPLATES = {
    "walk": (
        "a person walks forward at a {speed_word} pace",
        "someone strides ahead, walking {speed_word} and even",
        "a figure walks across the floor with {speed_word} steps",
        "the person keeps walking forward, {speed_word} and relaxed",
    ),
    "wave": (
        "a person waves with the {side} hand",
        "someone raises the {side} arm and waves {speed_word}",
        "a figure greets by waving the {side} hand {speed_word}",
        "the person waves hello using the {side} arm",
    ),
    "squat": (
        "a person performs a {depth_word} squat {count_word}",
        "someone bends the knees into a {depth_word} squat",
        "a figure squats down {count_word} and stands back up",
        "the person lowers into a squat, {depth_word} and controlled",
    ),
    "turn": (
        "a person turns {amount_word} to the {dir_word}",
        "someone pivots {dir_word}ward in place",
        "a figure rotates {amount_word}, turning to the {dir_word}",
        "the person spins to the {dir_word} without stepping away",
    ),
    "kick": (
        "a person kicks {count_word} with the {side} leg",
        "someone throws a {height_word} kick using the {side} foot",
        "a figure kicks the {side} leg forward",
        "the person delivers a {height_word} {side}-legged kick",
    ),
    "jump-in-place": (
        "a person jumps in place {count_word}",
        "someone makes a {height_word} jump without moving forward",
        "a figure hops straight up {count_word}",
        "the person bends down and jumps {count_word}, landing in place",
    ),
    "run-in-place": (
        "a person runs in place at a {pace_word} pace",
        "someone jogs on the spot, knees pumping {pace_word}",
        "a figure runs without moving forward, {pace_word} and rhythmic",
        "the person keeps jogging in place {pace_word}",
    ),
    "raise-arms": (
        "a person raises both arms {style_word}",
        "someone lifts the arms {style_word} and lowers them again",
        "a figure brings both arms up {style_word}",
        "the person raises the arms {style_word}, then drops them",
    ),
}


def _make_captions(family: str, params: dict, rng) -> tuple:
    templates = _CAPTION_TEMPLATES[family]
    picks = rng.choice(len(templates), size=3, replace=False)
    return tuple(templates[i].format(**params) for i in picks)


def generate_clip(family: str, rng, config: CorpusConfig, skeleton=None):
    """One labeled clip: (MotionSequence, captions tuple, params dict)."""
    family = canonical_family(family)
    if family not in _PROGRAMS:
        raise ValidationError(f"unknown motion family {family!r}")
    skeleton = skeleton or default_skeleton()
    n = int(rng.integers(config.min_frames, config.max_frames + 1))
    trans, quats, params = _PROGRAMS[family](rng, n, config.fps, config)
    pose = PoseRotations(trans, quat_normalize(quats))
    positions = forward_kinematics(skeleton, pose)
    contacts = detect_foot_contacts(positions, skeleton)
    motion = features_from_kinematics(skeleton, pose, contacts, fps=config.fps)
    captions = _make_captions(family, params, rng)
    return motion, captions, params


def generate_procedural_corpus(config: CorpusConfig, seed: int) -> LabeledDataset:
    """Full labeled corpus: clips, captions, stratified splits, train stats."""
    skeleton = default_skeleton()
    num_clips = len(config.families) * config.per_family
    children = np.random.SeedSequence(seed).spawn(num_clips)

    motions, labels, train_idx, test_idx = [], [], [], []
    n_test = max(1, round(config.per_family * config.test_fraction))
    i = 0
    for class_id, family in enumerate(config.families):
        for k in range(config.per_family):
            rng = np.random.default_rng(children[i])
            motion, captions, _ = generate_clip(family, rng, config, skeleton)
            motions.append(motion)
            labels.append(ClipLabel(class_id=class_id, captions=captions))
            # last n_test clips of each family are held out
            (test_idx if k >= config.per_family - n_test else train_idx).append(i)
            i += 1
    stats = DatasetStats.from_motions([motions[j] for j in train_idx])
    return LabeledDataset(
        motions=tuple(motions),
        labels=tuple(labels),
        class_names=tuple(config.families),
        train_indices=tuple(train_idx),
        test_indices=tuple(test_idx),
        stats=stats,
        skeleton=skeleton,
        fps=config.fps,
    )
