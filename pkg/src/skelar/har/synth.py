"""Synthetic skeleton activities and virtual IMU streams derived from them.

Skeletons come from forward kinematics: every bone has a direction set by a
few joint rotations (functions of time per activity) and a subject-specific
length. Bone directions never depend on lengths, so rescaling limbs moves the
joints but leaves every projected bone-pair angle unchanged.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence

import numpy as np

from ..skeleton.io import SkeletonSequence, WindowedSample
from ..skeleton.prep import TARGET_HZ, WINDOW, window
from ..skeleton.topology import CANONICAL, JOINT_NAMES

GRAVITY = 9.81
IMU_MOUNTS = ("wrist_left", "elbow_right")
IMU_CHANNELS = 6 * len(IMU_MOUNTS)

# Bone lengths in metres for a 1.75 m adult.
BONE_LENGTHS = {
    "spine_mid": 0.25, "spine_shoulder": 0.25, "neck": 0.08, "head": 0.15,
    "shoulder_left": 0.18, "elbow_left": 0.28, "wrist_left": 0.25, "hand_left": 0.08,
    "shoulder_right": 0.18, "elbow_right": 0.28, "wrist_right": 0.25, "hand_right": 0.08,
    "hip_left": 0.10, "knee_left": 0.42, "ankle_left": 0.40, "foot_left": 0.12,
    "hip_right": 0.10, "knee_right": 0.42, "ankle_right": 0.40, "foot_right": 0.12,
}

# Limb groups that share one length factor per subject.
LIMB_GROUPS = {
    "spine": ("spine_mid", "spine_shoulder", "neck", "head"),
    "arm_left": ("shoulder_left", "elbow_left", "wrist_left", "hand_left"),
    "arm_right": ("shoulder_right", "elbow_right", "wrist_right", "hand_right"),
    "leg_left": ("hip_left", "knee_left", "ankle_left", "foot_left"),
    "leg_right": ("hip_right", "knee_right", "ankle_right", "foot_right"),
}


def _rx(a):
    c, s = np.cos(a), np.sin(a)
    o, z = np.ones_like(a), np.zeros_like(a)
    return np.stack([np.stack([o, z, z], -1), np.stack([z, c, -s], -1), np.stack([z, s, c], -1)], -2)


def _ry(a):
    c, s = np.cos(a), np.sin(a)
    o, z = np.ones_like(a), np.zeros_like(a)
    return np.stack([np.stack([c, z, s], -1), np.stack([z, o, z], -1), np.stack([-s, z, c], -1)], -2)


def _rz(a):
    c, s = np.cos(a), np.sin(a)
    o, z = np.ones_like(a), np.zeros_like(a)
    return np.stack([np.stack([c, -s, z], -1), np.stack([s, c, z], -1), np.stack([z, z, o], -1)], -2)


def _apply(R, v):
    return np.einsum("tij,j->ti", R, v) if np.ndim(v) == 1 else np.einsum("tij,tj->ti", R, v)


# --------------------------------------------------------------------------
# pose angles

POSE_KEYS = (
    "trunk_yaw", "trunk_pitch", "bounce",
    "sh_flex_l", "sh_abd_l", "elbow_l", "sh_flex_r", "sh_abd_r", "elbow_r",
    "hip_flex_l", "hip_abd_l", "knee_l", "hip_flex_r", "hip_abd_r", "knee_r",
)

# Small resting bends keep projected bone vectors off exact degeneracy.
REST_POSE = {
    "sh_abd_l": 0.15, "sh_abd_r": 0.15, "elbow_l": 0.2, "elbow_r": 0.2,
    "sh_flex_l": 0.05, "sh_flex_r": 0.05, "knee_l": 0.08, "knee_r": 0.08,
    "hip_flex_l": 0.04, "hip_flex_r": 0.04, "hip_abd_l": 0.05, "hip_abd_r": 0.05,
}


@dataclass(frozen=True)
class MotionParams:
    freq: float = 1.0          # Hz
    phase: float = 0.0         # rad
    amplitude: float = 1.0     # multiplier on the activity's joint excursions


def _still(t, mp):
    return {"trunk_pitch": 0.02 * mp.amplitude * np.sin(2 * math.pi * 0.2 * t + mp.phase)}


def _arm_raise(t, mp):
    s = 0.5 * (1 - np.cos(2 * math.pi * mp.freq * t + mp.phase))
    a = 1.4 * mp.amplitude * s
    return {"sh_flex_l": a, "sh_flex_r": a, "elbow_l": 0.2 + 0.3 * s, "elbow_r": 0.2 + 0.3 * s}


def _walk(t, mp):
    w = np.sin(2 * math.pi * mp.freq * t + mp.phase)
    a = mp.amplitude
    return {
        "hip_flex_l": 0.45 * a * w, "hip_flex_r": -0.45 * a * w,
        "knee_l": 0.1 + 0.5 * a * np.maximum(-w, 0), "knee_r": 0.1 + 0.5 * a * np.maximum(w, 0),
        "sh_flex_l": -0.4 * a * w, "sh_flex_r": 0.4 * a * w,
        "elbow_l": 0.3 + 0.2 * a * np.maximum(w, 0), "elbow_r": 0.3 + 0.2 * a * np.maximum(-w, 0),
        "bounce": 0.02 * np.cos(4 * math.pi * mp.freq * t + 2 * mp.phase),
    }


def _squat(t, mp):
    s = 0.5 * (1 - np.cos(2 * math.pi * mp.freq * t + mp.phase))
    a = mp.amplitude
    return {
        "hip_flex_l": 1.3 * a * s, "hip_flex_r": 1.3 * a * s,
        "knee_l": 0.08 + 1.9 * a * s, "knee_r": 0.08 + 1.9 * a * s,
        "trunk_pitch": 0.5 * a * s, "sh_flex_l": 1.2 * a * s, "sh_flex_r": 1.2 * a * s,
        "bounce": -0.45 * a * s,
    }


def _wave(t, mp):
    w = np.sin(2 * math.pi * 2.0 * mp.freq * t + mp.phase)
    a = mp.amplitude
    return {"sh_abd_r": 2.4 + 0.05 * w, "elbow_r": 1.0 + 0.6 * a * w, "sh_flex_r": 0.3}


def _kick(t, mp):
    s = np.maximum(np.sin(2 * math.pi * mp.freq * t + mp.phase), 0) ** 2
    a = mp.amplitude
    return {"hip_flex_r": 1.3 * a * s, "knee_r": 0.08 + 0.9 * a * s * (1 - s),
            "sh_abd_l": 0.5, "sh_abd_r": 0.5, "trunk_pitch": -0.15 * a * s}


def _jumping_jack(t, mp):
    s = 0.5 * (1 - np.cos(2 * math.pi * mp.freq * t + mp.phase))
    a = mp.amplitude
    return {"sh_abd_l": 0.15 + 2.6 * a * s, "sh_abd_r": 0.15 + 2.6 * a * s,
            "hip_abd_l": 0.05 + 0.35 * a * s, "hip_abd_r": 0.05 + 0.35 * a * s,
            "bounce": 0.08 * np.abs(np.sin(2 * math.pi * mp.freq * t + mp.phase))}


def _twist(t, mp):
    w = np.sin(2 * math.pi * mp.freq * t + mp.phase)
    return {"trunk_yaw": 0.7 * mp.amplitude * w, "sh_abd_l": 1.5, "sh_abd_r": 1.5,
            "elbow_l": 0.3, "elbow_r": 0.3}


ACTIVITIES: dict[str, tuple[Callable, float]] = {
    # name: (pose function, base frequency in Hz)
    "walk": (_walk, 0.9),
    "arm_raise": (_arm_raise, 0.4),
    "squat": (_squat, 0.35),
    "wave": (_wave, 0.8),
    "kick": (_kick, 0.45),
    "jumping_jack": (_jumping_jack, 0.7),
    "twist": (_twist, 0.5),
    "still": (_still, 0.2),
}


def pose_angles(activity: str, t: np.ndarray, motion: MotionParams) -> dict[str, np.ndarray]:
    try:
        fn, _ = ACTIVITIES[activity]
    except KeyError:
        raise ValueError(f"unknown activity {activity!r}; known: {', '.join(ACTIVITIES)}") from None
    pose = {k: np.full(t.shape, REST_POSE.get(k, 0.0)) for k in POSE_KEYS}
    for k, v in fn(t, motion).items():
        pose[k] = np.broadcast_to(np.asarray(v, dtype=np.float64), t.shape).copy()
    return pose


def forward_kinematics(pose: dict[str, np.ndarray], lengths: Optional[dict[str, float]] = None,
                       yaw: float = 0.0, origin=(0.0, 0.9, 3.0)) -> np.ndarray:
    """Joint positions [21, 3, t] for per-frame pose angles.

    Axes: x to the subject's left, y up, z away from the camera (the subject
    faces the camera, i.e. towards -z).
    """
    L = dict(BONE_LENGTHS)
    if lengths:
        L.update(lengths)
    n = len(next(iter(pose.values())))
    idx = {name: i for i, name in enumerate(JOINT_NAMES)}
    pos = np.zeros((len(JOINT_NAMES), n, 3))
    up, down = np.array([0.0, 1.0, 0.0]), np.array([0.0, -1.0, 0.0])
    left, fwd = np.array([1.0, 0.0, 0.0]), np.array([0.0, 0.0, -1.0])

    body = _ry(np.full(n, yaw))
    root = np.asarray(origin, dtype=np.float64) + np.outer(pose["bounce"], up)
    pos[idx["spine_base"]] = root
    # Positive pitch leans forward (towards -z); positive flexion swings limbs forward.
    trunk = body @ _ry(pose["trunk_yaw"]) @ _rx(pose["trunk_pitch"])

    def place(child, parent, R, direction):
        pos[idx[child]] = pos[idx[parent]] + L[child] * _apply(R, direction)

    place("spine_mid", "spine_base", trunk, up)
    place("spine_shoulder", "spine_mid", trunk, up)
    place("neck", "spine_shoulder", trunk, up)
    place("head", "neck", trunk, up)
    for side, sign in (("left", 1.0), ("right", -1.0)):
        s = side[0]
        place(f"shoulder_{side}", "spine_shoulder", trunk, sign * left)
        upper = trunk @ _rz(sign * pose[f"sh_abd_{s}"]) @ _rx(-pose[f"sh_flex_{s}"])
        place(f"elbow_{side}", f"shoulder_{side}", upper, down)
        fore = upper @ _rx(-pose[f"elbow_{s}"])
        place(f"wrist_{side}", f"elbow_{side}", fore, down)
        place(f"hand_{side}", f"wrist_{side}", fore, down)
        pelvis = body
        place(f"hip_{side}", "spine_base", pelvis, sign * left)
        thigh = pelvis @ _rz(sign * pose[f"hip_abd_{s}"]) @ _rx(-pose[f"hip_flex_{s}"])
        place(f"knee_{side}", f"hip_{side}", thigh, down)
        shin = thigh @ _rx(pose[f"knee_{s}"])
        place(f"ankle_{side}", f"knee_{side}", shin, down)
        place(f"foot_{side}", f"ankle_{side}", shin, fwd)
    return np.transpose(pos, (0, 2, 1))


# --------------------------------------------------------------------------
# subjects and corpora


@dataclass(frozen=True)
class SubjectProfile:
    subject_id: str
    limb_scale: dict = field(default_factory=dict)     # limb group -> factor
    freq_scale: float = 1.0
    amplitude: float = 1.0
    yaw: float = 0.0
    origin: tuple = (0.0, 0.9, 3.0)

    def lengths(self) -> dict[str, float]:
        out = dict(BONE_LENGTHS)
        for group, bones in LIMB_GROUPS.items():
            for b in bones:
                out[b] = BONE_LENGTHS[b] * self.limb_scale.get(group, 1.0)
        return out


def random_subject(subject_id: str, rng: np.random.Generator) -> SubjectProfile:
    height = rng.uniform(0.88, 1.12)
    scale = {g: float(height * rng.uniform(0.94, 1.06)) for g in LIMB_GROUPS}
    return SubjectProfile(
        subject_id, scale,
        freq_scale=float(rng.uniform(0.88, 1.12)),
        amplitude=float(rng.uniform(0.85, 1.15)),
        yaw=float(rng.uniform(-0.17, 0.17)),
        origin=(float(rng.uniform(-0.4, 0.4)), 0.9 * height, float(rng.uniform(2.6, 3.4))),
    )


def synth_sequence(activity: str, subject: SubjectProfile, frames: int, rate_hz: float = TARGET_HZ,
                   phase: float = 0.0, noise: float = 0.0,
                   rng: Optional[np.random.Generator] = None) -> SkeletonSequence:
    _, base = ACTIVITIES[activity]
    t = np.arange(frames) / rate_hz
    motion = MotionParams(base * subject.freq_scale, phase, subject.amplitude)
    coords = forward_kinematics(pose_angles(activity, t, motion), subject.lengths(), subject.yaw, subject.origin)
    if noise:
        coords = coords + (rng or np.random.default_rng(0)).normal(0.0, noise, coords.shape)
    return SkeletonSequence(coords, JOINT_NAMES, rate_hz, subject_id=subject.subject_id,
                            activity_label=activity, source=f"synth/{activity}/{subject.subject_id}")


def activity_names(n_activities: int) -> list[str]:
    if not 2 <= n_activities <= len(ACTIVITIES):
        raise ValueError(f"n_activities must be in [2, {len(ACTIVITIES)}], got {n_activities}")
    return list(ACTIVITIES)[:n_activities]


def synth_skeleton_sequences(n_activities: int = 4, n_subjects: int = 5, frames: int = 4 * WINDOW,
                             seed: int = 0, noise: float = 0.0, subject_offset: int = 0,
                             rate_hz: float = TARGET_HZ) -> list[SkeletonSequence]:
    """One continuous recording per (subject, activity), subjects outermost.

    Subject ``s`` has the same body and style across activities; each
    (activity, subject) pair gets a fresh random phase. ``subject_offset``
    shifts subject numbering so disjoint cohorts can be drawn.
    """
    names = activity_names(n_activities)
    out = []
    for s in range(subject_offset, subject_offset + n_subjects):
        subject = random_subject(f"S{s:03d}", np.random.default_rng([seed, s]))
        for a, name in enumerate(names):
            prng = np.random.default_rng([seed, s, a])
            out.append(synth_sequence(name, subject, frames, rate_hz, phase=float(prng.uniform(0, 2 * math.pi)),
                                      noise=noise, rng=prng))
    return out


def synth_skeleton_corpus(n_activities: int = 4, n_subjects: int = 5, windows: int = 4, seed: int = 0,
                          noise: float = 0.0, subject_offset: int = 0) -> list[WindowedSample]:
    """Labelled 150-frame windows: every activity performed by every subject."""
    out = []
    for seq in synth_skeleton_sequences(n_activities, n_subjects, windows * WINDOW, seed, noise, subject_offset):
        out.extend(window(seq))
    return out


# --------------------------------------------------------------------------
# virtual IMU


@dataclass
class SensorSample:
    series: np.ndarray        # [t, channels]
    label: int
    activity: str = ""
    subject_id: str = ""


def _torso_frames(coords: np.ndarray) -> np.ndarray:
    """Per-frame rotation [t, 3, 3] whose rows are the torso's left, up and forward axes."""
    idx = {n: i for i, n in enumerate(JOINT_NAMES)}
    up = coords[idx["spine_shoulder"]] - coords[idx["spine_base"]]
    across = coords[idx["hip_left"]] - coords[idx["hip_right"]]
    up = up / np.linalg.norm(up, axis=0, keepdims=True)
    across = across - (across * up).sum(axis=0, keepdims=True) * up
    across = across / np.linalg.norm(across, axis=0, keepdims=True)
    fwd = np.cross(across.T, up.T).T
    return np.stack([across.T, up.T, fwd.T], axis=1)


def _second_difference(x: np.ndarray) -> np.ndarray:
    """Central second difference along the last axis; end frames copy their neighbour."""
    d = np.zeros_like(x)
    d[..., 1:-1] = x[..., 2:] - 2.0 * x[..., 1:-1] + x[..., :-2]
    if x.shape[-1] > 2:
        d[..., 0] = d[..., 1]
        d[..., -1] = d[..., -2]
    return d


def synth_imu_from_skeleton(sample, mounts: Sequence[str] = IMU_MOUNTS, noise: float = 0.0,
                            seed=0, rate_hz: float = TARGET_HZ, label: int = -1) -> SensorSample:
    """Accelerometer and gyroscope channels for sensors strapped to ``mounts``.

    Per mount: specific force (acceleration minus gravity, i.e. +g upward at
    rest) expressed in the torso frame, then the rate of change of the
    mounted bone's orientation angle in the yz, zx and xy planes.
    """
    coords = sample.coords if isinstance(sample, WindowedSample) else np.asarray(sample, dtype=np.float64)
    t = coords.shape[2]
    frames = _torso_frames(coords)
    gravity = np.array([0.0, GRAVITY, 0.0])
    channels = []
    for name in mounts:
        j = CANONICAL.index(name)
        acc = _second_difference(coords[j]).T * rate_hz ** 2 + gravity          # [t, 3]
        channels.append(np.einsum("tij,tj->ti", frames, acc))
        bone = (coords[j] - coords[CANONICAL.parent[j]]).T                      # [t, 3]
        gyro = np.zeros((t, 3))
        for axis, (a, b) in enumerate(((1, 2), (2, 0), (0, 1))):
            ang = np.unwrap(np.arctan2(bone[:, b], bone[:, a]))
            gyro[:, axis] = np.gradient(ang) * rate_hz
        channels.append(gyro)
    series = np.concatenate(channels, axis=1)
    if noise:
        series = series + np.random.default_rng(seed).normal(0.0, noise, series.shape)
    activity = getattr(sample, "activity_label", "") or ""
    subject = getattr(sample, "subject_id", "") or ""
    return SensorSample(series, label, activity, subject)


def synth_imu_dataset(samples: Sequence[WindowedSample], labels: Sequence[str], noise: float = 0.05,
                      seed: int = 0) -> list[SensorSample]:
    """One IMU window per skeleton window; label indices follow ``labels``."""
    lookup = {name: i for i, name in enumerate(labels)}
    out = []
    for i, s in enumerate(samples):
        if s.activity_label not in lookup:
            raise ValueError(f"sample activity {s.activity_label!r} not among labels")
        out.append(synth_imu_from_skeleton(s, noise=noise, seed=[seed, i], label=lookup[s.activity_label]))
    return out
