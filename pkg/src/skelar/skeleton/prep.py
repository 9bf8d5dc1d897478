"""Bring skeleton sequences onto the canonical 21-joint, 30 Hz, 150-frame layout."""
from __future__ import annotations

from dataclasses import replace

import numpy as np

from ..errors import ContractError, DataError
from .io import HUMANML_JOINT_NAMES, NTU_JOINT_NAMES, SkeletonSequence, WindowedSample
from .topology import JOINT_NAMES

TARGET_HZ = 30.0
WINDOW = 150

# HumanML3D has no hand joints; hands are placed along the forearm direction
# this fraction of the forearm length beyond the wrist.
HAND_EXTENSION = 0.3


def remap_ntu25_to_21(seq: SkeletonSequence) -> SkeletonSequence:
    """Drop the two hand-tip and two thumb joints."""
    if seq.joints == JOINT_NAMES:
        return seq
    if seq.num_joints != len(NTU_JOINT_NAMES):
        raise ContractError(f"expected 25 NTU joints, got {seq.num_joints}")
    return replace(seq, coords=seq.coords[:len(JOINT_NAMES)].copy(), joints=JOINT_NAMES)


def remap_humanml22_to_21(seq: SkeletonSequence) -> SkeletonSequence:
    """Collapse the three HumanML3D spine joints into two and rename the rest.

    With spine joints s1, s2, s3 (pelvis side first) the canonical
    ``spine_mid`` is midpoint(s1, s2) and ``spine_shoulder`` is
    midpoint(s2, s3). Collar joints have no canonical counterpart and are
    dropped; canonical hands are extrapolated from elbow and wrist.
    """
    if seq.joints == JOINT_NAMES:
        return seq
    if seq.num_joints != len(HUMANML_JOINT_NAMES):
        raise ContractError(f"expected 22 HumanML3D joints, got {seq.num_joints}")
    src = {name: seq.coords[i] for i, name in enumerate(HUMANML_JOINT_NAMES)}
    rename = {"spine_base": "pelvis"}
    out = np.empty((len(JOINT_NAMES), 3, seq.num_frames))
    for i, name in enumerate(JOINT_NAMES):
        if name == "spine_mid":
            out[i] = (src["spine1"] + src["spine2"]) / 2.0
        elif name == "spine_shoulder":
            out[i] = (src["spine2"] + src["spine3"]) / 2.0
        elif name.startswith("hand_"):
            side = name.split("_")[1]
            wrist, elbow = src[f"wrist_{side}"], src[f"elbow_{side}"]
            out[i] = wrist + HAND_EXTENSION * (wrist - elbow)
        else:
            out[i] = src[rename.get(name, name)]
    return replace(seq, coords=out, joints=JOINT_NAMES)


def to_canonical(seq: SkeletonSequence) -> SkeletonSequence:
    if seq.joints == JOINT_NAMES:
        return seq
    if seq.joints == NTU_JOINT_NAMES or (seq.num_joints == 25 and seq.joints[0].startswith("joint")):
        return remap_ntu25_to_21(replace(seq, joints=NTU_JOINT_NAMES))
    if seq.joints == HUMANML_JOINT_NAMES or seq.num_joints == 22:
        return remap_humanml22_to_21(replace(seq, joints=HUMANML_JOINT_NAMES))
    raise DataError(f"unrecognised joint layout with {seq.num_joints} joints")


def resample(seq: SkeletonSequence, target_hz: float = TARGET_HZ) -> SkeletonSequence:
    """Linear interpolation onto a uniform grid spanning the original duration."""
    if seq.rate_hz <= 0:
        raise ContractError(f"rate must be positive, got {seq.rate_hz}")
    t = seq.num_frames
    if t < 2:
        raise DataError(f"need at least 2 frames to resample, got {t}")
    if seq.rate_hz == target_hz:
        return replace(seq, coords=seq.coords.copy())
    n_out = int(np.floor((t - 1) * target_hz / seq.rate_hz + 1e-9)) + 1
    # Positions in source-frame units; for integer rate ratios these are exact.
    pos = np.arange(n_out) * seq.rate_hz / target_hz
    lo = np.minimum(np.floor(pos).astype(np.int64), t - 1)
    hi = np.minimum(lo + 1, t - 1)
    frac = pos - lo
    c = seq.coords
    out = c[:, :, lo] * (1.0 - frac) + c[:, :, hi] * frac
    exact = frac == 0
    out[:, :, exact] = c[:, :, lo[exact]]
    return replace(seq, coords=out, rate_hz=float(target_hz))


def window(seq: SkeletonSequence, length: int = WINDOW) -> list[WindowedSample]:
    """Non-overlapping windows; a trailing remainder shorter than ``length`` is dropped."""
    if abs(seq.rate_hz - TARGET_HZ) > 1e-9:
        raise ContractError(f"window expects {TARGET_HZ:g} Hz input, got {seq.rate_hz:g}")
    n = seq.num_frames // length
    return [
        WindowedSample(seq.coords[:, :, k * length:(k + 1) * length].copy(), source=seq.source,
                       offset=k * length, activity_label=seq.activity_label, subject_id=seq.subject_id)
        for k in range(n)
    ]


def prepare_sequence(seq: SkeletonSequence) -> list[WindowedSample]:
    """Remap, resample to 30 Hz, and cut into 150-frame windows."""
    return window(resample(to_canonical(seq)))
