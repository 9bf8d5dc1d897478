"""Skeleton sequences and the file formats they are read from and written to."""
from __future__ import annotations

import io
import json
import os
from dataclasses import dataclass, field, replace
from typing import IO, Optional, Union

import numpy as np

from ..errors import DataError, ParseError
from .topology import JOINT_NAMES

NTU_JOINT_NAMES: tuple[str, ...] = JOINT_NAMES + (
    "handtip_left", "thumb_left", "handtip_right", "thumb_right",
)

HUMANML_JOINT_NAMES: tuple[str, ...] = (
    "pelvis", "hip_left", "hip_right", "spine1", "knee_left", "knee_right",
    "spine2", "ankle_left", "ankle_right", "spine3", "foot_left", "foot_right",
    "neck", "collar_left", "collar_right", "head", "shoulder_left", "shoulder_right",
    "elbow_left", "elbow_right", "wrist_left", "wrist_right",
)

MAX_MISSING_FRACTION = 0.2


class EmptySequenceError(DataError):
    pass


@dataclass
class SkeletonSequence:
    """Joint coordinates ``coords[v, 3, t]`` in metres, camera frame."""

    coords: np.ndarray
    joints: tuple[str, ...]
    rate_hz: float
    subject_id: Optional[str] = None
    activity_label: Optional[str] = None
    source: str = ""

    def __post_init__(self):
        self.coords = np.asarray(self.coords, dtype=np.float64)
        self.joints = tuple(self.joints)
        if self.coords.ndim != 3 or self.coords.shape[1] != 3:
            raise DataError(f"coords must be [v, 3, t], got {self.coords.shape}")
        if self.coords.shape[0] != len(self.joints):
            raise DataError(f"{self.coords.shape[0]} joint rows but {len(self.joints)} joint names")

    @property
    def num_frames(self) -> int:
        return self.coords.shape[2]

    @property
    def num_joints(self) -> int:
        return self.coords.shape[0]


@dataclass
class WindowedSample:
    """A 150-frame, 30 Hz canonical-skeleton window."""

    coords: np.ndarray
    source: str = ""
    offset: int = 0
    activity_label: Optional[str] = None
    subject_id: Optional[str] = None
    meta: dict = field(default_factory=dict)


# --------------------------------------------------------------------------
# NTU text format


class _Lines:
    def __init__(self, text: str, source: str):
        self.source = source
        self.lines = text.split("\n")
        # A file that does not end in a newline was cut mid-line.
        self.unterminated_last = not text.endswith("\n")
        if not self.unterminated_last:
            self.lines.pop()
        self.pos = 0

    def next(self, what: str) -> tuple[list[str], int]:
        if self.pos >= len(self.lines):
            raise ParseError(f"unexpected end of file while reading {what}", len(self.lines) + 1, self.source)
        lineno = self.pos + 1
        if self.unterminated_last and self.pos == len(self.lines) - 1:
            raise ParseError(f"truncated line while reading {what}", lineno, self.source)
        self.pos += 1
        return self.lines[lineno - 1].split(), lineno

    def next_int(self, what: str) -> int:
        fields, lineno = self.next(what)
        if len(fields) != 1:
            raise ParseError(f"expected a single integer {what}, got {len(fields)} fields", lineno, self.source)
        try:
            value = int(fields[0])
        except ValueError:
            raise ParseError(f"expected integer {what}, got {fields[0]!r}", lineno, self.source) from None
        if value < 0:
            raise ParseError(f"negative {what}: {value}", lineno, self.source)
        return value

    def rest_blank(self) -> Optional[int]:
        for i in range(self.pos, len(self.lines)):
            if self.lines[i].strip():
                return i + 1
        return None


def _parse_ntu(text: str, source: str) -> list[tuple[SkeletonSequence, float]]:
    lines = _Lines(text, source)
    n_frames = lines.next_int("frame count")
    bodies: dict[str, dict] = {}
    n_cols = None
    for f in range(n_frames):
        n_bodies = lines.next_int(f"body count of frame {f}")
        for _ in range(n_bodies):
            info, lineno = lines.next(f"body info of frame {f}")
            if not info:
                raise ParseError("empty body info line", lineno, source)
            body_id = info[0]
            n_joints = lines.next_int(f"joint count of frame {f}")
            if n_joints == 0:
                raise ParseError("body with zero joints", lines.pos, source)
            entry = bodies.setdefault(body_id, {"n_joints": n_joints, "frames": {}, "track": 0.0})
            if entry["n_joints"] != n_joints:
                raise ParseError(
                    f"body {body_id} changed joint count from {entry['n_joints']} to {n_joints}",
                    lines.pos, source)
            xyz = np.empty((n_joints, 3))
            for j in range(n_joints):
                fields, lineno = lines.next(f"joint {j} of frame {f}")
                if n_cols is None:
                    if len(fields) < 3:
                        raise ParseError(f"joint line needs at least x y z, got {len(fields)} fields",
                                         lineno, source)
                    n_cols = len(fields)
                elif len(fields) != n_cols:
                    raise ParseError(f"joint line has {len(fields)} fields, expected {n_cols}", lineno, source)
                try:
                    xyz[j] = [float(v) for v in fields[:3]]
                    entry["track"] += float(fields[11]) if n_cols >= 12 else 2.0
                except ValueError:
                    raise ParseError(f"non-numeric joint field in {fields}", lineno, source) from None
                if not np.isfinite(xyz[j]).all():
                    raise ParseError("non-finite joint coordinate", lineno, source)
            entry["frames"][f] = xyz
    trailing = lines.rest_blank()
    if trailing is not None:
        raise ParseError("unexpected content after the last frame", trailing, source)
    if not bodies:
        raise EmptySequenceError(f"{source}: no bodies in {n_frames} frames")

    out = []
    for entry in bodies.values():
        v = entry["n_joints"]
        coords = np.zeros((v, 3, n_frames))
        for f, xyz in entry["frames"].items():
            coords[:, :, f] = xyz
        names = NTU_JOINT_NAMES if v == len(NTU_JOINT_NAMES) else tuple(f"joint{i}" for i in range(v))
        out.append((SkeletonSequence(coords, names, 30.0, source=source), entry["track"] / (v * n_frames)))
    return out


def parse_ntu_bodies(stream: Union[IO[str], str], source: str = "<stream>") -> list[SkeletonSequence]:
    """Parse an NTU ``.skeleton`` text file into one raw sequence per body ID.

    Frames where a body is absent are left as zeros. Per-joint columns after
    x, y, z are ignored except the 12th (tracking state), used to rank bodies.
    """
    text = stream if isinstance(stream, str) else stream.read()
    return [seq for seq, _ in _parse_ntu(text, source)]


def parse_ntu_skeleton(stream: Union[IO[str], str], source: str = "<stream>",
                       repair: bool = True) -> SkeletonSequence:
    """Parse an NTU file and keep the single best-tracked body.

    The body with the highest mean joint tracking state wins; ties go to the
    body that appears first. Missing frames are then interpolated.
    """
    text = stream if isinstance(stream, str) else stream.read()
    bodies = _parse_ntu(text, source)
    best, best_score = bodies[0]
    for seq, score in bodies[1:]:
        if score > best_score:
            best, best_score = seq, score
    return repair_missing_frames(best) if repair else best


def format_ntu(seq: SkeletonSequence, body_id: str = "72057594037931101") -> str:
    """Serialise one body in NTU layout. Values use repr so parsing is exact."""
    buf = io.StringIO()
    v, _, t = seq.coords.shape
    buf.write(f"{t}\n")
    for f in range(t):
        buf.write("1\n")
        buf.write(f"{body_id} 0 0 0 0 0 0 0 0 2\n")
        buf.write(f"{v}\n")
        for j in range(v):
            x, y, z = (repr(float(c)) for c in seq.coords[j, :, f])
            buf.write(f"{x} {y} {z} 0 0 0 0 0 0 0 0 2\n")
    return buf.getvalue()


def write_ntu(path, seq: SkeletonSequence) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(format_ntu(seq))


def read_ntu(path) -> SkeletonSequence:
    with open(path, encoding="utf-8") as fh:
        return parse_ntu_skeleton(fh, source=os.fspath(path))


# --------------------------------------------------------------------------
# JSON exchange format


def skeleton_to_json(seq: SkeletonSequence) -> dict:
    doc = {
        "rate_hz": float(seq.rate_hz),
        "joints": list(seq.joints),
        "frames": np.transpose(seq.coords, (2, 0, 1)).tolist(),
    }
    if seq.subject_id is not None:
        doc["subject_id"] = seq.subject_id
    if seq.activity_label is not None:
        doc["activity_label"] = seq.activity_label
    return doc


def skeleton_from_json(doc: dict, source: str = "<json>") -> SkeletonSequence:
    try:
        rate = float(doc["rate_hz"])
        joints = [str(j) for j in doc["joints"]]
        frames = doc["frames"]
    except (KeyError, TypeError, ValueError) as exc:
        raise DataError(f"{source}: missing or invalid field ({exc})") from None
    if rate <= 0:
        raise DataError(f"{source}: rate_hz must be positive")
    if not frames:
        raise EmptySequenceError(f"{source}: no frames")
    arr = np.array(
        [[[np.nan if c is None else c for c in joint] for joint in frame] for frame in frames],
        dtype=np.float64,
    )
    if arr.ndim != 3 or arr.shape[1] != len(joints) or arr.shape[2] != 3:
        raise DataError(f"{source}: frames must be [t][{len(joints)}][3], got shape {arr.shape}")
    seq = SkeletonSequence(np.transpose(arr, (1, 2, 0)), joints, rate,
                           subject_id=doc.get("subject_id"), activity_label=doc.get("activity_label"),
                           source=source)
    return repair_missing_frames(seq)


def write_json(path, seq: SkeletonSequence) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(skeleton_to_json(seq), fh)


def read_json(path) -> SkeletonSequence:
    with open(path, encoding="utf-8") as fh:
        try:
            doc = json.load(fh)
        except json.JSONDecodeError as exc:
            raise ParseError(exc.msg, exc.lineno, os.fspath(path)) from None
    return skeleton_from_json(doc, source=os.fspath(path))


# --------------------------------------------------------------------------


def repair_missing_frames(seq: SkeletonSequence, max_missing: float = MAX_MISSING_FRACTION) -> SkeletonSequence:
    """Linearly interpolate frames that are all-zero or contain NaN.

    Raises DataError when more than ``max_missing`` of the frames are missing.
    """
    c = seq.coords
    t = c.shape[2]
    missing = np.isnan(c).any(axis=(0, 1)) | (c == 0).all(axis=(0, 1))
    if not missing.any():
        return seq
    n_missing = int(missing.sum())
    if n_missing == t or n_missing > max_missing * t:
        raise DataError(f"{seq.source or 'sequence'}: {n_missing}/{t} frames missing (limit {max_missing:.0%})")
    good = np.nonzero(~missing)[0]
    frames = np.arange(t)
    flat = c.reshape(-1, t)
    fixed = np.empty_like(flat)
    for row in range(flat.shape[0]):
        fixed[row] = np.interp(frames, good, flat[row, good])
    return replace(seq, coords=fixed.reshape(c.shape))
