"""Projected bone-pair rotation angles and their coarse interval classes."""
from __future__ import annotations

import csv
import math
from dataclasses import dataclass
from typing import Union

import numpy as np

from .errors import ContractError
from .skeleton.io import WindowedSample
from .skeleton.topology import CANONICAL, SkeletonTopology

IGNORE = -1
DEGENERATE_NORM = 1e-8
DEFAULT_BINS = 6
AXES = ("x", "y", "z")

# Component pairs spanning the plane orthogonal to each axis, in
# right-handed order so signed angles follow the right-hand rule.
_PLANES = ((1, 2), (2, 0), (0, 1))


def projected_angles(e1, e2, signed: bool = False) -> tuple[np.ndarray, np.ndarray]:
    """Angles between ``e1`` and ``e2`` after projecting onto the yz, zx and xy planes.

    Inputs are [..., 3]. Returns ``(theta, defined)`` both shaped [..., 3];
    theta is in [0, pi] (or [0, 2*pi) when ``signed``) and is 0 wherever
    either projection has norm below 1e-8, which ``defined`` flags False.
    """
    e1 = np.asarray(e1, dtype=np.float64)
    e2 = np.asarray(e2, dtype=np.float64)
    theta = np.zeros(np.broadcast_shapes(e1.shape, e2.shape))
    defined = np.zeros(theta.shape, dtype=bool)
    for axis, (i, j) in enumerate(_PLANES):
        a1, b1 = e1[..., i], e1[..., j]
        a2, b2 = e2[..., i], e2[..., j]
        n1 = np.hypot(a1, b1)
        n2 = np.hypot(a2, b2)
        ok = (n1 >= DEGENERATE_NORM) & (n2 >= DEGENERATE_NORM)
        s1 = np.where(ok, n1, 1.0)
        s2 = np.where(ok, n2, 1.0)
        u1a, u1b = a1 / s1, b1 / s1
        u2a, u2b = a2 / s2, b2 / s2
        cos = np.clip(u1a * u2a + u1b * u2b, -1.0, 1.0)
        ang = np.arccos(cos)
        # arccos loses precision near 0 and pi; use the half-angle form there.
        steep = np.abs(cos) > 0.9
        if steep.any():
            half = 2.0 * np.arctan2(np.hypot(u1a - u2a, u1b - u2b), np.hypot(u1a + u2a, u1b + u2b))
            ang = np.where(steep, half, ang)
        if signed:
            cross = u1a * u2b - u1b * u2a
            ang = np.where(cross < 0, 2.0 * math.pi - ang, ang)
            ang = np.where(ang >= 2.0 * math.pi, 0.0, ang)
        theta[..., axis] = np.where(ok, ang, 0.0)
        defined[..., axis] = ok
    return theta, defined


def coarse_bin(theta, m: int = DEFAULT_BINS):
    """Index of the half-open interval [k*pi/m, (k+1)*pi/m) containing theta."""
    if m < 1:
        raise ContractError(f"m must be positive, got {m}")
    th = np.asarray(theta, dtype=np.float64)
    if np.any(~np.isfinite(th)) or np.any(th < 0) or np.any(th >= 2.0 * math.pi):
        raise ValueError("angle outside [0, 2*pi)")
    width = math.pi / m
    idx = np.floor(th * m / math.pi).astype(np.int64)
    # Boundaries are the floats k*pi/m; fix floor() rounding on either side.
    idx = np.where(th >= (idx + 1) * width, idx + 1, idx)
    idx = np.where(th < idx * width, idx - 1, idx)
    idx = np.clip(idx, 0, 2 * m - 1)
    return int(idx) if np.ndim(theta) == 0 else idx


@dataclass
class AngleTargetSet:
    m: int
    classes: np.ndarray   # [3, t] ints in [0, 2m) or IGNORE
    angles: np.ndarray    # [3, t] radians, 0 where undefined
    defined: np.ndarray   # [3, t] bool

    @property
    def num_classes(self) -> int:
        return 2 * self.m


def bone_pair(coords: np.ndarray, joint: int, topology: SkeletonTopology = CANONICAL):
    """Per-frame bone vectors [t, 3] from ``joint`` towards its parent and its child."""
    try:
        parent, child = topology.incident_bones(joint)
    except ValueError as exc:
        raise ContractError(str(exc)) from None
    e1 = (coords[parent] - coords[joint]).T
    e2 = (coords[child] - coords[joint]).T
    return e1, e2


def joint_angle_targets(sample: Union[WindowedSample, np.ndarray], joint: Union[int, str],
                        m: int = DEFAULT_BINS, signed: bool = False,
                        topology: SkeletonTopology = CANONICAL) -> AngleTargetSet:
    coords = sample.coords if isinstance(sample, WindowedSample) else np.asarray(sample)
    if isinstance(joint, str):
        joint = topology.index(joint)
    e1, e2 = bone_pair(coords, joint, topology)
    theta, defined = projected_angles(e1, e2, signed=signed)
    theta, defined = theta.T, defined.T
    classes = np.full(theta.shape, IGNORE, dtype=np.int64)
    classes[defined] = coarse_bin(theta[defined], m)
    return AngleTargetSet(m, classes, theta, defined)


def essential_targets(coords: np.ndarray, m: int = DEFAULT_BINS, signed: bool = False,
                      topology: SkeletonTopology = CANONICAL):
    """Stacked targets for every essential joint: classes, angles, defined, each [J, 3, t]."""
    sets = [joint_angle_targets(coords, j, m, signed, topology) for j in topology.essential]
    return (np.stack([s.classes for s in sets]), np.stack([s.angles for s in sets]),
            np.stack([s.defined for s in sets]))


def coordinate_targets(sample: Union[WindowedSample, np.ndarray]) -> np.ndarray:
    coords = sample.coords if isinstance(sample, WindowedSample) else np.asarray(sample)
    return np.array(coords, dtype=np.float64, copy=True)


def write_angle_csv(path, targets: AngleTargetSet) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["frame", "axis", "angle_rad", "class"])
        for f in range(targets.classes.shape[1]):
            for a, name in enumerate(AXES):
                angle = repr(float(targets.angles[a, f])) if targets.defined[a, f] else ""
                w.writerow([f, name, angle, int(targets.classes[a, f])])
