"""The canonical 21-joint skeleton graph.

Joint order follows the NTU RGB+D layout with the hand-tip and thumb joints
(NTU 22-25) dropped, so canonical index i is NTU joint i+1:

====  ================  ==============
 idx  joint             parent
====  ================  ==============
  0   spine_base        (root)
  1   spine_mid         spine_base
  2   neck              spine_shoulder
  3   head              neck
  4   shoulder_left     spine_shoulder
  5   elbow_left        shoulder_left
  6   wrist_left        elbow_left
  7   hand_left         wrist_left
  8   shoulder_right    spine_shoulder
  9   elbow_right       shoulder_right
 10   wrist_right       elbow_right
 11   hand_right        wrist_right
 12   hip_left          spine_base
 13   knee_left         hip_left
 14   ankle_left        knee_left
 15   foot_left         ankle_left
 16   hip_right         spine_base
 17   knee_right        hip_right
 18   ankle_right       knee_right
 19   foot_right        ankle_right
 20   spine_shoulder    spine_mid
====  ================  ==============
"""
from __future__ import annotations

import hashlib
from dataclasses import dataclass, field
from functools import cached_property

import numpy as np

JOINT_NAMES: tuple[str, ...] = (
    "spine_base", "spine_mid", "neck", "head",
    "shoulder_left", "elbow_left", "wrist_left", "hand_left",
    "shoulder_right", "elbow_right", "wrist_right", "hand_right",
    "hip_left", "knee_left", "ankle_left", "foot_left",
    "hip_right", "knee_right", "ankle_right", "foot_right",
    "spine_shoulder",
)

# (parent, child)
EDGES: tuple[tuple[int, int], ...] = (
    (0, 1), (1, 20), (20, 2), (2, 3),
    (20, 4), (4, 5), (5, 6), (6, 7),
    (20, 8), (8, 9), (9, 10), (10, 11),
    (0, 12), (12, 13), (13, 14), (14, 15),
    (0, 16), (16, 17), (17, 18), (18, 19),
)

ESSENTIAL_JOINTS: tuple[str, ...] = (
    "elbow_left", "elbow_right", "wrist_left", "wrist_right",
    "knee_left", "knee_right", "ankle_left", "ankle_right",
)

DEGREE_EPS = 1e-4


@dataclass(frozen=True)
class SkeletonTopology:
    names: tuple[str, ...]
    edges: tuple[tuple[int, int], ...]
    eps: float = DEGREE_EPS
    essential_names: tuple[str, ...] = field(default=ESSENTIAL_JOINTS)

    @property
    def num_joints(self) -> int:
        return len(self.names)

    def index(self, name: str) -> int:
        return self.names.index(name)

    @cached_property
    def adjacency(self) -> np.ndarray:
        """Adjacency with self-connections."""
        a = np.eye(self.num_joints)
        for i, j in self.edges:
            a[i, j] = a[j, i] = 1.0
        return a

    @cached_property
    def degree(self) -> np.ndarray:
        return self.adjacency.sum(axis=1) + self.eps

    @cached_property
    def normalized_adjacency(self) -> np.ndarray:
        """D^-1/2 A D^1/2 with the eps-regularised degree of A."""
        d = self.degree
        return (d ** -0.5)[:, None] * self.adjacency * (d ** 0.5)[None, :]

    def neighbors(self, joint: int) -> tuple[int, ...]:
        out = [j for i, j in self.edges if i == joint] + [i for i, j in self.edges if j == joint]
        return tuple(sorted(out))

    @cached_property
    def parent(self) -> tuple[int, ...]:
        par = [-1] * self.num_joints
        for i, j in self.edges:
            par[j] = i
        return tuple(par)

    @cached_property
    def essential(self) -> tuple[int, ...]:
        return tuple(self.index(n) for n in self.essential_names)

    def incident_bones(self, joint: int) -> tuple[int, int]:
        """The two neighbours of a joint with exactly two bones: (parent side, child side)."""
        nb = self.neighbors(joint)
        if len(nb) != 2:
            raise ValueError(f"joint {self.names[joint]!r} has {len(nb)} incident bones, expected 2")
        par = self.parent[joint]
        child = nb[0] if nb[1] == par else nb[1]
        return par, child

    def is_tree(self) -> bool:
        if len(self.edges) != self.num_joints - 1:
            return False
        seen = {0}
        frontier = [0]
        while frontier:
            j = frontier.pop()
            for k in self.neighbors(j):
                if k not in seen:
                    seen.add(k)
                    frontier.append(k)
        return len(seen) == self.num_joints

    def fingerprint(self) -> str:
        h = hashlib.sha256()
        h.update("|".join(self.names).encode())
        h.update(repr(self.edges).encode())
        h.update(repr(self.eps).encode())
        return h.hexdigest()


CANONICAL = SkeletonTopology(JOINT_NAMES, EDGES)
CANONICAL_FINGERPRINT = CANONICAL.fingerprint()
