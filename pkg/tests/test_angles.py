import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from oracles import projected_angle_atan2
from skelar.angles import (IGNORE, coarse_bin, coordinate_targets, essential_targets, joint_angle_targets,
                           projected_angles, write_angle_csv)
from skelar.autodiff import DiffTensor, ops
from skelar.errors import ContractError
from skelar.har.synth import BONE_LENGTHS, POSE_KEYS, REST_POSE, forward_kinematics
from skelar.skeleton import CANONICAL

vec = st.lists(st.floats(-10, 10, allow_nan=False), min_size=3, max_size=3).map(np.array)


def test_orthogonal_in_yz():
    theta, ok = projected_angles([0, 1, 0], [0, 0, 1])
    assert ok[0] and theta[0] == pytest.approx(math.pi / 2, abs=1e-15)


def test_identical_vectors():
    theta, ok = projected_angles([1, 1, 1], [1, 1, 1])
    assert ok.all() and np.array_equal(theta, np.zeros(3))


def test_degenerate_projection():
    theta, ok = projected_angles([1, 0, 0], [0, 1, 0])
    assert not ok[0] and ok[2]
    assert theta[0] == 0.0 and theta[2] == pytest.approx(math.pi / 2, abs=1e-15)


def test_matches_atan2_oracle():
    rng = np.random.default_rng(7)
    e1 = rng.normal(size=(10_000, 3))
    e2 = rng.normal(size=(10_000, 3))
    theta, ok = projected_angles(e1, e2)
    worst = 0.0
    for n in range(len(e1)):
        for axis, plane in enumerate(((1, 2), (2, 0), (0, 1))):
            ref = projected_angle_atan2(e1[n], e2[n], plane)
            assert ok[n, axis] == (ref is not None)
            if ref is not None:
                worst = max(worst, abs(theta[n, axis] - ref))
    assert worst < 1e-9


def test_signed_angles_follow_right_hand_rule():
    theta, _ = projected_angles([1, 0, 0], [0, 1, 0], signed=True)
    assert theta[2] == pytest.approx(math.pi / 2)
    theta, _ = projected_angles([0, 1, 0], [1, 0, 0], signed=True)
    assert theta[2] == pytest.approx(3 * math.pi / 2)


@settings(max_examples=200, deadline=None)
@given(vec, vec, st.floats(1e-3, 1e3))
def test_scale_invariance(e1, e2, c):
    t1, ok1 = projected_angles(e1, e2)
    t2, ok2 = projected_angles(c * e1, c * e2)
    both = ok1 & ok2
    assert np.allclose(t1[both], t2[both], rtol=0, atol=1e-12)


def test_tiny_scale_keeps_angles():
    rng = np.random.default_rng(3)
    e1, e2 = rng.normal(size=(2, 50, 3))
    t1, _ = projected_angles(e1, e2)
    t2, ok = projected_angles(1e-6 * e1, 1e-6 * e2)
    assert np.allclose(t1[ok], t2[ok], rtol=0, atol=1e-12)


def test_translation_invariance(rng):
    coords = rng.normal(size=(21, 3, 20))
    shifted = coords + rng.normal(size=(3,))[None, :, None] * 100
    a = essential_targets(coords)
    b = essential_targets(shifted)
    assert np.array_equal(a[0], b[0]) and np.allclose(a[1], b[1], rtol=0, atol=1e-9)


@pytest.mark.parametrize("theta,m,cls", [(0.0, 6, 0), (math.pi / 6, 6, 1), (1.7453, 6, 3), (math.pi, 6, 6),
                                         (2 * math.pi - 1e-12, 6, 11)])
def test_coarse_bin_examples(theta, m, cls):
    assert coarse_bin(theta, m) == cls


@pytest.mark.parametrize("theta", [-1e-9, 2 * math.pi, float("nan"), 7.0])
def test_coarse_bin_range(theta):
    with pytest.raises(ValueError):
        coarse_bin(theta, 6)


@pytest.mark.parametrize("m", [1, 3, 6, 12])
def test_coarse_bin_boundaries_are_upper(m):
    for k in range(2 * m):
        assert coarse_bin(k * math.pi / m, m) == k


@settings(max_examples=300, deadline=None)
@given(st.floats(0, 2 * math.pi, exclude_max=True), st.integers(1, 24))
def test_coarse_bin_matches_interval(theta, m):
    k = coarse_bin(theta, m)
    assert 0 <= k < 2 * m
    assert k * math.pi / m <= theta or k == 0
    assert theta < (k + 1) * math.pi / m or k == 2 * m - 1


@settings(max_examples=200, deadline=None)
@given(st.floats(0.001, 2 * math.pi - 0.001), st.integers(1, 12), st.floats(-1, 1))
def test_coarse_bin_constant_inside_interval(theta, m, frac):
    width = math.pi / m
    k = coarse_bin(theta, m)
    lo, hi = k * width, (k + 1) * width
    gap = min(theta - lo, hi - theta)
    if gap > 1e-9:
        moved = theta + frac * gap * 0.5
        assert coarse_bin(moved, m) == k


def t_pose(frames=150):
    pose = {key: np.full(frames, REST_POSE.get(key, 0.0)) for key in POSE_KEYS}
    return forward_kinematics(pose, BONE_LENGTHS)


def test_static_pose_gives_constant_classes():
    coords = t_pose()
    for joint in CANONICAL.essential:
        t = joint_angle_targets(coords, joint)
        assert t.classes.shape == (3, 150)
        assert (t.classes == t.classes[:, :1]).all()


def elbow_sweep(frames=150):
    """Left arm in the xy plane; the angle between upper arm and forearm sweeps 0 to 90 degrees."""
    coords = np.zeros((21, 3, frames))
    coords[:, 1, :] = np.linspace(-1, 1, 21)[:, None]
    phi = np.deg2rad(90.0) * np.arange(frames) / frames
    shoulder = CANONICAL.index("shoulder_left")
    elbow = CANONICAL.index("elbow_left")
    wrist = CANONICAL.index("wrist_left")
    coords[shoulder] = np.array([1.0, 0.0, 0.0])[:, None]
    coords[elbow] = 0.0
    coords[wrist] = np.stack([np.cos(phi), np.sin(phi), np.zeros(frames)]) * 0.8
    return coords


def test_elbow_sweep_classes_rise_from_0_to_2():
    t = joint_angle_targets(elbow_sweep(), "elbow_left", m=6)
    z = t.classes[2]
    assert z[0] == 0 and z[-1] == 2
    assert np.all(np.diff(z) >= 0)
    assert (t.classes[0] == IGNORE).all()


def test_targets_compose_frame_by_frame(rng):
    coords = rng.normal(size=(21, 3, 30))
    for joint in CANONICAL.essential:
        t = joint_angle_targets(coords, joint, m=6)
        parent, child = CANONICAL.incident_bones(joint)
        for f in range(30):
            theta, ok = projected_angles(coords[parent, :, f] - coords[joint, :, f],
                                         coords[child, :, f] - coords[joint, :, f])
            for a in range(3):
                expect = coarse_bin(theta[a], 6) if ok[a] else IGNORE
                assert t.classes[a, f] == expect


def test_ignore_exactly_where_undefined(rng):
    coords = rng.normal(size=(21, 3, 10))
    joint = CANONICAL.index("knee_left")
    parent, _ = CANONICAL.incident_bones(joint)
    coords[parent, :, 4] = coords[joint, :, 4] + np.array([1.0, 0.0, 0.0])
    t = joint_angle_targets(coords, joint)
    assert t.classes[0, 4] == IGNORE and not t.defined[0, 4]
    assert ((t.classes == IGNORE) == ~t.defined).all()


def test_arccos_classes_stay_in_lower_half(rng):
    classes, _, defined = essential_targets(rng.normal(size=(21, 3, 40)), m=6)
    assert classes[defined].max() < 6


def test_non_essential_joint_rejected(rng):
    with pytest.raises(ContractError):
        joint_angle_targets(rng.normal(size=(21, 3, 4)), "spine_shoulder")


def test_coordinate_targets_echo(rng):
    coords = rng.normal(size=(21, 3, 150))
    out = coordinate_targets(coords)
    assert np.array_equal(out, coords) and out is not coords
    assert ops.mse(DiffTensor(out), DiffTensor(coords)).values == 0.0


def test_mse_two_point_toy():
    pred = DiffTensor(np.array([1.0, 3.0]))
    target = DiffTensor(np.array([0.0, 1.0]))
    # ((1 - 0)^2 + (3 - 1)^2) / 2
    assert ops.mse(pred, target).values == pytest.approx(2.5, abs=1e-15)


def test_angle_csv(tmp_path):
    t = joint_angle_targets(elbow_sweep(4), "elbow_left")
    write_angle_csv(tmp_path / "a.csv", t)
    lines = (tmp_path / "a.csv").read_text().splitlines()
    assert lines[0] == "frame,axis,angle_rad,class" and len(lines) == 1 + 12
    assert lines[1] == "0,x,,-1"
