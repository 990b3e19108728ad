"""Poses, grids, orientation schemes and the group action on images and maps."""
from __future__ import annotations

import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from pushgrasp.geometry2d import (
    ActionMap,
    GridSpec,
    GroupElement,
    OrientationScheme,
    Pose2,
    act_on_map,
    dilate_mask,
    disc_structure,
    draw_gripper_footprint,
    index_from_pose,
    normalize_angle,
    pose_from_index,
    quarter_turns,
    rotate_image,
    rotation_matrix_for_grid,
)
from pushgrasp.simworld import GripperSpec

angles = st.floats(-20.0, 20.0, allow_nan=False)
coords = st.floats(-0.19, 0.19, allow_nan=False)


@given(angles)
def test_normalize_angle_range(theta):
    t = normalize_angle(theta)
    assert 0.0 <= t < 2 * math.pi
    assert math.isclose(math.cos(t), math.cos(theta), abs_tol=1e-9)
    assert math.isclose(math.sin(t), math.sin(theta), abs_tol=1e-9)


def test_quarter_turns():
    assert quarter_turns(0.0) == 0
    assert quarter_turns(math.pi / 2) == 1
    assert quarter_turns(-math.pi / 2) == 3
    assert quarter_turns(5 * math.pi) == 2
    assert quarter_turns(0.3) is None


@given(coords, coords, angles, coords, coords, angles)
def test_pose_compose_inverse(x1, y1, t1, x2, y2, t2):
    a, b = Pose2(x1, y1, t1), Pose2(x2, y2, t2)
    ident = a.compose(a.inverse())
    assert abs(ident.x) < 1e-12 and abs(ident.y) < 1e-12
    assert min(ident.theta, 2 * math.pi - ident.theta) < 1e-9
    back = a.inverse().compose(a.compose(b))
    assert math.isclose(back.x, b.x, abs_tol=1e-12) and math.isclose(back.y, b.y, abs_tol=1e-12)


def test_pose_quarter_rotation_is_exact():
    p = Pose2(0.1234567, -0.0456789, 0.2)
    q = p.rotated(math.pi / 2)
    assert (q.x, q.y) == (0.0456789, 0.1234567)
    for _ in range(3):
        q = q.rotated(math.pi / 2)
    assert (q.x, q.y) == (p.x, p.y)


def test_grid_geometry():
    g = GridSpec.centered(64)
    assert g.h == g.w == 64
    assert g.bounds == pytest.approx((-0.2, -0.2, 0.2, 0.2), abs=1e-12)
    X, Y = g.pixel_centers()
    assert X[0, 0] == pytest.approx(g.origin[0]) and Y[0, 0] == pytest.approx(g.origin[1])
    assert X[0, 1] - X[0, 0] == pytest.approx(g.meters_per_pixel)
    assert Y[1, 0] - Y[0, 0] == pytest.approx(g.meters_per_pixel)
    with pytest.raises(ValueError):
        GridSpec(32, 48)
    with pytest.raises(ValueError):
        GridSpec(32, 32, -1.0)


@given(st.integers(0, 63), st.integers(0, 63))
def test_pixel_world_roundtrip(i, j):
    g = GridSpec.centered(64)
    assert g.world_to_pixel(*g.pixel_to_world(i, j)) == (i, j)


def test_world_to_pixel_outside():
    with pytest.raises(ValueError):
        GridSpec.centered(64).world_to_pixel(0.3, 0.0)


def test_orientation_schemes():
    grasp = OrientationScheme.grasp_default()
    assert (grasp.n_orient, grasp.bin_width, grasp.shift_per_generator) == (18, 10.0, 9)
    push = OrientationScheme.push_default()
    assert (push.n_orient, push.bin_width, push.shift_per_generator) == (16, 22.5, 4)
    with pytest.raises(ValueError):
        OrientationScheme(4, 15, "full")
    with pytest.raises(ValueError):
        OrientationScheme(4, 16, "quarter")


def test_half_range_identifies_opposite_angles():
    s = OrientationScheme.grasp_default()
    for c in range(s.n_orient):
        theta = s.angle_of_bin(c)
        assert s.bin_of_angle(theta) == c
        assert s.bin_of_angle(theta + math.pi) == c


def test_group_element_algebra():
    els = GroupElement.all(4)
    for a in els:
        assert (a * a.inverse()).index == 0
        for b in els:
            assert (a * b).angle == pytest.approx(math.fmod(a.angle + b.angle, 2 * math.pi))
    with pytest.raises(ValueError):
        GroupElement(1, 4) * GroupElement(1, 8)


@given(st.integers(0, 17), st.integers(0, 63), st.integers(0, 63))
def test_pose_index_roundtrip(c, i, j):
    g, s = GridSpec.centered(64), OrientationScheme.grasp_default()
    assert index_from_pose(pose_from_index(c, i, j, g, s), g, s) == (c, i, j)


def test_pose_from_index_range():
    with pytest.raises(ValueError):
        pose_from_index(18, 0, 0, GridSpec.centered(64), OrientationScheme.grasp_default())


def test_rotate_image_quarter_turn_convention():
    # a pixel at +x (right of center) moves to +y after a counterclockwise turn
    img = np.zeros((5, 5))
    img[2, 4] = 1.0
    out = rotate_image(img, math.pi / 2)
    assert out[4, 2] == 1.0 and out.sum() == 1.0


@settings(max_examples=20, deadline=None)
@given(st.integers(0, 2**31 - 1))
def test_rotate_image_group_law(seed):
    img = np.random.default_rng(seed).standard_normal((3, 8, 8))
    once = rotate_image(rotate_image(img, math.pi / 2), math.pi)
    np.testing.assert_array_equal(once, rotate_image(img, 3 * math.pi / 2))
    np.testing.assert_array_equal(rotate_image(once, math.pi / 2), img)


def test_rotate_image_torch_matches_numpy():
    torch = pytest.importorskip("torch")
    img = np.random.default_rng(1).standard_normal((2, 9, 9))
    for ang in (math.pi / 2, 0.7):
        np.testing.assert_allclose(rotate_image(torch.from_numpy(img), ang).numpy(), rotate_image(img, ang),
                                   atol=1e-12)


def test_rotation_matrix_matches_rotate_image():
    img = np.random.default_rng(2).standard_normal((7, 7))
    m = rotation_matrix_for_grid(7, 0.4)
    np.testing.assert_allclose(m @ img.ravel(), rotate_image(img, 0.4).ravel(), atol=1e-12)


@pytest.mark.parametrize("scheme", [OrientationScheme.grasp_default(), OrientationScheme.push_default()])
def test_act_on_map_is_a_group_action(scheme):
    g = GridSpec.centered(16)
    scores = np.random.default_rng(3).standard_normal((scheme.n_orient, 16, 16))
    amap = ActionMap(scheme, g, scores)
    for a in GroupElement.all(4):
        for b in GroupElement.all(4):
            lhs = act_on_map(a, act_on_map(b, amap)).scores
            np.testing.assert_array_equal(lhs, act_on_map(a * b, amap).scores)
    one = act_on_map(GroupElement(1, 4), amap)
    np.testing.assert_array_equal(np.roll(one.scores, -scheme.shift_per_generator, axis=0),
                                  rotate_image(scores, math.pi / 2))


def test_act_on_map_moves_the_argmax_pose():
    g, s = GridSpec.centered(16), OrientationScheme.grasp_default()
    scores = np.zeros((18, 16, 16))
    scores[3, 5, 11] = 1.0
    pose = pose_from_index(3, 5, 11, g, s)
    rotated = act_on_map(GroupElement(1, 4), ActionMap(s, g, scores))
    expect = index_from_pose(pose.rotated(math.pi / 2), g, s)
    assert rotated.argmax() == expect


def test_action_map_argmax_ties_and_mask():
    g, s = GridSpec.centered(8), OrientationScheme.push_default()
    amap = ActionMap(s, g, np.ones((16, 8, 8)))
    assert amap.argmax() == (0, 0, 0)
    valid = np.zeros((8, 8), bool)
    valid[4, 6] = True
    assert amap.masked(valid).argmax() == (0, 4, 6)
    with pytest.raises(ValueError):
        ActionMap(s, g, np.ones((15, 8, 8)))


def test_dilation():
    m = np.zeros((9, 9), bool)
    m[4, 4] = True
    assert dilate_mask(m, 0).sum() == 1
    assert dilate_mask(m, 1).sum() == disc_structure(1).sum() == 5
    assert dilate_mask(m, 2).sum() == disc_structure(2).sum()


def test_gripper_footprint():
    g = GridSpec.centered(64)
    fp = draw_gripper_footprint(Pose2(0.0, 0.0, 0.0), g, GripperSpec())
    assert fp.shape == (64, 64) and set(np.unique(fp)) == {0, 1}
    fp = fp.astype(bool)
    X, _ = g.pixel_centers()
    # fingers sit at +-opening/2 along x, nothing at the pose itself
    assert np.all(np.abs(np.abs(X[fp]) - 0.04) <= 0.005 + g.meters_per_pixel)
    rot = draw_gripper_footprint(Pose2(0.0, 0.0, math.pi / 2), g, GripperSpec())
    np.testing.assert_array_equal(rot.astype(bool), rotate_image(fp, math.pi / 2))
