"""Simulator: scenes, serialization, rendering, quasi-static pushing and grasping."""
from __future__ import annotations

import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from pushgrasp import collision as cg
from pushgrasp.geometry2d import GridSpec, Pose2, rotate_image
from pushgrasp.simworld import (
    CONSTRAINED_CASES,
    Body,
    GripperSpec,
    InvalidAction,
    Scene,
    SceneParseError,
    SceneTooDense,
    contacting_neighbors,
    deserialize_scene,
    evaluate_grasp,
    execute_grasp,
    execute_push,
    push_start_valid,
    rect_vertices,
    render_depth,
    render_masks,
    restore,
    serialize_scene,
    snapshot,
    spawn_constrained_case,
    spawn_random_scene,
    write_label_pgm,
    write_pgm,
)

GRID = GridSpec.centered(64)


def box_scene(*boxes):
    """Boxes given as ``(x, y, theta, a, b)``."""
    bodies = [Body(k, rect_vertices(a, b), Pose2(x, y, t), 0.03) for k, (x, y, t, a, b) in enumerate(boxes)]
    return Scene(bodies)


def test_body_validation():
    with pytest.raises(ValueError):
        Body(0, rect_vertices(0.02, 0.02)[::-1], Pose2(0, 0))
    with pytest.raises(ValueError):
        Body(0, np.array([[0.0, 0.0], [1e-4, 0.0], [0.0, 1e-4]]), Pose2(0, 0))
    b = Body(0, rect_vertices(0.04, 0.02), Pose2(0, 0, 0))
    assert b.area == pytest.approx(8e-4)
    assert b.graspable_width(0.0) == pytest.approx(0.04)
    assert b.graspable_width(math.pi / 2) == pytest.approx(0.02)


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 10**6), st.integers(1, 8))
def test_random_scene_is_valid(seed, n):
    scene = spawn_random_scene(n, seed)
    assert len(scene.bodies) == n
    assert scene.max_penetration() == 0.0
    for b in scene.bodies:
        wv = b.world_vertices()
        assert wv.min() > -0.2 and wv.max() < 0.2
    again = spawn_random_scene(n, seed)
    assert serialize_scene(again) == serialize_scene(scene)


def test_random_scene_errors():
    with pytest.raises(ValueError):
        spawn_random_scene(0, 0)
    with pytest.raises(SceneTooDense):
        spawn_random_scene(30, 0, max_rejections=5)


@pytest.mark.parametrize("case_id", sorted(CONSTRAINED_CASES))
def test_constrained_cases(case_id):
    scene, target = spawn_constrained_case(case_id, 3)
    assert scene.max_penetration() == 0.0
    assert contacting_neighbors(scene, target)
    a, _ = spawn_constrained_case(case_id, 3)
    b, _ = spawn_constrained_case(case_id, 3, rotation=0.0)
    assert serialize_scene(a) == serialize_scene(scene)
    assert len(b.bodies) == len(a.bodies)
    with pytest.raises(ValueError):
        spawn_constrained_case(99, 0)


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 10**6), st.integers(1, 6), st.integers(0, 5))
def test_serialization_roundtrip(seed, n, draws):
    scene = spawn_random_scene(n, seed)
    scene.rng.random(draws)
    data = serialize_scene(scene)
    back = deserialize_scene(data)
    assert serialize_scene(back) == data
    # the stored generator continues the same stream
    assert back.rng.random() == scene.rng.random()


def test_parse_errors_report_offsets():
    data = serialize_scene(spawn_random_scene(3, 1))
    with pytest.raises(SceneParseError) as exc:
        deserialize_scene(b"XXXX" + data[4:])
    assert exc.value.offset == 0
    with pytest.raises(SceneParseError) as exc:
        deserialize_scene(data[:4] + b"\x09\x00" + data[6:])
    assert exc.value.offset == 4
    with pytest.raises(SceneParseError) as exc:
        deserialize_scene(data[:-3])
    assert exc.value.offset > 0
    with pytest.raises(SceneParseError):
        deserialize_scene(data + b"\x00")


def test_snapshot_restore_independent():
    scene = spawn_random_scene(4, 2)
    snap = snapshot(scene)
    scene.bodies[0].pose = Pose2(0.1, 0.1, 0.0)
    assert serialize_scene(restore(snap)) == snap.data
    assert serialize_scene(restore(snap)) != serialize_scene(scene)


def test_render_depth_and_masks():
    scene = box_scene((0.0, 0.0, 0.0, 0.06, 0.04), (0.1, 0.1, 0.0, 0.03, 0.03))
    scene.bodies[1].height = 0.02
    depth = render_depth(scene, GRID)
    masks = render_masks(scene, GRID)
    assert depth.shape == (64, 64)
    assert set(np.unique(depth)) == {0.0, 0.02, 0.03}
    assert masks.ids == [0, 1]
    np.testing.assert_array_equal(masks.union, depth > 0)
    assert not (masks.masks[0] & masks.masks[1]).any()
    # pixel area approximates polygon area
    px = GRID.meters_per_pixel ** 2
    assert masks.mask_of(0).sum() * px == pytest.approx(0.0024, rel=0.15)
    empty = render_masks(Scene([]), GRID)
    assert empty.masks.shape == (0, 64, 64) and not empty.union.any()


def test_render_rotation_equivariance():
    scene = spawn_random_scene(5, 11)
    depth = render_depth(scene, GRID)
    rot = render_depth(scene.rotated(math.pi / 2), GRID)
    np.testing.assert_array_equal(rot, rotate_image(depth, math.pi / 2))


def test_pgm_writers(tmp_path):
    scene = spawn_random_scene(3, 4)
    write_pgm(tmp_path / "d.pgm", render_depth(scene, GRID))
    raw = (tmp_path / "d.pgm").read_bytes()
    assert raw.startswith(b"P5\n64 64\n65535\n") and len(raw) == len(b"P5\n64 64\n65535\n") + 64 * 64 * 2
    write_label_pgm(tmp_path / "l.pgm", render_masks(scene, GRID))
    vals = np.frombuffer((tmp_path / "l.pgm").read_bytes()[-64 * 64 * 2:], dtype=">u2")
    assert set(np.unique(vals)) <= {0, 1, 2, 3}


def test_push_moves_a_free_box():
    scene = box_scene((0.0, 0.0, 0.0, 0.04, 0.04))
    out = execute_push(scene, Pose2(-0.05, 0.0, 0.0), distance=0.08)
    b = out.body(0)
    assert b.pose.x > 0.01
    assert abs(b.pose.y) < 1e-3
    assert scene.body(0).pose.x == 0.0  # input untouched


def test_push_missing_everything_is_a_noop():
    scene = box_scene((0.0, 0.0, 0.0, 0.04, 0.04))
    out = execute_push(scene, Pose2(-0.1, 0.1, 0.0), distance=0.05)
    assert serialize_scene(out) == serialize_scene(scene)


def test_push_preconditions():
    scene = box_scene((0.0, 0.0, 0.0, 0.04, 0.04))
    with pytest.raises(InvalidAction):
        execute_push(scene, Pose2(0.0, 0.0, 0.0))
    with pytest.raises(InvalidAction):
        execute_push(scene, Pose2(0.3, 0.0, 0.0))
    with pytest.raises(InvalidAction):
        execute_push(scene, Pose2(-0.1, 0.0, 0.0), distance=0.0)
    assert not push_start_valid(scene, 0.0, 0.0, GripperSpec())
    assert push_start_valid(scene, -0.1, 0.0, GripperSpec())


@settings(max_examples=10, deadline=None)
@given(st.integers(0, 10**6))
def test_push_keeps_scene_physical(seed):
    scene = spawn_random_scene(5, seed)
    rng = np.random.default_rng(seed)
    b = scene.bodies[0]
    for _ in range(50):
        ang = rng.uniform(0, 2 * math.pi)
        start = Pose2(b.pose.x - 0.06 * math.cos(ang), b.pose.y - 0.06 * math.sin(ang), ang)
        if push_start_valid(scene, start.x, start.y, GripperSpec()):
            break
    else:
        return
    out = execute_push(scene, start)
    assert out.max_penetration() < 2e-3
    for body in out.bodies:
        wv = body.world_vertices()
        assert wv.min() >= -0.2 - 1e-9 and wv.max() <= 0.2 + 1e-9
    assert [cg.polygon_area(x.vertices) for x in out.bodies] == [cg.polygon_area(x.vertices) for x in scene.bodies]


def test_grasp_outcomes():
    scene = box_scene((0.0, 0.0, 0.0, 0.04, 0.03))
    ok = evaluate_grasp(scene, Pose2(0.0, 0.0, 0.0))
    assert ok.success and ok.removed_body == 0
    assert evaluate_grasp(scene, Pose2(0.1, 0.1, 0.0)).reason == "empty_corridor"
    # fingers land on the box when closing across a 10 cm side
    wide = box_scene((0.0, 0.0, 0.0, 0.10, 0.03))
    assert evaluate_grasp(wide, Pose2(0.0, 0.0, 0.0)).reason == "finger_collision"
    pair = box_scene((-0.012, 0.0, 0.0, 0.02, 0.02), (0.012, 0.0, 0.0, 0.02, 0.02))
    assert evaluate_grasp(pair, Pose2(0.0, 0.0, 0.0)).reason == "multiple_bodies"
    outcome, after = execute_grasp(scene, Pose2(0.0, 0.0, 0.0))
    assert outcome.success and after.ids == []
    outcome, after = execute_grasp(scene, Pose2(0.1, 0.1, 0.0))
    assert after is scene


def test_grasp_thin_contact():
    scene = box_scene((0.0, 0.0, 0.0, 0.04, 0.03))
    # corridor only clips the box edge
    out = evaluate_grasp(scene, Pose2(0.0, 0.0245, 0.0))
    assert not out.success and out.reason == "thin_contact"


def test_grasp_outcome_consistency():
    from pushgrasp.simworld import GraspOutcome

    with pytest.raises(ValueError):
        GraspOutcome(True, None)
    with pytest.raises(ValueError):
        GraspOutcome(False, 3)
