import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from caveloco.errors import NonPositiveDepth, OutOfPanel, UnknownScreen, LayoutError
from caveloco.geometry import (
    CameraModel,
    CaveLayout,
    Intrinsics,
    Pose,
    axis_angle_from_rotation,
    compose,
    invert,
    is_rotation,
    normalized_coords,
    project,
    project_points,
    rotation_from_axis_angle,
    screen_to_world,
)

finite = st.floats(-10, 10, allow_nan=False)
vec3 = st.tuples(finite, finite, finite).map(np.array)


def random_pose(rng):
    r = rng.normal(size=3)
    r *= rng.uniform(0, math.pi - 1e-3) / np.linalg.norm(r)
    return Pose.from_axis_angle(r, rng.normal(size=3))


def test_zero_rotation_is_identity():
    assert np.array_equal(rotation_from_axis_angle([0, 0, 0]), np.eye(3))


def test_quarter_turn_about_z():
    R = rotation_from_axis_angle([0, 0, math.pi / 2])
    np.testing.assert_allclose(R @ [1, 0, 0], [0, 1, 0], atol=1e-12)


def test_axis_angle_round_trip_1000_seeds():
    for seed in range(1000):
        rng = np.random.default_rng(seed)
        r = rng.normal(size=3)
        r *= rng.uniform(0, math.pi - 1e-6) / np.linalg.norm(r)
        R = rotation_from_axis_angle(r)
        assert is_rotation(R)
        np.testing.assert_allclose(axis_angle_from_rotation(R), r, atol=1e-8)


def test_axis_angle_round_trip_tiny_angle():
    r = np.array([1e-9, -2e-9, 3e-10])
    np.testing.assert_allclose(axis_angle_from_rotation(rotation_from_axis_angle(r)), r, rtol=1e-6, atol=1e-18)


@given(vec3)
@settings(max_examples=200, deadline=None)
def test_rodrigues_always_orthonormal(r):
    assert is_rotation(rotation_from_axis_angle(r))


def _cam(pose=None, **kw):
    intr = Intrinsics(1000.0, 1000.0, 500.0, 500.0, **kw)
    return CameraModel(0, intr, pose or Pose.identity(), (1000, 1000))


def test_project_on_axis_hits_principal_point():
    np.testing.assert_array_equal(project(_cam(), [0, 0, 2]), [500, 500])


def test_project_pinhole_offset():
    np.testing.assert_allclose(project(_cam(), [0.1, 0, 2]), [550, 500], atol=1e-12)


@pytest.mark.parametrize("p", [(0, 0, -1), (0, 0, 0), (1, 1, 1e-10)])
def test_project_behind_camera(p):
    with pytest.raises(NonPositiveDepth):
        project(_cam(), p)


def test_distortion_off_is_exact_pinhole(rng):
    pts = rng.uniform([-1, -1, 1], [1, 1, 4], (50, 3))
    uv, _ = project_points(_cam(), pts)
    expect = 1000 * pts[:, :2] / pts[:, 2:] + 500
    np.testing.assert_allclose(uv, expect, rtol=0, atol=1e-9)


def test_undistort_inverts_distort(rng):
    cam = _cam(k1=-0.1, k2=0.02)
    pts = rng.uniform([-0.5, -0.5, 2], [0.5, 0.5, 3], (20, 3))
    uv, z = project_points(cam, pts)
    np.testing.assert_allclose(normalized_coords(cam, uv), pts[:, :2] / pts[:, 2:], atol=1e-10)


def test_projection_invariant_under_rigid_transform(rng):
    for _ in range(50):
        cam_pose = Pose.from_axis_angle(rng.normal(scale=0.3, size=3), [0.1, -0.2, 4.0])
        G = random_pose(rng)
        p = rng.uniform(-1, 1, 3)
        cam = _cam(cam_pose)
        moved = _cam(compose(cam_pose, invert(G)))
        np.testing.assert_allclose(project(moved, G.apply(p)), project(cam, p), atol=1e-9)


def test_invert_identity():
    I = invert(Pose.identity())
    np.testing.assert_array_equal(I.rotation, np.eye(3))
    np.testing.assert_array_equal(I.translation, np.zeros(3))


def test_compose_with_inverse_is_identity(rng):
    for _ in range(200):
        a = random_pose(rng)
        c = compose(a, invert(a))
        np.testing.assert_allclose(c.rotation, np.eye(3), atol=1e-12)
        np.testing.assert_allclose(c.translation, 0, atol=1e-12)


def test_compose_associative(rng):
    for _ in range(200):
        a, b, c = random_pose(rng), random_pose(rng), random_pose(rng)
        left = compose(compose(a, b), c)
        right = compose(a, compose(b, c))
        np.testing.assert_allclose(left.rotation, right.rotation, atol=1e-9)
        np.testing.assert_allclose(left.translation, right.translation, atol=1e-9)


def test_screen_to_world(layout):
    front = layout.panel(0)
    np.testing.assert_array_equal(screen_to_world(layout, 0, (0, 0)), front.origin)
    np.testing.assert_allclose(screen_to_world(layout, 0, (1, 0.5)), [-1, 2, 0.5], atol=1e-15)
    with pytest.raises(OutOfPanel):
        screen_to_world(layout, 0, (front.width + 0.1, 0))
    with pytest.raises(UnknownScreen):
        screen_to_world(layout, 9, (0, 0))


def test_default_layout_panels_vertical_and_inward(layout):
    for p in layout.panels:
        assert abs(p.normal[2]) < 1e-12
        # normal points at the room centre
        assert p.normal @ (np.zeros(3) - p.origin) > 0


def test_layout_file_round_trip(tmp_path, layout):
    path = tmp_path / "layout.json"
    layout.save(path)
    back = CaveLayout.load(path)
    for a, b in zip(layout.panels, back.panels):
        np.testing.assert_array_equal(a.origin, b.origin)
        assert (a.width, a.height, a.resolution) == (b.width, b.height, b.resolution)


def test_layout_rejects_non_orthonormal_axes(layout):
    d = layout.to_dict()
    d["panels"][0]["axis_v"] = [0.1, 0, 1]
    with pytest.raises(LayoutError):
        CaveLayout.from_dict(d)


def test_default_cameras_valid(cameras):
    assert len(cameras) == 4
    for cam in cameras:
        assert cam.pose.is_valid()
        # the room centre is in view
        uv = project(cam, [0, 0, 1.0])
        assert cam.in_image(uv).all()
