import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from terranav.errors import ConfigurationError, DomainError, ProjectionError
from terranav.geometry import (
    CameraIntrinsics,
    Pose,
    RelativeMotion,
    camera_ray_to_world,
    compose_second_pose,
    euler_from_rotation,
    nadir_attitude,
    pixel_to_ray,
    ray_to_pixel,
    relative_motion,
    rotation_from_euler,
    wrap_angle,
)

CAM = CameraIntrinsics(4800, 2923, 59.97, 38.68)

angles = st.tuples(st.floats(-math.pi, math.pi), st.floats(-1.55, 1.55), st.floats(-math.pi, math.pi))


def test_identity_and_pure_yaw():
    np.testing.assert_array_equal(rotation_from_euler((0, 0, 0)), np.eye(3))
    R = rotation_from_euler((0, 0, math.pi / 2))
    np.testing.assert_allclose(R @ [1, 0, 0], [0, 1, 0], atol=1e-15)


@settings(max_examples=300, deadline=None)
@given(a=angles)
def test_rotation_orthonormal_and_round_trip(a):
    R = rotation_from_euler(a)
    assert np.max(np.abs(R @ R.T - np.eye(3))) <= 1e-12
    assert abs(np.linalg.det(R) - 1) <= 1e-12
    back = euler_from_rotation(R)
    np.testing.assert_allclose(wrap_angle(back - np.array(a)), 0.0, atol=1e-12)


def test_euler_order_is_zyx():
    r, p, y = 0.3, -0.2, 1.1
    def rx(a): return np.array([[1, 0, 0], [0, math.cos(a), -math.sin(a)], [0, math.sin(a), math.cos(a)]])
    def ry(a): return np.array([[math.cos(a), 0, math.sin(a)], [0, 1, 0], [-math.sin(a), 0, math.cos(a)]])
    def rz(a): return np.array([[math.cos(a), -math.sin(a), 0], [math.sin(a), math.cos(a), 0], [0, 0, 1]])
    np.testing.assert_allclose(rotation_from_euler((r, p, y)), rz(y) @ ry(p) @ rx(r), atol=1e-15)


def test_gimbal_band_rejected():
    with pytest.raises(DomainError):
        euler_from_rotation(rotation_from_euler((0.0, math.radians(89.95), 0.0)))


def test_intrinsics_focal_lengths():
    assert CAM.f_long == pytest.approx(2400 / math.tan(math.radians(29.985)))
    assert CAM.f_short == pytest.approx(1461.5 / math.tan(math.radians(19.34)))
    for bad in (dict(width_px=1), dict(fov_long_deg=0.0), dict(fov_short_deg=180.0)):
        kw = dict(width_px=100, height_px=80, fov_long_deg=40.0, fov_short_deg=30.0)
        kw.update(bad)
        with pytest.raises(ConfigurationError):
            CameraIntrinsics(**kw)


def test_pixel_to_ray_examples():
    np.testing.assert_allclose(pixel_to_ray(CAM, [CAM.cx, CAM.cy]), [0, 0, 1], atol=1e-15)
    q = pixel_to_ray(CAM, [CAM.width_px, CAM.cy])
    assert q[0] == pytest.approx(math.tan(math.radians(29.985)), abs=1e-12)
    # tan(29.985 deg) evaluates to 0.577001
    assert q[0] == pytest.approx(0.577001, abs=1e-6)
    assert q[2] == 1.0
    q = pixel_to_ray(CAM, [CAM.cx, 0.0])
    assert q[1] == pytest.approx(-math.tan(math.radians(19.34)), abs=1e-12)
    with pytest.raises(DomainError):
        pixel_to_ray(CAM, [-1.0, 10.0])
    with pytest.raises(DomainError):
        pixel_to_ray(CAM, [10.0, CAM.height_px + 0.5])


def test_ray_to_pixel_examples():
    np.testing.assert_allclose(ray_to_pixel(CAM, [0, 0, 1]), [CAM.cx, CAM.cy])
    u = ray_to_pixel(CAM, [math.tan(math.radians(29.985)), 0, 1])
    assert u[0] == pytest.approx(CAM.width_px, abs=1e-9)
    with pytest.raises(ProjectionError):
        ray_to_pixel(CAM, [0.7, 0, 1])


def test_pixel_ray_inverse_pair():
    rng = np.random.default_rng(0)
    u = rng.uniform([0, 0], [CAM.width_px, CAM.height_px], (1000, 2))
    assert np.max(np.abs(ray_to_pixel(CAM, pixel_to_ray(CAM, u)) - u)) <= 1e-9
    q = np.column_stack([rng.uniform(-0.57, 0.57, 1000), rng.uniform(-0.35, 0.35, 1000), np.ones(1000)])
    assert np.max(np.abs(pixel_to_ray(CAM, ray_to_pixel(CAM, q)) - q)) <= 1e-12


def test_camera_ray_to_world():
    nadir = Pose([0, 0, 1000], euler_from_rotation(np.diag([1.0, -1.0, -1.0])))
    np.testing.assert_allclose(camera_ray_to_world(nadir, [0, 0, 1]), [0, 0, -1], atol=1e-15)
    np.testing.assert_allclose(camera_ray_to_world(Pose([0, 0, 0], [0, 0, 0]), [0, 0, 1]), [0, 0, 1])
    rng = np.random.default_rng(1)
    for _ in range(100):
        pose = Pose(rng.normal(size=3), rng.uniform(-1.5, 1.5, 3))
        d = camera_ray_to_world(pose, [*rng.uniform(-0.5, 0.5, 2), 1.0])
        assert abs(np.linalg.norm(d) - 1) <= 1e-12


def test_nadir_attitude_heading():
    # image-up (camera -y) points along the heading
    for heading in (0.0, 90.0, 121.3):
        R = rotation_from_euler(nadir_attitude(heading))
        np.testing.assert_allclose(R @ [0, 0, 1], [0, 0, -1], atol=1e-12)
        h = math.radians(heading)
        np.testing.assert_allclose(R @ [0, -1, 0], [math.sin(h), math.cos(h), 0], atol=1e-12)


def test_frame_convention_and_relative_motion():
    rng = np.random.default_rng(2)
    for _ in range(50):
        pose1 = Pose(rng.normal(size=3) * 100, rng.uniform(-1, 1, 3))
        pose2 = Pose(rng.normal(size=3) * 100, rng.uniform(-1, 1, 3))
        m = relative_motion(pose1, pose2)
        X = rng.normal(size=3) * 500
        xc1 = pose1.rotation.T @ (X - pose1.position)
        xc2 = pose2.rotation.T @ (X - pose2.position)
        np.testing.assert_allclose(m.rotation @ xc1 + m.translation, xc2, atol=1e-9)
        back = compose_second_pose(pose1, m)
        np.testing.assert_allclose(back.position, pose2.position, atol=1e-9)
        np.testing.assert_allclose(back.rotation, pose2.rotation, atol=1e-12)


def test_relative_motion_known_case():
    att = nadir_attitude(0.0)
    m = relative_motion(Pose([0, 0, 1000], att), Pose([100, 0, 1000], att))
    np.testing.assert_allclose(m.rotation, np.eye(3), atol=1e-15)
    np.testing.assert_allclose(m.translation, [-100, 0, 0], atol=1e-12)
    assert isinstance(m, RelativeMotion)
