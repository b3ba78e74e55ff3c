"""Camera model, frame conventions and Euler-angle rotations.

Conventions used throughout the package:

* World frame: x east, y north, z up (meters).
* Camera frame: z along the optical axis, x toward increasing pixel column,
  y toward increasing pixel row (pixel origin top-left, y down).
* Attitude (roll, pitch, yaw) builds the camera-to-world rotation
  ``R = Rz(yaw) @ Ry(pitch) @ Rx(roll)``. A point maps into camera 1 as
  ``X_c1 = R1.T @ (X_w - p1)`` and on into camera 2 as
  ``X_c2 = R12 @ X_c1 + p12``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .errors import ConfigurationError, DomainError, ProjectionError

__all__ = [
    "CameraIntrinsics",
    "Pose",
    "RelativeMotion",
    "rotation_from_euler",
    "euler_from_rotation",
    "pixel_to_ray",
    "ray_to_pixel",
    "camera_ray_to_world",
    "relative_motion",
    "compose_second_pose",
    "wrap_angle",
    "NADIR_ROLL",
]

GIMBAL_LIMIT = math.radians(89.9)
# roll that turns the optical axis straight down with image-up = north at yaw 0
NADIR_ROLL = math.pi


@dataclass(frozen=True)
class CameraIntrinsics:
    """Ideal pinhole camera with the principal point at the image centre."""

    width_px: int
    height_px: int
    fov_long_deg: float
    fov_short_deg: float

    def __post_init__(self):
        if self.width_px < 2 or self.height_px < 2:
            raise ConfigurationError("image must be at least 2x2 pixels")
        for name in ("fov_long_deg", "fov_short_deg"):
            fov = getattr(self, name)
            if not 0.0 < fov < 180.0:
                raise ConfigurationError(f"{name} must lie in (0, 180), got {fov}")

    @property
    def f_long(self) -> float:
        return (self.width_px / 2.0) / math.tan(math.radians(self.fov_long_deg) / 2.0)

    @property
    def f_short(self) -> float:
        return (self.height_px / 2.0) / math.tan(math.radians(self.fov_short_deg) / 2.0)

    @property
    def cx(self) -> float:
        return self.width_px / 2.0

    @property
    def cy(self) -> float:
        return self.height_px / 2.0

    def to_dict(self):
        return {"width_px": self.width_px, "height_px": self.height_px,
                "fov_long_deg": self.fov_long_deg, "fov_short_deg": self.fov_short_deg}

    @classmethod
    def from_dict(cls, data):
        return cls(int(data["width_px"]), int(data["height_px"]),
                   float(data["fov_long_deg"]), float(data["fov_short_deg"]))


@dataclass(frozen=True)
class Pose:
    """Camera position (world, m) and attitude (roll, pitch, yaw in rad)."""

    position: np.ndarray
    attitude: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "position", np.asarray(self.position, dtype=np.float64).reshape(3))
        object.__setattr__(self, "attitude", np.asarray(self.attitude, dtype=np.float64).reshape(3))

    @property
    def rotation(self) -> np.ndarray:
        return rotation_from_euler(self.attitude)


@dataclass(frozen=True)
class RelativeMotion:
    """Frame-to-frame motion: ``X_c2 = R12 @ X_c1 + translation``."""

    translation: np.ndarray
    attitude_delta: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "translation", np.asarray(self.translation, dtype=np.float64).reshape(3))
        object.__setattr__(self, "attitude_delta", np.asarray(self.attitude_delta, dtype=np.float64).reshape(3))

    @property
    def rotation(self) -> np.ndarray:
        return rotation_from_euler(self.attitude_delta)


def rotation_from_euler(angles) -> np.ndarray:
    """Camera-to-world rotation ``Rz(yaw) @ Ry(pitch) @ Rx(roll)``."""
    roll, pitch, yaw = (float(a) for a in angles)
    cr, sr = math.cos(roll), math.sin(roll)
    cp, sp = math.cos(pitch), math.sin(pitch)
    cy, sy = math.cos(yaw), math.sin(yaw)
    return np.array([
        [cy * cp, cy * sp * sr - sy * cr, cy * sp * cr + sy * sr],
        [sy * cp, sy * sp * sr + cy * cr, sy * sp * cr - cy * sr],
        [-sp, cp * sr, cp * cr],
    ])


def euler_from_rotation(R) -> np.ndarray:
    """Inverse of :func:`rotation_from_euler`; rejects |pitch| > 89.9 deg."""
    R = np.asarray(R, dtype=np.float64)
    pitch = math.atan2(-R[2, 0], math.hypot(R[2, 1], R[2, 2]))
    if abs(pitch) > GIMBAL_LIMIT:
        raise DomainError(f"pitch {math.degrees(pitch):.3f} deg is inside the gimbal-lock band")
    roll = math.atan2(R[2, 1], R[2, 2])
    yaw = math.atan2(R[1, 0], R[0, 0])
    return np.array([roll, pitch, yaw])


def wrap_angle(a):
    """Wrap angles to [-pi, pi)."""
    return (np.asarray(a) + np.pi) % (2.0 * np.pi) - np.pi


def pixel_to_ray(intrinsics: CameraIntrinsics, u) -> np.ndarray:
    """Homogeneous camera ray (z = 1) through pixel ``u``; accepts (..., 2)."""
    u = np.asarray(u, dtype=np.float64)
    if np.any(~np.isfinite(u)) or np.any(u[..., 0] < 0) or np.any(u[..., 0] > intrinsics.width_px) \
            or np.any(u[..., 1] < 0) or np.any(u[..., 1] > intrinsics.height_px):
        raise DomainError("pixel outside the image bounds")
    qx = (u[..., 0] - intrinsics.cx) / intrinsics.f_long
    qy = (u[..., 1] - intrinsics.cy) / intrinsics.f_short
    return np.stack([qx, qy, np.ones_like(qx)], axis=-1)


def ray_to_pixel(intrinsics: CameraIntrinsics, q) -> np.ndarray:
    """Project a homogeneous ray (z = 1) to pixel coordinates.

    Raises ``ProjectionError`` when the ray falls outside the frame.
    """
    q = np.asarray(q, dtype=np.float64)
    px = intrinsics.cx + intrinsics.f_long * q[..., 0]
    py = intrinsics.cy + intrinsics.f_short * q[..., 1]
    tol = 1e-9
    if np.any(~np.isfinite(px)) or np.any(px < -tol) or np.any(px > intrinsics.width_px + tol) \
            or np.any(py < -tol) or np.any(py > intrinsics.height_px + tol):
        raise ProjectionError("ray projects outside the frame")
    return np.stack([px, py], axis=-1)


def in_frame(intrinsics: CameraIntrinsics, u) -> np.ndarray:
    u = np.asarray(u, dtype=np.float64)
    return ((u[..., 0] >= 0) & (u[..., 0] <= intrinsics.width_px)
            & (u[..., 1] >= 0) & (u[..., 1] <= intrinsics.height_px))


def camera_ray_to_world(pose: Pose, q) -> np.ndarray:
    """Unit world direction of camera ray ``q``; accepts (..., 3)."""
    d = np.asarray(q, dtype=np.float64) @ pose.rotation.T
    return d / np.linalg.norm(d, axis=-1, keepdims=True)


def relative_motion(pose1: Pose, pose2: Pose) -> RelativeMotion:
    """Motion (p12, R12) taking camera-1 coordinates to camera-2 coordinates."""
    R1 = pose1.rotation
    R2 = pose2.rotation
    R12 = R2.T @ R1
    p12 = R2.T @ (pose1.position - pose2.position)
    return RelativeMotion(p12, euler_from_rotation(R12))


def compose_second_pose(pose1: Pose, motion: RelativeMotion) -> Pose:
    """World pose of camera 2 given camera 1 and the relative motion."""
    R2 = pose1.rotation @ motion.rotation.T
    p2 = pose1.position - R2 @ motion.translation
    return Pose(p2, euler_from_rotation(R2))


def nadir_attitude(heading_deg: float) -> np.ndarray:
    """Straight-down attitude with image-up along compass ``heading_deg``."""
    return np.array([NADIR_ROLL, 0.0, -math.radians(heading_deg)])
