"""Coordinate frames, sensor-to-global transforms, and geo-fencing.

Conventions:
    - Global frame: right-handed, z up, ground plane near z=0, units in meters.
    - Sensor frames: centered at the LiDAR, tagged ``sensor:<id>``.
    - A sensor pose is its location plus pitch/yaw/roll in the global frame;
      angles live in radians internally, wrapped to (-pi, pi].  Degrees only
      appear in pose files and are converted at parse time.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .errors import FrameMismatch

GLOBAL = "global"
KITTI = "kitti"


def sensor_frame(sensor_id: int) -> str:
    return f"sensor:{sensor_id}"


def is_sensor_frame(frame: str) -> bool:
    return frame.startswith("sensor:")


def wrap_angle(a):
    """Wrap an angle (scalar or array) to (-pi, pi]."""
    w = np.mod(np.asarray(a) + np.pi, 2.0 * np.pi) - np.pi
    w = np.where(w == -np.pi, np.pi, w)
    return float(w) if np.ndim(a) == 0 else w


@dataclass
class PointCloud:
    """A set of LiDAR returns (x, y, z, intensity) in a tagged frame.

    ``points`` is an (N, 4) float array; intensity is expected in [0, 1].
    """

    points: np.ndarray
    frame: str

    def __post_init__(self):
        pts = np.asarray(self.points, dtype=np.float64)
        if pts.size == 0:
            pts = pts.reshape(0, 4)
        if pts.ndim != 2 or pts.shape[1] != 4:
            raise ValueError(f"points must be (N, 4), got {pts.shape}")
        self.points = pts

    def __len__(self) -> int:
        return self.points.shape[0]

    @property
    def xyz(self) -> np.ndarray:
        return self.points[:, :3]

    @property
    def intensity(self) -> np.ndarray:
        return self.points[:, 3]


@dataclass
class SensorPose:
    """6-DoF sensor location and pose in the global frame (meters / radians)."""

    x: float = 0.0
    y: float = 0.0
    z: float = 0.0
    pitch: float = 0.0
    yaw: float = 0.0
    roll: float = 0.0

    def __post_init__(self):
        self.pitch = wrap_angle(float(self.pitch))
        self.yaw = wrap_angle(float(self.yaw))
        self.roll = wrap_angle(float(self.roll))

    @property
    def translation(self) -> np.ndarray:
        return np.array([self.x, self.y, self.z], dtype=np.float64)


@dataclass
class GeoFence:
    """Axis-aligned detection window; closed intervals in the global frame."""

    x_range: tuple[float, float]
    y_range: tuple[float, float]
    z_range: tuple[float, float]

    def __post_init__(self):
        for name in ("x_range", "y_range", "z_range"):
            lo, hi = getattr(self, name)
            if not (lo <= hi):
                raise ValueError(f"{name} is empty: ({lo}, {hi})")
            setattr(self, name, (float(lo), float(hi)))

    @property
    def x_span(self) -> float:
        return self.x_range[1] - self.x_range[0]

    @property
    def y_span(self) -> float:
        return self.y_range[1] - self.y_range[0]

    @property
    def z_span(self) -> float:
        return self.z_range[1] - self.z_range[0]

    @property
    def spans(self) -> tuple[float, float, float]:
        return (self.x_span, self.y_span, self.z_span)

    def contains(self, xyz: np.ndarray) -> np.ndarray:
        """Boolean mask of points inside the fence (boundaries included)."""
        xyz = np.asarray(xyz)
        m = np.ones(xyz.shape[0], dtype=bool)
        for axis, (lo, hi) in enumerate((self.x_range, self.y_range, self.z_range)):
            m &= (xyz[:, axis] >= lo) & (xyz[:, axis] <= hi)
        return m


def _rot_x(a: float) -> np.ndarray:
    c, s = math.cos(a), math.sin(a)
    return np.array([[1.0, 0.0, 0.0], [0.0, c, -s], [0.0, s, c]])


def _rot_y(a: float) -> np.ndarray:
    c, s = math.cos(a), math.sin(a)
    return np.array([[c, 0.0, s], [0.0, 1.0, 0.0], [-s, 0.0, c]])


def _rot_z(a: float) -> np.ndarray:
    c, s = math.cos(a), math.sin(a)
    return np.array([[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]])


def rotation_matrix(pose: SensorPose) -> np.ndarray:
    """Sensor-to-global rotation: Rx(-roll) @ Ry(-pitch) @ Rz(-yaw).

    Each axis rotation takes the negated pose angle; the composition order is
    x, then y, then z block.  The result is orthonormal with determinant +1.
    """
    return _rot_x(-pose.roll) @ _rot_y(-pose.pitch) @ _rot_z(-pose.yaw)


def transform_to_global(cloud: PointCloud, pose: SensorPose) -> PointCloud:
    """Rigidly move a sensor-frame cloud into the global frame.

    Each point maps to R @ p + t; intensity is untouched.

    Raises:
        FrameMismatch: if the cloud is not in a sensor frame.
    """
    if not is_sensor_frame(cloud.frame):
        raise FrameMismatch(f"expected a sensor frame, got {cloud.frame!r}")
    out = cloud.points.copy()
    r = rotation_matrix(pose)
    out[:, :3] = cloud.xyz @ r.T + pose.translation
    return PointCloud(out, GLOBAL)


def transform_to_sensor(cloud: PointCloud, pose: SensorPose, sensor_id: int) -> PointCloud:
    """Inverse of :func:`transform_to_global`: p_sensor = R^T @ (p - t)."""
    if cloud.frame != GLOBAL:
        raise FrameMismatch(f"expected frame {GLOBAL!r}, got {cloud.frame!r}")
    out = cloud.points.copy()
    r = rotation_matrix(pose)
    out[:, :3] = (cloud.xyz - pose.translation) @ r
    return PointCloud(out, sensor_frame(sensor_id))


def geofence(cloud: PointCloud, fence: GeoFence) -> PointCloud:
    """Keep exactly the points inside the fence; order preserved.

    Boundaries are closed on both ends, so a point sitting exactly on the
    upper edge survives (the voxel grid clamps it into the last cell).

    Raises:
        FrameMismatch: if the cloud is not in the global frame.
    """
    if cloud.frame != GLOBAL:
        raise FrameMismatch(f"expected frame {GLOBAL!r}, got {cloud.frame!r}")
    return PointCloud(cloud.points[fence.contains(cloud.xyz)], GLOBAL)
