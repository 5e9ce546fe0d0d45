"""Camera pose and quaternion helpers shared by the renderer, model and metrics.

Conventions:
  * quaternions are (x, y, z, w), unit norm, canonicalized to w >= 0;
  * CameraPose is camera-to-world: p_world = R @ p_cam + t;
  * camera frame: +z forward, +x right, +y down (matches image v-axis),
    so world "down" is +y for a frame-1-anchored world;
  * pixel (i, j) has continuous image coordinates (u, v) = (j + 0.5, i + 0.5).
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np


def quat_normalize(q, eps=1e-12):
    q = np.asarray(q, dtype=np.float64)
    return q / np.sqrt(np.dot(q, q) + eps)


def quat_canonical(q):
    """Flip sign so the scalar part w is non-negative (q and -q are one rotation)."""
    q = np.asarray(q, dtype=np.float64)
    return -q if q[3] < 0 else q.copy()


def quat_mul(a, b):
    ax, ay, az, aw = a
    bx, by, bz, bw = b
    return np.array([
        aw * bx + ax * bw + ay * bz - az * by,
        aw * by - ax * bz + ay * bw + az * bx,
        aw * bz + ax * by - ay * bx + az * bw,
        aw * bw - ax * bx - ay * by - az * bz,
    ])


def quat_conj(q):
    return np.array([-q[0], -q[1], -q[2], q[3]])


def quat_to_rot(q):
    x, y, z, w = quat_normalize(q)
    return np.array([
        [1 - 2 * (y * y + z * z), 2 * (x * y - z * w), 2 * (x * z + y * w)],
        [2 * (x * y + z * w), 1 - 2 * (x * x + z * z), 2 * (y * z - x * w)],
        [2 * (x * z - y * w), 2 * (y * z + x * w), 1 - 2 * (x * x + y * y)],
    ])


def rot_to_quat(R):
    """Shepperd's method; returns a canonical (w >= 0) unit quaternion."""
    R = np.asarray(R, dtype=np.float64)
    tr = np.trace(R)
    if tr > 0:
        s = np.sqrt(tr + 1.0) * 2
        w = 0.25 * s
        x = (R[2, 1] - R[1, 2]) / s
        y = (R[0, 2] - R[2, 0]) / s
        z = (R[1, 0] - R[0, 1]) / s
    elif R[0, 0] >= R[1, 1] and R[0, 0] >= R[2, 2]:
        s = np.sqrt(1.0 + R[0, 0] - R[1, 1] - R[2, 2]) * 2
        w = (R[2, 1] - R[1, 2]) / s
        x = 0.25 * s
        y = (R[0, 1] + R[1, 0]) / s
        z = (R[0, 2] + R[2, 0]) / s
    elif R[1, 1] >= R[2, 2]:
        s = np.sqrt(1.0 + R[1, 1] - R[0, 0] - R[2, 2]) * 2
        w = (R[0, 2] - R[2, 0]) / s
        x = (R[0, 1] + R[1, 0]) / s
        y = 0.25 * s
        z = (R[1, 2] + R[2, 1]) / s
    else:
        s = np.sqrt(1.0 + R[2, 2] - R[0, 0] - R[1, 1]) * 2
        w = (R[1, 0] - R[0, 1]) / s
        x = (R[0, 2] + R[2, 0]) / s
        y = (R[1, 2] + R[2, 1]) / s
        z = 0.25 * s
    return quat_canonical(quat_normalize([x, y, z, w]))


def quat_slerp(q0, q1, t):
    """Spherical interpolation with sign alignment; t in [0, 1]."""
    q0 = quat_normalize(q0)
    q1 = quat_normalize(q1)
    d = float(np.dot(q0, q1))
    if d < 0:
        q1 = -q1
        d = -d
    d = min(d, 1.0)
    if d > 1.0 - 1e-9:
        return quat_normalize(q0 + t * (q1 - q0))
    theta = np.arccos(d)
    return quat_normalize((np.sin((1 - t) * theta) * q0 + np.sin(t * theta) * q1)
                          / np.sin(theta))


def rotation_angle_deg(R):
    """Geodesic angle of a rotation matrix, in degrees."""
    c = (np.trace(R) - 1.0) / 2.0
    return float(np.degrees(np.arccos(np.clip(c, -1.0, 1.0))))


def angle_between_deg(a, b, eps=1e-9):
    """Angle between two direction vectors in degrees.

    Both ~zero counts as a perfect match (0 deg); exactly one ~zero is
    maximally wrong for a direction comparison (90 deg).
    """
    na, nb = np.linalg.norm(a), np.linalg.norm(b)
    if na < eps and nb < eps:
        return 0.0
    if na < eps or nb < eps:
        return 90.0
    c = np.clip(np.dot(a, b) / (na * nb), -1.0, 1.0)
    return float(np.degrees(np.arccos(c)))


def look_at_rotation(eye, target, down=(0.0, 1.0, 0.0)):
    """Camera-to-world rotation with +z toward target and +y near world-down."""
    f = np.asarray(target, dtype=np.float64) - np.asarray(eye, dtype=np.float64)
    n = np.linalg.norm(f)
    if n < 1e-12:
        return np.eye(3)
    f = f / n
    x = np.cross(np.asarray(down, dtype=np.float64), f)
    nx = np.linalg.norm(x)
    if nx < 1e-6:  # looking straight down/up: pick an arbitrary right axis
        x = np.cross(np.array([0.0, 0.0, 1.0]), f)
        nx = np.linalg.norm(x)
    x = x / nx
    y = np.cross(f, x)
    return np.stack([x, y, f], axis=1)


@dataclass
class CameraPose:
    """Camera-to-world pose: translation, unit quaternion (w >= 0), fov radians."""

    translation: np.ndarray = field(default_factory=lambda: np.zeros(3))
    quaternion: np.ndarray = field(default_factory=lambda: np.array([0.0, 0.0, 0.0, 1.0]))
    fov: np.ndarray = field(default_factory=lambda: np.array([1.0, 1.0]))

    def __post_init__(self):
        self.translation = np.asarray(self.translation, dtype=np.float64).reshape(3)
        self.quaternion = quat_canonical(quat_normalize(self.quaternion))
        self.fov = np.asarray(self.fov, dtype=np.float64).reshape(2)

    @property
    def rotation(self):
        return quat_to_rot(self.quaternion)

    def as_vector(self):
        """Pack as 9 floats: tx ty tz qx qy qz qw fovx fovy."""
        return np.concatenate([self.translation, self.quaternion, self.fov])

    @classmethod
    def from_vector(cls, v):
        v = np.asarray(v, dtype=np.float64).reshape(9)
        return cls(v[0:3], v[3:7], v[7:9])

    @classmethod
    def identity(cls, fov=(1.0, 1.0)):
        return cls(np.zeros(3), np.array([0.0, 0.0, 0.0, 1.0]), np.asarray(fov))

    @classmethod
    def from_rotation(cls, R, t, fov=(1.0, 1.0)):
        return cls(np.asarray(t), rot_to_quat(R), np.asarray(fov))


def relative_pose(a: CameraPose, b: CameraPose):
    """Pose of camera b expressed in camera a's frame: (R_rel, t_rel)."""
    Ra = a.rotation
    R_rel = Ra.T @ b.rotation
    t_rel = Ra.T @ (b.translation - a.translation)
    return R_rel, t_rel


def focal_from_fov(fov, width, height):
    """Pinhole focal lengths (fx, fy) in pixels for a (fov_x, fov_y) pair."""
    fx = (width / 2.0) / np.tan(fov[0] / 2.0)
    fy = (height / 2.0) / np.tan(fov[1] / 2.0)
    return fx, fy


def pixel_rays(width, height, fov):
    """Z-normalized camera-frame ray directions through every pixel center.

    Returns an (H*W, 3) array; depth along these rays is z-depth.
    """
    fx, fy = focal_from_fov(fov, width, height)
    j, i = np.meshgrid(np.arange(width), np.arange(height))
    u = j + 0.5
    v = i + 0.5
    d = np.stack([(u - width / 2.0) / fx, (v - height / 2.0) / fy,
                  np.ones_like(u, dtype=np.float64)], axis=-1)
    return d.reshape(-1, 3)


def unproject_depth(depth, pose: CameraPose, width, height):
    """Lift an (H, W) z-depth map to world points (H*W, 3) through a pose."""
    rays = pixel_rays(width, height, pose.fov)
    pts_cam = rays * np.asarray(depth, dtype=np.float64).reshape(-1, 1)
    return pts_cam @ pose.rotation.T + pose.translation


def project_points(points, pose: CameraPose, width, height):
    """Project world points into a camera; returns (u, v, z_cam) per point."""
    pts = np.asarray(points, dtype=np.float64).reshape(-1, 3)
    cam = (pts - pose.translation) @ pose.rotation
    fx, fy = focal_from_fov(pose.fov, width, height)
    z = cam[:, 2]
    safe_z = np.where(np.abs(z) < 1e-12, 1e-12, z)
    u = cam[:, 0] / safe_z * fx + width / 2.0
    v = cam[:, 1] / safe_z * fy + height / 2.0
    return np.stack([u, v, z], axis=1)
