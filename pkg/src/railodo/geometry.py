"""Rigid transforms, pinhole projection and stereo triangulation.

Conventions
-----------
* ``Pose`` is world-from-body: ``p_world = R @ p_body + t``.
* Quaternions are Hamilton, stored scalar-last ``(x, y, z, w)`` to match the
  trajectory file format.
* Camera frames: x right, y down, z along the optical axis.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from functools import cached_property

import numpy as np

from . import so3
from .errors import BehindCamera, DegenerateRay, GimbalDegenerate

MIN_DEPTH = 1e-6
_PARALLEL_TOL = 1e-12


def quat_multiply(a, b):
    ax, ay, az, aw = a
    bx, by, bz, bw = b
    return np.array([
        aw * bx + ax * bw + ay * bz - az * by,
        aw * by - ax * bz + ay * bw + az * bx,
        aw * bz + ax * by - ay * bx + az * bw,
        aw * bw - ax * bx - ay * by - az * bz,
    ])


def quat_to_matrix(q):
    x, y, z, w = q
    return np.array([
        [1 - 2 * (y * y + z * z), 2 * (x * y - z * w), 2 * (x * z + y * w)],
        [2 * (x * y + z * w), 1 - 2 * (x * x + z * z), 2 * (y * z - x * w)],
        [2 * (x * z - y * w), 2 * (y * z + x * w), 1 - 2 * (x * x + y * y)],
    ])


def quat_to_matrix_batch(q):
    q = np.asarray(q, dtype=float)
    x, y, z, w = q[:, 0], q[:, 1], q[:, 2], q[:, 3]
    R = np.empty((len(q), 3, 3))
    R[:, 0, 0] = 1 - 2 * (y * y + z * z)
    R[:, 0, 1] = 2 * (x * y - z * w)
    R[:, 0, 2] = 2 * (x * z + y * w)
    R[:, 1, 0] = 2 * (x * y + z * w)
    R[:, 1, 1] = 1 - 2 * (x * x + z * z)
    R[:, 1, 2] = 2 * (y * z - x * w)
    R[:, 2, 0] = 2 * (x * z - y * w)
    R[:, 2, 1] = 2 * (y * z + x * w)
    R[:, 2, 2] = 1 - 2 * (x * x + y * y)
    return R


def matrix_to_quat(R):
    """Shepperd's method; returns a unit quaternion with w >= 0."""
    R = np.asarray(R, dtype=float)
    tr = np.trace(R)
    if tr > 0:
        s = 2.0 * np.sqrt(tr + 1.0)
        q = np.array([(R[2, 1] - R[1, 2]) / s, (R[0, 2] - R[2, 0]) / s,
                      (R[1, 0] - R[0, 1]) / s, 0.25 * s])
    elif R[0, 0] > R[1, 1] and R[0, 0] > R[2, 2]:
        s = 2.0 * np.sqrt(1.0 + R[0, 0] - R[1, 1] - R[2, 2])
        q = np.array([0.25 * s, (R[0, 1] + R[1, 0]) / s,
                      (R[0, 2] + R[2, 0]) / s, (R[2, 1] - R[1, 2]) / s])
    elif R[1, 1] > R[2, 2]:
        s = 2.0 * np.sqrt(1.0 + R[1, 1] - R[0, 0] - R[2, 2])
        q = np.array([(R[0, 1] + R[1, 0]) / s, 0.25 * s,
                      (R[1, 2] + R[2, 1]) / s, (R[0, 2] - R[2, 0]) / s])
    else:
        s = 2.0 * np.sqrt(1.0 + R[2, 2] - R[0, 0] - R[1, 1])
        q = np.array([(R[0, 2] + R[2, 0]) / s, (R[1, 2] + R[2, 1]) / s,
                      0.25 * s, (R[1, 0] - R[0, 1]) / s])
    if q[3] < 0:
        q = -q
    return q / np.linalg.norm(q)


@dataclass(frozen=True, eq=False)
class Pose:
    """Rigid transform, world-from-body."""

    rotation: np.ndarray = field(default_factory=lambda: np.array([0.0, 0.0, 0.0, 1.0]))
    translation: np.ndarray = field(default_factory=lambda: np.zeros(3))

    def __post_init__(self):
        q = np.asarray(self.rotation, dtype=float).reshape(4)
        n = np.linalg.norm(q)
        if not np.isfinite(n) or n < 1e-12:
            raise ValueError("rotation quaternion must be finite and nonzero")
        q = q / n
        t = np.asarray(self.translation, dtype=float).reshape(3)
        q.flags.writeable = False
        t.flags.writeable = False
        object.__setattr__(self, "rotation", q)
        object.__setattr__(self, "translation", t)

    @classmethod
    def identity(cls):
        return cls()

    @classmethod
    def from_matrix(cls, R, t=(0.0, 0.0, 0.0)):
        return cls(matrix_to_quat(R), t)

    @classmethod
    def from_rt(cls, R, t):
        return cls.from_matrix(R, t)

    @classmethod
    def translate(cls, x, y, z):
        return cls(translation=(x, y, z))

    @cached_property
    def R(self):
        return quat_to_matrix(self.rotation)

    @property
    def t(self):
        return self.translation

    def matrix(self):
        T = np.eye(4)
        T[:3, :3] = self.R
        T[:3, 3] = self.translation
        return T

    def apply(self, p):
        p = np.asarray(p, dtype=float)
        return p @ self.R.T + self.translation

    def __matmul__(self, other):
        return compose(self, other)

    def is_close(self, other, tol=1e-9):
        dq = min(np.linalg.norm(self.rotation - other.rotation),
                 np.linalg.norm(self.rotation + other.rotation))
        return dq <= tol and np.linalg.norm(self.translation - other.translation) <= tol

    def __repr__(self):
        q = np.array2string(self.rotation, precision=6)
        t = np.array2string(self.translation, precision=6)
        return f"Pose(q={q}, t={t})"


def compose(a: Pose, b: Pose) -> Pose:
    q = quat_multiply(a.rotation, b.rotation)
    return Pose(q, a.R @ b.translation + a.translation)


def inverse(a: Pose) -> Pose:
    qx, qy, qz, qw = a.rotation
    q_inv = np.array([-qx, -qy, -qz, qw])
    return Pose(q_inv, -(a.R.T @ a.translation))


@dataclass(frozen=True)
class CameraIntrinsics:
    fx: float
    fy: float
    cx: float
    cy: float
    width: int
    height: int

    def __post_init__(self):
        if not (self.fx > 0 and self.fy > 0):
            raise ValueError("focal lengths must be positive")
        if not (0 <= self.cx < self.width and 0 <= self.cy < self.height):
            raise ValueError("principal point must lie inside the image")

    @classmethod
    def default(cls):
        # 8 mm lens, 1920 x 1200 sensor
        return cls(fx=979.5, fy=979.5, cx=960.0, cy=600.0, width=1920, height=1200)

    def matrix(self):
        return np.array([[self.fx, 0.0, self.cx], [0.0, self.fy, self.cy], [0.0, 0.0, 1.0]])

    def contains(self, px):
        """True where pixels fall inside the image (works on (2,) or (n, 2))."""
        px = np.asarray(px, dtype=float)
        u, v = px[..., 0], px[..., 1]
        return (u >= 0) & (u < self.width) & (v >= 0) & (v < self.height)


@dataclass(frozen=True)
class StereoRig:
    """Extrinsic calibration of the pair; ``T_cam0_cam1`` maps cam1 points into cam0."""

    T_cam0_cam1: Pose

    def __post_init__(self):
        if self.baseline <= 0:
            raise ValueError("stereo baseline must be positive")

    @classmethod
    def fronto_parallel(cls, baseline):
        return cls(Pose.translate(baseline, 0.0, 0.0))

    @property
    def baseline(self):
        return float(np.linalg.norm(self.T_cam0_cam1.translation))

    @property
    def is_rectified(self):
        t = self.T_cam0_cam1.translation
        rot_ok = np.linalg.norm(self.T_cam0_cam1.R - np.eye(3)) <= _PARALLEL_TOL
        return bool(rot_ok and abs(t[1]) <= _PARALLEL_TOL and abs(t[2]) <= _PARALLEL_TOL and t[0] > 0)


@dataclass(frozen=True)
class Landmark:
    id: int
    position: np.ndarray


def project(K: CameraIntrinsics, T_camera_world: Pose, p_world):
    """Pixel of a world point. Raises BehindCamera; use ``K.contains`` for the image check."""
    p_c = T_camera_world.apply(p_world)
    return project_camera(K, p_c)


def project_camera(K: CameraIntrinsics, p_c):
    p_c = np.asarray(p_c, dtype=float)
    if p_c[2] <= MIN_DEPTH:
        raise BehindCamera(f"point at camera depth {p_c[2]:.3g} m")
    return np.array([K.fx * p_c[0] / p_c[2] + K.cx, K.fy * p_c[1] / p_c[2] + K.cy])


def unproject(K: CameraIntrinsics, px, depth):
    u, v = px
    return np.array([(u - K.cx) / K.fx * depth, (v - K.cy) / K.fy * depth, depth])


def triangulate_stereo(rig: StereoRig, K0: CameraIntrinsics, K1: CameraIntrinsics, px0, px1):
    """Point in the cam0 frame and its depth (cam0 z) from one stereo match."""
    px0 = np.asarray(px0, dtype=float)
    px1 = np.asarray(px1, dtype=float)
    if rig.is_rectified and K0.fx == K1.fx and K0.cx == K1.cx:
        disparity = px0[0] - px1[0]
        if disparity <= 0:
            raise DegenerateRay(f"non-positive disparity {disparity:.3g} px")
        depth = K0.fx * rig.baseline / disparity
        return unproject(K0, px0, depth), depth

    # midpoint of the closest approach between the two rays, in cam0
    d0 = np.array([(px0[0] - K0.cx) / K0.fx, (px0[1] - K0.cy) / K0.fy, 1.0])
    d1 = rig.T_cam0_cam1.R @ np.array([(px1[0] - K1.cx) / K1.fx, (px1[1] - K1.cy) / K1.fy, 1.0])
    c1 = rig.T_cam0_cam1.translation
    n0 = d0 / np.linalg.norm(d0)
    n1 = d1 / np.linalg.norm(d1)
    if np.linalg.norm(np.cross(n0, n1)) <= _PARALLEL_TOL:
        raise DegenerateRay("stereo rays are parallel")
    A = np.array([[d0 @ d0, -d0 @ d1], [d0 @ d1, -d1 @ d1]])
    b = np.array([d0 @ c1, d1 @ c1])
    lam0, lam1 = np.linalg.solve(A, b)
    if lam0 <= 0 or lam1 <= 0:
        raise DegenerateRay("rays intersect behind the cameras")
    point = 0.5 * (lam0 * d0 + c1 + lam1 * d1)
    return point, float(point[2])


def stereo_depth_sigma(depth, pixel_sigma, fx, baseline):
    """First-order depth standard deviation of a stereo match with independent pixel noise."""
    return np.asarray(depth, dtype=float) ** 2 * pixel_sigma * np.sqrt(2.0) / (fx * baseline)


def heading_of(p: Pose) -> float:
    """Yaw of the body x-axis in the world horizontal plane, in (-pi, pi]."""
    return float(headings(p.R[None])[0])


def headings(R):
    """Vectorized ``heading_of`` for an (n, 3, 3) stack of world-from-body rotations."""
    R = np.asarray(R, dtype=float)
    x_axis = R[:, :, 0]
    horiz = np.hypot(x_axis[:, 0], x_axis[:, 1])
    if np.any(np.arctan2(horiz, np.abs(x_axis[:, 2])) < 1e-6):
        raise GimbalDegenerate("body x-axis is vertical; heading undefined")
    yaw = np.arctan2(x_axis[:, 1], x_axis[:, 0])
    return np.where(yaw <= -np.pi, np.pi, yaw)


def wrap_angle(a):
    """Wrap to (-pi, pi]."""
    a = np.asarray(a, dtype=float)
    w = np.mod(a + np.pi, 2.0 * np.pi) - np.pi
    return np.where(w <= -np.pi, w + 2.0 * np.pi, w)


def pose_from_yaw(yaw, t=(0.0, 0.0, 0.0)):
    return Pose.from_matrix(so3.rot_z(yaw), t)


# body: x forward, y left, z up; camera: x right, y down, z forward
R_BODY_CAM = np.array([[0.0, 0.0, 1.0], [-1.0, 0.0, 0.0], [0.0, -1.0, 0.0]])
