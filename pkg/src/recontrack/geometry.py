"""Pinhole camera model and the world-frame point cloud.

Conventions: right-handed, camera looks along +Z, Y points down, the ground
plane is XZ. Planar rotations act on (x, z) as

    x' = cos(t) x - sin(t) z
    z' = sin(t) x + cos(t) z

with Y untouched; this is the same sense used by the motion parametrisation in
:mod:`recontrack.fusion3d`.
"""
from dataclasses import dataclass

import numpy as np

from .errors import BehindCameraError, DegenerateGeometryError, InvalidDepthError


@dataclass(frozen=True)
class CameraIntrinsics:
    fx: float
    fy: float
    cx: float
    cy: float

    def __post_init__(self):
        if not (self.fx > 0 and self.fy > 0):
            raise ValueError(f"focal lengths must be positive, got fx={self.fx} fy={self.fy}")

    @property
    def K(self):
        return np.array([[self.fx, 0.0, self.cx], [0.0, self.fy, self.cy], [0.0, 0.0, 1.0]])

    @property
    def K_inv(self):
        return np.array(
            [
                [1.0 / self.fx, 0.0, -self.cx / self.fx],
                [0.0, 1.0 / self.fy, -self.cy / self.fy],
                [0.0, 0.0, 1.0],
            ]
        )


@dataclass(frozen=True)
class StereoRig:
    """Rectified stereo pair; the right camera sits ``baseline`` metres along +X."""

    intrinsics: CameraIntrinsics
    baseline: float

    def __post_init__(self):
        if not self.baseline > 0:
            raise ValueError(f"baseline must be positive, got {self.baseline}")


def planar_rotation(theta):
    """3x3 rotation about the Y axis in the package's (x, z) convention."""
    c, s = np.cos(theta), np.sin(theta)
    return np.array([[c, 0.0, -s], [0.0, 1.0, 0.0], [s, 0.0, c]])


class CameraPose:
    """World-from-camera homogeneous transform."""

    __slots__ = ("T",)

    def __init__(self, T=None):
        T = np.eye(4) if T is None else np.array(T, dtype=np.float64)
        if T.shape == (3, 4):
            T = np.vstack([T, [0.0, 0.0, 0.0, 1.0]])
        if T.shape != (4, 4):
            raise ValueError(f"pose must be 4x4 or 3x4, got {T.shape}")
        R = T[:3, :3]
        if not np.allclose(R.T @ R, np.eye(3), atol=1e-6) or abs(np.linalg.det(R) - 1.0) > 1e-6:
            raise ValueError("pose rotation block is not a proper rotation")
        self.T = T

    @classmethod
    def identity(cls):
        return cls()

    @classmethod
    def from_planar(cls, x, z, yaw, y=0.0):
        T = np.eye(4)
        T[:3, :3] = planar_rotation(yaw)
        T[:3, 3] = (x, y, z)
        return cls(T)

    @property
    def R(self):
        return self.T[:3, :3]

    @property
    def t(self):
        return self.T[:3, 3]

    def inverse(self):
        Ti = np.eye(4)
        Ti[:3, :3] = self.R.T
        Ti[:3, 3] = -self.R.T @ self.t
        return CameraPose(Ti)

    def __repr__(self):
        return f"CameraPose(t={self.t.tolist()})"


def backproject(u, v, depth, K):
    """Pixel plus metric depth to a camera-frame point."""
    if not depth > 0:
        raise InvalidDepthError(f"depth must be positive, got {depth}")
    return np.array([(u - K.cx) / K.fx * depth, (v - K.cy) / K.fy * depth, float(depth)])


def backproject_pixels(us, vs, depths, K):
    """Vectorised :func:`backproject`; callers drop invalid depth beforehand."""
    us = np.asarray(us, dtype=np.float64)
    vs = np.asarray(vs, dtype=np.float64)
    d = np.asarray(depths, dtype=np.float64)
    return np.stack([(us - K.cx) / K.fx * d, (vs - K.cy) / K.fy * d, d], axis=-1)


def camera_to_world(p, pose):
    p = np.asarray(p, dtype=np.float64)
    return p @ pose.R.T + pose.t


def world_to_camera(p, pose):
    p = np.asarray(p, dtype=np.float64)
    return (p - pose.t) @ pose.R


def project_to_image(p, pose, K):
    """World point to ((u, v), depth). Raises if the point is not in front of the camera."""
    pc = world_to_camera(p, pose)
    z = pc[2]
    if not z > 0:
        raise BehindCameraError(f"point has camera depth {z}")
    return np.array([K.fx * pc[0] / z + K.cx, K.fy * pc[1] / z + K.cy]), float(z)


def project_points(P, pose, K):
    """Vectorised projection; returns (uv (N, 2), depth (N,)) without raising."""
    pc = world_to_camera(P, pose)
    z = pc[..., 2]
    with np.errstate(divide="ignore", invalid="ignore"):
        uv = np.stack([K.fx * pc[..., 0] / z + K.cx, K.fy * pc[..., 1] / z + K.cy], axis=-1)
    return uv, z


def points_from_mask(mask, depth, pose, K):
    """World points and (u, v) pixels for every mask pixel with valid depth.

    Pixels are returned in row-major order.
    """
    vs, us = np.nonzero(mask)
    d = depth[vs, us]
    ok = np.isfinite(d) & (d > 0)
    us, vs, d = us[ok], vs[ok], d[ok]
    pts = camera_to_world(backproject_pixels(us, vs, d, K), pose)
    return pts, np.stack([us, vs], axis=-1).astype(np.int64)


def _projection_jacobian(pc, K, x_offset=0.0):
    x, y, z = pc[0] - x_offset, pc[1], pc[2]
    return np.array(
        [
            [K.fx / z, 0.0, -K.fx * x / (z * z)],
            [0.0, K.fy / z, -K.fy * y / (z * z)],
        ]
    )


def stereo_jacobians(p, rig, pose):
    """2x3 Jacobians of the left and right projections w.r.t. the world point."""
    pc = world_to_camera(p, pose)
    if not pc[2] > 0:
        raise BehindCameraError(f"point has camera depth {pc[2]}")
    K = rig.intrinsics
    # d(pc)/d(p) = R^T
    FL = _projection_jacobian(pc, K) @ pose.R.T
    FR = _projection_jacobian(pc, K, rig.baseline) @ pose.R.T
    return FL, FR


def position_covariance(p, rig, pose, sigma_u=0.5, sigma_v=0.5):
    """Stereo triangulation covariance of a world point.

    ``(F_L^T S^-1 F_L + F_R^T S^-1 F_R)^-1`` with pixel covariance
    ``S = diag(sigma_u^2, sigma_v^2)``.
    """
    FL, FR = stereo_jacobians(p, rig, pose)
    S_inv = np.diag([1.0 / sigma_u**2, 1.0 / sigma_v**2])
    info = FL.T @ S_inv @ FL + FR.T @ S_inv @ FR
    if np.linalg.cond(info) > 1e14:
        raise DegenerateGeometryError("stereo information matrix is singular")
    cov = np.linalg.inv(info)
    return 0.5 * (cov + cov.T)
