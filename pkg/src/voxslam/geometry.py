"""Quaternion, rigid-transform, and pinhole-camera utilities.

Quaternions are Hamilton convention, scalar-first [w, x, y, z], and map
body frame to world frame. Two variants of most operations exist: plain
numpy for simulation/evaluation, and tape versions (prefix t_) built from
autodiff primitives for use inside differentiable losses. Tape versions
accept batched inputs with the quaternion/vector on the last axis.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .autodiff import Tensor


# ---------------------------------------------------------------------------
# numpy quaternions (batched over leading axes, quaternion on the last axis)


def quat_normalize(q):
    q = np.asarray(q, dtype=np.float64)
    return q / np.linalg.norm(q, axis=-1, keepdims=True)


def quat_conj(q):
    q = np.asarray(q, dtype=np.float64)
    out = q.copy()
    out[..., 1:] = -out[..., 1:]
    return out


def quat_mul(a, b):
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    aw, ax, ay, az = a[..., 0], a[..., 1], a[..., 2], a[..., 3]
    bw, bx, by, bz = b[..., 0], b[..., 1], b[..., 2], b[..., 3]
    return np.stack([
        aw * bw - ax * bx - ay * by - az * bz,
        aw * bx + ax * bw + ay * bz - az * by,
        aw * by - ax * bz + ay * bw + az * bx,
        aw * bz + ax * by - ay * bx + az * bw,
    ], axis=-1)


def quat_rotate(q, v):
    """Rotate vectors v (...,3) by quaternions q (...,4), body to world."""
    q = np.asarray(q, dtype=np.float64)
    v = np.asarray(v, dtype=np.float64)
    w = q[..., 0:1]
    u = q[..., 1:]
    t = 2.0 * np.cross(u, v)
    return v + w * t + np.cross(u, t)


def quat_to_matrix(q):
    """Rotation matrix (...,3,3) with columns = body axes in world frame."""
    q = quat_normalize(q)
    w, x, y, z = q[..., 0], q[..., 1], q[..., 2], q[..., 3]
    row0 = np.stack([1 - 2 * (y * y + z * z), 2 * (x * y - w * z), 2 * (x * z + w * y)], axis=-1)
    row1 = np.stack([2 * (x * y + w * z), 1 - 2 * (x * x + z * z), 2 * (y * z - w * x)], axis=-1)
    row2 = np.stack([2 * (x * z - w * y), 2 * (y * z + w * x), 1 - 2 * (x * x + y * y)], axis=-1)
    return np.stack([row0, row1, row2], axis=-2)


def quat_from_matrix(m):
    """Inverse of quat_to_matrix for a single proper rotation matrix."""
    m = np.asarray(m, dtype=np.float64)
    tr = m[0, 0] + m[1, 1] + m[2, 2]
    if tr > 0:
        s = np.sqrt(tr + 1.0) * 2
        q = np.array([0.25 * s, (m[2, 1] - m[1, 2]) / s, (m[0, 2] - m[2, 0]) / s, (m[1, 0] - m[0, 1]) / s])
    elif m[0, 0] > m[1, 1] and m[0, 0] > m[2, 2]:
        s = np.sqrt(1.0 + m[0, 0] - m[1, 1] - m[2, 2]) * 2
        q = np.array([(m[2, 1] - m[1, 2]) / s, 0.25 * s, (m[0, 1] + m[1, 0]) / s, (m[0, 2] + m[2, 0]) / s])
    elif m[1, 1] > m[2, 2]:
        s = np.sqrt(1.0 + m[1, 1] - m[0, 0] - m[2, 2]) * 2
        q = np.array([(m[0, 2] - m[2, 0]) / s, (m[0, 1] + m[1, 0]) / s, 0.25 * s, (m[1, 2] + m[2, 1]) / s])
    else:
        s = np.sqrt(1.0 + m[2, 2] - m[0, 0] - m[1, 1]) * 2
        q = np.array([(m[1, 0] - m[0, 1]) / s, (m[0, 2] + m[2, 0]) / s, (m[1, 2] + m[2, 1]) / s, 0.25 * s])
    return quat_normalize(q)


def quat_from_axis_angle(axis, angle):
    axis = np.asarray(axis, dtype=np.float64)
    n = np.linalg.norm(axis)
    if n < 1e-15:
        return np.array([1.0, 0.0, 0.0, 0.0])
    half = 0.5 * angle
    return np.concatenate([[np.cos(half)], np.sin(half) * axis / n])


def quat_exp_map(phi):
    """Unit quaternion for a rotation vector phi (...,3) (angle * axis)."""
    phi = np.asarray(phi, dtype=np.float64)
    angle = np.linalg.norm(phi, axis=-1, keepdims=True)
    half = 0.5 * angle
    small = angle < 1e-12
    k = np.where(small, 0.5, np.sin(half) / np.where(small, 1.0, angle))
    return np.concatenate([np.cos(half), k * phi], axis=-1)


def quat_log_map(q):
    """Rotation vector of a unit quaternion; inverse of quat_exp_map."""
    q = quat_normalize(q)
    q = np.where(q[..., 0:1] < 0, -q, q)  # shortest arc
    w = np.clip(q[..., 0:1], -1.0, 1.0)
    vnorm = np.linalg.norm(q[..., 1:], axis=-1, keepdims=True)
    angle = 2.0 * np.arctan2(vnorm, w)
    small = vnorm < 1e-12
    scale = np.where(small, 2.0, angle / np.where(small, 1.0, vnorm))
    return scale * q[..., 1:]


def quat_integrate(q, omega, dt):
    """Compose q with the rotation of body-frame angular velocity omega over dt."""
    return quat_mul(q, quat_exp_map(np.asarray(omega, dtype=np.float64) * dt))


def quat_angle(a, b):
    """Geodesic angle in radians between two unit quaternions, double-cover safe."""
    a = quat_normalize(a)
    b = quat_normalize(b)
    d = np.abs(np.sum(a * b, axis=-1))
    return 2.0 * np.arccos(np.clip(d, -1.0, 1.0))


# ---------------------------------------------------------------------------
# tape quaternions


def t_quat_normalize(q: Tensor) -> Tensor:
    n = q.square().sum(axis=-1, keepdims=True).sqrt()
    return q / n


def t_quat_mul(a: Tensor, b: Tensor) -> Tensor:
    tape = a.tape
    aw, ax, ay, az = a[..., 0:1], a[..., 1:2], a[..., 2:3], a[..., 3:4]
    bw, bx, by, bz = b[..., 0:1], b[..., 1:2], b[..., 2:3], b[..., 3:4]
    return tape.concat([
        aw * bw - ax * bx - ay * by - az * bz,
        aw * bx + ax * bw + ay * bz - az * by,
        aw * by - ax * bz + ay * bw + az * bx,
        aw * bz + ax * by - ay * bx + az * bw,
    ], axis=-1)


def _t_cross(a: Tensor, b: Tensor) -> Tensor:
    tape = a.tape
    a1, a2, a3 = a[..., 0:1], a[..., 1:2], a[..., 2:3]
    b1, b2, b3 = b[..., 0:1], b[..., 1:2], b[..., 2:3]
    return tape.concat([a2 * b3 - a3 * b2, a3 * b1 - a1 * b3, a1 * b2 - a2 * b1], axis=-1)


def t_quat_rotate(q: Tensor, v: Tensor) -> Tensor:
    """Rotate vectors v (...,3) by quaternions q (...,4); shapes broadcast."""
    w = q[..., 0:1]
    u = q[..., 1:4]
    # broadcasting inside cross products follows numpy rules on the leading axes
    t = _t_cross(u, v) * 2.0
    return v + w * t + _t_cross(u, t)


def t_quat_to_matrix_flat(q: Tensor) -> Tensor:
    """Row-major 9-vector of the rotation matrix of q (...,4) -> (...,9)."""
    tape = q.tape
    w, x, y, z = q[..., 0:1], q[..., 1:2], q[..., 2:3], q[..., 3:4]
    one = tape.constant(1.0)
    return tape.concat([
        one - 2.0 * (y * y + z * z), 2.0 * (x * y - w * z), 2.0 * (x * z + w * y),
        2.0 * (x * y + w * z), one - 2.0 * (x * x + z * z), 2.0 * (y * z - w * x),
        2.0 * (x * z - w * y), 2.0 * (y * z + w * x), one - 2.0 * (x * x + y * y),
    ], axis=-1)


# ---------------------------------------------------------------------------
# rigid transforms and camera


@dataclass
class RigidTransform:
    """Pose of a body in the world: x_world = R(rotation) @ x_body + translation."""

    rotation: np.ndarray    # unit quaternion [w, x, y, z]
    translation: np.ndarray

    def __post_init__(self):
        self.rotation = quat_normalize(np.asarray(self.rotation, dtype=np.float64))
        self.translation = np.asarray(self.translation, dtype=np.float64)

    def apply(self, points):
        return quat_rotate(self.rotation, points) + self.translation

    def compose(self, other: "RigidTransform") -> "RigidTransform":
        """self after other: (self*other).apply(x) == self.apply(other.apply(x))."""
        return RigidTransform(quat_mul(self.rotation, other.rotation),
                              self.apply(other.translation))

    def inverse(self) -> "RigidTransform":
        qinv = quat_conj(self.rotation)
        return RigidTransform(qinv, -quat_rotate(qinv, self.translation))


@dataclass
class CameraIntrinsics:
    """Pinhole camera; pixel (i, j) = (column, row), origin at the top-left."""

    fx: float
    fy: float
    cx: float
    cy: float
    width: int
    height: int

    def __post_init__(self):
        if self.fx <= 0 or self.fy <= 0:
            raise ValueError(f"focal lengths must be positive, got fx={self.fx} fy={self.fy}")
        if self.width <= 0 or self.height <= 0:
            raise ValueError(f"image size must be positive, got {self.width}x{self.height}")

    def pixel_ray(self, i, j):
        """Camera-frame ray direction [(i-cx)/fx, (j-cy)/fy, 1] for pixel (i, j)."""
        if not (0 <= i < self.width and 0 <= j < self.height):
            raise ValueError(f"pixel ({i}, {j}) outside image {self.width}x{self.height}")
        return np.array([(i - self.cx) / self.fx, (j - self.cy) / self.fy, 1.0])

    def pixel_rays(self, pixels):
        """Rays for an (N, 2) integer pixel array; z component is 1."""
        pixels = np.asarray(pixels)
        out = np.empty((len(pixels), 3), dtype=np.float64)
        out[:, 0] = (pixels[:, 0] - self.cx) / self.fx
        out[:, 1] = (pixels[:, 1] - self.cy) / self.fy
        out[:, 2] = 1.0
        return out

    def all_pixels(self):
        """(width*height, 2) pixel coordinates in row-major order."""
        jj, ii = np.meshgrid(np.arange(self.height), np.arange(self.width), indexing="ij")
        return np.stack([ii.reshape(-1), jj.reshape(-1)], axis=1)

    def scaled(self, width, height) -> "CameraIntrinsics":
        """Same field of view at a different resolution."""
        sx = width / self.width
        sy = height / self.height
        return CameraIntrinsics(self.fx * sx, self.fy * sy,
                                (self.cx + 0.5) * sx - 0.5, (self.cy + 0.5) * sy - 0.5,
                                width, height)
