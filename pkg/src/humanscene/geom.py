"""Rigid-body and pinhole camera geometry.

Conventions
-----------
* Poses are camera-to-world (or body-to-world): ``P.apply(x_cam)`` gives
  world coordinates.
* Pixels are ``(u, v) = (column, row)`` with integer coordinates at pixel
  centers.
* Depth maps hold pre-scale values; metric depth is ``sigma * Z``.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import AngleAtCut, BehindCamera, NonPositiveScale, ValidationError

_SMALL_ANGLE = 1e-8


def hat(w):
    w = np.asarray(w, dtype=np.float64)
    out = np.zeros(w.shape[:-1] + (3, 3))
    out[..., 0, 1] = -w[..., 2]
    out[..., 0, 2] = w[..., 1]
    out[..., 1, 0] = w[..., 2]
    out[..., 1, 2] = -w[..., 0]
    out[..., 2, 0] = -w[..., 1]
    out[..., 2, 1] = w[..., 0]
    return out


def so3_exp(omega):
    """Rodrigues formula, broadcasting over leading axes."""
    omega = np.asarray(omega, dtype=np.float64)
    theta2 = np.sum(omega * omega, axis=-1)[..., None, None]
    theta = np.sqrt(theta2)
    small = theta2 < _SMALL_ANGLE
    safe = np.where(small, 1.0, theta)
    a = np.where(small, 1.0 - theta2 / 6.0 + theta2**2 / 120.0, np.sin(safe) / safe)
    b = np.where(small, 0.5 - theta2 / 24.0 + theta2**2 / 720.0, (1.0 - np.cos(safe)) / (safe * safe))
    K = hat(omega)
    eye = np.broadcast_to(np.eye(3), K.shape)
    return eye + a * K + b * (K @ K)


def so3_log(R):
    """Rotation vector of ``R`` on the principal branch (angle < pi)."""
    R = np.asarray(R, dtype=np.float64)
    cos = np.clip((np.trace(R, axis1=-2, axis2=-1) - 1.0) / 2.0, -1.0, 1.0)
    theta = np.arccos(cos)
    if np.any(np.pi - theta < 1e-6):
        raise AngleAtCut("relative rotation angle too close to pi for a unique logarithm")
    vee = np.stack(
        [R[..., 2, 1] - R[..., 1, 2], R[..., 0, 2] - R[..., 2, 0], R[..., 1, 0] - R[..., 0, 1]],
        axis=-1,
    )
    small = theta < 1e-4
    safe = np.where(small, 1.0, theta)
    # theta / (2 sin theta), series below 1e-4
    factor = np.where(small, 0.5 + theta**2 / 12.0, safe / (2.0 * np.sin(safe)))
    out = factor[..., None] * vee
    near_pi = theta > np.pi - 1e-2
    if np.any(near_pi):
        # vee ~ 2 sin(theta) loses precision here; use the symmetric part
        flatR = R.reshape(-1, 3, 3)
        flat_out = out.reshape(-1, 3)
        for k in np.flatnonzero(near_pi.reshape(-1)):
            th = float(theta.reshape(-1)[k])
            S = (flatR[k] + flatR[k].T) / 2.0 - np.cos(th) * np.eye(3)
            S /= 1.0 - np.cos(th)
            col = int(np.argmax(np.diag(S)))
            axis = S[:, col] / np.sqrt(S[col, col])
            v = vee.reshape(-1, 3)[k]
            if axis @ v < 0:
                axis = -axis
            flat_out[k] = axis * th
        out = flat_out.reshape(out.shape)
    return out


def rotation_about(axis, angle):
    axis = np.asarray(axis, dtype=np.float64)
    return so3_exp(axis / np.linalg.norm(axis) * angle)


@dataclass(frozen=True, eq=False)
class RigidTransform:
    rotation: np.ndarray
    translation: np.ndarray

    def __post_init__(self):
        R = np.array(self.rotation, dtype=np.float64).reshape(3, 3)
        t = np.array(self.translation, dtype=np.float64).reshape(3)
        R.flags.writeable = False
        t.flags.writeable = False
        object.__setattr__(self, "rotation", R)
        object.__setattr__(self, "translation", t)

    @classmethod
    def identity(cls):
        return cls(np.eye(3), np.zeros(3))

    @classmethod
    def from_matrix(cls, M):
        M = np.asarray(M, dtype=np.float64)
        return cls(M[:3, :3], M[:3, 3])

    @classmethod
    def from_translation(cls, t):
        return cls(np.eye(3), t)

    def matrix(self):
        M = np.eye(4)
        M[:3, :3] = self.rotation
        M[:3, 3] = self.translation
        return M

    def compose(self, other: "RigidTransform") -> "RigidTransform":
        return RigidTransform(
            self.rotation @ other.rotation,
            self.rotation @ other.translation + self.translation,
        )

    __matmul__ = compose

    def inverse(self) -> "RigidTransform":
        Rt = self.rotation.T
        return RigidTransform(Rt, -Rt @ self.translation)

    def apply(self, points):
        points = np.asarray(points, dtype=np.float64)
        return points @ self.rotation.T + self.translation

    @property
    def center(self):
        return self.translation

    def is_valid(self, tol=1e-9):
        R = self.rotation
        return (
            bool(np.all(np.isfinite(R)))
            and bool(np.all(np.isfinite(self.translation)))
            and np.max(np.abs(R.T @ R - np.eye(3))) <= tol
            and abs(np.linalg.det(R) - 1.0) <= tol
        )

    def allclose(self, other, atol=1e-9):
        return np.allclose(self.rotation, other.rotation, rtol=0, atol=atol) and np.allclose(
            self.translation, other.translation, rtol=0, atol=atol
        )

    def __repr__(self):
        return f"RigidTransform(rotvec={np.round(so3_log_safe(self.rotation), 6)}, t={np.round(self.translation, 6)})"


def so3_log_safe(R):
    try:
        return so3_log(R)
    except AngleAtCut:
        return np.full(3, np.pi)


@dataclass(frozen=True)
class TangentVector:
    omega: np.ndarray
    v: np.ndarray

    def __post_init__(self):
        w = np.array(self.omega, dtype=np.float64).reshape(3)
        v = np.array(self.v, dtype=np.float64).reshape(3)
        if not (np.all(np.isfinite(w)) and np.all(np.isfinite(v))):
            raise ValidationError("tangent vector must be finite")
        object.__setattr__(self, "omega", w)
        object.__setattr__(self, "v", v)

    @classmethod
    def zero(cls):
        return cls(np.zeros(3), np.zeros(3))

    @classmethod
    def from_vector(cls, x):
        x = np.asarray(x, dtype=np.float64)
        return cls(x[:3], x[3:6])

    def vector(self):
        return np.concatenate([self.omega, self.v])


def retract(base: RigidTransform, delta: TangentVector) -> RigidTransform:
    """Right-multiplied rotation update and body-frame translation step."""
    return RigidTransform(
        base.rotation @ so3_exp(delta.omega),
        base.translation + base.rotation @ delta.v,
    )


def log_map(from_: RigidTransform, to: RigidTransform) -> TangentVector:
    rel = from_.inverse() @ to
    return TangentVector(so3_log(rel.rotation), rel.translation)


def interpolate(a: RigidTransform, b: RigidTransform, alpha: float) -> RigidTransform:
    """Slerp on rotation, lerp on translation; exact at both ends."""
    if alpha == 0.0:
        return a
    if alpha == 1.0:
        return b
    w = so3_log(a.rotation.T @ b.rotation)
    return RigidTransform(
        a.rotation @ so3_exp(alpha * w),
        (1.0 - alpha) * a.translation + alpha * b.translation,
    )


@dataclass(frozen=True)
class Intrinsics:
    fx: float
    fy: float
    cx: float
    cy: float
    width: int
    height: int

    def __post_init__(self):
        if not (self.fx > 0 and self.fy > 0):
            raise ValidationError(f"focal lengths must be positive, got fx={self.fx}, fy={self.fy}")
        if not (0 <= self.cx < self.width and 0 <= self.cy < self.height):
            raise ValidationError("principal point must lie inside the image")

    def matrix(self):
        return np.array([[self.fx, 0.0, self.cx], [0.0, self.fy, self.cy], [0.0, 0.0, 1.0]])

    def vector(self):
        return np.array([self.fx, self.fy, self.cx, self.cy])

    def with_vector(self, k):
        return Intrinsics(float(k[0]), float(k[1]), float(k[2]), float(k[3]), self.width, self.height)

    @property
    def shape(self):
        return (self.height, self.width)

    def to_dict(self):
        return {
            "fx": self.fx, "fy": self.fy, "cx": self.cx, "cy": self.cy,
            "width": self.width, "height": self.height,
        }


@dataclass(frozen=True, eq=False)
class DepthMap:
    values: np.ndarray
    validity: np.ndarray

    def __post_init__(self):
        values = np.asarray(self.values, dtype=np.float64)
        validity = np.asarray(self.validity, dtype=bool)
        if values.ndim != 2 or values.shape != validity.shape:
            raise ValidationError("depth values and validity must be matching 2D grids")
        v = values[validity]
        if not (np.all(np.isfinite(v)) and np.all(v > 0)):
            raise ValidationError("every valid depth must be positive and finite")
        object.__setattr__(self, "values", values)
        object.__setattr__(self, "validity", validity)

    @classmethod
    def dense(cls, values):
        values = np.asarray(values, dtype=np.float64)
        return cls(values, np.isfinite(values) & (values > 0))

    @property
    def shape(self):
        return self.values.shape

    def valid_count(self):
        return int(self.validity.sum())


def pixel_grid(height, width):
    """(h, w, 2) array of (u, v) pixel-center coordinates."""
    v, u = np.mgrid[0:height, 0:width]
    return np.stack([u, v], axis=-1).astype(np.float64)


def rays(K: Intrinsics, pixels):
    """Camera-frame rays with unit z for an (..., 2) array of pixels."""
    pixels = np.asarray(pixels, dtype=np.float64)
    x = (pixels[..., 0] - K.cx) / K.fx
    y = (pixels[..., 1] - K.cy) / K.fy
    return np.stack([x, y, np.ones_like(x)], axis=-1)


def project_camera(K: Intrinsics, x_cam):
    x_cam = np.asarray(x_cam, dtype=np.float64)
    z = x_cam[..., 2]
    if np.any(z <= 1e-6):
        raise BehindCamera("point at or behind the camera plane")
    return np.stack([K.fx * x_cam[..., 0] / z + K.cx, K.fy * x_cam[..., 1] / z + K.cy], axis=-1)


def project(K: Intrinsics, P: RigidTransform, x_world):
    """Pixel location of world point(s) seen by a camera with pose ``P``."""
    return project_camera(K, P.inverse().apply(x_world))


def unproject_pixels(K: Intrinsics, P: RigidTransform, sigma, depths, pixels):
    if not sigma > 0:
        raise NonPositiveScale(f"scale must be positive, got {sigma}")
    x_cam = rays(K, pixels) * (sigma * np.asarray(depths, dtype=np.float64))[..., None]
    return P.apply(x_cam)


def unproject(K: Intrinsics, P: RigidTransform, sigma, Z: DepthMap):
    """World points of every valid pixel, in row-major pixel order."""
    if not sigma > 0:
        raise NonPositiveScale(f"scale must be positive, got {sigma}")
    h, w = Z.shape
    pix = pixel_grid(h, w)[Z.validity]
    return unproject_pixels(K, P, sigma, Z.values[Z.validity], pix)


def body_to_world(P: RigidTransform, T_c: RigidTransform, points_body):
    return (P @ T_c).apply(points_body)


# batched helpers over (N, 4, 4) pose stacks

def poses_to_array(poses):
    return np.stack([p.matrix() for p in poses]) if len(poses) else np.zeros((0, 4, 4))


def poses_from_array(arr):
    return [RigidTransform.from_matrix(m) for m in np.asarray(arr)]
