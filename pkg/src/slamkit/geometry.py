"""SE(3) algebra, the rectified pinhole camera and camera rigs.

Conventions used throughout the package:

* Quaternions are stored scalar-last ``(qx, qy, qz, qw)``.
* Twists are 6-vectors ordered ``(w_x, w_y, w_z, v_x, v_y, v_z)``: rotational
  part first, translational part second.
* ``T_ab`` maps points expressed in frame ``b`` into frame ``a``.
* Pose increments are applied on the left: ``T <- se3_exp(delta) @ T``.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from functools import cached_property
from typing import Sequence

import numpy as np

from .errors import BehindCameraError, InvalidDepthError, LogSingularityError

DEPTH_EPS = 1e-6
SMALL_ANGLE = 1e-8


def skew(v) -> np.ndarray:
    x, y, z = v
    return np.array([[0.0, -z, y], [z, 0.0, -x], [-y, x, 0.0]])


def skew_batch(v: np.ndarray) -> np.ndarray:
    """Stack of skew matrices for an ``(N, 3)`` array."""
    out = np.zeros(v.shape[:-1] + (3, 3))
    out[..., 0, 1] = -v[..., 2]
    out[..., 0, 2] = v[..., 1]
    out[..., 1, 0] = v[..., 2]
    out[..., 1, 2] = -v[..., 0]
    out[..., 2, 0] = -v[..., 1]
    out[..., 2, 1] = v[..., 0]
    return out


# ---------------------------------------------------------------- quaternions


def quat_multiply(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    ax, ay, az, aw = a
    bx, by, bz, bw = b
    return np.array(
        [
            aw * bx + ax * bw + ay * bz - az * by,
            aw * by - ax * bz + ay * bw + az * bx,
            aw * bz + ax * by - ay * bx + az * bw,
            aw * bw - ax * bx - ay * by - az * bz,
        ]
    )


def quat_to_matrix(q: np.ndarray) -> np.ndarray:
    x, y, z, w = q
    xx, yy, zz = x * x, y * y, z * z
    xy, xz, yz = x * y, x * z, y * z
    wx, wy, wz = w * x, w * y, w * z
    return np.array(
        [
            [1 - 2 * (yy + zz), 2 * (xy - wz), 2 * (xz + wy)],
            [2 * (xy + wz), 1 - 2 * (xx + zz), 2 * (yz - wx)],
            [2 * (xz - wy), 2 * (yz + wx), 1 - 2 * (xx + yy)],
        ]
    )


def matrix_to_quat(R: np.ndarray) -> np.ndarray:
    """Shepperd's method; returns a unit quaternion with qw >= 0."""
    R = np.asarray(R, dtype=float)
    tr = np.trace(R)
    diag = np.diag(R)
    k = int(np.argmax([tr, *diag]))
    if k == 0:
        s = 2.0 * np.sqrt(max(1.0 + tr, 0.0))
        q = np.array([(R[2, 1] - R[1, 2]) / s, (R[0, 2] - R[2, 0]) / s, (R[1, 0] - R[0, 1]) / s, 0.25 * s])
    elif k == 1:
        s = 2.0 * np.sqrt(max(1.0 + R[0, 0] - R[1, 1] - R[2, 2], 0.0))
        q = np.array([0.25 * s, (R[0, 1] + R[1, 0]) / s, (R[0, 2] + R[2, 0]) / s, (R[2, 1] - R[1, 2]) / s])
    elif k == 2:
        s = 2.0 * np.sqrt(max(1.0 - R[0, 0] + R[1, 1] - R[2, 2], 0.0))
        q = np.array([(R[0, 1] + R[1, 0]) / s, 0.25 * s, (R[1, 2] + R[2, 1]) / s, (R[0, 2] - R[2, 0]) / s])
    else:
        s = 2.0 * np.sqrt(max(1.0 - R[0, 0] - R[1, 1] + R[2, 2], 0.0))
        q = np.array([(R[0, 2] + R[2, 0]) / s, (R[1, 2] + R[2, 1]) / s, 0.25 * s, (R[1, 0] - R[0, 1]) / s])
    if q[3] < 0:
        q = -q
    return q / np.linalg.norm(q)


def quat_from_rotvec(phi) -> np.ndarray:
    phi = np.asarray(phi, dtype=float)
    theta = np.linalg.norm(phi)
    if theta < SMALL_ANGLE:
        q = np.array([0.5 * phi[0], 0.5 * phi[1], 0.5 * phi[2], 1.0])
        return q / np.linalg.norm(q)
    half = 0.5 * theta
    return np.concatenate([np.sin(half) / theta * phi, [np.cos(half)]])


def quat_to_rotvec(q: np.ndarray) -> np.ndarray:
    q = q if q[3] >= 0 else -q
    v = q[:3]
    s = np.linalg.norm(v)
    if s < 1e-12:
        return 2.0 * v / q[3]
    return 2.0 * np.arctan2(s, q[3]) / s * v


# ---------------------------------------------------------------------- SO(3)


def so3_exp(phi) -> np.ndarray:
    phi = np.asarray(phi, dtype=float)
    theta = np.linalg.norm(phi)
    W = skew(phi)
    if theta < SMALL_ANGLE:
        return np.eye(3) + W + 0.5 * W @ W
    return np.eye(3) + np.sin(theta) / theta * W + (1 - np.cos(theta)) / theta**2 * W @ W


def so3_log(R: np.ndarray) -> np.ndarray:
    """Rotation vector of ``R`` (no singularity check)."""
    return quat_to_rotvec(matrix_to_quat(R))


def so3_left_jacobian(phi) -> np.ndarray:
    phi = np.asarray(phi, dtype=float)
    theta = np.linalg.norm(phi)
    W = skew(phi)
    if theta < 1e-5:
        return np.eye(3) + 0.5 * W + W @ W / 6.0
    return (
        np.eye(3)
        + (1 - np.cos(theta)) / theta**2 * W
        + (theta - np.sin(theta)) / theta**3 * W @ W
    )


def so3_left_jacobian_inv(phi) -> np.ndarray:
    phi = np.asarray(phi, dtype=float)
    theta = np.linalg.norm(phi)
    W = skew(phi)
    if theta < 1e-5:
        return np.eye(3) - 0.5 * W + W @ W / 12.0
    c = 1.0 / theta**2 - (1 + np.cos(theta)) / (2 * theta * np.sin(theta))
    return np.eye(3) - 0.5 * W + c * W @ W


def so3_right_jacobian(phi) -> np.ndarray:
    return so3_left_jacobian(-np.asarray(phi, dtype=float))


def so3_right_jacobian_inv(phi) -> np.ndarray:
    return so3_left_jacobian_inv(-np.asarray(phi, dtype=float))


# ---------------------------------------------------------------------- SE(3)


def _as_readonly(a) -> np.ndarray:
    a = np.array(a, dtype=float)
    a.flags.writeable = False
    return a


@dataclass(frozen=True, eq=False)
class RigidTransform:
    """Element of SE(3): unit quaternion rotation plus translation in meters.

    The quaternion is renormalized on construction, so every value produced by
    the operations below carries a unit-norm rotation.
    """

    rotation: np.ndarray = field(default_factory=lambda: np.array([0.0, 0.0, 0.0, 1.0]))
    translation: np.ndarray = field(default_factory=lambda: np.zeros(3))

    def __post_init__(self):
        q = np.asarray(self.rotation, dtype=float).reshape(4)
        n = np.linalg.norm(q)
        if not np.isfinite(n) or n == 0:
            raise ValueError("rotation quaternion must be finite and non-zero")
        q = q / n
        if q[3] < 0:
            q = -q
        object.__setattr__(self, "rotation", _as_readonly(q))
        object.__setattr__(self, "translation", _as_readonly(np.asarray(self.translation, dtype=float).reshape(3)))

    @classmethod
    def identity(cls) -> "RigidTransform":
        return cls()

    @classmethod
    def from_matrix(cls, R: np.ndarray, t=None) -> "RigidTransform":
        """Build from a 3x3 rotation (plus translation) or a 4x4 homogeneous matrix."""
        R = np.asarray(R, dtype=float)
        if R.shape == (4, 4):
            R, t = R[:3, :3], R[:3, 3]
        return cls(matrix_to_quat(R), np.zeros(3) if t is None else t)

    @classmethod
    def from_rotvec(cls, phi, t=None) -> "RigidTransform":
        return cls(quat_from_rotvec(phi), np.zeros(3) if t is None else t)

    @cached_property
    def R(self) -> np.ndarray:
        R = quat_to_matrix(self.rotation)
        R.flags.writeable = False
        return R

    @property
    def t(self) -> np.ndarray:
        return self.translation

    def matrix(self) -> np.ndarray:
        M = np.eye(4)
        M[:3, :3] = self.R
        M[:3, 3] = self.translation
        return M

    def inverse(self) -> "RigidTransform":
        x, y, z, w = self.rotation
        q_inv = np.array([-x, -y, -z, w])
        return RigidTransform(q_inv, -(self.R.T @ self.translation))

    def compose(self, other: "RigidTransform") -> "RigidTransform":
        q = quat_multiply(self.rotation, other.rotation)
        return RigidTransform(q, self.R @ other.translation + self.translation)

    __matmul__ = compose

    def apply(self, p) -> np.ndarray:
        """Transform a point ``(3,)`` or a batch ``(N, 3)``."""
        p = np.asarray(p, dtype=float)
        return p @ self.R.T + self.translation

    def angle(self) -> float:
        """Geodesic rotation angle in radians."""
        return float(2.0 * np.arctan2(np.linalg.norm(self.rotation[:3]), abs(self.rotation[3])))

    def to_tum(self) -> np.ndarray:
        """``(tx, ty, tz, qx, qy, qz, qw)``."""
        return np.concatenate([self.translation, self.rotation])

    @classmethod
    def from_tum(cls, values: Sequence[float]) -> "RigidTransform":
        v = np.asarray(values, dtype=float)
        return cls(v[3:7], v[:3])

    def allclose(self, other: "RigidTransform", atol: float = 1e-9) -> bool:
        return bool(np.allclose(self.matrix(), other.matrix(), atol=atol, rtol=0))

    def __repr__(self) -> str:
        return f"RigidTransform(rotation={self.rotation.tolist()}, translation={self.translation.tolist()})"


def compose(a: RigidTransform, b: RigidTransform) -> RigidTransform:
    return a.compose(b)


def inverse(a: RigidTransform) -> RigidTransform:
    return a.inverse()


def transform_point(a: RigidTransform, p) -> np.ndarray:
    return a.apply(p)


def se3_exp(xi) -> RigidTransform:
    """Exponential map of a twist ``(w, v)``; valid for ``|w| < pi``."""
    xi = np.asarray(xi, dtype=float)
    w, v = xi[:3], xi[3:]
    return RigidTransform(quat_from_rotvec(w), so3_left_jacobian(w) @ v)


def se3_log(t: RigidTransform) -> np.ndarray:
    """Twist ``(w, v)`` such that ``se3_exp`` of it reproduces ``t``.

    Raises LogSingularityError when the rotation angle reaches ``pi - 1e-6``,
    where the rotation axis stops being unique.
    """
    if t.angle() >= np.pi - 1e-6:
        raise LogSingularityError(f"rotation angle {t.angle():.9f} too close to pi")
    w = quat_to_rotvec(t.rotation)
    return np.concatenate([w, so3_left_jacobian_inv(w) @ t.translation])


def _se3_log_unchecked(t: RigidTransform) -> np.ndarray:
    w = quat_to_rotvec(t.rotation)
    return np.concatenate([w, so3_left_jacobian_inv(w) @ t.translation])


def adjoint(t: RigidTransform) -> np.ndarray:
    """6x6 adjoint for ``(w, v)`` ordering: ``exp(Ad xi) = T exp(xi) T^-1``."""
    R = t.R
    A = np.zeros((6, 6))
    A[:3, :3] = R
    A[3:, 3:] = R
    A[3:, :3] = skew(t.translation) @ R
    return A


def _se3_q(w: np.ndarray, v: np.ndarray) -> np.ndarray:
    theta = np.linalg.norm(w)
    W, V = skew(w), skew(v)
    if theta < 1e-4:
        c1, c2, c3 = 1.0 / 6.0, 1.0 / 24.0, 1.0 / 120.0
    else:
        s, c = np.sin(theta), np.cos(theta)
        c1 = (theta - s) / theta**3
        c2 = (theta**2 + 2 * c - 2) / (2 * theta**4)
        c3 = (2 * theta - 3 * s + theta * c) / (2 * theta**5)
    WV = W @ V
    VW = V @ W
    WVW = WV @ W
    WW = W @ W
    return (
        0.5 * V
        + c1 * (WV + VW + WVW)
        + c2 * (WW @ V + VW @ W - 3 * WVW)
        + c3 * (WVW @ W + W @ WVW)
    )


def se3_left_jacobian(xi) -> np.ndarray:
    """Left Jacobian: ``exp(xi + d) ~= exp(J_l d) exp(xi)``."""
    xi = np.asarray(xi, dtype=float)
    w, v = xi[:3], xi[3:]
    J = np.zeros((6, 6))
    Jw = so3_left_jacobian(w)
    J[:3, :3] = Jw
    J[3:, 3:] = Jw
    J[3:, :3] = _se3_q(w, v)
    return J


def se3_right_jacobian(xi) -> np.ndarray:
    """Right Jacobian: ``exp(xi + d) ~= exp(xi) exp(J_r d)``."""
    return se3_left_jacobian(-np.asarray(xi, dtype=float))


def se3_right_jacobian_inv(xi) -> np.ndarray:
    return np.linalg.inv(se3_right_jacobian(xi))


def point_jacobian_left(p_body: np.ndarray) -> np.ndarray:
    """d(exp(delta) p)/d delta at delta=0; ``(N, 3, 6)`` for ``(N, 3)`` input."""
    p_body = np.atleast_2d(p_body)
    J = np.zeros((p_body.shape[0], 3, 6))
    J[:, :, :3] = -skew_batch(p_body)
    J[:, :, 3:] = np.eye(3)
    return J


# --------------------------------------------------------------------- camera


@dataclass(frozen=True)
class CameraModel:
    """Rectified pinhole camera; pixel centers sit at integer coordinates."""

    fx: float
    fy: float
    cx: float
    cy: float
    width: int
    height: int

    def __post_init__(self):
        if not (self.fx > 0 and self.fy > 0):
            raise ValueError("focal lengths must be positive")
        if self.width <= 0 or self.height <= 0:
            raise ValueError("image size must be positive")

    @property
    def K(self) -> np.ndarray:
        return np.array([[self.fx, 0.0, self.cx], [0.0, self.fy, self.cy], [0.0, 0.0, 1.0]])

    def in_bounds(self, px, margin: float = 0.0) -> np.ndarray:
        px = np.asarray(px, dtype=float)
        return (
            (px[..., 0] >= margin)
            & (px[..., 0] <= self.width - 1 - margin)
            & (px[..., 1] >= margin)
            & (px[..., 1] <= self.height - 1 - margin)
        )

    def at_level(self, level: int) -> "CameraModel":
        """Intrinsics of pyramid level ``level`` built by 2x2 box downsampling."""
        s = 2.0**level
        return CameraModel(
            self.fx / s,
            self.fy / s,
            (self.cx + 0.5) / s - 0.5,
            (self.cy + 0.5) / s - 0.5,
            max(self.width >> level, 1),
            max(self.height >> level, 1),
        )

    @classmethod
    def from_fov(cls, width: int, height: int, hfov_deg: float) -> "CameraModel":
        f = 0.5 * width / np.tan(np.radians(hfov_deg) / 2)
        return cls(f, f, (width - 1) / 2.0, (height - 1) / 2.0, width, height)


def project(cam: CameraModel, p_cam) -> np.ndarray:
    p = np.asarray(p_cam, dtype=float)
    if p[2] <= DEPTH_EPS:
        raise BehindCameraError(f"point depth {p[2]} <= {DEPTH_EPS}")
    return np.array([cam.fx * p[0] / p[2] + cam.cx, cam.fy * p[1] / p[2] + cam.cy])


def project_points(cam: CameraModel, P: np.ndarray):
    """Vectorized projection. Returns ``(uv, valid)``; invalid rows hold NaN."""
    P = np.atleast_2d(np.asarray(P, dtype=float))
    z = P[:, 2]
    valid = z > DEPTH_EPS
    zs = np.where(valid, z, np.nan)
    uv = np.stack([cam.fx * P[:, 0] / zs + cam.cx, cam.fy * P[:, 1] / zs + cam.cy], axis=1)
    return uv, valid


def projection_jacobian(cam: CameraModel, P: np.ndarray) -> np.ndarray:
    """d pixel / d p_cam, shape ``(N, 2, 3)``."""
    P = np.atleast_2d(P)
    x, y, z = P[:, 0], P[:, 1], P[:, 2]
    iz = 1.0 / z
    J = np.zeros((P.shape[0], 2, 3))
    J[:, 0, 0] = cam.fx * iz
    J[:, 0, 2] = -cam.fx * x * iz * iz
    J[:, 1, 1] = cam.fy * iz
    J[:, 1, 2] = -cam.fy * y * iz * iz
    return J


def unproject(cam: CameraModel, px, depth) -> np.ndarray:
    """Lift pixel(s) to camera-frame point(s) with the given z."""
    px = np.asarray(px, dtype=float)
    depth = np.asarray(depth, dtype=float)
    if np.any(~(depth > 0)):
        raise InvalidDepthError("depth must be strictly positive")
    x = (px[..., 0] - cam.cx) / cam.fx * depth
    y = (px[..., 1] - cam.cy) / cam.fy * depth
    return np.stack([x, y, depth * np.ones_like(x)], axis=-1)


@dataclass(frozen=True)
class CameraRig:
    """Ordered cameras with their camera-from-base extrinsics ``T_cb``."""

    cameras: tuple

    def __post_init__(self):
        cams = tuple((c, T) for c, T in self.cameras)
        if not cams:
            raise ValueError("a rig needs at least one camera")
        for c, T in cams:
            if not isinstance(c, CameraModel) or not isinstance(T, RigidTransform):
                raise TypeError("rig entries must be (CameraModel, RigidTransform)")
        object.__setattr__(self, "cameras", cams)

    def __len__(self) -> int:
        return len(self.cameras)

    def camera(self, k: int) -> CameraModel:
        return self.cameras[k][0]

    def extrinsic(self, k: int) -> RigidTransform:
        return self.cameras[k][1]

    def camera_from_world(self, k: int, T_bw: RigidTransform) -> RigidTransform:
        return self.cameras[k][1] @ T_bw


# ---------------------------------------------------------------------- noise


@dataclass(frozen=True)
class NoiseModel:
    """Gaussian noise with optional Huber robustification.

    ``values`` holds variances: one entry for ``isotropic``, one per residual
    dimension for ``diagonal``, a full covariance for ``full``.
    ``huber`` is the Huber threshold in whitened units (None disables it).
    """

    kind: str = "isotropic"
    values: tuple = (1.0,)
    huber: float | None = None

    def __post_init__(self):
        vals = np.asarray(self.values, dtype=float)
        if self.kind not in ("isotropic", "diagonal", "full"):
            raise ValueError(f"unknown noise kind {self.kind!r}")
        if self.kind == "full":
            if np.any(np.linalg.eigvalsh(vals) <= 0):
                raise ValueError("covariance must be positive definite")
        elif np.any(vals <= 0):
            raise ValueError("variances must be positive")
        if self.huber is not None and self.huber <= 0:
            raise ValueError("huber threshold must be positive")
        object.__setattr__(self, "values", tuple(np.ravel(vals).tolist()) if self.kind != "full" else tuple(map(tuple, vals)))

    @classmethod
    def isotropic(cls, sigma: float, huber: float | None = None) -> "NoiseModel":
        return cls("isotropic", (sigma * sigma,), huber)

    def sqrt_information(self, dim: int) -> np.ndarray:
        vals = np.asarray(self.values, dtype=float)
        if self.kind == "isotropic":
            return np.eye(dim) / np.sqrt(vals[0])
        if self.kind == "diagonal":
            return np.diag(1.0 / np.sqrt(vals))
        L = np.linalg.cholesky(np.linalg.inv(vals))
        return L.T

    @property
    def sigma(self) -> float:
        """Scalar standard deviation (isotropic models only)."""
        return float(np.sqrt(self.values[0]))
