"""Rotations, SE(3) poses, pinhole projection, and their derivatives.

Conventions used throughout the package:
  * quaternions are (w, x, y, z), kept unit-norm; rotation matrices are
    always computed from the normalized quaternion, so derivatives with
    respect to raw quaternion components include the normalization
    Jacobian (this makes finite-difference checks on raw components
    well defined)
  * a Pose is camera-to-world: X_world = R q X_cam + t; the camera
    center is therefore the translation
  * pixels are (u, v) with u along width
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import BehindCamera, NonPositiveDepth

NEAR_PLANE = 1e-4
COV2D_REGULARIZER = 0.3  # px^2, added to the diagonal of every 2D covariance


# ---------------------------------------------------------------------------
# quaternion utilities
# ---------------------------------------------------------------------------

def quat_normalize(q: np.ndarray) -> np.ndarray:
    q = np.asarray(q, dtype=np.float64)
    return q / np.linalg.norm(q)


def quat_canonical(q: np.ndarray) -> np.ndarray:
    """Unit quaternion with w >= 0 (q and -q are the same rotation)."""
    q = quat_normalize(q)
    return -q if q[0] < 0 else q


def quat_multiply(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    aw, ax, ay, az = a
    bw, bx, by, bz = b
    return np.array([
        aw * bw - ax * bx - ay * by - az * bz,
        aw * bx + ax * bw + ay * bz - az * by,
        aw * by - ax * bz + ay * bw + az * bx,
        aw * bz + ax * by - ay * bx + az * bw,
    ])


def quat_conjugate(q: np.ndarray) -> np.ndarray:
    return np.array([q[0], -q[1], -q[2], -q[3]])


def quat_to_rotmat(q: np.ndarray) -> np.ndarray:
    """3x3 rotation from a quaternion; normalizes internally."""
    w, x, y, z = quat_normalize(q)
    return np.array([
        [1 - 2 * (y * y + z * z), 2 * (x * y - w * z), 2 * (x * z + w * y)],
        [2 * (x * y + w * z), 1 - 2 * (x * x + z * z), 2 * (y * z - w * x)],
        [2 * (x * z - w * y), 2 * (y * z + w * x), 1 - 2 * (x * x + y * y)],
    ])


def quats_to_rotmats(q: np.ndarray) -> np.ndarray:
    """Vectorized quat_to_rotmat: (N,4) -> (N,3,3)."""
    q = np.asarray(q, dtype=np.float64)
    q = q / np.linalg.norm(q, axis=-1, keepdims=True)
    w, x, y, z = q[..., 0], q[..., 1], q[..., 2], q[..., 3]
    R = np.empty(q.shape[:-1] + (3, 3))
    R[..., 0, 0] = 1 - 2 * (y * y + z * z)
    R[..., 0, 1] = 2 * (x * y - w * z)
    R[..., 0, 2] = 2 * (x * z + w * y)
    R[..., 1, 0] = 2 * (x * y + w * z)
    R[..., 1, 1] = 1 - 2 * (x * x + z * z)
    R[..., 1, 2] = 2 * (y * z - w * x)
    R[..., 2, 0] = 2 * (x * z - w * y)
    R[..., 2, 1] = 2 * (y * z + w * x)
    R[..., 2, 2] = 1 - 2 * (x * x + y * y)
    return R


def _drot_dunit(u: np.ndarray) -> np.ndarray:
    """Derivative of R with respect to the *unit* quaternion: (4,3,3)."""
    w, x, y, z = u
    dw = 2 * np.array([[0.0, -z, y], [z, 0.0, -x], [-y, x, 0.0]])
    dx = 2 * np.array([[0.0, y, z], [y, -2 * x, -w], [z, w, -2 * x]])
    dy = 2 * np.array([[-2 * y, x, w], [x, 0.0, z], [-w, z, -2 * y]])
    dz = 2 * np.array([[-2 * z, -w, x], [w, -2 * z, y], [x, y, 0.0]])
    return np.stack([dw, dx, dy, dz])


def quat_rotmat_backward(q: np.ndarray, dL_dR: np.ndarray) -> np.ndarray:
    """Gradient of a scalar loss w.r.t. raw quaternion components given
    dL/dR, including the normalization Jacobian."""
    q = np.asarray(q, dtype=np.float64)
    n = np.linalg.norm(q)
    u = q / n
    dL_du = np.einsum("kij,ij->k", _drot_dunit(u), dL_dR)
    # du/dq = (I - u u^T) / |q|
    return (dL_du - u * np.dot(u, dL_du)) / n


def quats_rotmats_backward(q: np.ndarray, dL_dR: np.ndarray) -> np.ndarray:
    """Vectorized quat_rotmat_backward: (N,4), (N,3,3) -> (N,4)."""
    q = np.asarray(q, dtype=np.float64)
    n = np.linalg.norm(q, axis=-1, keepdims=True)
    u = q / n
    w, x, y, z = u[:, 0], u[:, 1], u[:, 2], u[:, 3]
    zero = np.zeros_like(w)
    du = np.empty((q.shape[0], 4, 3, 3))
    du[:, 0] = 2 * np.stack([
        np.stack([zero, -z, y], -1),
        np.stack([z, zero, -x], -1),
        np.stack([-y, x, zero], -1)], -2)
    du[:, 1] = 2 * np.stack([
        np.stack([zero, y, z], -1),
        np.stack([y, -2 * x, -w], -1),
        np.stack([z, w, -2 * x], -1)], -2)
    du[:, 2] = 2 * np.stack([
        np.stack([-2 * y, x, w], -1),
        np.stack([x, zero, z], -1),
        np.stack([-w, z, -2 * y], -1)], -2)
    du[:, 3] = 2 * np.stack([
        np.stack([-2 * z, -w, x], -1),
        np.stack([w, -2 * z, y], -1),
        np.stack([x, y, zero], -1)], -2)
    dL_du = np.einsum("nkij,nij->nk", du, dL_dR)
    return (dL_du - u * np.sum(u * dL_du, axis=-1, keepdims=True)) / n


def rotmat_to_quat(R: np.ndarray) -> np.ndarray:
    """Rotation matrix -> unit quaternion (w, x, y, z), w >= 0."""
    trace = R[0, 0] + R[1, 1] + R[2, 2]
    if trace > 0:
        s = 0.5 / np.sqrt(trace + 1.0)
        q = np.array([0.25 / s,
                      (R[2, 1] - R[1, 2]) * s,
                      (R[0, 2] - R[2, 0]) * s,
                      (R[1, 0] - R[0, 1]) * s])
    elif R[0, 0] > R[1, 1] and R[0, 0] > R[2, 2]:
        s = 2.0 * np.sqrt(1.0 + R[0, 0] - R[1, 1] - R[2, 2])
        q = np.array([(R[2, 1] - R[1, 2]) / s, 0.25 * s,
                      (R[0, 1] + R[1, 0]) / s, (R[0, 2] + R[2, 0]) / s])
    elif R[1, 1] > R[2, 2]:
        s = 2.0 * np.sqrt(1.0 + R[1, 1] - R[0, 0] - R[2, 2])
        q = np.array([(R[0, 2] - R[2, 0]) / s, (R[0, 1] + R[1, 0]) / s,
                      0.25 * s, (R[1, 2] + R[2, 1]) / s])
    else:
        s = 2.0 * np.sqrt(1.0 + R[2, 2] - R[0, 0] - R[1, 1])
        q = np.array([(R[1, 0] - R[0, 1]) / s, (R[0, 2] + R[2, 0]) / s,
                      (R[1, 2] + R[2, 1]) / s, 0.25 * s])
    return quat_canonical(q)


def axis_angle_to_quat(w: np.ndarray) -> np.ndarray:
    """Exponential map: axis-angle 3-vector -> unit quaternion."""
    theta = np.linalg.norm(w)
    if theta < 1e-12:
        return quat_normalize(np.array([1.0, 0.5 * w[0], 0.5 * w[1], 0.5 * w[2]]))
    axis = w / theta
    return np.concatenate([[np.cos(theta / 2)], np.sin(theta / 2) * axis])


# ---------------------------------------------------------------------------
# core value types
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class Intrinsics:
    fx: float
    fy: float
    cx: float
    cy: float
    width: int
    height: int

    def __post_init__(self):
        if self.fx <= 0 or self.fy <= 0:
            raise ValueError("focal lengths must be positive")
        if not (0 <= self.cx < self.width and 0 <= self.cy < self.height):
            raise ValueError("principal point outside image")

    @property
    def K(self) -> np.ndarray:
        return np.array([[self.fx, 0, self.cx],
                         [0, self.fy, self.cy],
                         [0, 0, 1.0]])

    @property
    def K_inv(self) -> np.ndarray:
        return np.array([[1.0 / self.fx, 0, -self.cx / self.fx],
                         [0, 1.0 / self.fy, -self.cy / self.fy],
                         [0, 0, 1.0]])


@dataclass(frozen=True)
class Pose:
    """Camera-to-world rigid transform (unit quaternion + translation)."""

    q: np.ndarray = field(default_factory=lambda: np.array([1.0, 0, 0, 0]))
    t: np.ndarray = field(default_factory=lambda: np.zeros(3))

    def __post_init__(self):
        object.__setattr__(self, "q", quat_normalize(self.q))
        object.__setattr__(self, "t", np.asarray(self.t, dtype=np.float64))

    @property
    def R(self) -> np.ndarray:
        return quat_to_rotmat(self.q)

    def apply(self, points: np.ndarray) -> np.ndarray:
        """Map camera-frame points to world."""
        return np.asarray(points) @ self.R.T + self.t

    def inverse(self) -> "Pose":
        Rt = self.R.T
        return Pose(quat_conjugate(self.q), -Rt @ self.t)

    def compose(self, other: "Pose") -> "Pose":
        """self then-applied-after other: (self * other)(x) = self(other(x))."""
        return Pose(quat_multiply(self.q, other.q), self.R @ other.t + self.t)

    def world_to_camera(self, points: np.ndarray) -> np.ndarray:
        return (np.asarray(points) - self.t) @ self.R

    def to_array(self) -> np.ndarray:
        """7-vector (qw qx qy qz tx ty tz), canonical quaternion sign."""
        return np.concatenate([quat_canonical(self.q), self.t])

    @staticmethod
    def from_array(a: np.ndarray) -> "Pose":
        a = np.asarray(a, dtype=np.float64)
        return Pose(a[:4], a[4:7])

    def rotation_angle_to(self, other: "Pose") -> float:
        """Geodesic rotation distance in radians."""
        dq = quat_multiply(quat_conjugate(self.q), other.q)
        w = min(1.0, abs(float(dq[0])))
        return 2.0 * np.arccos(w)


@dataclass(frozen=True)
class Covariance3:
    """3D covariance stored factored as rotation + log-scales so that the
    reconstructed matrix R S S^T R^T is PSD by construction."""

    q: np.ndarray
    log_scale: np.ndarray

    def matrix(self) -> np.ndarray:
        R = quat_to_rotmat(self.q)
        s2 = np.exp(2.0 * np.asarray(self.log_scale, dtype=np.float64))
        return (R * s2) @ R.T


# ---------------------------------------------------------------------------
# projection
# ---------------------------------------------------------------------------

def project(point: np.ndarray, pose: Pose, K: Intrinsics,
            near: float = NEAR_PLANE) -> tuple[np.ndarray, float]:
    """World point -> (pixel, camera depth). Raises BehindCamera for z <= near."""
    pc = pose.world_to_camera(np.asarray(point, dtype=np.float64))
    z = float(pc[2])
    if z <= near:
        raise BehindCamera(f"camera-frame depth {z} <= near plane {near}")
    u = K.fx * pc[0] / z + K.cx
    v = K.fy * pc[1] / z + K.cy
    return np.array([u, v]), z


def unproject_pixel(u: np.ndarray, d: float, K: Intrinsics, pose: Pose) -> np.ndarray:
    """Pixel + depth -> world point; inverse of `project`."""
    if d <= 0:
        raise NonPositiveDepth(f"depth {d} <= 0")
    ray = K.K_inv @ np.array([u[0], u[1], 1.0])
    return pose.apply(d * ray)


def project_points(points: np.ndarray, pose: Pose, K: Intrinsics,
                   near: float = NEAR_PLANE) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Vectorized projection with a validity mask instead of exceptions.

    Returns (pixels (N,2), depths (N,), valid (N,) bool). Pixels/depths of
    invalid points are left as garbage and must be masked by the caller.
    """
    pc = (np.asarray(points, dtype=np.float64) - pose.t) @ pose.R
    z = pc[:, 2]
    valid = z > near
    zs = np.where(valid, z, 1.0)
    pix = np.empty((len(z), 2))
    pix[:, 0] = K.fx * pc[:, 0] / zs + K.cx
    pix[:, 1] = K.fy * pc[:, 1] / zs + K.cy
    return pix, z, valid


def unproject_pixels(pix: np.ndarray, depths: np.ndarray, K: Intrinsics,
                     pose: Pose) -> np.ndarray:
    """Vectorized unprojection: (N,2) pixels + (N,) depths -> (N,3) world."""
    pix = np.asarray(pix, dtype=np.float64)
    d = np.asarray(depths, dtype=np.float64)
    rays = np.stack([(pix[:, 0] - K.cx) / K.fx,
                     (pix[:, 1] - K.cy) / K.fy,
                     np.ones(len(pix))], axis=1)
    return pose.apply(rays * d[:, None])


def projection_jacobian(pc: np.ndarray, K: Intrinsics) -> np.ndarray:
    """Jacobian of (u, v) w.r.t. the camera-frame point at pc: (2,3)."""
    x, y, z = pc
    return np.array([[K.fx / z, 0.0, -K.fx * x / (z * z)],
                     [0.0, K.fy / z, -K.fy * y / (z * z)]])


def project_covariance(cov: Covariance3, pose: Pose, K: Intrinsics,
                       mean_cam: np.ndarray,
                       near: float = NEAR_PLANE,
                       regularizer: float = COV2D_REGULARIZER) -> np.ndarray:
    """2D image covariance via the affine approximation of the projection.

    Uses the rotation part of the world-to-camera transform only; a small
    diagonal regularizer keeps splats at least a fraction of a pixel wide.
    """
    mean_cam = np.asarray(mean_cam, dtype=np.float64)
    if mean_cam[2] <= near:
        raise BehindCamera(f"depth {mean_cam[2]} <= near plane {near}")
    Wr = pose.R.T  # world -> camera rotation
    M = Wr @ cov.matrix() @ Wr.T
    J = projection_jacobian(mean_cam, K)
    S = J @ M @ J.T
    S = 0.5 * (S + S.T)
    return S + regularizer * np.eye(2)


# ---------------------------------------------------------------------------
# pose text format
# ---------------------------------------------------------------------------

def save_trajectory(path, poses: dict[int, Pose]) -> None:
    """Write `frame_index qw qx qy qz tx ty tz` lines in index order."""
    with open(path, "w") as f:
        for idx in sorted(poses):
            a = poses[idx].to_array()
            f.write(str(idx) + " " + " ".join(repr(float(v)) for v in a) + "\n")


def load_trajectory(path) -> dict[int, Pose]:
    poses: dict[int, Pose] = {}
    with open(path) as f:
        for line in f:
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            parts = line.split()
            if len(parts) != 8:
                raise ValueError(f"bad trajectory line: {line!r}")
            poses[int(parts[0])] = Pose.from_array(np.array([float(p) for p in parts[1:]]))
    return poses
