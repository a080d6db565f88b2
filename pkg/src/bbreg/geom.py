"""Geometric primitives: point clouds, poses, rigid transforms and error metrics."""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

ALPHA_FLOOR = 1e-8
ALPHA_INIT = 1e-2


def _as_points(a, name="points"):
    arr = np.array(a, dtype=np.float64)
    if arr.ndim == 1 and arr.size == 3:
        arr = arr.reshape(1, 3)
    if arr.ndim != 2 or arr.shape[1] != 3:
        raise ValueError(f"{name} must have shape (n, 3), got {arr.shape}")
    return arr


@dataclass(frozen=True)
class PointCloud:
    """An ordered set of 3D points with optional unit normals.

    Arrays are copied on construction and marked read-only.
    """

    points: np.ndarray
    normals: np.ndarray | None = None

    def __post_init__(self):
        pts = _as_points(self.points)
        if len(pts) == 0:
            raise ValueError("a point cloud needs at least one point")
        if not np.all(np.isfinite(pts)):
            raise ValueError("point coordinates must be finite")
        pts.flags.writeable = False
        object.__setattr__(self, "points", pts)
        if self.normals is not None:
            nrm = _as_points(self.normals, "normals")
            if nrm.shape != pts.shape:
                raise ValueError(
                    f"normals shape {nrm.shape} does not match points {pts.shape}"
                )
            norms = np.linalg.norm(nrm, axis=1)
            if not np.all(np.abs(norms - 1.0) <= 1e-6):
                bad = int(np.argmax(np.abs(norms - 1.0)))
                raise ValueError(f"normal {bad} is not unit length (norm {norms[bad]!r})")
            nrm.flags.writeable = False
            object.__setattr__(self, "normals", nrm)

    def __len__(self):
        return len(self.points)

    @property
    def has_normals(self) -> bool:
        return self.normals is not None

    def subset(self, idx) -> "PointCloud":
        idx = np.asarray(idx)
        normals = None if self.normals is None else self.normals[idx]
        return PointCloud(self.points[idx], normals)

    def with_normals(self, normals) -> "PointCloud":
        return PointCloud(self.points, normals)

    def centroid(self) -> np.ndarray:
        return self.points.mean(axis=0)

    def diagonal(self) -> float:
        """Length of the axis-aligned bounding box diagonal."""
        return float(np.linalg.norm(self.points.max(axis=0) - self.points.min(axis=0)))


def rot_x(a):
    c, s = math.cos(a), math.sin(a)
    return np.array([[1.0, 0.0, 0.0], [0.0, c, -s], [0.0, s, c]])


def rot_y(a):
    c, s = math.cos(a), math.sin(a)
    return np.array([[c, 0.0, s], [0.0, 1.0, 0.0], [-s, 0.0, c]])


def rot_z(a):
    c, s = math.cos(a), math.sin(a)
    return np.array([[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]])


def rotation_from_euler(theta, phi, psi) -> np.ndarray:
    """Rotation matrix ``Rz(psi) @ Ry(phi) @ Rx(theta)``."""
    return rot_z(psi) @ rot_y(phi) @ rot_x(theta)


def euler_derivatives(theta, phi, psi):
    """Partial derivatives of :func:`rotation_from_euler` w.r.t. each angle.

    Returns an array of shape (3, 3, 3) stacking dR/dtheta, dR/dphi, dR/dpsi.
    """
    rx, ry, rz = rot_x(theta), rot_y(phi), rot_z(psi)
    ct, st = math.cos(theta), math.sin(theta)
    cp, sp = math.cos(phi), math.sin(phi)
    cs, ss = math.cos(psi), math.sin(psi)
    drx = np.array([[0.0, 0.0, 0.0], [0.0, -st, -ct], [0.0, ct, -st]])
    dry = np.array([[-sp, 0.0, cp], [0.0, 0.0, 0.0], [-cp, 0.0, -sp]])
    drz = np.array([[-ss, -cs, 0.0], [cs, -ss, 0.0], [0.0, 0.0, 0.0]])
    return np.stack([rz @ ry @ drx, rz @ dry @ rx, drz @ ry @ rx])


def euler_from_rotation(R) -> tuple[float, float, float]:
    """Inverse of :func:`rotation_from_euler` (phi in [-pi/2, pi/2])."""
    R = np.asarray(R, dtype=np.float64)
    phi = math.asin(max(-1.0, min(1.0, -R[2, 0])))
    if abs(R[2, 0]) < 1.0 - 1e-12:
        theta = math.atan2(R[2, 1], R[2, 2])
        psi = math.atan2(R[1, 0], R[0, 0])
    else:
        # gimbal lock: only theta -/+ psi is determined
        theta = 0.0
        psi = math.atan2(-R[0, 1], R[1, 1])
    return theta, phi, psi


@dataclass(frozen=True)
class RigidTransform:
    rotation: np.ndarray = field(default_factory=lambda: np.eye(3))
    translation: np.ndarray = field(default_factory=lambda: np.zeros(3))

    def __post_init__(self):
        R = np.array(self.rotation, dtype=np.float64).reshape(3, 3)
        t = np.array(self.translation, dtype=np.float64).reshape(3)
        if np.max(np.abs(R.T @ R - np.eye(3))) >= 1e-9 or abs(np.linalg.det(R) - 1.0) > 1e-9:
            raise ValueError("rotation must be a proper orthonormal matrix")
        R.flags.writeable = False
        t.flags.writeable = False
        object.__setattr__(self, "rotation", R)
        object.__setattr__(self, "translation", t)

    @classmethod
    def identity(cls) -> "RigidTransform":
        return cls()

    def inverse(self) -> "RigidTransform":
        Rt = self.rotation.T
        return RigidTransform(Rt, -Rt @ self.translation)

    def compose(self, other: "RigidTransform") -> "RigidTransform":
        """``self ∘ other``: apply ``other`` first."""
        return RigidTransform(
            self.rotation @ other.rotation,
            self.rotation @ other.translation + self.translation,
        )

    def as_matrix(self) -> np.ndarray:
        M = np.eye(4)
        M[:3, :3] = self.rotation
        M[:3, 3] = self.translation
        return M


@dataclass(frozen=True)
class PoseParams:
    """The seven optimised scalars: Euler angles, translation and log-temperature."""

    theta: float = 0.0
    phi: float = 0.0
    psi: float = 0.0
    tx: float = 0.0
    ty: float = 0.0
    tz: float = 0.0
    log_alpha: float = math.log(ALPHA_INIT)

    def __post_init__(self):
        if not all(math.isfinite(v) for v in self.to_vector()):
            raise ValueError("pose parameters must be finite")

    @classmethod
    def from_vector(cls, v) -> "PoseParams":
        return cls(*(float(x) for x in v))

    @classmethod
    def from_transform(cls, T: RigidTransform, alpha=ALPHA_INIT) -> "PoseParams":
        theta, phi, psi = euler_from_rotation(T.rotation)
        return cls(theta, phi, psi, *map(float, T.translation), math.log(alpha))

    def to_vector(self) -> np.ndarray:
        return np.array(
            [self.theta, self.phi, self.psi, self.tx, self.ty, self.tz, self.log_alpha]
        )

    @property
    def alpha(self) -> float:
        return math.exp(self.log_alpha)

    @property
    def rotation(self) -> np.ndarray:
        return rotation_from_euler(self.theta, self.phi, self.psi)

    @property
    def translation(self) -> np.ndarray:
        return np.array([self.tx, self.ty, self.tz])

    def transform(self) -> RigidTransform:
        return RigidTransform(self.rotation, self.translation)


def apply_transform(T: RigidTransform, cloud: PointCloud) -> PointCloud:
    """Map every point to ``R @ q + t``; normals are rotated."""
    pts = cloud.points @ T.rotation.T + T.translation
    normals = None
    if cloud.normals is not None:
        normals = cloud.normals @ T.rotation.T
        assert np.all(np.abs(np.linalg.norm(normals, axis=1) - 1.0) < 1e-6)
    return PointCloud(pts, normals)


def angular_error(R_est, R_gt) -> float:
    """Rotation angle in degrees equivalent to the chordal distance of two rotations."""
    chord = np.linalg.norm(np.asarray(R_est) - np.asarray(R_gt))
    s = min(1.0, max(0.0, chord / (2.0 * math.sqrt(2.0))))
    return math.degrees(2.0 * math.asin(s))


def translation_error(t_est, t_gt) -> float:
    return float(np.linalg.norm(np.asarray(t_est, dtype=np.float64) - np.asarray(t_gt, dtype=np.float64)))


def transform_errors(T_est: RigidTransform, T_gt: RigidTransform) -> tuple[float, float]:
    """(angular error in degrees, translation error) between two transforms."""
    return (
        angular_error(T_est.rotation, T_gt.rotation),
        translation_error(T_est.translation, T_gt.translation),
    )
