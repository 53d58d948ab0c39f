"""Rigid-body transforms, pinhole camera model, and projection derivatives.

Conventions used throughout the package:

* Rotations are stored as unit quaternions in ``[x, y, z, w]`` order
  (scipy convention) and renormalized after every composition.
* Camera frame is right-handed with Z forward, X right, Y down; image
  origin is the top-left corner, u along columns, v along rows.
* ``Pose`` maps points from its own frame into the parent frame:
  ``p_parent = R @ p_local + t``.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.spatial.transform import Rotation


class BehindCameraError(ValueError):
    """Raised when a point with non-positive depth is projected."""


def _as_vec3(p) -> np.ndarray:
    p = np.asarray(p, dtype=np.float64)
    if p.shape != (3,):
        raise ValueError(f"expected 3-vector, got shape {p.shape}")
    return p


@dataclass(frozen=True)
class Pose:
    """Rigid transform: unit quaternion ``q`` (xyzw) plus translation ``t``."""

    q: np.ndarray
    t: np.ndarray

    def __post_init__(self):
        q = np.asarray(self.q, dtype=np.float64).reshape(4)
        t = np.asarray(self.t, dtype=np.float64).reshape(3)
        n = np.linalg.norm(q)
        if n == 0.0 or not np.isfinite(n):
            raise ValueError("quaternion must be finite and nonzero")
        object.__setattr__(self, "q", q / n)
        object.__setattr__(self, "t", t)

    @staticmethod
    def identity() -> "Pose":
        return Pose(np.array([0.0, 0.0, 0.0, 1.0]), np.zeros(3))

    @staticmethod
    def from_rotation_translation(rot: Rotation, t) -> "Pose":
        return Pose(rot.as_quat(), _as_vec3(t))

    @staticmethod
    def from_matrix(m: np.ndarray) -> "Pose":
        m = np.asarray(m, dtype=np.float64)
        return Pose(Rotation.from_matrix(m[:3, :3]).as_quat(), m[:3, 3])

    @property
    def rotation(self) -> Rotation:
        return Rotation.from_quat(self.q)

    def rotation_matrix(self) -> np.ndarray:
        return Rotation.from_quat(self.q).as_matrix()

    def matrix(self) -> np.ndarray:
        m = np.eye(4)
        m[:3, :3] = self.rotation_matrix()
        m[:3, 3] = self.t
        return m

    def compose(self, other: "Pose") -> "Pose":
        """self ∘ other: apply ``other`` first, then ``self``."""
        r_a = Rotation.from_quat(self.q)
        q = (r_a * Rotation.from_quat(other.q)).as_quat()
        t = r_a.apply(other.t) + self.t
        return Pose(q, t)

    def inverse(self) -> "Pose":
        r_inv = Rotation.from_quat(self.q).inv()
        return Pose(r_inv.as_quat(), -r_inv.apply(self.t))

    def apply(self, p: np.ndarray) -> np.ndarray:
        """Transform one point or an (N, 3) array of points."""
        p = np.asarray(p, dtype=np.float64)
        return Rotation.from_quat(self.q).apply(p) + self.t

    def rotation_angle_to(self, other: "Pose") -> float:
        """Relative rotation angle in radians."""
        r = Rotation.from_quat(self.q).inv() * Rotation.from_quat(other.q)
        return float(np.linalg.norm(r.as_rotvec()))

    def translation_distance_to(self, other: "Pose") -> float:
        return float(np.linalg.norm(self.t - other.t))


def se3_compose(a: Pose, b: Pose) -> Pose:
    return a.compose(b)


def se3_inverse(a: Pose) -> Pose:
    return a.inverse()


def se3_apply(a: Pose, p: np.ndarray) -> np.ndarray:
    return a.apply(p)


def se3_exp(twist: np.ndarray) -> Pose:
    """Twist ``[tx, ty, tz, rx, ry, rz]`` to a pose (translation then rotvec).

    Uses the simple (rotvec, translation) chart rather than the coupled
    SE(3) exponential; all optimizers here use it consistently as a local
    parameterization, so the choice of chart is immaterial.
    """
    twist = np.asarray(twist, dtype=np.float64).reshape(6)
    return Pose(Rotation.from_rotvec(twist[3:]).as_quat(), twist[:3])


def se3_log(pose: Pose) -> np.ndarray:
    """Inverse of :func:`se3_exp`."""
    return np.concatenate([pose.t, Rotation.from_quat(pose.q).as_rotvec()])


def perturb_pose(pose: Pose, twist: np.ndarray) -> Pose:
    """Left-multiplicative update ``exp(twist) ∘ pose``."""
    return se3_exp(twist).compose(pose)


@dataclass(frozen=True)
class CameraIntrinsics:
    """Pinhole intrinsics; focal lengths and principal point in pixels."""

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
            raise ValueError("principal point must lie inside the image")

    def as_dict(self) -> dict:
        return {
            "fx": self.fx,
            "fy": self.fy,
            "cx": self.cx,
            "cy": self.cy,
            "width": self.width,
            "height": self.height,
        }

    @staticmethod
    def from_dict(d: dict) -> "CameraIntrinsics":
        return CameraIntrinsics(
            fx=float(d["fx"]),
            fy=float(d["fy"]),
            cx=float(d["cx"]),
            cy=float(d["cy"]),
            width=int(d["width"]),
            height=int(d["height"]),
        )


def project(p: np.ndarray, intr: CameraIntrinsics) -> np.ndarray:
    """Project a camera-frame point to pixel coordinates ``[u, v]``."""
    p = _as_vec3(p)
    if p[2] <= 0.0:
        raise BehindCameraError(f"point depth must be positive, got Z={p[2]}")
    return np.array(
        [
            intr.fx * p[0] / p[2] + intr.cx,
            intr.fy * p[1] / p[2] + intr.cy,
        ]
    )


def project_points(points: np.ndarray, intr: CameraIntrinsics) -> np.ndarray:
    """Vectorized projection of (N, 3) camera-frame points; no depth check."""
    points = np.asarray(points, dtype=np.float64)
    z = points[:, 2]
    return np.stack(
        [intr.fx * points[:, 0] / z + intr.cx, intr.fy * points[:, 1] / z + intr.cy],
        axis=1,
    )


def projection_jacobian(p: np.ndarray, intr: CameraIntrinsics) -> np.ndarray:
    """2x3 derivative of :func:`project` with respect to the 3D point."""
    p = _as_vec3(p)
    x, y, z = p
    if z <= 0.0:
        raise BehindCameraError(f"point depth must be positive, got Z={z}")
    return np.array(
        [
            [intr.fx / z, 0.0, -intr.fx * x / (z * z)],
            [0.0, intr.fy / z, -intr.fy * y / (z * z)],
        ]
    )


def projection_jacobians(points: np.ndarray, intr: CameraIntrinsics) -> np.ndarray:
    """Vectorized (N, 2, 3) version of :func:`projection_jacobian`."""
    points = np.asarray(points, dtype=np.float64)
    n = points.shape[0]
    x, y, z = points[:, 0], points[:, 1], points[:, 2]
    out = np.zeros((n, 2, 3))
    out[:, 0, 0] = intr.fx / z
    out[:, 0, 2] = -intr.fx * x / (z * z)
    out[:, 1, 1] = intr.fy / z
    out[:, 1, 2] = -intr.fy * y / (z * z)
    return out
