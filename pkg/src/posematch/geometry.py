"""Camera model, rigid poses, the 6D rotation encoding and residual-pose updates.

Conventions: a pixel with integer index ``i`` covers ``[i, i + 1)`` so its
center sits at ``i + 0.5``. Poses map model-frame points into the camera
frame, ``X = R p + t``. Angles are degrees at the API surface.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np


class GeometryError(ValueError):
    pass


@dataclass(frozen=True)
class CameraIntrinsics:
    fx: float
    fy: float
    cx: float
    cy: float
    width: int
    height: int
    # crop windows may legitimately leave the principal point outside
    off_center: bool = field(default=False, repr=False, compare=False)

    def __post_init__(self):
        if not (self.fx > 0 and self.fy > 0):
            raise GeometryError("focal lengths must be positive")
        if self.width < 1 or self.height < 1:
            raise GeometryError("image size must be positive")
        if not self.off_center and not (0 <= self.cx < self.width and 0 <= self.cy < self.height):
            raise GeometryError("principal point must lie inside the image")

    @classmethod
    def crop(cls, fx, fy, cx, cy, width, height) -> "CameraIntrinsics":
        return cls(float(fx), float(fy), float(cx), float(cy), int(width), int(height), off_center=True)

    @property
    def matrix(self) -> np.ndarray:
        return np.array([[self.fx, 0.0, self.cx], [0.0, self.fy, self.cy], [0.0, 0.0, 1.0]])

    def to_dict(self) -> dict:
        return {"fx": self.fx, "fy": self.fy, "cx": self.cx, "cy": self.cy,
                "width": self.width, "height": self.height}

    @classmethod
    def from_dict(cls, d: dict) -> "CameraIntrinsics":
        return cls(float(d["fx"]), float(d["fy"]), float(d["cx"]), float(d["cy"]),
                   int(d["width"]), int(d["height"]), off_center=bool(d.get("off_center", False)))


@dataclass(frozen=True, eq=False)
class RigidPose:
    """Object-to-camera transform."""

    rotation: np.ndarray
    translation: np.ndarray

    def __post_init__(self):
        R = np.array(self.rotation, dtype=np.float64).reshape(3, 3)
        t = np.array(self.translation, dtype=np.float64).reshape(3)
        R.setflags(write=False)
        t.setflags(write=False)
        object.__setattr__(self, "rotation", R)
        object.__setattr__(self, "translation", t)

    @classmethod
    def identity(cls) -> "RigidPose":
        return cls(np.eye(3), np.zeros(3))

    def transform(self, points: np.ndarray) -> np.ndarray:
        """Map ``(N, 3)`` model-frame points into the camera frame."""
        return np.asarray(points, dtype=np.float64) @ self.rotation.T + self.translation

    def is_valid(self, tol: float = 1e-9) -> bool:
        R = self.rotation
        return bool(np.all(np.abs(R.T @ R - np.eye(3)) <= tol)
                    and abs(np.linalg.det(R) - 1.0) <= tol
                    and np.all(np.isfinite(self.translation)))

    def __matmul__(self, other: "RigidPose") -> "RigidPose":
        return RigidPose(self.rotation @ other.rotation,
                         self.rotation @ other.translation + self.translation)

    def inverse(self) -> "RigidPose":
        Rt = self.rotation.T
        return RigidPose(Rt, -Rt @ self.translation)

    def to_dict(self) -> dict:
        return {"R": [float(v) for v in self.rotation.ravel()],
                "t": [float(v) for v in self.translation]}

    @classmethod
    def from_dict(cls, d: dict) -> "RigidPose":
        R = np.asarray(d["R"], dtype=np.float64)
        t = np.asarray(d["t"], dtype=np.float64)
        if R.size != 9 or t.size != 3:
            raise GeometryError("pose JSON needs 9 rotation and 3 translation values")
        return cls(R.reshape(3, 3), t)

    def __eq__(self, other):
        if not isinstance(other, RigidPose):
            return NotImplemented
        return (np.array_equal(self.rotation, other.rotation)
                and np.array_equal(self.translation, other.translation))

    def __repr__(self):
        return f"RigidPose(R={self.rotation.tolist()}, t={self.translation.tolist()})"


@dataclass(frozen=True)
class TranslationDelta:
    vx: float = 0.0
    vy: float = 0.0
    vz: float = 0.0


@dataclass(frozen=True, eq=False)
class PoseDelta:
    rot: np.ndarray
    trans: TranslationDelta

    def __post_init__(self):
        v = np.array(self.rot, dtype=np.float64).reshape(6)
        v.setflags(write=False)
        object.__setattr__(self, "rot", v)

    @classmethod
    def identity(cls) -> "PoseDelta":
        return cls(np.array([1.0, 0, 0, 0, 1.0, 0]), TranslationDelta())

    def as_vector(self) -> np.ndarray:
        return np.concatenate([self.rot, [self.trans.vx, self.trans.vy, self.trans.vz]])


def project(points, pose: RigidPose, K: CameraIntrinsics):
    """Pinhole projection of model-frame points.

    Returns ``(uv, depth, valid)``: ``uv`` is ``(N, 2)`` pixel coordinates,
    ``depth`` the camera-frame Z of each point, and ``valid`` flags points
    in front of the camera (Z > 1e-9). Invalid rows carry NaN coordinates.
    """
    X = pose.transform(np.atleast_2d(points))
    return project_camera(X, K)


def project_camera(X: np.ndarray, K: CameraIntrinsics):
    """Project camera-frame points; see :func:`project`."""
    X = np.asarray(X, dtype=np.float64).reshape(-1, 3)
    Z = X[:, 2]
    valid = Z > 1e-9
    with np.errstate(divide="ignore", invalid="ignore"):
        inv = np.where(valid, 1.0 / np.where(valid, Z, 1.0), np.nan)
        uv = np.stack([K.fx * X[:, 0] * inv + K.cx, K.fy * X[:, 1] * inv + K.cy], axis=1)
    return uv, Z, valid


def rot6d_encode(R) -> np.ndarray:
    R = np.asarray(R, dtype=np.float64).reshape(3, 3)
    return np.concatenate([R[:, 0], R[:, 1]])


def rot6d_decode(v) -> np.ndarray:
    """Gram-Schmidt the two stacked 3-vectors into a rotation matrix."""
    v = np.asarray(v, dtype=np.float64).reshape(6)
    if not np.all(np.isfinite(v)):
        raise GeometryError("non-finite rotation encoding")
    a1, a2 = v[:3], v[3:]
    n1 = np.linalg.norm(a1)
    if n1 < 1e-12:
        raise GeometryError("degenerate rotation encoding")
    b1 = a1 / n1
    a2p = a2 - (a2 @ b1) * b1
    n2 = np.linalg.norm(a2p)
    if n2 < 1e-12 or n2 < 1e-12 * np.linalg.norm(a2):
        raise GeometryError("degenerate rotation encoding")
    b2 = a2p / n2
    b3 = np.cross(b1, b2)
    return np.stack([b1, b2, b3], axis=1)


def compose_pose(prev: RigidPose, delta: PoseDelta, K: CameraIntrinsics) -> RigidPose:
    """Apply a residual pose.

    The rotation acts on the left (camera frame, about the object origin);
    the translation update is expressed in image-plane pixels plus a log
    depth ratio, ``vz = ln(z_prev / z_new)``.
    """
    vec = delta.as_vector()
    if not np.all(np.isfinite(vec)):
        raise GeometryError("non-finite pose delta")
    dR = rot6d_decode(delta.rot)
    x, y, z = prev.translation
    ratio = math.exp(-delta.trans.vz)
    z_new = z * ratio
    # (x / z + vx / fx) * z_new, arranged so a zero delta is exact
    x_new = x * ratio + delta.trans.vx / K.fx * z_new
    y_new = y * ratio + delta.trans.vy / K.fy * z_new
    return RigidPose(dR @ prev.rotation, np.array([x_new, y_new, z_new]))


def decompose_pose(prev: RigidPose, new: RigidPose, K: CameraIntrinsics) -> PoseDelta:
    """Inverse of :func:`compose_pose`: the delta taking ``prev`` to ``new``."""
    dR = new.rotation @ prev.rotation.T
    x0, y0, z0 = prev.translation
    x1, y1, z1 = new.translation
    if z0 <= 0 or z1 <= 0:
        raise GeometryError("poses must lie in front of the camera")
    trans = TranslationDelta(vx=K.fx * (x1 / z1 - x0 / z0),
                             vy=K.fy * (y1 / z1 - y0 / z0),
                             vz=math.log(z0 / z1))
    return PoseDelta(rot6d_encode(dR), trans)


def rotation_angle_deg(R) -> float:
    c = (np.trace(np.asarray(R)) - 1.0) / 2.0
    return math.degrees(math.acos(min(1.0, max(-1.0, c))))


def pose_errors(a: RigidPose, b: RigidPose) -> tuple[float, float]:
    """Rotation angle between the poses (degrees) and translation distance (meters)."""
    ang = rotation_angle_deg(a.rotation.T @ b.rotation)
    return ang, float(np.linalg.norm(a.translation - b.translation))


def so3_exp(w) -> np.ndarray:
    """Rodrigues' formula."""
    w = np.asarray(w, dtype=np.float64)
    theta = np.linalg.norm(w)
    Wx = skew(w)
    if theta < 1e-12:
        return np.eye(3) + Wx + 0.5 * Wx @ Wx
    return (np.eye(3) + math.sin(theta) / theta * Wx
            + (1 - math.cos(theta)) / theta**2 * Wx @ Wx)


def skew(w) -> np.ndarray:
    return np.array([[0.0, -w[2], w[1]], [w[2], 0.0, -w[0]], [-w[1], w[0], 0.0]])


def nearest_rotation(M) -> np.ndarray:
    """Project a 3x3 matrix onto SO(3)."""
    U, _, Vt = np.linalg.svd(np.asarray(M, dtype=np.float64))
    D = np.diag([1.0, 1.0, np.sign(np.linalg.det(U @ Vt))])
    return U @ D @ Vt


def random_rotation(rng: np.random.Generator) -> np.ndarray:
    """Haar-uniform rotation via a normalized Gaussian quaternion."""
    q = rng.normal(size=4)
    q /= np.linalg.norm(q)
    return quat_to_matrix(q)


def quat_to_matrix(q) -> np.ndarray:
    w, x, y, z = q
    return np.array([
        [1 - 2 * (y * y + z * z), 2 * (x * y - z * w), 2 * (x * z + y * w)],
        [2 * (x * y + z * w), 1 - 2 * (x * x + z * z), 2 * (y * z - x * w)],
        [2 * (x * z - y * w), 2 * (y * z + x * w), 1 - 2 * (x * x + y * y)],
    ])


def axis_angle_matrix(axis, angle_deg: float) -> np.ndarray:
    axis = np.asarray(axis, dtype=np.float64)
    axis = axis / np.linalg.norm(axis)
    return so3_exp(axis * math.radians(angle_deg))


def load_poses(path) -> RigidPose | list[RigidPose]:
    data = json.loads(Path(path).read_text())
    if isinstance(data, list):
        return [RigidPose.from_dict(d) for d in data]
    return RigidPose.from_dict(data)


def save_poses(path, poses) -> None:
    if isinstance(poses, RigidPose):
        data = poses.to_dict()
    else:
        data = [p.to_dict() for p in poses]
    Path(path).write_text(json.dumps(data, indent=1))


def load_intrinsics(path) -> CameraIntrinsics:
    return CameraIntrinsics.from_dict(json.loads(Path(path).read_text()))
