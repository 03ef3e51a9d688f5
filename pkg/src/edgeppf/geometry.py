"""Rigid transforms, rotation parameterizations, and small geometry helpers.

Conventions used throughout the package:
  * lengths in meters, angles in radians
  * a RigidTransform maps model coordinates into scene coordinates,
    p' = R @ p + t
  * quaternions are (w, x, y, z) with unit norm
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

_EPS = 1e-12


def wrap_angle(a: float) -> float:
    """Wrap an angle into (-pi, pi]."""
    w = np.mod(a, 2.0 * np.pi)
    if np.isscalar(w):
        return float(w - 2.0 * np.pi) if w > np.pi else float(w)
    w = np.where(w > np.pi, w - 2.0 * np.pi, w)
    return w


def rot_x(angle: float) -> np.ndarray:
    """Rotation matrix about the +x axis."""
    c, s = np.cos(angle), np.sin(angle)
    return np.array([[1.0, 0.0, 0.0], [0.0, c, -s], [0.0, s, c]])


def exp_rotation(rotvec: np.ndarray) -> np.ndarray:
    """Rodrigues: axis-angle vector -> rotation matrix."""
    rotvec = np.asarray(rotvec, dtype=float)
    angle = np.linalg.norm(rotvec)
    if angle < _EPS:
        return np.eye(3)
    axis = rotvec / angle
    k = np.array(
        [
            [0.0, -axis[2], axis[1]],
            [axis[2], 0.0, -axis[0]],
            [-axis[1], axis[0], 0.0],
        ]
    )
    return np.eye(3) + np.sin(angle) * k + (1.0 - np.cos(angle)) * (k @ k)


def log_rotation(rot: np.ndarray) -> np.ndarray:
    """Rotation matrix -> axis-angle vector (norm = rotation angle in [0, pi])."""
    rot = np.asarray(rot, dtype=float)
    cos_angle = np.clip((np.trace(rot) - 1.0) / 2.0, -1.0, 1.0)
    angle = np.arccos(cos_angle)
    if angle < 1e-9:
        return np.zeros(3)
    if angle > np.pi - 1e-6:
        # near pi the off-diagonal formula degenerates; recover axis from R + I
        m = (rot + np.eye(3)) / 2.0
        axis = np.sqrt(np.maximum(np.diagonal(m), 0.0))
        # fix signs using the largest component
        i = int(np.argmax(axis))
        if axis[i] < _EPS:
            return np.zeros(3)
        signs = np.array([m[i, 0], m[i, 1], m[i, 2]]) / axis[i]
        axis = np.sign(signs) * np.abs(axis)
        axis[i] = abs(axis[i])
        axis = axis / np.linalg.norm(axis)
        return axis * angle
    vec = np.array(
        [rot[2, 1] - rot[1, 2], rot[0, 2] - rot[2, 0], rot[1, 0] - rot[0, 1]]
    )
    return vec * (angle / (2.0 * np.sin(angle)))


def orthonormalize(rot: np.ndarray) -> np.ndarray:
    """Project a near-rotation matrix onto SO(3) via SVD."""
    u, _, vt = np.linalg.svd(np.asarray(rot, dtype=float))
    r = u @ vt
    if np.linalg.det(r) < 0:
        u[:, -1] *= -1.0
        r = u @ vt
    return r


def quat_from_matrix(rot: np.ndarray) -> np.ndarray:
    """Rotation matrix -> unit quaternion (w, x, y, z), w >= 0."""
    rot = np.asarray(rot, dtype=float)
    t = np.trace(rot)
    if t > 0:
        s = np.sqrt(t + 1.0) * 2.0
        q = np.array(
            [
                0.25 * s,
                (rot[2, 1] - rot[1, 2]) / s,
                (rot[0, 2] - rot[2, 0]) / s,
                (rot[1, 0] - rot[0, 1]) / s,
            ]
        )
    else:
        i = int(np.argmax(np.diagonal(rot)))
        j, k = (i + 1) % 3, (i + 2) % 3
        s = np.sqrt(max(1.0 + rot[i, i] - rot[j, j] - rot[k, k], 0.0)) * 2.0
        q = np.empty(4)
        q[0] = (rot[k, j] - rot[j, k]) / s
        q[1 + i] = 0.25 * s
        q[1 + j] = (rot[j, i] + rot[i, j]) / s
        q[1 + k] = (rot[k, i] + rot[i, k]) / s
    q = q / np.linalg.norm(q)
    return q if q[0] >= 0 else -q


def matrix_from_quat(q: np.ndarray) -> np.ndarray:
    w, x, y, z = np.asarray(q, dtype=float) / np.linalg.norm(q)
    return np.array(
        [
            [1 - 2 * (y * y + z * z), 2 * (x * y - w * z), 2 * (x * z + w * y)],
            [2 * (x * y + w * z), 1 - 2 * (x * x + z * z), 2 * (y * z - w * x)],
            [2 * (x * z - w * y), 2 * (y * z + w * x), 1 - 2 * (x * x + y * y)],
        ]
    )


def quat_angle(q1: np.ndarray, q2: np.ndarray) -> float:
    """Angle of the relative rotation between two unit quaternions."""
    d = abs(float(np.dot(q1, q2)))
    return 2.0 * np.arccos(np.clip(d, -1.0, 1.0))


def average_quaternions(quats: np.ndarray) -> np.ndarray:
    """Sign-align all quaternions to the first row, then normalized mean."""
    quats = np.asarray(quats, dtype=float)
    signs = np.where(quats @ quats[0] < 0, -1.0, 1.0)
    mean = (quats * signs[:, None]).mean(axis=0)
    n = np.linalg.norm(mean)
    if n < _EPS:
        return quats[0]
    return mean / n


@dataclass(frozen=True)
class RigidTransform:
    """SE(3) element: rotation matrix + translation, p' = R p + t."""

    rotation: np.ndarray = field(default_factory=lambda: np.eye(3))
    translation: np.ndarray = field(default_factory=lambda: np.zeros(3))

    def __post_init__(self):
        object.__setattr__(
            self, "rotation", np.array(self.rotation, dtype=float).reshape(3, 3)
        )
        object.__setattr__(
            self, "translation", np.array(self.translation, dtype=float).reshape(3)
        )

    @staticmethod
    def identity() -> "RigidTransform":
        return RigidTransform()

    @staticmethod
    def from_matrix(m: np.ndarray) -> "RigidTransform":
        m = np.asarray(m, dtype=float).reshape(4, 4)
        return RigidTransform(m[:3, :3], m[:3, 3])

    def to_matrix(self) -> np.ndarray:
        m = np.eye(4)
        m[:3, :3] = self.rotation
        m[:3, 3] = self.translation
        return m

    @staticmethod
    def from_rotvec(rotvec, translation) -> "RigidTransform":
        return RigidTransform(exp_rotation(np.asarray(rotvec, float)), translation)

    def compose(self, other: "RigidTransform") -> "RigidTransform":
        """self applied after other: (self*other)(p) = self(other(p))."""
        return RigidTransform(
            self.rotation @ other.rotation,
            self.rotation @ other.translation + self.translation,
        )

    def __matmul__(self, other: "RigidTransform") -> "RigidTransform":
        return self.compose(other)

    def inverse(self) -> "RigidTransform":
        rt = self.rotation.T
        return RigidTransform(rt, -rt @ self.translation)

    def apply(self, points: np.ndarray) -> np.ndarray:
        """Transform one point (3,) or many (N, 3)."""
        pts = np.asarray(points, dtype=float)
        return pts @ self.rotation.T + self.translation

    def rotate(self, vectors: np.ndarray) -> np.ndarray:
        """Rotate direction vectors (no translation)."""
        return np.asarray(vectors, dtype=float) @ self.rotation.T

    def quat(self) -> np.ndarray:
        return quat_from_matrix(self.rotation)

    def rotation_angle(self) -> float:
        return float(np.linalg.norm(log_rotation(self.rotation)))

    def is_valid(self, tol: float = 1e-9) -> bool:
        r = self.rotation
        return (
            np.all(np.isfinite(r))
            and np.all(np.isfinite(self.translation))
            and np.allclose(r @ r.T, np.eye(3), atol=tol)
            and abs(np.linalg.det(r) - 1.0) < tol
        )

    @staticmethod
    def random(rng: np.random.Generator, max_translation: float = 1.0) -> "RigidTransform":
        """Uniform random rotation (quaternion on S^3) + uniform box translation."""
        q = rng.normal(size=4)
        q /= np.linalg.norm(q)
        t = rng.uniform(-max_translation, max_translation, size=3)
        return RigidTransform(matrix_from_quat(q), t)


def rotation_to_x_axis(v: np.ndarray) -> np.ndarray:
    """Rotation matrix R with R @ v = ||v|| * e_x (minimal-angle alignment)."""
    v = np.asarray(v, dtype=float)
    n = v / np.linalg.norm(v)
    c = n[0]
    if c > 1.0 - 1e-12:
        return np.eye(3)
    if c < -1.0 + 1e-12:
        return np.diag([-1.0, 1.0, -1.0])  # 180 deg about y
    axis = np.array([0.0, n[2], -n[1]])  # n x e_x
    s = np.linalg.norm(axis)
    axis = axis / s
    k = np.array(
        [
            [0.0, -axis[2], axis[1]],
            [axis[2], 0.0, -axis[0]],
            [-axis[1], axis[0], 0.0],
        ]
    )
    return np.eye(3) + s * k + (1.0 - c) * (k @ k)


def rotations_to_x_axis(vectors: np.ndarray) -> np.ndarray:
    """Batched rotation_to_x_axis for unit vectors of shape (N, 3)."""
    v = np.asarray(vectors, dtype=float)
    n = v / np.linalg.norm(v, axis=1, keepdims=True)
    c = n[:, 0]
    axis = np.stack([np.zeros(len(n)), n[:, 2], -n[:, 1]], axis=1)
    s = np.linalg.norm(axis, axis=1)
    out = np.empty((len(n), 3, 3))
    ok = s > 1e-12
    if np.any(ok):
        a = axis[ok] / s[ok, None]
        k = np.zeros((int(ok.sum()), 3, 3))
        k[:, 0, 1] = -a[:, 2]
        k[:, 0, 2] = a[:, 1]
        k[:, 1, 0] = a[:, 2]
        k[:, 1, 2] = -a[:, 0]
        k[:, 2, 0] = -a[:, 1]
        k[:, 2, 1] = a[:, 0]
        out[ok] = (
            np.eye(3)[None]
            + s[ok, None, None] * k
            + ((1.0 - c[ok]))[:, None, None] * (k @ k)
        )
    deg = ~ok
    if np.any(deg):
        out[deg] = np.where(
            c[deg, None, None] > 0, np.eye(3)[None], np.diag([-1.0, 1.0, -1.0])[None]
        )
    return out


def canonical_frame(position: np.ndarray, normal: np.ndarray) -> RigidTransform:
    """Frame mapping `position` to the origin and `normal` onto +x."""
    r = rotation_to_x_axis(normal)
    return RigidTransform(r, -r @ np.asarray(position, dtype=float))
