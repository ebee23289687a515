"""Rigid transforms, wrenches and the 6-D rotation codec.

Conventions used throughout the package:

* A :class:`Pose` maps coordinates expressed in ``from_frame`` into
  ``to_frame``: ``p_to = R @ p_from + t``.  A pose named ``s1_in_tcp`` has
  ``from_frame="s1"`` and ``to_frame="tcp"``.
* Wrenches are ordered ``[force; torque]``.
* Rotation matrices are encoded as their top two rows (6 numbers).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

ORTHO_TOL = 1e-9
REORTHO_TOL = 1e-12
PARALLEL_TOL = 1e-8
_EYE3 = np.eye(3)


class FrameMismatchError(ValueError):
    """Raised when two frame-tagged quantities do not chain."""


class RotationDecodeError(ValueError):
    """Raised for zero-length or parallel 6-D rotation rows."""


def cross3(a, b) -> np.ndarray:
    """Cross product of two 3-vectors (cheaper than ``np.cross`` for one pair)."""
    return np.array([a[1] * b[2] - a[2] * b[1],
                     a[2] * b[0] - a[0] * b[2],
                     a[0] * b[1] - a[1] * b[0]])


def is_rotation(r, tol=ORTHO_TOL) -> bool:
    r = np.asarray(r, dtype=float)
    if r.shape != (3, 3) or not np.isfinite(r).all():
        return False
    if np.abs(r.T @ r - _EYE3).max() > tol:
        return False
    det = r[0] @ cross3(r[1], r[2])
    return abs(det - 1.0) <= tol


def orthonormalize(r):
    """Closest rotation to ``r`` in the Frobenius sense (polar factor)."""
    u, _, vt = np.linalg.svd(np.asarray(r, dtype=float))
    d = np.sign(np.linalg.det(u @ vt))
    return u @ np.diag([1.0, 1.0, d]) @ vt


def rot_x(angle):
    c, s = np.cos(angle), np.sin(angle)
    return np.array([[1.0, 0.0, 0.0], [0.0, c, -s], [0.0, s, c]])


def rot_z(angle):
    c, s = np.cos(angle), np.sin(angle)
    return np.array([[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]])


def random_rotation(rng) -> np.ndarray:
    """Uniformly distributed rotation (QR of a Gaussian matrix)."""
    q, r = np.linalg.qr(rng.standard_normal((3, 3)))
    q = q * np.sign(np.diag(r))
    if np.linalg.det(q) < 0:
        q[:, 0] = -q[:, 0]
    return q


@dataclass(frozen=True, eq=False)
class Pose:
    rotation: np.ndarray
    translation: np.ndarray
    from_frame: str
    to_frame: str

    def __post_init__(self):
        rot = np.array(self.rotation, dtype=float).reshape(3, 3)
        trans = np.array(self.translation, dtype=float).reshape(3)
        if not is_rotation(rot):
            raise ValueError("rotation is not orthonormal with det +1")
        if not np.isfinite(trans).all():
            raise ValueError("translation must be finite")
        if not self.from_frame or not self.to_frame:
            raise ValueError("frame ids must be non-empty")
        rot.flags.writeable = False
        trans.flags.writeable = False
        object.__setattr__(self, "rotation", rot)
        object.__setattr__(self, "translation", trans)

    @classmethod
    def identity(cls, frame: str, to_frame: str | None = None) -> "Pose":
        return cls(np.eye(3), np.zeros(3), frame, to_frame or frame)

    def matrix(self) -> np.ndarray:
        m = np.eye(4)
        m[:3, :3] = self.rotation
        m[:3, 3] = self.translation
        return m

    def apply(self, point) -> np.ndarray:
        return self.rotation @ np.asarray(point, dtype=float) + self.translation

    def with_frames(self, from_frame: str, to_frame: str) -> "Pose":
        return Pose(self.rotation, self.translation, from_frame, to_frame)


def compose(a: Pose, b: Pose) -> Pose:
    """Chain ``a`` (A -> B) with ``b`` (B -> C) into a pose A -> C."""
    if a.to_frame != b.from_frame:
        raise FrameMismatchError(
            f"cannot chain {a.from_frame}->{a.to_frame} with "
            f"{b.from_frame}->{b.to_frame}")
    rot = b.rotation @ a.rotation
    if np.abs(rot.T @ rot - np.eye(3)).max() > REORTHO_TOL:
        rot = orthonormalize(rot)
    trans = b.rotation @ a.translation + b.translation
    return Pose(rot, trans, a.from_frame, b.to_frame)


def invert(p: Pose) -> Pose:
    rt = p.rotation.T
    return Pose(rt, -rt @ p.translation, p.to_frame, p.from_frame)


@dataclass(frozen=True, eq=False)
class Wrench:
    force: np.ndarray
    torque: np.ndarray
    frame: str

    def __post_init__(self):
        f = np.array(self.force, dtype=float).reshape(3)
        t = np.array(self.torque, dtype=float).reshape(3)
        if not (np.isfinite(f).all() and np.isfinite(t).all()):
            raise ValueError("wrench components must be finite")
        if not self.frame:
            raise ValueError("frame id must be non-empty")
        f.flags.writeable = False
        t.flags.writeable = False
        object.__setattr__(self, "force", f)
        object.__setattr__(self, "torque", t)

    @classmethod
    def zero(cls, frame: str) -> "Wrench":
        return cls(np.zeros(3), np.zeros(3), frame)

    @classmethod
    def from_vector(cls, v, frame: str) -> "Wrench":
        v = np.asarray(v, dtype=float).reshape(6)
        return cls(v[:3], v[3:], frame)

    def vector(self) -> np.ndarray:
        return np.concatenate([self.force, self.torque])

    def _check(self, other: "Wrench"):
        if other.frame != self.frame:
            raise FrameMismatchError(
                f"wrench frames differ: {self.frame} vs {other.frame}")

    def __add__(self, other: "Wrench") -> "Wrench":
        self._check(other)
        return Wrench(self.force + other.force, self.torque + other.torque,
                      self.frame)

    def __sub__(self, other: "Wrench") -> "Wrench":
        self._check(other)
        return Wrench(self.force - other.force, self.torque - other.torque,
                      self.frame)

    def __neg__(self) -> "Wrench":
        return Wrench(-self.force, -self.torque, self.frame)

    def __mul__(self, scale: float) -> "Wrench":
        return Wrench(scale * self.force, scale * self.torque, self.frame)

    __rmul__ = __mul__


def transform_wrench(w: Wrench, sensor_in_target: Pose) -> Wrench:
    """Express ``w`` in ``sensor_in_target.to_frame``.

    Same moment about the new origin: ``f' = R f``,
    ``tau' = R tau + p x (R f)``.
    """
    if w.frame != sensor_in_target.from_frame:
        raise FrameMismatchError(
            f"wrench in {w.frame!r} but pose maps from "
            f"{sensor_in_target.from_frame!r}")
    rot, p = sensor_in_target.rotation, sensor_in_target.translation
    f = rot @ w.force
    tau = rot @ w.torque + cross3(p, f)
    return Wrench(f, tau, sensor_in_target.to_frame)


def wrench_adjoint(pose: Pose) -> np.ndarray:
    """6x6 matrix acting on ``[f; tau]`` equal to :func:`transform_wrench`."""
    rot, p = pose.rotation, pose.translation
    px = np.array([[0.0, -p[2], p[1]], [p[2], 0.0, -p[0]], [-p[1], p[0], 0.0]])
    m = np.zeros((6, 6))
    m[:3, :3] = rot
    m[3:, 3:] = rot
    m[3:, :3] = px @ rot
    return m


def decode_rot6d(v) -> np.ndarray:
    """Rotation from its first two rows, Gram-Schmidt with row 1 dominant."""
    v = np.asarray(v, dtype=float).reshape(6)
    if not np.all(np.isfinite(v)):
        raise RotationDecodeError("non-finite rotation sextet")
    a, b = v[:3], v[3:]
    na = np.linalg.norm(a)
    if na <= PARALLEL_TOL:
        raise RotationDecodeError("first rotation row has zero length")
    r1 = a / na
    nb = np.linalg.norm(b)
    if nb <= PARALLEL_TOL or np.linalg.norm(cross3(r1, b / nb)) <= PARALLEL_TOL:
        raise RotationDecodeError("rotation rows are parallel or zero")
    b = b - (r1 @ b) * r1
    r2 = b / np.linalg.norm(b)
    r3 = cross3(r1, r2)
    return np.stack([r1, r2, r3])


def encode_rot6d(r) -> np.ndarray:
    r = np.asarray(r, dtype=float)
    if not is_rotation(r):
        raise ValueError("not a rotation matrix")
    return np.concatenate([r[0], r[1]])
