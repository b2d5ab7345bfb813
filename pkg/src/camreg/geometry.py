"""SE(3) pose algebra on unit quaternions, timed trajectories, and interpolation.

All values are immutable; operations return new objects, so they are safe to
share across threads. Rotations are kept in canonical form (w >= 0) so that
equal rotations have equal component tuples and serialize identically.
"""

from __future__ import annotations

import bisect
import math
from dataclasses import dataclass
from typing import Iterable, Iterator, Sequence

import numpy as np

__all__ = [
    "UnitQuaternion",
    "Pose",
    "Tangent6",
    "TimedPose",
    "Trajectory",
    "OutOfRangeError",
    "compose",
    "inverse",
    "ominus",
    "oplus",
    "slerp",
    "interpolate_pose",
    "pose_to_vec7",
    "pose_from_vec7",
    "rpy_zyx",
]


class OutOfRangeError(ValueError):
    """A timestamp query fell outside the trajectory's time span."""


def _first_nonzero_negative(x: float, y: float, z: float) -> bool:
    for v in (x, y, z):
        if v != 0.0:
            return v < 0.0
    return False


@dataclass(frozen=True)
class UnitQuaternion:
    """Rotation as a unit quaternion (w, x, y, z), canonicalized so w >= 0.

    The constructor normalizes and canonicalizes, so every instance satisfies
    the unit-norm invariant regardless of how it was produced.
    """

    w: float
    x: float
    y: float
    z: float

    def __post_init__(self):
        w, x, y, z = float(self.w), float(self.x), float(self.y), float(self.z)
        n = math.sqrt(w * w + x * x + y * y + z * z)
        if not math.isfinite(n) or n < 1e-12:
            raise ValueError(f"quaternion norm {n} cannot be normalized")
        w, x, y, z = w / n, x / n, y / n, z / n
        if w < 0.0 or (w == 0.0 and _first_nonzero_negative(x, y, z)):
            w, x, y, z = -w, -x, -y, -z
        object.__setattr__(self, "w", w)
        object.__setattr__(self, "x", x)
        object.__setattr__(self, "y", y)
        object.__setattr__(self, "z", z)

    @classmethod
    def identity(cls) -> "UnitQuaternion":
        return cls(1.0, 0.0, 0.0, 0.0)

    @classmethod
    def from_axis_angle(cls, phi: Sequence[float]) -> "UnitQuaternion":
        """Exponential map: axis-angle 3-vector (radians) -> quaternion."""
        px, py, pz = float(phi[0]), float(phi[1]), float(phi[2])
        angle = math.sqrt(px * px + py * py + pz * pz)
        if angle < 1e-10:
            # second-order Taylor of sin(a/2)/a and cos(a/2)
            s = 0.5 - angle * angle / 48.0
            return cls(1.0 - angle * angle / 8.0, s * px, s * py, s * pz)
        s = math.sin(0.5 * angle) / angle
        return cls(math.cos(0.5 * angle), s * px, s * py, s * pz)

    @classmethod
    def from_rpy(cls, roll: float, pitch: float, yaw: float) -> "UnitQuaternion":
        """ZYX Euler angles: yaw about z, then pitch about y, then roll about x."""
        qz = cls(math.cos(0.5 * yaw), 0.0, 0.0, math.sin(0.5 * yaw))
        qy = cls(math.cos(0.5 * pitch), 0.0, math.sin(0.5 * pitch), 0.0)
        qx = cls(math.cos(0.5 * roll), math.sin(0.5 * roll), 0.0, 0.0)
        return qz * qy * qx

    def __mul__(self, other: "UnitQuaternion") -> "UnitQuaternion":
        w1, x1, y1, z1 = self.w, self.x, self.y, self.z
        w2, x2, y2, z2 = other.w, other.x, other.y, other.z
        return UnitQuaternion(
            w1 * w2 - x1 * x2 - y1 * y2 - z1 * z2,
            w1 * x2 + x1 * w2 + y1 * z2 - z1 * y2,
            w1 * y2 - x1 * z2 + y1 * w2 + z1 * x2,
            w1 * z2 + x1 * y2 - y1 * x2 + z1 * w2,
        )

    def conjugate(self) -> "UnitQuaternion":
        return UnitQuaternion(self.w, -self.x, -self.y, -self.z)

    def rotate(self, v: Sequence[float]) -> np.ndarray:
        """Rotate a 3-vector: R(q) v."""
        vx, vy, vz = float(v[0]), float(v[1]), float(v[2])
        # v' = v + 2 w (u x v) + 2 u x (u x v), u = (x, y, z)
        tx = 2.0 * (self.y * vz - self.z * vy)
        ty = 2.0 * (self.z * vx - self.x * vz)
        tz = 2.0 * (self.x * vy - self.y * vx)
        return np.array(
            [
                vx + self.w * tx + self.y * tz - self.z * ty,
                vy + self.w * ty + self.z * tx - self.x * tz,
                vz + self.w * tz + self.x * ty - self.y * tx,
            ]
        )

    def to_axis_angle(self) -> np.ndarray:
        """Logarithm map: axis-angle 3-vector with |angle| <= pi."""
        s = math.sqrt(self.x * self.x + self.y * self.y + self.z * self.z)
        if s < 1e-10:
            k = 2.0 / self.w  # w ~ 1 by canonical form
        else:
            k = 2.0 * math.atan2(s, self.w) / s
        return np.array([k * self.x, k * self.y, k * self.z])

    def to_matrix(self) -> np.ndarray:
        w, x, y, z = self.w, self.x, self.y, self.z
        return np.array(
            [
                [1 - 2 * (y * y + z * z), 2 * (x * y - w * z), 2 * (x * z + w * y)],
                [2 * (x * y + w * z), 1 - 2 * (x * x + z * z), 2 * (y * z - w * x)],
                [2 * (x * z - w * y), 2 * (y * z + w * x), 1 - 2 * (x * x + y * y)],
            ]
        )

    @classmethod
    def from_matrix(cls, m: np.ndarray) -> "UnitQuaternion":
        """Quaternion from a rotation matrix (Shepperd's method)."""
        m = np.asarray(m, dtype=float)
        t = m[0, 0] + m[1, 1] + m[2, 2]
        if t > 0.0:
            s = math.sqrt(t + 1.0) * 2.0
            return cls(0.25 * s, (m[2, 1] - m[1, 2]) / s, (m[0, 2] - m[2, 0]) / s, (m[1, 0] - m[0, 1]) / s)
        i = int(np.argmax([m[0, 0], m[1, 1], m[2, 2]]))
        if i == 0:
            s = math.sqrt(1.0 + m[0, 0] - m[1, 1] - m[2, 2]) * 2.0
            return cls((m[2, 1] - m[1, 2]) / s, 0.25 * s, (m[0, 1] + m[1, 0]) / s, (m[0, 2] + m[2, 0]) / s)
        if i == 1:
            s = math.sqrt(1.0 - m[0, 0] + m[1, 1] - m[2, 2]) * 2.0
            return cls((m[0, 2] - m[2, 0]) / s, (m[0, 1] + m[1, 0]) / s, 0.25 * s, (m[1, 2] + m[2, 1]) / s)
        s = math.sqrt(1.0 - m[0, 0] - m[1, 1] + m[2, 2]) * 2.0
        return cls((m[1, 0] - m[0, 1]) / s, (m[0, 2] + m[2, 0]) / s, (m[1, 2] + m[2, 1]) / s, 0.25 * s)

    def angle_to(self, other: "UnitQuaternion") -> float:
        """Rotation angle (radians, in [0, pi]) between two rotations."""
        d = abs(self.w * other.w + self.x * other.x + self.y * other.y + self.z * other.z)
        return 2.0 * math.acos(min(1.0, d))


@dataclass(frozen=True, eq=False)
class Pose:
    """Rigid transform: rotation then translation (meters)."""

    rotation: UnitQuaternion
    translation: np.ndarray

    def __post_init__(self):
        t = np.array(self.translation, dtype=float).reshape(3)
        if not math.isfinite(float(t[0]) + float(t[1]) + float(t[2])):
            raise ValueError(f"non-finite translation {t}")
        t.flags.writeable = False
        object.__setattr__(self, "translation", t)

    @classmethod
    def identity(cls) -> "Pose":
        return cls(UnitQuaternion.identity(), np.zeros(3))

    def compose(self, other: "Pose") -> "Pose":
        return Pose(
            self.rotation * other.rotation,
            self.translation + self.rotation.rotate(other.translation),
        )

    def inverse(self) -> "Pose":
        qi = self.rotation.conjugate()
        return Pose(qi, -qi.rotate(self.translation))

    def transform_point(self, p: Sequence[float]) -> np.ndarray:
        return self.rotation.rotate(p) + self.translation

    def inverse_transform_point(self, p: Sequence[float]) -> np.ndarray:
        d = np.asarray(p, dtype=float) - self.translation
        return self.rotation.conjugate().rotate(d)

    def to_matrix(self) -> np.ndarray:
        m = np.eye(4)
        m[:3, :3] = self.rotation.to_matrix()
        m[:3, 3] = self.translation
        return m

    @classmethod
    def from_matrix(cls, m: np.ndarray) -> "Pose":
        m = np.asarray(m, dtype=float)
        return cls(UnitQuaternion.from_matrix(m[:3, :3]), m[:3, 3])


@dataclass(frozen=True, eq=False)
class Tangent6:
    """Pose difference: rho = translation part (m), phi = axis-angle part (rad)."""

    rho: np.ndarray
    phi: np.ndarray

    @property
    def vector(self) -> np.ndarray:
        return np.concatenate([self.rho, self.phi])

    @property
    def norm(self) -> float:
        return float(math.sqrt(float(self.rho @ self.rho) + float(self.phi @ self.phi)))


def compose(a: Pose, b: Pose) -> Pose:
    """Chain two transforms: (a . b)."""
    return a.compose(b)


def inverse(a: Pose) -> Pose:
    return a.inverse()


def ominus(a: Pose, b: Pose) -> Tangent6:
    """Manifold difference of a relative to b: (translation, rotation-log) of b^-1 a.

    Zero exactly when a == b.
    """
    d = b.inverse().compose(a)
    return Tangent6(np.array(d.translation), d.rotation.to_axis_angle())


def oplus(a: Pose, delta: Sequence[float]) -> Pose:
    """Right retraction: a . Pose(exp(delta[3:]), delta[:3]). Inverse of ominus(. , a)."""
    delta = np.asarray(delta, dtype=float).reshape(6)
    return a.compose(Pose(UnitQuaternion.from_axis_angle(delta[3:]), delta[:3]))


def pose_to_vec7(p: Pose) -> np.ndarray:
    """Serialize as [qw, qx, qy, qz, tx, ty, tz]."""
    q = p.rotation
    return np.array([q.w, q.x, q.y, q.z, p.translation[0], p.translation[1], p.translation[2]])


def pose_from_vec7(v: Sequence[float]) -> Pose:
    return Pose(UnitQuaternion(float(v[0]), float(v[1]), float(v[2]), float(v[3])), np.asarray(v[4:7], dtype=float))


def slerp(qa: UnitQuaternion, qb: UnitQuaternion, alpha: float) -> UnitQuaternion:
    """Spherical linear interpolation along the shortest arc, constant angular speed."""
    if not 0.0 <= alpha <= 1.0:
        raise ValueError(f"alpha {alpha} outside [0, 1]")
    if alpha == 0.0:
        return qa
    if alpha == 1.0:
        return qb
    dot = qa.w * qb.w + qa.x * qb.x + qa.y * qb.y + qa.z * qb.z
    bw, bx, by, bz = qb.w, qb.x, qb.y, qb.z
    if dot < 0.0:
        dot, bw, bx, by, bz = -dot, -bw, -bx, -by, -bz
    if dot > 1.0 - 1e-12:
        # nearly identical rotations: normalized lerp is exact to working precision
        ka, kb = 1.0 - alpha, alpha
    else:
        omega = math.acos(min(1.0, dot))
        so = math.sin(omega)
        ka = math.sin((1.0 - alpha) * omega) / so
        kb = math.sin(alpha * omega) / so
    return UnitQuaternion(
        ka * qa.w + kb * bw, ka * qa.x + kb * bx, ka * qa.y + kb * by, ka * qa.z + kb * bz
    )


@dataclass(frozen=True, eq=False)
class TimedPose:
    stamp: float
    pose: Pose
    keyframe_id: int

    def __post_init__(self):
        if not math.isfinite(self.stamp) or self.stamp < 0.0:
            raise ValueError(f"timestamp {self.stamp} must be finite and non-negative")


class Trajectory:
    """Time-ordered keyframe poses with strictly increasing timestamps."""

    def __init__(self, samples: Iterable[TimedPose]):
        samples = tuple(samples)
        if not samples:
            raise ValueError("trajectory needs at least one sample")
        stamps = [s.stamp for s in samples]
        for t0, t1 in zip(stamps, stamps[1:]):
            if t1 <= t0:
                raise ValueError(f"timestamps must be strictly increasing ({t0} -> {t1})")
        ids = [s.keyframe_id for s in samples]
        if len(set(ids)) != len(ids):
            raise ValueError("keyframe ids must be unique")
        self._samples = samples
        self._stamps = stamps
        self._by_keyframe = {s.keyframe_id: s for s in samples}

    @property
    def samples(self) -> tuple[TimedPose, ...]:
        return self._samples

    @property
    def span(self) -> tuple[float, float]:
        return self._stamps[0], self._stamps[-1]

    def __len__(self) -> int:
        return len(self._samples)

    def __iter__(self) -> Iterator[TimedPose]:
        return iter(self._samples)

    def covers(self, t: float) -> bool:
        return self._stamps[0] <= t <= self._stamps[-1]

    def keyframe(self, keyframe_id: int) -> TimedPose:
        return self._by_keyframe[keyframe_id]

    def has_keyframe(self, keyframe_id: int) -> bool:
        return keyframe_id in self._by_keyframe

    def interpolate(self, t: float) -> Pose:
        """Pose at time t: linear translation blend + slerp over the bracketing pair.

        Raises OutOfRangeError outside the span; odometry is never extrapolated.
        """
        if len(self._samples) < 2:
            raise ValueError("interpolation needs at least 2 samples")
        if t < self._stamps[0] or t > self._stamps[-1]:
            raise OutOfRangeError(
                f"t={t} outside trajectory span [{self._stamps[0]}, {self._stamps[-1]}]"
            )
        i = bisect.bisect_right(self._stamps, t) - 1
        i = min(i, len(self._samples) - 2)
        a, b = self._samples[i], self._samples[i + 1]
        alpha = (t - a.stamp) / (b.stamp - a.stamp)
        translation = (1.0 - alpha) * a.pose.translation + alpha * b.pose.translation
        return Pose(slerp(a.pose.rotation, b.pose.rotation, alpha), translation)


def interpolate_pose(traj: Trajectory, t: float) -> Pose:
    return traj.interpolate(t)


def rpy_zyx(q: UnitQuaternion) -> tuple[float, float, float]:
    """Decompose as R = Rz(yaw) Ry(pitch) Rx(roll); returns (roll, pitch, yaw) in radians."""
    m = q.to_matrix()
    sp = -m[2, 0]
    if abs(sp) >= 1.0 - 1e-12:
        # gimbal lock: pitch at +-pi/2, split freely between roll and yaw
        pitch = math.copysign(math.pi / 2.0, sp)
        roll = 0.0
        yaw = math.atan2(-m[0, 1], m[1, 1])
    else:
        pitch = math.asin(sp)
        roll = math.atan2(m[2, 1], m[2, 2])
        yaw = math.atan2(m[1, 0], m[0, 0])
    return roll, pitch, yaw
