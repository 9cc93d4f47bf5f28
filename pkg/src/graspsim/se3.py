"""SE(3) pose and rotation primitives shared by the whole toolkit.

Orientations are stored as unit quaternions (w, x, y, z) with a canonical
non-negative scalar part; rotation matrices are only materialized where a
matrix is genuinely needed (geodesic distance). Poses serialize as
[x, y, z, qw, qx, qy, qz] everywhere.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

_QUAT_NORM_TOL = 1e-9


def quat_normalize(q: np.ndarray) -> np.ndarray:
    """Return q scaled to unit norm with qw >= 0."""
    q = np.asarray(q, dtype=float)
    n = np.sqrt(q @ q)
    if n == 0.0:
        raise ValueError("zero quaternion cannot be normalized")
    if abs(n - 1.0) > 1e-15:
        q = q / n
    if q[0] < 0.0:
        q = -q
    return q


def quat_mul(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    aw, ax, ay, az = a
    bw, bx, by, bz = b
    return np.array([
        aw * bw - ax * bx - ay * by - az * bz,
        aw * bx + ax * bw + ay * bz - az * by,
        aw * by - ax * bz + ay * bw + az * bx,
        aw * bz + ax * by - ay * bx + az * bw,
    ])


def quat_conj(q: np.ndarray) -> np.ndarray:
    return np.array([q[0], -q[1], -q[2], -q[3]])


def quat_rotate(q: np.ndarray, v: np.ndarray) -> np.ndarray:
    """Rotate vector(s) v by quaternion q. v is (3,) or (N, 3).

    Expanded form q v q* = v + 2w (u x v) + 2 u x (u x v); the single-vector
    branch avoids np.cross, which dominates the simulator's inner loop.
    """
    v = np.asarray(v, dtype=float)
    w, x, y, z = q
    if v.ndim == 1:
        v0, v1, v2 = v
        ux = y * v2 - z * v1
        uy = z * v0 - x * v2
        uz = x * v1 - y * v0
        return np.array([
            v0 + 2.0 * (w * ux + y * uz - z * uy),
            v1 + 2.0 * (w * uy + z * ux - x * uz),
            v2 + 2.0 * (w * uz + x * uy - y * ux),
        ])
    u = q[1:]
    uv = np.cross(u, v)
    return v + 2.0 * w * uv + 2.0 * np.cross(u, uv)


def quat_from_axis_angle(axis: np.ndarray, angle: float) -> np.ndarray:
    axis = np.asarray(axis, dtype=float)
    n = np.linalg.norm(axis)
    if n == 0.0:
        raise ValueError("rotation axis must be nonzero")
    half = 0.5 * angle
    q = np.empty(4)
    q[0] = np.cos(half)
    q[1:] = (np.sin(half) / n) * axis
    return quat_normalize(q)


def quat_from_rotvec(w: np.ndarray) -> np.ndarray:
    """Exponential map: rotation vector (axis * angle) -> quaternion."""
    w = np.asarray(w, dtype=float)
    angle = np.linalg.norm(w)
    q = np.empty(4)
    half = 0.5 * angle
    q[0] = np.cos(half)
    if angle < 1e-12:
        # sin(x)/x ~ 1 - x^2/6 keeps the map smooth through zero
        q[1:] = 0.5 * w * (1.0 - angle * angle / 24.0)
    else:
        q[1:] = (np.sin(half) / angle) * w
    return quat_normalize(q)


def quat_to_rotvec(q: np.ndarray) -> np.ndarray:
    """Log map: quaternion -> rotation vector with angle in [0, pi]."""
    q = np.asarray(q, dtype=float)
    if q[0] < 0.0:
        q = -q
    sin_half = np.linalg.norm(q[1:])
    if sin_half < 1e-12:
        return 2.0 * q[1:]
    angle = 2.0 * np.arctan2(sin_half, q[0])
    return (angle / sin_half) * q[1:]


def quat_to_matrix(q: np.ndarray) -> np.ndarray:
    w, x, y, z = q
    xx, yy, zz = x * x, y * y, z * z
    xy, xz, yz = x * y, x * z, y * z
    wx, wy, wz = w * x, w * y, w * z
    return np.array([
        [1 - 2 * (yy + zz), 2 * (xy - wz), 2 * (xz + wy)],
        [2 * (xy + wz), 1 - 2 * (xx + zz), 2 * (yz - wx)],
        [2 * (xz - wy), 2 * (yz + wx), 1 - 2 * (xx + yy)],
    ])


def matrix_to_quat(m: np.ndarray) -> np.ndarray:
    m = np.asarray(m, dtype=float)
    t = np.trace(m)
    if t > 0.0:
        s = np.sqrt(t + 1.0) * 2.0
        q = np.array([0.25 * s,
                      (m[2, 1] - m[1, 2]) / s,
                      (m[0, 2] - m[2, 0]) / s,
                      (m[1, 0] - m[0, 1]) / s])
    else:
        i = int(np.argmax(np.diag(m)))
        j, k = (i + 1) % 3, (i + 2) % 3
        s = np.sqrt(max(1.0 + m[i, i] - m[j, j] - m[k, k], 0.0)) * 2.0
        q = np.empty(4)
        q[0] = (m[k, j] - m[j, k]) / s
        q[1 + i] = 0.25 * s
        q[1 + j] = (m[j, i] + m[i, j]) / s
        q[1 + k] = (m[k, i] + m[i, k]) / s
    return quat_normalize(q)


@dataclass(slots=True)
class Pose:
    """Rigid transform: position in meters plus a unit quaternion."""

    position: np.ndarray = field(default_factory=lambda: np.zeros(3))
    quat: np.ndarray = field(default_factory=lambda: np.array([1.0, 0.0, 0.0, 0.0]))

    def __post_init__(self):
        self.position = np.asarray(self.position, dtype=float).reshape(3)
        q = np.asarray(self.quat, dtype=float).reshape(4)
        n = np.sqrt(q @ q)
        if abs(n - 1.0) > _QUAT_NORM_TOL:
            raise ValueError(f"quaternion norm {n} is not within {_QUAT_NORM_TOL} of 1")
        if q[0] < 0.0:
            q = -q
        self.quat = q

    @staticmethod
    def identity() -> "Pose":
        return Pose()

    @staticmethod
    def from_parts(position, quat) -> "Pose":
        """Construct with normalization (for freshly computed quaternions)."""
        return Pose(np.asarray(position, dtype=float), quat_normalize(np.asarray(quat, dtype=float)))

    def copy(self) -> "Pose":
        return Pose(self.position.copy(), self.quat.copy())

    def rotation_matrix(self) -> np.ndarray:
        return quat_to_matrix(self.quat)

    def transform_point(self, p: np.ndarray) -> np.ndarray:
        return quat_rotate(self.quat, p) + self.position

    def inverse(self) -> "Pose":
        qinv = quat_conj(self.quat)
        return Pose.from_parts(-quat_rotate(qinv, self.position), qinv)

    def as_array(self) -> np.ndarray:
        """Serialize as [x, y, z, qw, qx, qy, qz]."""
        return np.concatenate([self.position, self.quat])

    @staticmethod
    def from_array(a) -> "Pose":
        a = np.asarray(a, dtype=float).reshape(7)
        return Pose(a[:3], a[3:])


@dataclass(slots=True)
class Twist:
    """Spatial velocity: linear m/s and angular rad/s."""

    linear: np.ndarray = field(default_factory=lambda: np.zeros(3))
    angular: np.ndarray = field(default_factory=lambda: np.zeros(3))

    def __post_init__(self):
        # finiteness is enforced by the simulator's NaN abort, not here, so a
        # diverged state can still be copied into the diagnostic
        self.linear = np.asarray(self.linear, dtype=float).reshape(3)
        self.angular = np.asarray(self.angular, dtype=float).reshape(3)

    def copy(self) -> "Twist":
        return Twist(self.linear.copy(), self.angular.copy())


@dataclass(slots=True)
class PoseDelta:
    """Pose difference: translation gap plus a world-frame rotation vector."""

    linear: np.ndarray
    angular: np.ndarray


def compose(a: Pose, b: Pose) -> Pose:
    """Group composition a o b (apply b first, then a)."""
    return Pose.from_parts(quat_rotate(a.quat, b.position) + a.position,
                           quat_mul(a.quat, b.quat))


def relative_to(world: Pose, frame: Pose) -> Pose:
    """Express a world pose in the given frame: frame^-1 o world."""
    return compose(frame.inverse(), world)


def pose_gap(target: Pose, current: Pose) -> PoseDelta:
    """Gap from current to target: position difference and the world-frame
    rotation vector of target o current^-1."""
    dq = quat_mul(target.quat, quat_conj(current.quat))
    return PoseDelta(target.position - current.position, quat_to_rotvec(dq))


def scaled_pose_step(current: Pose, delta: PoseDelta, beta: float) -> Pose:
    """Advance a pose by a fraction beta of the given gap.

    Position moves by beta * delta.linear; orientation rotates by
    beta * |delta.angular| about the gap's axis (world frame).
    """
    if not 0.0 < beta <= 1.0:
        raise ValueError(f"beta must be in (0, 1], got {beta}")
    return Pose.from_parts(current.position + beta * delta.linear,
                           quat_mul(quat_from_rotvec(beta * delta.angular), current.quat))


def geodesic_distance(a: np.ndarray, b: np.ndarray) -> float:
    """Angular distance acos(0.5 (trace(a b^T) - 1)) between rotation matrices.

    The acos argument is clamped to [-1, 1]; floating-point trace overshoot
    would otherwise produce NaN at zero distance.
    """
    arg = 0.5 * (np.trace(np.asarray(a) @ np.asarray(b).T) - 1.0)
    return float(np.arccos(np.clip(arg, -1.0, 1.0)))


def quat_geodesic(qa: np.ndarray, qb: np.ndarray) -> float:
    """Same angular distance computed directly from quaternions."""
    dot = abs(float(np.dot(qa, qb)))
    return 2.0 * float(np.arccos(min(dot, 1.0)))
