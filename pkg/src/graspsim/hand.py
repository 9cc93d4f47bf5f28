"""Kinematic hand description: links, joint limits, colliders, PD gains.

The hand is a tree of sphere-collider links rooted at a free 6-DoF wrist.
Every non-root link carries one revolute joint; multi-DoF joints are modeled
as stacked revolute links. Models are immutable after construction.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np

from .se3 import Pose, Twist, compose, quat_mul, quat_from_axis_angle, quat_rotate


@dataclass(frozen=True)
class Link:
    name: str
    parent: int                    # -1 roots the link at the wrist frame
    offset: Pose                   # fixed transform parent frame -> joint frame
    axis: np.ndarray | None        # revolute axis in the link frame; None = fixed
    collider_radius: float
    collider_center: np.ndarray    # in the link frame


@dataclass(frozen=True)
class WristGains:
    kp_lin: float = 1200.0
    kd_lin: float = 70.0
    kp_ang: float = 16.0
    kd_ang: float = 0.2


@dataclass(frozen=True)
class HandModel:
    links: tuple[Link, ...]
    joint_limits: np.ndarray       # (J, 2), slack already applied
    fingertip_links: tuple[int, ...]
    kp: np.ndarray                 # (J,)
    kd: np.ndarray                 # (J,)
    bias: np.ndarray               # (J,) q_b
    palm_mass: float = 0.3
    palm_inertia: float = 2e-3     # isotropic, lumped at the wrist
    wrist_gains: WristGains = WristGains()
    # joint_index[i] is the q index of link i, or -1 for fixed links
    joint_index: np.ndarray = field(default=None, repr=False)
    fk_plan: tuple = field(default=None, repr=False, compare=False)
    collider_radii: np.ndarray = field(default=None, repr=False, compare=False)
    collider_centers_local: np.ndarray = field(default=None, repr=False, compare=False)

    def __post_init__(self):
        jidx = np.full(len(self.links), -1, dtype=int)
        j = 0
        for i, link in enumerate(self.links):
            if not -1 <= link.parent < i:
                raise ValueError("links must be topologically ordered (parent before child)")
            if link.axis is not None:
                jidx[i] = j
                j += 1
            if link.collider_radius <= 0:
                raise ValueError(f"collider radius of {link.name} must be positive")
        object.__setattr__(self, "joint_index", jidx)
        if self.joint_limits.shape != (j, 2):
            raise ValueError(f"joint_limits must be ({j}, 2)")
        if np.any(self.joint_limits[:, 0] >= self.joint_limits[:, 1]):
            raise ValueError("each joint limit interval must satisfy lo < hi")
        object.__setattr__(self, "fk_plan", _build_fk_plan(self))
        object.__setattr__(self, "collider_radii",
                           np.array([l.collider_radius for l in self.links]))
        object.__setattr__(self, "collider_centers_local",
                           np.stack([l.collider_center for l in self.links]))

    @property
    def n_joints(self) -> int:
        return int((self.joint_index >= 0).sum())

    @property
    def n_links(self) -> int:
        return len(self.links)


@dataclass(slots=True)
class HandState:
    """Articulated hand state: wrist pose/twist and joint angles/velocities."""

    wrist: Pose
    wrist_twist: Twist
    q: np.ndarray
    qdot: np.ndarray

    def __post_init__(self):
        self.q = np.asarray(self.q, dtype=float).reshape(-1)
        self.qdot = np.asarray(self.qdot, dtype=float).reshape(-1)
        if self.q.shape != self.qdot.shape:
            raise ValueError("q and qdot lengths differ")

    def copy(self) -> "HandState":
        return HandState(self.wrist.copy(), self.wrist_twist.copy(),
                         self.q.copy(), self.qdot.copy())

    @staticmethod
    def rest(model: HandModel, wrist: Pose | None = None) -> "HandState":
        j = model.n_joints
        return HandState(wrist.copy() if wrist else Pose.identity(),
                         Twist(), np.zeros(j), np.zeros(j))


def _quat_mul_batch(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    aw, ax, ay, az = a[:, 0], a[:, 1], a[:, 2], a[:, 3]
    bw, bx, by, bz = b[:, 0], b[:, 1], b[:, 2], b[:, 3]
    out = np.empty((a.shape[0], 4))
    out[:, 0] = aw * bw - ax * bx - ay * by - az * bz
    out[:, 1] = aw * bx + ax * bw + ay * bz - az * by
    out[:, 2] = aw * by - ax * bz + ay * bw + az * bx
    out[:, 3] = aw * bz + ax * by - ay * bx + az * bw
    return out


def _quat_rotate_batch(q: np.ndarray, v: np.ndarray) -> np.ndarray:
    # expanded column arithmetic; np.cross is too slow for small batches
    w, ux, uy, uz = q[:, 0], q[:, 1], q[:, 2], q[:, 3]
    vx, vy, vz = v[:, 0], v[:, 1], v[:, 2]
    cx = uy * vz - uz * vy
    cy = uz * vx - ux * vz
    cz = ux * vy - uy * vx
    out = np.empty(np.broadcast_shapes(q[:, :3].shape, v.shape))
    out[:, 0] = vx + 2.0 * (w * cx + uy * cz - uz * cy)
    out[:, 1] = vy + 2.0 * (w * cy + uz * cx - ux * cz)
    out[:, 2] = vz + 2.0 * (w * cz + ux * cy - uy * cx)
    return out


def _hat_batch(axes: np.ndarray) -> np.ndarray:
    k = len(axes)
    out = np.zeros((k, 3, 3))
    out[:, 0, 1] = -axes[:, 2]
    out[:, 0, 2] = axes[:, 1]
    out[:, 1, 0] = axes[:, 2]
    out[:, 1, 2] = -axes[:, 0]
    out[:, 2, 0] = -axes[:, 1]
    out[:, 2, 1] = axes[:, 0]
    return out


@dataclass(frozen=True)
class _FkLevel:
    idx: np.ndarray          # link indices at this depth
    parent: np.ndarray       # parent link indices (-1 at the root level)
    offset_pos: np.ndarray   # (k, 3)
    offset_rot: np.ndarray   # (k, 3, 3)
    hat: np.ndarray          # (k, 3, 3) skew of the joint axis
    hat2: np.ndarray         # (k, 3, 3) skew squared
    has_axis: np.ndarray     # (k,) bool
    joint_idx: np.ndarray    # (k,) q indices; -1 for fixed links


def _build_fk_plan(model: HandModel) -> tuple[_FkLevel, ...]:
    from .se3 import quat_to_matrix
    depth = np.zeros(model.n_links, dtype=int)
    for i, link in enumerate(model.links):
        depth[i] = 0 if link.parent < 0 else depth[link.parent] + 1
    levels = []
    for d in range(depth.max() + 1):
        idx = np.nonzero(depth == d)[0]
        links = [model.links[i] for i in idx]
        axes = np.stack([l.axis / np.linalg.norm(l.axis) if l.axis is not None
                         else np.zeros(3) for l in links])
        hat = _hat_batch(axes)
        levels.append(_FkLevel(
            idx=idx,
            parent=np.array([l.parent for l in links]),
            offset_pos=np.stack([l.offset.position for l in links]),
            offset_rot=np.stack([quat_to_matrix(l.offset.quat) for l in links]),
            hat=hat,
            hat2=hat @ hat,
            has_axis=np.array([l.axis is not None for l in links]),
            joint_idx=np.array([model.joint_index[i] for i in idx]),
        ))
    return tuple(levels)


def _fk_arrays(model: HandModel, wrist_pos: np.ndarray, wrist_rot: np.ndarray,
               q: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """World origin (L,3) and rotation matrix (L,3,3) of every link frame.

    Batched per tree depth level with precomputed Rodrigues terms, so the
    whole chain costs a handful of einsum calls rather than a per-link loop.
    """
    plan = model.fk_plan
    pos = np.empty((model.n_links, 3))
    rot = np.empty((model.n_links, 3, 3))
    eye = np.eye(3)[None, :, :]
    for level in plan:
        k = len(level.idx)
        if level.parent[0] < 0:
            ppos = wrist_pos
            prot = np.broadcast_to(wrist_rot, (k, 3, 3))
        else:
            ppos = pos[level.parent]
            prot = rot[level.parent]
        p = np.einsum("kij,kj->ki", prot, level.offset_pos) + ppos
        r = prot @ level.offset_rot
        if level.has_axis.any():
            ang = np.where(level.has_axis, q[level.joint_idx], 0.0)
            jr = (eye + np.sin(ang)[:, None, None] * level.hat
                  + (1.0 - np.cos(ang))[:, None, None] * level.hat2)
            r = r @ jr
        pos[level.idx] = p
        rot[level.idx] = r
    return pos, rot


def forward_kinematics(model: HandModel, wrist: Pose, q: np.ndarray
                       ) -> tuple[list[Pose], np.ndarray]:
    """World pose of every link plus the (L, 3) array of link-frame origins.

    The origins serve as the hand's joint 3D positions x_h. Raises ValueError
    on a joint-vector length mismatch.
    """
    from .se3 import matrix_to_quat, quat_to_matrix
    q = np.asarray(q, dtype=float).reshape(-1)
    if q.shape[0] != model.n_joints:
        raise ValueError(f"expected {model.n_joints} joint angles, got {q.shape[0]}")
    pos, rot = _fk_arrays(model, wrist.position, quat_to_matrix(wrist.quat), q)
    poses = [Pose.from_parts(pos[i], matrix_to_quat(rot[i]))
             for i in range(model.n_links)]
    return poses, pos.copy()


def clamp_to_limits(model: HandModel, q: np.ndarray) -> np.ndarray:
    return np.clip(np.asarray(q, dtype=float),
                   model.joint_limits[:, 0], model.joint_limits[:, 1])


def apply_limit_slack(limits: np.ndarray, slack_frac: float = 0.1) -> np.ndarray:
    """Widen configured limits by slack_frac of the range on each side."""
    limits = np.asarray(limits, dtype=float)
    span = limits[:, 1] - limits[:, 0]
    return np.stack([limits[:, 0] - slack_frac * span,
                     limits[:, 1] + slack_frac * span], axis=1)


def collider_surface_points(model: HandModel, n: int = 64) -> list[np.ndarray]:
    """Quasi-uniform sample points on each link's collider sphere (link frame).

    These stand in for the per-part mesh vertices when deriving contacts.
    """
    dirs = _fibonacci_sphere(n)
    out = []
    for link in model.links:
        out.append(link.collider_center + link.collider_radius * dirs)
    return out


def _fibonacci_sphere(n: int) -> np.ndarray:
    k = np.arange(n, dtype=float) + 0.5
    phi = np.arccos(1.0 - 2.0 * k / n)
    theta = np.pi * (1.0 + 5.0 ** 0.5) * k
    return np.stack([np.sin(phi) * np.cos(theta),
                     np.sin(phi) * np.sin(theta),
                     np.cos(phi)], axis=1)


def default_desk_hand() -> HandModel:
    """Three-finger desk-scale hand: 6 revolute joints, sphere colliders.

    Palm faces +z in the wrist frame; fingers are mounted 120 degrees apart
    and curl toward the central axis as their joint angles increase. The
    proportions let the fingertips wrap past the equator of a 4 cm sphere
    held in front of the palm, so grasps envelop rather than pinch.
    """
    links = [Link("palm", -1, Pose(), None, 0.035, np.array([0.0, 0.0, 0.0]))]
    mount_radius = 0.060
    proximal_len = 0.055
    for i, ang in enumerate(np.deg2rad([90.0, 210.0, 330.0])):
        c, s = np.cos(ang), np.sin(ang)
        axis = np.array([s, -c, 0.0])  # curls the finger inward for q > 0
        mount = np.array([mount_radius * c, mount_radius * s, 0.010])
        links.append(Link(f"f{i}_prox", 0, Pose(mount), axis,
                          0.012, np.array([0.0, 0.0, 0.030])))
        links.append(Link(f"f{i}_dist", 2 * i + 1,
                          Pose(np.array([0.0, 0.0, proximal_len])), axis,
                          0.012, np.array([0.0, 0.0, 0.035])))
    base_limits = np.tile([-0.15, 1.9], (6, 1))
    return HandModel(
        links=tuple(links),
        joint_limits=apply_limit_slack(base_limits),
        fingertip_links=(2, 4, 6),
        kp=np.full(6, 60.0),
        kd=np.full(6, 14.0),
        # constant flexion bias: at contact the PD converts it into a steady
        # grip squeeze without any impulsive preload in the label itself
        bias=np.full(6, 0.02),
    )


def save_hand_config(model: HandModel, path: str) -> None:
    data = {
        "links": [
            {
                "name": l.name,
                "parent": l.parent,
                "offset": l.offset.as_array().tolist(),
                "axis": None if l.axis is None else np.asarray(l.axis, dtype=float).tolist(),
                "collider_radius": l.collider_radius,
                "collider_center": np.asarray(l.collider_center, dtype=float).tolist(),
            }
            for l in model.links
        ],
        "joint_limits": model.joint_limits.tolist(),
        "limits_include_slack": True,
        "fingertip_links": list(model.fingertip_links),
        "kp": model.kp.tolist(),
        "kd": model.kd.tolist(),
        "bias": model.bias.tolist(),
        "palm_mass": model.palm_mass,
        "palm_inertia": model.palm_inertia,
        "wrist_gains": {
            "kp_lin": model.wrist_gains.kp_lin, "kd_lin": model.wrist_gains.kd_lin,
            "kp_ang": model.wrist_gains.kp_ang, "kd_ang": model.wrist_gains.kd_ang,
        },
    }
    with open(path, "w") as f:
        json.dump(data, f, indent=1)


def load_hand_config(path: str) -> HandModel:
    """Load a hand model from its JSON config.

    Unless the file sets limits_include_slack, the configured joint limits are
    widened by the standard 10% slack on each side.
    """
    with open(path) as f:
        data = json.load(f)
    links = tuple(
        Link(
            name=entry["name"],
            parent=int(entry["parent"]),
            offset=Pose.from_array(entry["offset"]),
            axis=None if entry.get("axis") is None else np.asarray(entry["axis"], dtype=float),
            collider_radius=float(entry["collider_radius"]),
            collider_center=np.asarray(entry["collider_center"], dtype=float),
        )
        for entry in data["links"]
    )
    limits = np.asarray(data["joint_limits"], dtype=float)
    if not data.get("limits_include_slack", False):
        limits = apply_limit_slack(limits)
    wg = data.get("wrist_gains", {})
    return HandModel(
        links=links,
        joint_limits=limits,
        fingertip_links=tuple(data["fingertip_links"]),
        kp=np.asarray(data["kp"], dtype=float),
        kd=np.asarray(data["kd"], dtype=float),
        bias=np.asarray(data["bias"], dtype=float),
        palm_mass=float(data.get("palm_mass", 0.3)),
        palm_inertia=float(data.get("palm_inertia", 7.5e-4)),
        wrist_gains=WristGains(**wg) if wg else WristGains(),
    )
