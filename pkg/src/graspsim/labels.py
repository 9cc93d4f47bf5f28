"""Grasp labels: the static reference data model, target-contact derivation
and JSON file I/O.

A label stores an object pose, a hand wrist pose and joint angles. Everything
else (target joint positions in the object frame, desired contact flags) is
derived geometry and recomputed on load, never serialized.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np

from .hand import HandModel, collider_surface_points, forward_kinematics
from .se3 import Pose, quat_rotate
from .sim import Shape

CONTACT_EPS = 0.015          # m, distance threshold for a desired contact
SURFACE_SAMPLES = 512
LINK_SAMPLES = 64


class LabelSchemaError(ValueError):
    """Label file violates the schema; the message names the field path."""


@dataclass(slots=True)
class GraspLabel:
    object_id: str
    pose_object: Pose        # object 6D pose at the grasp
    pose_hand: Pose          # wrist 6D pose at the grasp
    q_hand: np.ndarray       # joint angles at the grasp
    # derived, filled by with_derived(); never serialized
    contacts: np.ndarray | None = None        # per-link 0/1 flags
    joint_targets: np.ndarray | None = None   # (L, 3) object-frame positions

    def __post_init__(self):
        self.q_hand = np.asarray(self.q_hand, dtype=float).reshape(-1)

    def copy(self) -> "GraspLabel":
        return GraspLabel(self.object_id, self.pose_object.copy(), self.pose_hand.copy(),
                          self.q_hand.copy(),
                          None if self.contacts is None else self.contacts.copy(),
                          None if self.joint_targets is None else self.joint_targets.copy())

    def with_derived(self, model: HandModel, object_points: "SurfacePointSet",
                     eps: float = CONTACT_EPS) -> "GraspLabel":
        out = self.copy()
        out.joint_targets = label_joint_targets(model, self)
        out.contacts = derive_target_contacts(model, self, object_points, eps)
        return out


@dataclass(slots=True)
class SurfacePointSet:
    """Object-frame surface points standing in for mesh vertices."""

    points: np.ndarray

    def __post_init__(self):
        self.points = np.asarray(self.points, dtype=float).reshape(-1, 3)
        if len(self.points) < 1:
            raise ValueError("surface point set is empty")


def label_joint_targets(model: HandModel, label: GraspLabel) -> np.ndarray:
    """Link-frame origins of the label hand expressed in the label object frame."""
    _, x = forward_kinematics(model, label.pose_hand, label.q_hand)
    inv = label.pose_object.inverse()
    return quat_rotate(inv.quat, x) + inv.position


def derive_target_contacts(model: HandModel, label: GraspLabel,
                           object_points: SurfacePointSet,
                           eps: float = CONTACT_EPS) -> np.ndarray:
    """Per-link desired-contact flags from the label geometry.

    A link is flagged when any sample point of its collider surface, placed by
    the label FK and expressed in the object frame, lies within eps of any
    object surface point. Uses object-relative geometry only, so the flags are
    invariant to rigid transforms applied jointly to the label poses.
    """
    if eps <= 0:
        raise ValueError("eps must be positive")
    obj_pts = object_points.points
    poses, _ = forward_kinematics(model, label.pose_hand, label.q_hand)
    inv = label.pose_object.inverse()
    flags = np.zeros(model.n_links, dtype=np.int8)
    eps2 = eps * eps
    for i, local_pts in enumerate(collider_surface_points(model, LINK_SAMPLES)):
        world = quat_rotate(poses[i].quat, local_pts) + poses[i].position
        rel = quat_rotate(inv.quat, world) + inv.position
        d2 = ((rel[:, None, :] - obj_pts[None, :, :]) ** 2).sum(axis=2)
        if (d2 < eps2).any():
            flags[i] = 1
    return flags


def contact_goal_vector(contacts: np.ndarray) -> np.ndarray:
    """g_c: the desired contacts concatenated with their own active indicator."""
    c = np.asarray(contacts)
    return np.concatenate([c, (c > 0).astype(c.dtype)])


def sample_surface(shape: Shape, n: int = SURFACE_SAMPLES) -> SurfacePointSet:
    """Quasi-uniform deterministic points on a primitive's surface."""
    if shape.kind == "sphere":
        pts = shape.radius * _fib_sphere(n)
    elif shape.kind == "box":
        pts = _box_surface(np.asarray(shape.half_extents, dtype=float), n)
    else:
        pts = _cylinder_surface(shape.radius, shape.half_height, n)
    return SurfacePointSet(pts)


def _fib_sphere(n: int) -> np.ndarray:
    k = np.arange(n, dtype=float) + 0.5
    phi = np.arccos(1.0 - 2.0 * k / n)
    theta = np.pi * (1.0 + 5.0 ** 0.5) * k
    return np.stack([np.sin(phi) * np.cos(theta),
                     np.sin(phi) * np.sin(theta),
                     np.cos(phi)], axis=1)


def _unit_square_grid(count: int) -> np.ndarray:
    """count quasi-uniform points in [0,1)^2 (golden-ratio lattice)."""
    k = np.arange(count, dtype=float)
    g = (1.0 + 5.0 ** 0.5) / 2.0
    return np.stack([(k / g) % 1.0, (k + 0.5) / count], axis=1)


def _box_surface(he: np.ndarray, n: int) -> np.ndarray:
    areas = 4.0 * np.array([he[1] * he[2], he[0] * he[2], he[0] * he[1]])
    areas = np.repeat(areas, 2)
    counts = np.maximum(np.round(n * areas / areas.sum()).astype(int), 1)
    pts = []
    for face, cnt in enumerate(counts):
        axis, side = face // 2, 1.0 if face % 2 == 0 else -1.0
        u, v = (axis + 1) % 3, (axis + 2) % 3
        grid = _unit_square_grid(cnt)
        p = np.empty((cnt, 3))
        p[:, axis] = side * he[axis]
        p[:, u] = (2.0 * grid[:, 0] - 1.0) * he[u]
        p[:, v] = (2.0 * grid[:, 1] - 1.0) * he[v]
        pts.append(p)
    return np.concatenate(pts)


def _cylinder_surface(r: float, hh: float, n: int) -> np.ndarray:
    a_side = 2.0 * np.pi * r * 2.0 * hh
    a_cap = np.pi * r * r
    total = a_side + 2.0 * a_cap
    n_side = max(int(round(n * a_side / total)), 1)
    n_cap = max((n - n_side) // 2, 1)
    grid = _unit_square_grid(n_side)
    theta = 2.0 * np.pi * grid[:, 0]
    side = np.stack([r * np.cos(theta), r * np.sin(theta),
                     (2.0 * grid[:, 1] - 1.0) * hh], axis=1)
    caps = []
    for sz in (1.0, -1.0):
        g = _unit_square_grid(n_cap)
        rho = r * np.sqrt(g[:, 0])
        th = 2.0 * np.pi * g[:, 1]
        caps.append(np.stack([rho * np.cos(th), rho * np.sin(th),
                              np.full(n_cap, sz * hh)], axis=1))
    return np.concatenate([side] + caps)


# --- file I/O ---------------------------------------------------------------

def _require(record: dict, key: str, idx: int):
    if key not in record:
        raise LabelSchemaError(f"labels[{idx}]: missing field '{key}'")
    return record[key]


def _parse_pose(raw, where: str) -> Pose:
    arr = np.asarray(raw, dtype=float)
    if arr.shape != (7,):
        raise LabelSchemaError(f"{where}: pose must have 7 entries [x,y,z,qw,qx,qy,qz]")
    norm = float(np.linalg.norm(arr[3:]))
    if abs(norm - 1.0) > 1e-6:
        raise LabelSchemaError(f"{where}: quaternion norm {norm:.6f} is not 1")
    if abs(norm - 1.0) > 1e-9:
        arr = arr.copy()
        arr[3:] /= norm
    return Pose.from_array(arr)


def load_labels(path: str) -> list[GraspLabel]:
    with open(path) as f:
        data = json.load(f)
    if "labels" not in data:
        raise LabelSchemaError("missing top-level field 'labels'")
    out = []
    for idx, rec in enumerate(data["labels"]):
        out.append(GraspLabel(
            object_id=str(_require(rec, "object_id", idx)),
            pose_object=_parse_pose(_require(rec, "pose_object", idx),
                                    f"labels[{idx}].pose_object"),
            pose_hand=_parse_pose(_require(rec, "pose_hand", idx),
                                  f"labels[{idx}].pose_hand"),
            q_hand=np.asarray(_require(rec, "q_hand", idx), dtype=float),
        ))
    return out


def save_labels(labels: list[GraspLabel], path: str) -> None:
    data = {"labels": [
        {
            "object_id": lab.object_id,
            "pose_object": lab.pose_object.as_array().tolist(),
            "pose_hand": lab.pose_hand.as_array().tolist(),
            "q_hand": lab.q_hand.tolist(),
        }
        for lab in labels
    ]}
    with open(path, "w") as f:
        json.dump(data, f, indent=1)
