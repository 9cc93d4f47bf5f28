"""Heuristic grasp-label generation for primitive objects.

Labels are enveloping grasps: the wrist approaches from a sampled direction
with the palm facing the object, and each finger is closed by bisection until
its fingertip collider just penetrates the surface. Every generated label is
checked to produce at least two desired contacts.
"""

from __future__ import annotations

import numpy as np

from .hand import HandModel, forward_kinematics
from .labels import (CONTACT_EPS, GraspLabel, SurfacePointSet,
                     derive_target_contacts, sample_surface)
from .se3 import Pose, matrix_to_quat, quat_rotate
from .sim import Shape

PALM_STAND_CLEARANCE = 0.034   # wrist offset: palm collider preloads ~1 mm
TOUCH_PENETRATION = 1e-3       # m; labels close fingers to light first touch
FLEX_RATIO = 0.75              # distal joint angle relative to proximal


class LabelGenerationError(RuntimeError):
    pass


def shape_sdf(shape: Shape, p: np.ndarray) -> float:
    """Signed distance from a point (shape frame) to the primitive surface."""
    if shape.kind == "sphere":
        return float(np.linalg.norm(p)) - shape.radius
    if shape.kind == "box":
        he = np.asarray(shape.half_extents)
        d = np.abs(p) - he
        outside = np.linalg.norm(np.maximum(d, 0.0))
        inside = min(float(d.max()), 0.0)
        return float(outside + inside)
    rho = float(np.hypot(p[0], p[1]))
    d = np.array([rho - shape.radius, abs(float(p[2])) - shape.half_height])
    outside = float(np.linalg.norm(np.maximum(d, 0.0)))
    inside = min(float(d.max()), 0.0)
    return outside + inside


def resting_pose(shape: Shape, surface_height: float) -> Pose:
    """Object pose resting on the support plane at the origin."""
    if shape.kind == "sphere":
        z = shape.radius
    elif shape.kind == "box":
        z = shape.half_extents[2]
    else:
        z = shape.half_height
    return Pose(np.array([0.0, 0.0, surface_height + z]))


def _support_distance(shape: Shape, direction: np.ndarray) -> float:
    """Distance from the shape center to its surface along a direction."""
    lo, hi = 0.0, 1.0
    while shape_sdf(shape, hi * direction) < 0.0:
        hi *= 2.0
    for _ in range(60):
        mid = 0.5 * (lo + hi)
        if shape_sdf(shape, mid * direction) < 0.0:
            lo = mid
        else:
            hi = mid
    return 0.5 * (lo + hi)


def _wrist_orientation(approach: np.ndarray, roll: float) -> np.ndarray:
    """Quaternion with the hand's +z along -approach, rolled about it."""
    z = -approach / np.linalg.norm(approach)
    ref = np.array([1.0, 0.0, 0.0])
    if abs(z @ ref) > 0.9:
        ref = np.array([0.0, 1.0, 0.0])
    x0 = ref - (ref @ z) * z
    x0 /= np.linalg.norm(x0)
    x = np.cos(roll) * x0 + np.sin(roll) * np.cross(z, x0)
    y = np.cross(z, x)
    return matrix_to_quat(np.stack([x, y, z], axis=1))


def _fingertip_gap(model: HandModel, wrist: Pose, q: np.ndarray, tip_link: int,
                   shape: Shape, obj_pose: Pose) -> float:
    """Signed distance of the fingertip collider surface to the object."""
    poses, _ = forward_kinematics(model, wrist, q)
    link = model.links[tip_link]
    center_w = poses[tip_link].transform_point(link.collider_center)
    inv = obj_pose.inverse()
    return shape_sdf(shape, inv.transform_point(center_w)) - link.collider_radius


def _close_finger(model: HandModel, wrist: Pose, q: np.ndarray, finger: int,
                  shape: Shape, obj_pose: Pose,
                  penetration: float = TOUCH_PENETRATION) -> bool:
    """Bisect the finger's flexion until first touch (a fraction of a
    millimeter of overlap). Mutates q; returns False if unreachable."""
    tip = model.fingertip_links[finger]
    j1 = model.joint_index[model.links[tip].parent]
    j2 = model.joint_index[tip]
    hi_limit = min(model.joint_limits[j1, 1], model.joint_limits[j2, 1] / FLEX_RATIO)

    def gap(t: float) -> float:
        q[j1] = t * hi_limit
        q[j2] = t * hi_limit * FLEX_RATIO
        return _fingertip_gap(model, wrist, q, tip, shape, obj_pose) + penetration

    ts = np.linspace(0.0, 1.0, 50)
    vals = [gap(t) for t in ts]
    bracket = None
    for i in range(len(ts) - 1):
        if vals[i] > 0.0 >= vals[i + 1]:
            bracket = (ts[i], ts[i + 1])
            break
    if bracket is None:
        best = int(np.argmin(np.abs(vals)))
        gap(ts[best])
        return abs(vals[best]) < 2e-3
    lo, hi = bracket
    for _ in range(40):
        mid = 0.5 * (lo + hi)
        if gap(mid) > 0.0:
            lo = mid
        else:
            hi = mid
    gap(0.5 * (lo + hi))
    return True


def make_labels(model: HandModel, shape: Shape, surface_height: float,
                count: int, seed: int, object_id: str = "object",
                eps: float = CONTACT_EPS, max_tilt: float = 0.3,
                points: SurfacePointSet | None = None,
                touch_penetration: float = TOUCH_PENETRATION
                ) -> tuple[list[GraspLabel], list[str]]:
    """Generate enveloping-grasp labels; returns (labels, failure messages).

    Each accepted label passes derive_target_contacts with at least two
    desired contacts. Deterministic for a fixed seed.
    """
    rng = np.random.default_rng(np.random.SeedSequence((seed, 3)).spawn(1)[0])
    if points is None:
        points = sample_surface(shape)
    obj_pose = resting_pose(shape, surface_height)
    labels: list[GraspLabel] = []
    failures: list[str] = []
    for k in range(count):
        label = None
        for attempt in range(20):
            yaw = rng.uniform(-np.pi, np.pi)
            tilt = rng.uniform(0.0, max_tilt)
            roll = rng.uniform(-np.pi, np.pi)
            approach = np.array([np.sin(tilt) * np.cos(yaw),
                                 np.sin(tilt) * np.sin(yaw),
                                 np.cos(tilt)])
            standoff = _support_distance(shape, approach) + PALM_STAND_CLEARANCE
            wrist = Pose.from_parts(obj_pose.position + standoff * approach,
                                    _wrist_orientation(approach, roll))
            q = np.zeros(model.n_joints)
            ok = all(_close_finger(model, wrist, q, f, shape, obj_pose,
                                   touch_penetration)
                     for f in range(len(model.fingertip_links)))
            if not ok:
                continue
            cand = GraspLabel(object_id, obj_pose.copy(), wrist, q.copy())
            flags = derive_target_contacts(model, cand, points, eps)
            if flags.sum() >= 2:
                label = cand.with_derived(model, points, eps)
                break
        if label is None:
            failures.append(f"label {k}: no valid grasp after 20 attempts")
        else:
            labels.append(label)
    return labels, failures
