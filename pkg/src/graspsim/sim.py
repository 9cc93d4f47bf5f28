"""Deterministic fixed-step rigid-body micro-simulator.

One free object (sphere, box or cylinder primitive), one PD-actuated hand and
an optional support plane. Contacts use a penalty model: normal force
k_n * depth + c_n * closing_speed (clamped non-negative) with a Coulomb-capped
tangential damping force. Damping contributions are additionally capped by the
momentum they could remove in one substep, so the explicit integrator cannot
reverse a relative motion and chatter.

Hand dynamics follow the lumped approximation: the palm is a single rigid body
at the wrist, finger joints integrate under unit reflected inertia. Contact
forces on finger links act both as a wrist wrench and as joint-axis torques.

Everything is plain float64 numpy in a fixed order: identical (state, action,
config) produce bit-identical successors.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .hand import HandModel, HandState
from .se3 import (Pose, Twist, pose_gap, quat_from_rotvec, quat_mul,
                  quat_normalize, quat_rotate, quat_to_matrix)


class SimNanError(RuntimeError):
    """Raised when integration produces non-finite state; aborts the episode."""


def _cross3(a, b) -> np.ndarray:
    # specialized 3-vector cross; np.cross is too slow for the inner loop
    return np.array([a[1] * b[2] - a[2] * b[1],
                     a[2] * b[0] - a[0] * b[2],
                     a[0] * b[1] - a[1] * b[0]])



@dataclass(frozen=True)
class Shape:
    """Collision primitive. box uses half extents, cylinder's axis is local z."""

    kind: str
    radius: float = 0.0
    half_extents: tuple[float, float, float] | None = None
    half_height: float = 0.0

    def __post_init__(self):
        if self.kind not in ("sphere", "box", "cylinder"):
            raise ValueError(f"unknown shape kind {self.kind!r}")
        if self.kind in ("sphere", "cylinder") and self.radius <= 0:
            raise ValueError("radius must be positive")
        if self.kind == "box" and (self.half_extents is None
                                   or any(h <= 0 for h in self.half_extents)):
            raise ValueError("box needs positive half extents")
        if self.kind == "cylinder" and self.half_height <= 0:
            raise ValueError("cylinder needs positive half height")


def shape_inertia(shape: Shape, mass: float) -> np.ndarray:
    """Body-frame diagonal inertia of a solid primitive."""
    if shape.kind == "sphere":
        i = 0.4 * mass * shape.radius ** 2
        return np.array([i, i, i])
    if shape.kind == "box":
        hx, hy, hz = shape.half_extents
        return (mass / 3.0) * np.array([hy * hy + hz * hz,
                                        hx * hx + hz * hz,
                                        hx * hx + hy * hy])
    r, hh = shape.radius, shape.half_height
    ixy = mass * (3.0 * r * r + 4.0 * hh * hh) / 12.0
    return np.array([ixy, ixy, 0.5 * mass * r * r])


@dataclass(slots=True)
class ObjectBody:
    shape: Shape
    mass: float
    friction: float = 0.8
    pose: Pose = field(default_factory=Pose)
    twist: Twist = field(default_factory=Twist)
    inertia: np.ndarray = None  # body-frame diagonal, derived from the shape

    def __post_init__(self):
        if self.mass <= 0:
            raise ValueError("object mass must be positive")
        if self.friction < 0:
            raise ValueError("friction must be non-negative")
        if self.inertia is None:
            self.inertia = shape_inertia(self.shape, self.mass)

    def copy(self) -> "ObjectBody":
        return ObjectBody(self.shape, self.mass, self.friction,
                          self.pose.copy(), self.twist.copy(), self.inertia.copy())


@dataclass(slots=True)
class ContactPoint:
    link: int            # hand link index, or -1 for an object-surface contact
    body: str            # what the link touches: "object" or "surface"
    point: np.ndarray
    normal: np.ndarray   # pushes the hand off the object / points up off the plane
    depth: float
    force: float = 0.0
    key: tuple = ()      # stable identity for friction anchoring


@dataclass(frozen=True)
class SimConfig:
    dt: float = 2.22e-3
    substeps_per_action: int = 13
    gravity: tuple[float, float, float] = (0.0, 0.0, -9.81)
    surface_height: float = 0.0
    hand_surface_collision: bool = True
    k_normal: float = 3.0e3
    c_normal: float = 30.0
    k_tangent: float = 3.0e3
    c_tangent: float = 1.0e4
    friction: float = 0.8        # hand-plane friction; object contacts use the object's
    spin_patch_radius: float = 5e-3   # finite-patch lever for torsional friction
    c_spin: float = 0.05
    lowered_drop: float = 1.0

    def __post_init__(self):
        if self.dt <= 0 or self.substeps_per_action < 1:
            raise ValueError("dt must be positive and substeps >= 1")

    @property
    def action_dt(self) -> float:
        return self.dt * self.substeps_per_action


@dataclass(slots=True)
class SimState:
    hand: HandState
    object: ObjectBody
    contacts: list
    step_count: int
    surface_height: float
    surface_on: bool
    link_pos: np.ndarray    # FK cache, kept fresh after every step
    link_rot: np.ndarray    # (L, 3, 3)
    # stick anchors: contact key -> material point on the passive surface
    anchors: dict = field(default_factory=dict)

    def copy(self) -> "SimState":
        return SimState(self.hand.copy(), self.object.copy(),
                        [ContactPoint(c.link, c.body, c.point.copy(),
                                      c.normal.copy(), c.depth, c.force, c.key)
                         for c in self.contacts],
                        self.step_count, self.surface_height, self.surface_on,
                        self.link_pos.copy(), self.link_rot.copy(),
                        {k: v.copy() for k, v in self.anchors.items()})


@dataclass(slots=True)
class Action:
    """One control step: joint reference angles plus a wrist target pose."""

    q_ref: np.ndarray
    wrist_target: Pose


def pd_torque(model: HandModel, q_ref, q, qdot) -> np.ndarray:
    """tau_j = kp_j (q_ref_j + q_b_j - q_j) - kd_j qdot_j."""
    q_ref = np.asarray(q_ref, dtype=float)
    q = np.asarray(q, dtype=float)
    qdot = np.asarray(qdot, dtype=float)
    if not q_ref.shape == q.shape == qdot.shape == (model.n_joints,):
        raise ValueError("joint vector length mismatch")
    return model.kp * (q_ref + model.bias - q) - model.kd * qdot


def wrist_pd_wrench(target: Pose, state: HandState, gains) -> tuple[np.ndarray, np.ndarray]:
    """6D PD wrench driving the wrist toward a target pose.

    Force: kp_lin * position gap - kd_lin * v. Torque: kp_ang * axis-angle of
    the rotation gap (world frame) - kd_ang * omega.
    """
    gap = pose_gap(target, state.wrist)
    force = gains.kp_lin * gap.linear - gains.kd_lin * state.wrist_twist.linear
    torque = gains.kp_ang * gap.angular - gains.kd_ang * state.wrist_twist.angular
    return force, torque


# --- closest-point helpers -------------------------------------------------

def _sphere_vs_object(center: np.ndarray, radius: float, obj: ObjectBody):
    """Overlap of a world-frame sphere with the object primitive.

    Returns (depth, normal, point) with the normal pointing from the object
    toward the sphere, or None when separated.
    """
    shape = obj.shape
    if shape.kind == "sphere":
        d = center - obj.pose.position
        dist = float(np.linalg.norm(d))
        depth = radius + shape.radius - dist
        if depth <= 0.0:
            return None
        n = d / dist if dist > 1e-12 else np.array([0.0, 0.0, 1.0])
        point = center - n * (radius - 0.5 * depth)
        return depth, n, point

    # box and cylinder work in the object's local frame
    qc = np.array([obj.pose.quat[0], -obj.pose.quat[1],
                   -obj.pose.quat[2], -obj.pose.quat[3]])
    local = quat_rotate(qc, center - obj.pose.position)
    if shape.kind == "box":
        he = np.asarray(shape.half_extents)
        closest = np.clip(local, -he, he)
        delta = local - closest
        dist = float(np.linalg.norm(delta))
        if dist > 1e-12:
            depth = radius - dist
            if depth <= 0.0:
                return None
            n_local = delta / dist
        else:
            # center inside the box: exit through the nearest face
            gaps = he - np.abs(local)
            axis = int(np.argmin(gaps))
            n_local = np.zeros(3)
            n_local[axis] = np.sign(local[axis]) or 1.0
            depth = radius + float(gaps[axis])
            closest = local.copy()
            closest[axis] = n_local[axis] * he[axis]
    else:  # cylinder
        r, hh = shape.radius, shape.half_height
        rho = float(np.hypot(local[0], local[1]))
        inside = rho <= r and abs(local[2]) <= hh
        if inside:
            radial_gap = r - rho
            cap_gap = hh - abs(local[2])
            if radial_gap < cap_gap:
                dir_r = (local[:2] / rho) if rho > 1e-12 else np.array([1.0, 0.0])
                n_local = np.array([dir_r[0], dir_r[1], 0.0])
                depth = radius + radial_gap
                closest = np.array([dir_r[0] * r, dir_r[1] * r, local[2]])
            else:
                sz = np.sign(local[2]) or 1.0
                n_local = np.array([0.0, 0.0, sz])
                depth = radius + cap_gap
                closest = np.array([local[0], local[1], sz * hh])
        else:
            zc = float(np.clip(local[2], -hh, hh))
            if rho > r:
                scale = r / rho
                closest = np.array([local[0] * scale, local[1] * scale, zc])
            else:
                closest = np.array([local[0], local[1], zc])
            delta = local - closest
            dist = float(np.linalg.norm(delta))
            depth = radius - dist
            if depth <= 0.0:
                return None
            n_local = delta / dist
    n = quat_rotate(obj.pose.quat, n_local)
    point = quat_rotate(obj.pose.quat, closest) + obj.pose.position
    return depth, n, point


_RIM_ANGLES = np.linspace(0.0, 2.0 * np.pi, 8, endpoint=False)


def _object_support_points(obj: ObjectBody) -> np.ndarray:
    """World-frame candidate contact points for object-vs-plane tests."""
    shape = obj.shape
    if shape.kind == "sphere":
        return obj.pose.position[None, :] + np.array([[0.0, 0.0, -shape.radius]])
    if shape.kind == "box":
        he = np.asarray(shape.half_extents)
        corners = np.array([[sx * he[0], sy * he[1], sz * he[2]]
                            for sx in (-1, 1) for sy in (-1, 1) for sz in (-1, 1)])
        return quat_rotate(obj.pose.quat, corners) + obj.pose.position
    r, hh = shape.radius, shape.half_height
    rims = []
    for sz in (-1.0, 1.0):
        rims.append(np.stack([r * np.cos(_RIM_ANGLES),
                              r * np.sin(_RIM_ANGLES),
                              np.full(8, sz * hh)], axis=1))
    pts = np.concatenate(rims)
    return quat_rotate(obj.pose.quat, pts) + obj.pose.position


def _collider_centers(model: HandModel, link_pos: np.ndarray,
                      link_rot: np.ndarray) -> np.ndarray:
    return np.einsum("kij,kj->ki", link_rot,
                     model.collider_centers_local) + link_pos


def detect_contacts(model: HandModel, link_pos: np.ndarray, link_rot: np.ndarray,
                    obj: ObjectBody, surface_height: float, surface_on: bool,
                    hand_surface_collision: bool) -> list[ContactPoint]:
    """All positive-depth overlaps: hand-object, object-plane, and (when the
    collision toggle is on) hand-plane. Forces are left at zero."""
    contacts: list[ContactPoint] = []
    up = np.array([0.0, 0.0, 1.0])
    centers = _collider_centers(model, link_pos, link_rot)
    radii = model.collider_radii

    if obj.shape.kind == "sphere":
        d = centers - obj.pose.position
        dist = np.sqrt((d * d).sum(axis=1))
        depths = radii + obj.shape.radius - dist
        for i in np.nonzero(depths > 0.0)[0]:
            n = (d[i] / dist[i]) if dist[i] > 1e-12 else up.copy()
            point = centers[i] - n * (radii[i] - 0.5 * depths[i])
            contacts.append(ContactPoint(int(i), "object", point, n,
                                         float(depths[i]), key=("ho", int(i))))
    else:
        for i in range(model.n_links):
            hit = _sphere_vs_object(centers[i], radii[i], obj)
            if hit is not None:
                depth, n, point = hit
                contacts.append(ContactPoint(i, "object", point, n, depth,
                                             key=("ho", i)))

    if surface_on and hand_surface_collision:
        depths = surface_height - (centers[:, 2] - radii)
        for i in np.nonzero(depths > 0.0)[0]:
            point = np.array([centers[i, 0], centers[i, 1], surface_height])
            contacts.append(ContactPoint(int(i), "surface", point, up.copy(),
                                         float(depths[i]), key=("hs", int(i))))
    if surface_on:
        pts = _object_support_points(obj)
        depths = surface_height - pts[:, 2]
        for i in np.nonzero(depths > 0.0)[0]:
            contacts.append(ContactPoint(-1, "surface", pts[i].copy(), up.copy(),
                                         float(depths[i]), key=("os", int(i))))
    return contacts


def _implicit_damping(c: float, m_eff: float, dt: float) -> float:
    """Effective coefficient of an implicitly integrated viscous damper.

    Equals c for soft damping and saturates at m_eff/dt when stiff, so one
    substep can never reverse the relative motion it damps."""
    return c / (1.0 + c * dt / m_eff)


def _manifold_counts(contacts: list[ContactPoint]) -> tuple[int, int]:
    """Contacts in the object-plane and hand-plane manifolds.

    Stiffness and damping are normalized over each manifold (contacts of one
    body pair sharing a normal), so stacking support points neither raises the
    effective stiffness past stability nor changes resting penetration."""
    n_plane_obj = 0
    n_plane_hand = 0
    for c in contacts:
        if c.link < 0:
            n_plane_obj += 1
        elif c.body == "surface":
            n_plane_hand += 1
    return n_plane_obj, n_plane_hand


def link_forces(model: HandModel, contacts: list[ContactPoint]) -> np.ndarray:
    """Per-link sum of hand-object contact force magnitudes."""
    f = np.zeros(model.n_links)
    for c in contacts:
        if c.link >= 0 and c.body == "object":
            f[c.link] += c.force
    return f


class Simulator:
    """Owns a hand model and config; step() is a pure state transition."""

    def __init__(self, model: HandModel, config: SimConfig = SimConfig()):
        self.model = model
        self.config = config
        self._gravity = np.asarray(config.gravity, dtype=float)
        # per-link chain of (joint link index) ancestors, innermost first
        chains = []
        for i, link in enumerate(model.links):
            chain = []
            k = i
            while k >= 0:
                if model.links[k].axis is not None:
                    chain.append(k)
                k = model.links[k].parent
            chains.append(tuple(chain))
        self._joint_chains = tuple(chains)
        jl = [i for i, l in enumerate(model.links) if l.axis is not None]
        self._joint_link_idx = np.array(jl, dtype=int)
        self._joint_axes_local = np.stack([model.links[i].axis for i in jl]) \
            if jl else np.zeros((0, 3))

    def initial_state(self, obj: ObjectBody, hand: HandState | None = None) -> SimState:
        hand = hand.copy() if hand is not None else HandState.rest(self.model)
        obj = obj.copy()
        link_pos, link_rot = self._fk(hand)
        contacts = detect_contacts(self.model, link_pos, link_rot, obj,
                                   self.config.surface_height, True,
                                   self.config.hand_surface_collision)
        return SimState(hand, obj, contacts, 0, self.config.surface_height, True,
                        link_pos, link_rot)

    def _fk(self, hand: HandState):
        from .hand import _fk_arrays
        from .se3 import quat_to_matrix
        return _fk_arrays(self.model, hand.wrist.position,
                          quat_to_matrix(hand.wrist.quat), hand.q)

    def set_surface(self, state: SimState, mode: str) -> SimState:
        """Move or remove the support plane for subsequent steps."""
        state = state.copy()
        if mode == "present":
            state.surface_on = True
            state.surface_height = self.config.surface_height
        elif mode == "lowered":
            state.surface_on = True
            state.surface_height = self.config.surface_height - self.config.lowered_drop
        elif mode == "removed":
            state.surface_on = False
        else:
            raise ValueError(f"unknown surface mode {mode!r}")
        state.contacts = detect_contacts(self.model, state.link_pos, state.link_rot,
                                         state.object, state.surface_height,
                                         state.surface_on,
                                         self.config.hand_surface_collision)
        return state

    def step(self, state: SimState, action: Action) -> SimState:
        """Advance substeps_per_action * dt under fixed PD targets."""
        model, cfg = self.model, self.config
        if action.q_ref.shape != (model.n_joints,):
            raise ValueError("action q_ref length mismatch")
        s = state.copy()
        hand, obj = s.hand, s.object
        dt = cfg.dt
        contacts: list[ContactPoint] = s.contacts

        for sub in range(cfg.substeps_per_action):
            if sub == 0:
                # the cache is fresh: refreshed at the end of the previous
                # step and by initial_state / set_surface
                link_pos, link_rot = s.link_pos, s.link_rot
                contacts = s.contacts
            else:
                link_pos, link_rot = self._fk(hand)
                contacts = detect_contacts(model, link_pos, link_rot, obj,
                                           s.surface_height, s.surface_on,
                                           cfg.hand_surface_collision)

            f_obj = obj.mass * self._gravity
            tau_obj = np.zeros(3)
            f_wrist = model.palm_mass * self._gravity
            tau_wrist = np.zeros(3)
            tau_joint = np.zeros(model.n_joints)

            pd_f, pd_t = wrist_pd_wrench(action.wrist_target, hand, model.wrist_gains)
            f_wrist += pd_f
            tau_wrist += pd_t
            tau_joint += pd_torque(model, action.q_ref, hand.q, hand.qdot)

            axes_w = self._joint_axes(link_rot) if contacts else None
            iw_inv = self._world_inertia_inv(obj) if contacts else None
            n_po, n_ph = _manifold_counts(contacts)
            live = {c.key for c in contacts}
            for stale in [k for k in s.anchors if k not in live]:
                del s.anchors[stale]
            for c in contacts:
                f_vec, spin = self._contact_force(c, hand, obj, link_pos, axes_w,
                                                  iw_inv, s.anchors, dt, n_po, n_ph)
                c.force = float(np.sqrt(f_vec @ f_vec))
                if c.link < 0:
                    f_obj += f_vec
                    tau_obj += _cross3(c.point - obj.pose.position, f_vec) + spin
                    continue
                # f_vec acts on the hand link; the links are massless
                # relative to the palm, so the reaction lands on the wrist
                # while the joints keep integrating under PD torque alone
                f_wrist += f_vec
                tau_wrist += _cross3(c.point - hand.wrist.position, f_vec) + spin
                if c.body == "object":
                    f_obj -= f_vec
                    tau_obj -= _cross3(c.point - obj.pose.position, f_vec) + spin

            # semi-implicit Euler: velocities first, then positions
            obj.twist.linear += dt * f_obj / obj.mass
            obj.twist.angular += dt * self._ang_accel(obj, tau_obj)
            obj.pose.position += dt * obj.twist.linear
            obj.pose.quat = quat_normalize(quat_mul(
                quat_from_rotvec(dt * obj.twist.angular), obj.pose.quat))

            hand.wrist_twist.linear += dt * f_wrist / model.palm_mass
            hand.wrist_twist.angular += dt * tau_wrist / model.palm_inertia
            hand.wrist.position += dt * hand.wrist_twist.linear
            hand.wrist.quat = quat_normalize(quat_mul(
                quat_from_rotvec(dt * hand.wrist_twist.angular), hand.wrist.quat))

            hand.qdot += dt * tau_joint  # unit reflected inertia
            hand.q += dt * hand.qdot
            lo, hi = model.joint_limits[:, 0], model.joint_limits[:, 1]
            at_lo, at_hi = hand.q < lo, hand.q > hi
            hand.q = np.clip(hand.q, lo, hi)
            hand.qdot[at_lo & (hand.qdot < 0)] = 0.0
            hand.qdot[at_hi & (hand.qdot > 0)] = 0.0

        s.link_pos, s.link_rot = self._fk(hand)
        s.contacts = detect_contacts(model, s.link_pos, s.link_rot, obj,
                                     s.surface_height, s.surface_on,
                                     cfg.hand_surface_collision)
        axes_w = self._joint_axes(s.link_rot) if s.contacts else None
        iw_inv = self._world_inertia_inv(obj) if s.contacts else None
        n_po, n_ph = _manifold_counts(s.contacts)
        live = {c.key for c in s.contacts}
        for stale in [k for k in s.anchors if k not in live]:
            del s.anchors[stale]
        for c in s.contacts:
            f_vec, _ = self._contact_force(c, hand, obj, s.link_pos, axes_w,
                                           iw_inv, dict(s.anchors), dt, n_po, n_ph)
            c.force = float(np.sqrt(f_vec @ f_vec))
        s.step_count += 1

        if not (np.isfinite(obj.pose.position).all() and np.isfinite(obj.twist.linear).all()
                and np.isfinite(hand.wrist.position).all() and np.isfinite(hand.q).all()
                and np.isfinite(hand.qdot).all()):
            raise SimNanError(f"non-finite state after step {s.step_count}")
        return s

    def _joint_axes(self, link_rot: np.ndarray) -> np.ndarray:
        """World-frame revolute axes, one row per joint (q order)."""
        idx = self._joint_link_idx
        return np.einsum("kij,kj->ki", link_rot[idx], self._joint_axes_local)

    def _ang_accel(self, obj: ObjectBody, tau: np.ndarray) -> np.ndarray:
        if obj.shape.kind == "sphere":
            return tau / obj.inertia[0]
        r = quat_to_matrix(obj.pose.quat)
        i_world = r @ np.diag(obj.inertia) @ r.T
        w = obj.twist.angular
        return np.linalg.solve(i_world, tau - _cross3(w, i_world @ w))

    def _contact_force(self, c: ContactPoint, hand: HandState, obj: ObjectBody,
                       link_pos: np.ndarray, axes_w: np.ndarray, iw_inv: np.ndarray,
                       anchors: dict, dt: float, n_plane_obj: int,
                       n_plane_hand: int) -> tuple[np.ndarray, np.ndarray]:
        """Penalty force and torsional torque on the hand link (on the object
        for link=-1).

        The normal force is a spring-damper on penetration depth with two
        stabilizers: separation is inelastic (stored spring energy is not
        returned as restitution) and the one-substep impulse is capped so a
        contact can never fling itself apart. Friction combines a stick
        anchor spring (stiffness bounded by a quarter of m/dt^2, so together
        with the implicit damping the anchor dynamics are overdamped and
        cannot oscillate) with implicit viscous damping, clamped to the
        Coulomb cone; the anchor slides to the cone edge when the clamp
        binds. Stiffness and damping are shared across contact manifolds,
        with directional point effective masses taken through the world
        inverse inertia.
        """
        cfg = self.config
        model = self.model
        obj_side = c.link < 0 or c.body == "object"
        if c.link < 0:
            n_split = max(n_plane_obj, 1)
        elif c.body == "surface":
            n_split = max(n_plane_hand, 1)
        else:
            n_split = 1
        if c.link >= 0:
            v_pt = (hand.wrist_twist.linear
                    + _cross3(hand.wrist_twist.angular, c.point - hand.wrist.position))
            w_pt = hand.wrist_twist.angular.copy()
            for k in self._joint_chains[c.link]:
                j = model.joint_index[k]
                v_pt = v_pt + hand.qdot[j] * _cross3(axes_w[j], c.point - link_pos[k])
                w_pt = w_pt + hand.qdot[j] * axes_w[j]
            if obj_side:
                v_other = (obj.twist.linear
                           + _cross3(obj.twist.angular, c.point - obj.pose.position))
                w_rel = w_pt - obj.twist.angular
                mu = obj.friction
            else:
                v_other = np.zeros(3)
                w_rel = w_pt
                mu = cfg.friction
            v_rel = v_pt - v_other
        else:
            # object on the plane; force returned acts on the object
            v_rel = (obj.twist.linear
                     + _cross3(obj.twist.angular, c.point - obj.pose.position))
            w_rel = obj.twist.angular
            mu = obj.friction

        if obj_side:
            r = c.point - obj.pose.position

            def m_dir(d: np.ndarray) -> float:
                lever = _cross3(r, d)
                return 1.0 / (1.0 / obj.mass
                              + float(lever @ (iw_inv @ lever))) / n_split
        else:
            r = c.point - hand.wrist.position
            inv_i = 1.0 / model.palm_inertia

            def m_dir(d: np.ndarray) -> float:
                lever = _cross3(r, d)
                return 1.0 / (1.0 / model.palm_mass
                              + float(lever @ lever) * inv_i) / n_split

        k_n = cfg.k_normal / n_split
        c_n = cfg.c_normal / n_split
        closing = -float(v_rel @ c.normal)
        m_n = m_dir(c.normal)
        # damping uses the implicit solution c/(1 + c dt/m): stable at any
        # coefficient, saturating below the one-substep stopping impulse
        f_n = k_n * c.depth
        if closing > 0.0:
            f_n += _implicit_damping(c_n, m_n, dt) * closing
        else:
            # separating: full inelastic damping, so stored spring energy is
            # not returned as restitution
            f_n = max(f_n + (m_n / dt) * closing, 0.0)
        # overshoot cap: one substep's impulse may not drive the contact to
        # separate faster than the remaining penetration can close, which
        # kills the discrete spring's ringing at any stiffness
        f_n = min(f_n, (m_n / dt) * max(c.depth / dt + closing, 0.0))
        f_vec = f_n * c.normal

        # stick friction: anchor spring + implicit viscous damping, clamped
        # to the Coulomb cone. The spring stiffness is bounded by a quarter
        # of m/dt^2 so the anchor dynamics are overdamped and cannot ring;
        # static loads are then held at zero slip velocity.
        if c.body == "object":
            inv = obj.pose.inverse()
            anchor = anchors.get(c.key)
            if anchor is None:
                anchor = inv.transform_point(c.point)
                anchors[c.key] = anchor
            anchor_world = obj.pose.transform_point(anchor)
        else:
            anchor = anchors.get(c.key)
            if anchor is None:
                anchor = c.point.copy()
                anchors[c.key] = anchor
            anchor_world = anchor
        slip = c.point - anchor_world
        slip_t = slip - (slip @ c.normal) * c.normal
        st_mag = float(np.sqrt(slip_t @ slip_t))
        f_t = np.zeros(3)
        k_t = 0.0
        if st_mag > 1e-12:
            k_t = min(cfg.k_tangent / n_split,
                      0.25 * m_dir(slip_t / st_mag) / (dt * dt))
            f_t = -k_t * slip_t
        v_t = v_rel - (v_rel @ c.normal) * c.normal
        vt_mag = float(np.sqrt(v_t @ v_t))
        if vt_mag > 1e-12:
            t_hat = v_t / vt_mag
            c_eff = _implicit_damping(cfg.c_tangent / n_split, m_dir(t_hat), dt)
            f_t = f_t - c_eff * v_t
        ft_mag = float(np.sqrt(f_t @ f_t))
        limit = mu * f_n
        if ft_mag > limit:
            f_t *= limit / ft_mag
            if st_mag > 1e-12 and k_t > 0.0:
                # plastic slide: the anchor moves onto the friction cone edge
                allowed = slip_t * min(1.0, limit / (k_t * st_mag))
                new_world = c.point - allowed
                if c.body == "object":
                    anchors[c.key] = inv.transform_point(new_world)
                else:
                    anchors[c.key] = new_world

        # patch friction on relative rotation. Hand-object contacts damp the
        # normal (torsional) component only, so the hand can twist the object
        # and free spin dies out; plane contacts damp the full relative
        # rotation, which keeps objects from rolling away indefinitely.
        spin = np.zeros(3)
        if c.link >= 0 and c.body == "object":
            w_dir = (w_rel @ c.normal) * c.normal
        else:
            w_dir = w_rel
        w_mag = float(np.sqrt(w_dir @ w_dir))
        if w_mag > 1e-12:
            i_spin = (float(obj.inertia.min()) if obj_side
                      else model.palm_inertia) / n_split
            c_eff = _implicit_damping(cfg.c_spin, i_spin, dt)
            t_mag = min(c_eff * w_mag, mu * f_n * cfg.spin_patch_radius)
            spin = -(t_mag / w_mag) * w_dir
        return f_vec + f_t, spin

    @staticmethod
    def _world_inertia_inv(obj: ObjectBody) -> np.ndarray:
        if obj.shape.kind == "sphere":
            return np.eye(3) / obj.inertia[0]
        r = quat_to_matrix(obj.pose.quat)
        return (r / obj.inertia) @ r.T


def mechanical_energy(sim: Simulator, state: SimState) -> float:
    """Kinetic + gravitational + elastic contact energy (test instrumentation)."""
    model, cfg = sim.model, sim.config
    obj, hand = state.object, state.hand
    g = -cfg.gravity[2]
    r = quat_to_matrix(obj.pose.quat)
    i_world = r @ np.diag(obj.inertia) @ r.T
    e = 0.5 * obj.mass * float(obj.twist.linear @ obj.twist.linear)
    e += 0.5 * float(obj.twist.angular @ (i_world @ obj.twist.angular))
    e += obj.mass * g * obj.pose.position[2]
    e += 0.5 * model.palm_mass * float(hand.wrist_twist.linear @ hand.wrist_twist.linear)
    e += 0.5 * model.palm_inertia * float(hand.wrist_twist.angular @ hand.wrist_twist.angular)
    e += model.palm_mass * g * hand.wrist.position[2]
    e += 0.5 * float(hand.qdot @ hand.qdot)
    n_po, n_ph = _manifold_counts(state.contacts)
    for c in state.contacts:
        if c.link < 0:
            k = cfg.k_normal / max(n_po, 1)
        elif c.body == "surface":
            k = cfg.k_normal / max(n_ph, 1)
        else:
            k = cfg.k_normal
        e += 0.5 * k * c.depth * c.depth
    return e
