"""Feature extractors for the two policies.

The grasping features are built from object-relative geometry and expressed in
the wrist frame, which makes the goal components invariant to rigid transforms
applied jointly to the scene. The motion features stay in world coordinates
and carry the object's gap to its goal pose.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .hand import HandModel, forward_kinematics
from .labels import GraspLabel, contact_goal_vector
from .se3 import Pose, quat_conj, quat_mul, quat_rotate, quat_to_rotvec
from .sim import SimState, link_forces


@dataclass(slots=True)
class GoalFeatures:
    g_x: np.ndarray          # (L, 3) joint position gaps, wrist frame
    g_q_joints: np.ndarray   # (J,) target - current joint angles
    g_q_wrist: np.ndarray    # (3,) wrist orientation gap, axis-angle, wrist frame
    g_c: np.ndarray          # (2L,) desired contacts + active indicator


@dataclass(slots=True)
class GraspObservation:
    q: np.ndarray
    qdot: np.ndarray
    wrist_twist: np.ndarray    # (6,) wrist frame
    obj_pose: np.ndarray       # (7,) object pose in the wrist frame
    obj_twist: np.ndarray      # (6,) wrist frame
    x_z: float                 # object center height above the support surface
    forces: np.ndarray         # (L,) hand-object contact force magnitudes
    goals: GoalFeatures
    object_mass: float         # metadata for the reward, not part of the layout

    def vector(self) -> np.ndarray:
        g = self.goals
        return np.concatenate([
            self.q, self.qdot, self.wrist_twist, self.obj_pose, self.obj_twist,
            [self.x_z], self.forces, g.g_x.ravel(), g.g_q_joints, g.g_q_wrist,
            g.g_c.astype(float),
        ])


@dataclass(slots=True)
class MotionObservation:
    hand_pose: np.ndarray     # (7,) world
    hand_twist: np.ndarray    # (6,)
    obj_pose: np.ndarray      # (7,)
    obj_twist: np.ndarray     # (6,)
    g_ox: np.ndarray          # (3,) object position - goal position
    g_oq: np.ndarray          # (3,) axis-angle of R_o R_g^T

    def vector(self) -> np.ndarray:
        return np.concatenate([self.hand_pose, self.hand_twist, self.obj_pose,
                               self.obj_twist, self.g_ox, self.g_oq])


def grasp_observation_schema(model: HandModel) -> list[tuple[str, int]]:
    """Ordered (name, length) layout of the flattened grasp observation."""
    j, l = model.n_joints, model.n_links
    return [
        ("q", j), ("qdot", j), ("wrist_twist", 6), ("obj_pose", 7),
        ("obj_twist", 6), ("x_z", 1), ("forces", l), ("g_x", 3 * l),
        ("g_q_joints", j), ("g_q_wrist", 3), ("g_c", 2 * l),
    ]


def grasp_observation_dim(model: HandModel) -> int:
    return sum(n for _, n in grasp_observation_schema(model))


MOTION_OBSERVATION_DIM = 32


def _object_relative_positions(model: HandModel, hand_pose: Pose, q: np.ndarray,
                               obj_pose: Pose) -> np.ndarray:
    _, x = forward_kinematics(model, hand_pose, q)
    inv = obj_pose.inverse()
    return quat_rotate(inv.quat, x) + inv.position


def relative_target_positions(model: HandModel, state: SimState,
                              label: GraspLabel) -> np.ndarray:
    """Joint position gaps g_x = x_bar - x (object frame), rotated into the
    current wrist frame."""
    if label.joint_targets is not None:
        x_target = label.joint_targets
    else:
        x_target = _object_relative_positions(model, label.pose_hand,
                                              label.q_hand, label.pose_object)
    x_now = _object_relative_positions(model, state.hand.wrist, state.hand.q,
                                       state.object.pose)
    gap = x_target - x_now
    # object frame -> world -> wrist frame
    q_rel = quat_mul(quat_conj(state.hand.wrist.quat), state.object.pose.quat)
    return quat_rotate(q_rel, gap)


def relative_target_rotations(model: HandModel, state: SimState,
                              label: GraspLabel) -> tuple[np.ndarray, np.ndarray]:
    """Per-joint angle gaps (target - current) plus the wrist orientation gap.

    The wrist gap is the rotation vector taking the object-relative current
    wrist orientation to the object-relative target, expressed in the wrist
    frame.
    """
    dq_joints = label.q_hand - state.hand.q
    q_cur = quat_mul(quat_conj(state.object.pose.quat), state.hand.wrist.quat)
    q_tar = quat_mul(quat_conj(label.pose_object.quat), label.pose_hand.quat)
    w_obj = quat_to_rotvec(quat_mul(q_tar, quat_conj(q_cur)))
    q_rel = quat_mul(quat_conj(state.hand.wrist.quat), state.object.pose.quat)
    return dq_joints, quat_rotate(q_rel, w_obj)


def extract_grasp_features(model: HandModel, state: SimState, label: GraspLabel,
                           surface_height: float) -> GraspObservation:
    """Assemble the grasping policy's observation phi(s, D)."""
    hand, obj = state.hand, state.object
    wq_inv = quat_conj(hand.wrist.quat)
    wrist_twist = np.concatenate([quat_rotate(wq_inv, hand.wrist_twist.linear),
                                  quat_rotate(wq_inv, hand.wrist_twist.angular)])
    rel_pos = quat_rotate(wq_inv, obj.pose.position - hand.wrist.position)
    rel_quat = quat_mul(wq_inv, obj.pose.quat)
    if rel_quat[0] < 0.0:
        rel_quat = -rel_quat
    obj_twist = np.concatenate([quat_rotate(wq_inv, obj.twist.linear),
                                quat_rotate(wq_inv, obj.twist.angular)])
    if label.contacts is None:
        raise ValueError("label needs derived contacts; call with_derived() first")
    dq_joints, dq_wrist = relative_target_rotations(model, state, label)
    goals = GoalFeatures(
        g_x=relative_target_positions(model, state, label),
        g_q_joints=dq_joints,
        g_q_wrist=dq_wrist,
        g_c=contact_goal_vector(label.contacts),
    )
    return GraspObservation(
        q=hand.q.copy(),
        qdot=hand.qdot.copy(),
        wrist_twist=wrist_twist,
        obj_pose=np.concatenate([rel_pos, rel_quat]),
        obj_twist=obj_twist,
        x_z=float(obj.pose.position[2] - surface_height),
        forces=link_forces(model, state.contacts),
        goals=goals,
        object_mass=obj.mass,
    )


def extract_motion_features(state: SimState, goal: Pose) -> MotionObservation:
    """Assemble the motion module's observation psi(s, T_g)."""
    hand, obj = state.hand, state.object
    g_ox = obj.pose.position - goal.position
    g_oq = quat_to_rotvec(quat_mul(obj.pose.quat, quat_conj(goal.quat)))
    return MotionObservation(
        hand_pose=hand.wrist.as_array(),
        hand_twist=np.concatenate([hand.wrist_twist.linear, hand.wrist_twist.angular]),
        obj_pose=obj.pose.as_array(),
        obj_twist=np.concatenate([obj.twist.linear, obj.twist.angular]),
        g_ox=g_ox,
        g_oq=g_oq,
    )
