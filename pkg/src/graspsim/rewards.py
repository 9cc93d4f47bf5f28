"""Reward functions for grasping, motion synthesis and the flat baseline.

All weights default to the published values and can be overridden from the
training config.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .features import GraspObservation, MotionObservation
from .hand import HandModel


@dataclass(frozen=True)
class RewardWeights:
    w_x: float = -2.0
    w_q: float = -0.1
    w_c: float = 1.0
    w_reg_h: float = 0.5
    w_reg_o: float = 1.0
    w_x_j: float = 1.0
    w_x_tip: float = 4.0
    contact_rate: float = 5.0    # lambda: force saturation rate in the contact term
    a_x: float = -2.0
    a_q: float = -0.25


def grasp_reward(model: HandModel, obs: GraspObservation, action_rate: np.ndarray,
                 w: RewardWeights = RewardWeights()) -> float:
    """Dense grasping reward.

    r = w_x r_x + w_q r_q + w_c r_c + r_reg with a fingertip-weighted joint
    position term, a mean angular gap term, a bounded saturating contact term
    over the desired-contact set, and regularizers on the action rate and the
    object's linear momentum.
    """
    g = obs.goals
    coeff = np.full(model.n_links, w.w_x_j)
    coeff[list(model.fingertip_links)] = w.w_x_tip
    r_x = float(coeff @ np.linalg.norm(g.g_x, axis=1))
    r_q = float(np.mean(np.abs(np.concatenate([g.g_q_joints, g.g_q_wrist]))))
    desired = g.g_c[: model.n_links] > 0
    if desired.any():
        f = obs.forces[desired]
        r_c = float(np.mean(1.0 - np.exp(-w.contact_rate * f)))
    else:
        r_c = 0.0
    action_rate = np.asarray(action_rate, dtype=float)
    v_obj = obs.obj_twist[:3]
    r_reg = -(w.w_reg_h * float(action_rate @ action_rate)
              + w.w_reg_o * obs.object_mass * float(v_obj @ v_obj))
    return w.w_x * r_x + w.w_q * r_q + w.w_c * r_c + r_reg


def motion_reward(obs: MotionObservation, w: RewardWeights = RewardWeights()) -> float:
    """r_m = a_x * position error + a_q * geodesic error; zero only at the goal."""
    e_pos = float(np.linalg.norm(obs.g_ox))
    e_geo = float(np.linalg.norm(obs.g_oq))
    return w.a_x * e_pos + w.a_q * e_geo


def flat_reward(model: HandModel, grasp_obs: GraspObservation,
                motion_obs: MotionObservation, action_rate: np.ndarray,
                w: RewardWeights = RewardWeights()) -> float:
    """Combined reward for the non-hierarchical baseline."""
    return grasp_reward(model, grasp_obs, action_rate, w) + motion_reward(motion_obs, w)
