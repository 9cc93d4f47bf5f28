"""Training environments: grasping, learned motion synthesis, and the flat
(non-hierarchical) variant.

Each environment owns one simulator state and is safe to run isolated in a
rollout worker. Actions are in [-1, 1] and integrate PD setpoints: wrist
target deltas (position + axis-angle) and joint reference deltas, scaled by
the configured per-step ranges.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .features import (extract_grasp_features, extract_motion_features,
                       grasp_observation_dim, MOTION_OBSERVATION_DIM)
from .hand import HandModel, HandState, clamp_to_limits
from .labels import GraspLabel
from .ppo import AgentNets, act
from .rewards import RewardWeights, flat_reward, grasp_reward, motion_reward
from .se3 import Pose, Twist, compose, quat_from_rotvec, quat_mul, quat_rotate
from .sim import Action, ObjectBody, Simulator


@dataclass(frozen=True)
class ActionScales:
    pos_step: float = 0.01      # m per control step at full action
    rot_step: float = 0.05      # rad per control step
    joint_step: float = 0.05    # rad per control step
    wrist_leash: float = 0.10   # max setpoint distance from the current wrist


@dataclass(frozen=True)
class GoalSampler:
    """Uniform goal poses around a reference object pose."""

    box: tuple[float, float, float] = (0.2, 0.2, 0.2)
    yaw_range: float = np.pi / 2.0

    def sample(self, reference: Pose, rng: np.random.Generator) -> Pose:
        offset = rng.uniform(-1.0, 1.0, 3) * np.asarray(self.box)
        yaw = rng.uniform(-self.yaw_range, self.yaw_range)
        quat = quat_mul(quat_from_rotvec(np.array([0.0, 0.0, yaw])), reference.quat)
        return Pose.from_parts(reference.position + offset, quat)


class GraspEnv:
    """Grasping-phase environment driven by the label's goal features."""

    def __init__(self, sim: Simulator, label: GraspLabel, obj_template: ObjectBody,
                 weights: RewardWeights = RewardWeights(),
                 scales: ActionScales = ActionScales(),
                 start_offset: tuple[float, float, float] = (0.0, 0.0, 0.10),
                 start_q: np.ndarray | None = None):
        if label.contacts is None:
            raise ValueError("GraspEnv needs a label with derived contacts")
        self.sim = sim
        self.model = sim.model
        self.label = label
        self.obj_template = obj_template
        self.weights = weights
        self.scales = scales
        self.start_offset = np.asarray(start_offset, dtype=float)
        self.start_q = (np.zeros(self.model.n_joints) if start_q is None
                        else np.asarray(start_q, dtype=float))
        self.obs_dim = grasp_observation_dim(self.model)
        self.act_dim = 6 + self.model.n_joints
        self.state = None
        self._q_ref = None
        self._wrist_target = None
        self._prev_action = None
        self._last_obs = None

    def reset(self) -> np.ndarray:
        obj = self.obj_template.copy()
        obj.pose = self.label.pose_object.copy()
        obj.twist = Twist()
        wrist = Pose(self.label.pose_hand.position + self.start_offset,
                     self.label.pose_hand.quat.copy())
        hand = HandState(wrist, Twist(), self.start_q.copy(),
                         np.zeros(self.model.n_joints))
        self.state = self.sim.initial_state(obj, hand)
        self._q_ref = clamp_to_limits(self.model, self.start_q.copy())
        self._wrist_target = wrist.copy()
        self._prev_action = np.zeros(self.act_dim)
        self._last_obs = self._observe()
        return self._last_obs.vector()

    def apply_surface(self, mode: str) -> None:
        self.state = self.sim.set_surface(self.state, mode)

    def _observe(self):
        return extract_grasp_features(self.model, self.state, self.label,
                                      self.sim.config.surface_height)

    def _apply_setpoints(self, a: np.ndarray, wrist_override: Pose | None) -> Action:
        s = self.scales
        if wrist_override is not None:
            self._wrist_target = wrist_override.copy()
        else:
            pos = self._wrist_target.position + a[:3] * s.pos_step
            quat = quat_mul(quat_from_rotvec(a[3:6] * s.rot_step),
                            self._wrist_target.quat)
            # leash the setpoint so the integrator cannot wind up far away
            gap = pos - self.state.hand.wrist.position
            dist = float(np.linalg.norm(gap))
            if dist > s.wrist_leash:
                pos = self.state.hand.wrist.position + gap * (s.wrist_leash / dist)
            self._wrist_target = Pose.from_parts(pos, quat)
        self._q_ref = clamp_to_limits(
            self.model, self._q_ref + a[6:] * s.joint_step)
        return Action(self._q_ref.copy(), self._wrist_target.copy())

    def step(self, action: np.ndarray, wrist_override: Pose | None = None):
        a = np.clip(np.asarray(action, dtype=float), -1.0, 1.0)
        sim_action = self._apply_setpoints(a, wrist_override)
        self.state = self.sim.step(self.state, sim_action)
        obs = self._observe()
        reward = grasp_reward(self.model, obs, a - self._prev_action, self.weights)
        self._prev_action = a
        self._last_obs = obs
        return obs.vector(), reward, False, {"obs": obs}

    def success_proxy(self) -> float:
        """Fraction of desired contacts currently active (training telemetry)."""
        desired = self.label.contacts > 0
        if not desired.any():
            return 0.0
        return float((self._last_obs.forces[desired] > 0).mean())


class MotionEnv:
    """Motion-synthesis environment for the learned wrist policy.

    reset() replays the grasping phase with the frozen grasping policy, then
    removes the surface and samples a goal pose. During motion steps the
    grasping policy keeps driving the fingers while the motion action drives
    the wrist setpoint.
    """

    def __init__(self, grasp_env: GraspEnv, grasp_nets: AgentNets,
                 sampler: GoalSampler, seed: int, grasp_steps: int = 195,
                 weights: RewardWeights = RewardWeights()):
        self.env = grasp_env
        self.grasp_nets = grasp_nets
        self.sampler = sampler
        self.rng = np.random.default_rng(np.random.SeedSequence((seed, 17)).spawn(1)[0])
        self.grasp_steps = grasp_steps
        self.weights = weights
        self.obs_dim = MOTION_OBSERVATION_DIM
        self.act_dim = 6
        self.goal: Pose | None = None

    def _grasp_action(self) -> np.ndarray:
        obs = self.env._last_obs.vector()
        nobs = self.grasp_nets.obs_norm.normalize(obs)
        a, _ = act(self.grasp_nets.policy, nobs, stochastic=False)
        return a

    def reset(self) -> np.ndarray:
        self.env.reset()
        for _ in range(self.grasp_steps):
            self.env.step(self._grasp_action())
        self.env.apply_surface("removed")
        self.goal = self.sampler.sample(self.env.label.pose_object, self.rng)
        return extract_motion_features(self.env.state, self.goal).vector()

    def step(self, action: np.ndarray):
        a = np.clip(np.asarray(action, dtype=float), -1.0, 1.0)
        full = self._grasp_action()
        full[:6] = a
        self.env.step(full)
        obs = extract_motion_features(self.env.state, self.goal)
        return obs.vector(), motion_reward(obs, self.weights), False, {"obs": obs}

    def success_proxy(self) -> float:
        obs = extract_motion_features(self.env.state, self.goal)
        return float(np.linalg.norm(obs.g_ox) < 0.01)


class FlatEnv:
    """Non-hierarchical baseline: one policy sees both feature sets and the
    combined reward over the full-task episode."""

    def __init__(self, grasp_env: GraspEnv, sampler: GoalSampler, seed: int,
                 grasp_steps: int = 195, total_steps: int = 300,
                 weights: RewardWeights = RewardWeights()):
        self.env = grasp_env
        self.sampler = sampler
        self.rng = np.random.default_rng(np.random.SeedSequence((seed, 29)).spawn(1)[0])
        self.grasp_steps = grasp_steps
        self.total_steps = total_steps
        self.weights = weights
        self.obs_dim = grasp_observation_dim(self.env.model) + MOTION_OBSERVATION_DIM
        self.act_dim = 6 + self.env.model.n_joints
        self.goal: Pose | None = None
        self._t = 0

    def _vector(self) -> np.ndarray:
        phi = self.env._last_obs.vector()
        psi = extract_motion_features(self.env.state, self.goal).vector()
        return np.concatenate([phi, psi])

    def reset(self) -> np.ndarray:
        self.env.reset()
        self.goal = self.sampler.sample(self.env.label.pose_object, self.rng)
        self._t = 0
        return self._vector()

    def step(self, action: np.ndarray):
        a = np.clip(np.asarray(action, dtype=float), -1.0, 1.0)
        prev = self.env._prev_action
        self.env.step(a)
        self._t += 1
        if self._t == self.grasp_steps:
            self.env.apply_surface("removed")
        grasp_obs = self.env._last_obs
        motion_obs = extract_motion_features(self.env.state, self.goal)
        reward = flat_reward(self.env.model, grasp_obs, motion_obs,
                             a - prev, self.weights)
        return self._vector(), reward, False, {}

    def success_proxy(self) -> float:
        obs = extract_motion_features(self.env.state, self.goal)
        return float(np.linalg.norm(obs.g_ox) < 0.01)
