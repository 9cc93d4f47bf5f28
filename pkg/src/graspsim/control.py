"""Hierarchical grasp-then-move controller plus the PD, IK and flat baselines.

An episode is described by an EpisodePlan: phase boundaries, the grasp label,
the object goal pose and the surface schedule. During the motion phase the
wrist's 6 DoF are driven either by the closed-loop scheme (the object's pose
gap, rigidly transported to the wrist and applied at rate beta) or by a
learned motion policy, while the grasping policy keeps driving the fingers.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np

from .envs import GraspEnv
from .hand import HandModel, HandState, clamp_to_limits, forward_kinematics
from .labels import GraspLabel, SurfacePointSet, label_joint_targets
from .ppo import AgentNets, act
from .se3 import (Pose, Twist, compose, pose_gap, quat_from_rotvec, quat_mul,
                  quat_rotate, scaled_pose_step)
from .sim import Action, ObjectBody, SimState, Simulator, link_forces

DEFAULT_BETA = 0.05
GRASP_STEPS = 195
TOTAL_STEPS = 300
HOLD_WINDOW_STEPS = 173  # 5 s at 13 x 2.22 ms per control step

CONTROLLER_KINDS = ("ours-pd", "ours-learned", "baseline-pd", "baseline-ik", "flat-rl")


@dataclass(frozen=True)
class EpisodePlan:
    label: GraspLabel
    goal: Pose | None = None
    grasp_steps: int = GRASP_STEPS
    total_steps: int = TOTAL_STEPS
    # surface modes applied just before the given step index
    surface_schedule: tuple[tuple[int, str], ...] = ((GRASP_STEPS, "removed"),)

    def __post_init__(self):
        if self.total_steps > self.grasp_steps and self.grasp_steps <= 0:
            raise ValueError("grasp phase must be non-empty")
        if self.total_steps < self.grasp_steps:
            raise ValueError("grasp phase cannot exceed the full episode")


@dataclass
class RolloutRecord:
    """Per-step trajectory log plus metadata; serializes to JSONL."""

    meta: dict
    steps: list = field(default_factory=list)

    def log(self, t: int, phase: str, state: SimState, model: HandModel,
            reward: float) -> None:
        forces = link_forces(model, state.contacts)
        self.steps.append({
            "t": t,
            "phase": phase,
            "hand_pose": state.hand.wrist.as_array().tolist(),
            "q": state.hand.q.tolist(),
            "obj_pose": state.object.pose.as_array().tolist(),
            "contacts": [[c.link, c.body, round(c.force, 9)] for c in state.contacts],
            "forces": forces.tolist(),
            "reward": reward,
            "surface_on": state.surface_on,
            "surface_height": state.surface_height,
        })

    def save_jsonl(self, path: str) -> None:
        with open(path, "w") as f:
            f.write(json.dumps({"type": "header", **self.meta}, sort_keys=True) + "\n")
            for step in self.steps:
                f.write(json.dumps({"type": "step", **step}, sort_keys=True) + "\n")

    @staticmethod
    def load_jsonl(path: str) -> "RolloutRecord":
        with open(path) as f:
            header = json.loads(f.readline())
        if header.get("type") != "header":
            raise ValueError(f"{path}: first line is not a rollout header")
        header.pop("type")
        rec = RolloutRecord(meta=header)
        with open(path) as f:
            f.readline()
            for line in f:
                row = json.loads(line)
                row.pop("type")
                rec.steps.append(row)
        return rec


def motion_step_closed_loop(state: SimState, goal: Pose, beta: float,
                            grasp_xform: Pose | None = None,
                            from_pose: Pose | None = None) -> Pose:
    """Wrist target for one motion step.

    The object's remaining pose gap to the goal is transported to the wrist
    under the rigid-grasp assumption (grasp_xform = object-to-hand transform;
    when omitted it is read off the current state) and applied at rate beta.
    Recomputed every control step.

    from_pose selects the pose the step starts from. Passing the controller's
    previous commanded pose (rather than the measured wrist pose) lets the
    scheme converge despite steady PD tracking offsets such as gravity droop;
    by default the measured pose is used.

    With grasp_xform given, the hand target is the pose placing the object at
    the goal under that fixed grasp transform. Without it, the object's
    current pose error is transported rigidly onto the measured wrist pose,
    which also corrects in-grasp slip as it accumulates.
    """
    hand_pose = from_pose if from_pose is not None else state.hand.wrist
    if grasp_xform is not None:
        hand_target = compose(goal, grasp_xform)
    else:
        correction = compose(goal, state.object.pose.inverse())
        hand_target = compose(correction, state.hand.wrist)
    return scaled_pose_step(hand_pose, pose_gap(hand_target, hand_pose), beta)


def kinematic_motion_rollout(start_obj: Pose, goal: Pose, beta: float,
                             steps: int, grasp_xform: Pose = Pose()
                             ) -> list[Pose]:
    """Physics-off check of the closed-loop scheme: the object is welded to
    the wrist via grasp_xform and teleports with it. Returns the object pose
    after each step."""
    obj = start_obj.copy()
    hand = compose(obj, grasp_xform)
    out = []
    for _ in range(steps):
        hand_target = compose(goal, grasp_xform)
        hand = scaled_pose_step(hand, pose_gap(hand_target, hand), beta)
        obj = compose(hand, grasp_xform.inverse())
        out.append(obj.copy())
    return out


def _policy_action(nets: AgentNets, obs_vec: np.ndarray) -> np.ndarray:
    a, _ = act(nets.policy, nets.obs_norm.normalize(obs_vec), stochastic=False)
    return a


def object_meta(obj: ObjectBody) -> dict:
    shape = obj.shape
    return {
        "kind": shape.kind,
        "radius": shape.radius,
        "half_extents": None if shape.half_extents is None else list(shape.half_extents),
        "half_height": shape.half_height,
        "mass": obj.mass,
        "friction": obj.friction,
    }


def run_hierarchical(grasp_nets: AgentNets, motion_module, plan: EpisodePlan,
                     env: GraspEnv) -> RolloutRecord:
    """Full episode: grasping phase under the grasping policy, then the motion
    module takes over the wrist while the policy keeps closing the fingers.

    motion_module is ("closed-loop", beta) or ("policy", AgentNets). A plan
    with total_steps == grasp_steps runs a pure grasping episode.
    """
    schedule = dict(plan.surface_schedule)
    meta = {
        "controller": "ours-learned" if motion_module[0] == "policy" else "ours-pd",
        "grasp_steps": plan.grasp_steps,
        "total_steps": plan.total_steps,
        "goal": None if plan.goal is None else plan.goal.as_array().tolist(),
        "object_id": plan.label.object_id,
        "eval_window_start": plan.grasp_steps,
        "action_dt": env.sim.config.action_dt,
        "object": object_meta(env.obj_template),
        "desired_contacts": plan.label.contacts.tolist(),
    }
    rec = RolloutRecord(meta=meta)
    obs_vec = env.reset()
    grasp_xform: Pose | None = None
    wrist_cmd: Pose | None = None
    for t in range(plan.total_steps):
        if t in schedule:
            env.apply_surface(schedule[t])
        if t == plan.grasp_steps:
            grasp_xform = compose(env.state.object.pose.inverse(),
                                  env.state.hand.wrist)
            wrist_cmd = env.state.hand.wrist.copy()
        a = _policy_action(grasp_nets, obs_vec)
        if t < plan.grasp_steps:
            obs_vec, reward, _, _ = env.step(a)
            phase = "grasp"
        else:
            if motion_module[0] == "closed-loop":
                # instantaneous transport (grasp_xform=None) keeps the loop
                # closed in the object, correcting droop and in-grasp slip
                wrist_cmd = motion_step_closed_loop(env.state, plan.goal,
                                                    motion_module[1],
                                                    None, wrist_cmd)
                obs_vec, reward, _, _ = env.step(a, wrist_override=wrist_cmd)
            else:
                from .features import extract_motion_features
                m_obs = extract_motion_features(env.state, plan.goal).vector()
                m_nets = motion_module[1]
                a[:6] = _policy_action(m_nets, m_obs)
                obs_vec, reward, _, _ = env.step(a)
            phase = "motion"
        rec.log(t, phase, env.state, env.model, reward)
    return rec


def run_grasp_eval(grasp_nets: AgentNets, env: GraspEnv,
                   grasp_steps: int = GRASP_STEPS,
                   hold_steps: int = HOLD_WINDOW_STEPS) -> RolloutRecord:
    """Grasping evaluation: policy-driven grasp phase, then the surface is
    removed and the policy holds for the success window."""
    meta = {
        "controller": "ours",
        "grasp_steps": grasp_steps,
        "total_steps": grasp_steps + hold_steps,
        "goal": None,
        "object_id": env.label.object_id,
        "eval_window_start": grasp_steps,
        "action_dt": env.sim.config.action_dt,
        "object": object_meta(env.obj_template),
        "desired_contacts": env.label.contacts.tolist(),
    }
    rec = RolloutRecord(meta=meta)
    obs_vec = env.reset()
    for t in range(grasp_steps + hold_steps):
        if t == grasp_steps:
            env.apply_surface("removed")
        a = _policy_action(grasp_nets, obs_vec)
        obs_vec, reward, _, _ = env.step(a)
        rec.log(t, "grasp" if t < grasp_steps else "hold", env.state, env.model, reward)
    return rec


def baseline_pd(sim: Simulator, label: GraspLabel, obj_template: ObjectBody,
                steps: int = HOLD_WINDOW_STEPS, controller: str = "baseline-pd"
                ) -> RolloutRecord:
    """Hand teleported to the label, PD holds it; starts without a table."""
    model = sim.model
    q0 = clamp_to_limits(model, label.q_hand)
    obj = obj_template.copy()
    obj.pose = label.pose_object.copy()
    obj.twist = Twist()
    hand = HandState(label.pose_hand.copy(), Twist(), q0.copy(),
                     np.zeros(model.n_joints))
    state = sim.initial_state(obj, hand)
    state = sim.set_surface(state, "removed")
    action = Action(q0.copy(), label.pose_hand.copy())
    meta = {
        "controller": controller,
        "grasp_steps": 0,
        "total_steps": steps,
        "goal": None,
        "object_id": label.object_id,
        "eval_window_start": 0,
        "action_dt": sim.config.action_dt,
        "object": object_meta(obj_template),
        "desired_contacts": None if label.contacts is None else label.contacts.tolist(),
    }
    rec = RolloutRecord(meta=meta)
    for t in range(steps):
        state = sim.step(state, action)
        rec.log(t, "hold", state, model, 0.0)
    return rec


CONTACT_KEYPOINT_WEIGHT = 5.0  # sqrt of the least-squares weight ratio


def ik_correct_label(model: HandModel, label: GraspLabel,
                     object_points: SurfacePointSet, iters: int = 100,
                     damping: float = 1e-3) -> tuple[GraspLabel, dict]:
    """Snap desired-contact keypoints onto the object surface and re-fit the
    label pose with damped-least-squares IK over (wrist 6DoF + joints).

    Keypoints of links without a desired contact keep their label positions
    as (lower-weight) targets, so the corrected keypoints dominate the fit.
    Reports divergence and falls back to the original label.
    """
    if label.contacts is None:
        raise ValueError("label needs derived contacts")
    targets = label_joint_targets(model, label)  # object frame
    moved = np.zeros(len(targets), dtype=bool)
    pts = object_points.points
    poses, _ = forward_kinematics(model, label.pose_hand, label.q_hand)
    inv_obj = label.pose_object.inverse()
    for i, flag in enumerate(label.contacts):
        if not flag:
            continue
        # snap each contact link so its collider surface meets the object
        # surface: the keypoint moves by the collider's residual gap vector
        link = model.links[i]
        cc = inv_obj.transform_point(poses[i].transform_point(link.collider_center))
        d = np.linalg.norm(pts - cc, axis=1)
        s = pts[int(np.argmin(d))]
        gap = s - cc
        dist = float(np.linalg.norm(gap))
        if dist > 1e-12:
            targets[i] = targets[i] + gap * (1.0 - link.collider_radius / dist)
        moved[i] = True
    weights = np.where(moved, CONTACT_KEYPOINT_WEIGHT, 1.0)
    w_rows = np.repeat(weights, 3)[:, None]

    # optimize in the object frame
    rel0 = compose(label.pose_object.inverse(), label.pose_hand)
    t_h = rel0.position.copy()
    q_h = rel0.quat.copy()
    q = label.q_hand.copy()
    lam2 = damping * damping
    n_dof = 6 + model.n_joints

    def residual(t, qq, ang):
        _, x = forward_kinematics(model, Pose.from_parts(t, qq), ang)
        return (w_rows[:, 0] * (targets - x).ravel()), x

    r0, _ = residual(t_h, q_h, q)
    initial_err = float(np.linalg.norm(r0))
    for _ in range(iters):
        wrist = Pose.from_parts(t_h, q_h)
        poses, x = forward_kinematics(model, wrist, q)
        jac = np.zeros((3 * len(x), n_dof))
        for i in range(len(x)):
            jac[3 * i:3 * i + 3, 0:3] = np.eye(3)
            jac[3 * i:3 * i + 3, 3:6] = _neg_hat(x[i] - t_h)
            k = i
            while k >= 0:
                link = model.links[k]
                if link.axis is not None:
                    axis_w = quat_rotate(poses[k].quat, link.axis)
                    col = 6 + model.joint_index[k]
                    jac[3 * i:3 * i + 3, col] = np.cross(axis_w, x[i] - poses[k].position)
                k = link.parent
        jac = jac * w_rows
        r = w_rows[:, 0] * (targets - x).ravel()
        delta = np.linalg.solve(jac.T @ jac + lam2 * np.eye(n_dof), jac.T @ r)
        t_h = t_h + delta[0:3]
        q_h = quat_mul(quat_from_rotvec(delta[3:6]), q_h)
        q_h = q_h / np.linalg.norm(q_h)
        q = clamp_to_limits(model, q + delta[6:])

    r_final, _ = residual(t_h, q_h, q)
    final_err = float(np.linalg.norm(r_final))
    info = {"initial_error": initial_err, "final_error": final_err,
            "moved_links": int(moved.sum()), "diverged": False}
    if not np.isfinite(final_err) or final_err > max(initial_err, 1e-12):
        info["diverged"] = True
        return label.copy(), info

    corrected = label.copy()
    corrected.pose_hand = compose(label.pose_object, Pose.from_parts(t_h, q_h))
    corrected.q_hand = q
    return corrected, info


def _neg_hat(v: np.ndarray) -> np.ndarray:
    # d/dw [exp(w) p] at w=0 is -hat(p)
    return np.array([[0.0, v[2], -v[1]],
                     [-v[2], 0.0, v[0]],
                     [v[1], -v[0], 0.0]])


def baseline_ik(sim: Simulator, label: GraspLabel, object_points: SurfacePointSet,
                obj_template: ObjectBody, steps: int = HOLD_WINDOW_STEPS
                ) -> tuple[RolloutRecord, GraspLabel, dict]:
    """IK-corrected variant of the PD baseline."""
    corrected, info = ik_correct_label(sim.model, label, object_points)
    rec = baseline_pd(sim, corrected, obj_template, steps, controller="baseline-ik")
    rec.meta["ik"] = info
    return rec, corrected, info


def flat_rl_env(grasp_env: GraspEnv, sampler, seed: int,
                grasp_steps: int = GRASP_STEPS, total_steps: int = TOTAL_STEPS):
    """Environment for the flat baseline (concatenated features, combined
    reward, single policy for the full task)."""
    from .envs import FlatEnv
    return FlatEnv(grasp_env, sampler, seed, grasp_steps, total_steps)


def run_flat_eval(nets: AgentNets, flat_env, goal: Pose | None = None) -> RolloutRecord:
    """Full-task episode under the flat policy."""
    obs_vec = flat_env.reset()
    if goal is not None:
        flat_env.goal = goal.copy()
        obs_vec = flat_env._vector()
    env = flat_env.env
    meta = {
        "controller": "flat-rl",
        "grasp_steps": flat_env.grasp_steps,
        "total_steps": flat_env.total_steps,
        "goal": flat_env.goal.as_array().tolist(),
        "object_id": env.label.object_id,
        "eval_window_start": flat_env.grasp_steps,
        "action_dt": env.sim.config.action_dt,
        "object": object_meta(env.obj_template),
        "desired_contacts": env.label.contacts.tolist(),
    }
    rec = RolloutRecord(meta=meta)
    for t in range(flat_env.total_steps):
        a = _policy_action(nets, obs_vec)
        obs_vec, reward, _, _ = flat_env.step(a)
        rec.log(t, "grasp" if t < flat_env.grasp_steps else "motion",
                env.state, env.model, reward)
    return rec
