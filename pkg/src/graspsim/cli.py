"""Command line entry points: make-labels, train, rollout, eval, report.

Exit codes: 0 ok, 1 configuration error, 2 runtime failure. Every output
artifact embeds the resolved config and the package version.
"""

from __future__ import annotations

import argparse
import csv
import json
import os
import sys

import numpy as np

from . import __version__
from .config import ConfigError, RunConfig, config_echo, load_run_config
from .control import (EpisodePlan, HOLD_WINDOW_STEPS, RolloutRecord, baseline_ik,
                      baseline_pd, flat_rl_env, run_flat_eval, run_grasp_eval,
                      run_hierarchical)
from .envs import GraspEnv, MotionEnv
from .features import grasp_observation_schema
from .labelgen import make_labels
from .labels import load_labels, sample_surface, save_labels
from .metrics import build_report
from .ppo import load_checkpoint, save_checkpoint, train
from .se3 import Pose, quat_from_rotvec, quat_mul
from .sim import Simulator


def _echo_config(cfg: RunConfig, out_dir: str) -> None:
    os.makedirs(out_dir, exist_ok=True)
    with open(os.path.join(out_dir, "config.json"), "w") as f:
        json.dump(config_echo(cfg), f, indent=1, sort_keys=True)


def _prepared_labels(cfg: RunConfig, path: str, model):
    if not os.path.exists(path):
        raise ConfigError(f"label file not found: {path}")
    points = sample_surface(cfg.object_body().shape)
    return [lab.with_derived(model, points) for lab in load_labels(path)], points


def _grasp_env(cfg: RunConfig, sim: Simulator, label) -> GraspEnv:
    return GraspEnv(sim, label, cfg.object_body(), cfg.rewards, cfg.scales,
                    cfg.start_offset)


def cmd_make_labels(args) -> int:
    cfg = load_run_config(args.config)
    seed = cfg.seed if args.seed is None else args.seed
    model = cfg.hand_model()
    obj = cfg.object_body()
    labels, failures = make_labels(model, obj.shape, cfg.scene["surface_height"],
                                   args.count, seed,
                                   object_id=cfg.scene["object"].get("id", "object"))
    for msg in failures:
        print(f"warning: {msg}", file=sys.stderr)
    save_labels(labels, args.out)
    print(f"wrote {len(labels)} labels to {args.out}")
    return 0 if not failures else 2


def cmd_train(args) -> int:
    cfg = load_run_config(args.config, overrides=_ppo_overrides(args))
    model = cfg.hand_model()
    sim = Simulator(model, cfg.sim)
    labels, _ = _prepared_labels(cfg, args.labels, model)
    _echo_config(cfg, args.out_dir)

    policy_kind = args.policy
    episode_len = cfg.ppo.episode_len_grasp
    if policy_kind == "grasp":
        def factory(label, i):
            return _grasp_env(cfg, sim, label)
    elif policy_kind == "motion":
        grasp_nets, _, _ = load_checkpoint(args.checkpoint)
        episode_len = cfg.ppo.episode_len_full - cfg.control["grasp_steps"]

        def factory(label, i):
            return MotionEnv(_grasp_env(cfg, sim, label), grasp_nets,
                             cfg.goal_sampler, cfg.seed + i,
                             cfg.control["grasp_steps"], cfg.rewards)
    elif policy_kind == "flat":
        episode_len = cfg.ppo.episode_len_full

        def factory(label, i):
            return flat_rl_env(_grasp_env(cfg, sim, label), cfg.goal_sampler,
                               cfg.seed + i, cfg.control["grasp_steps"],
                               cfg.control["total_steps"])
    else:
        raise ConfigError(f"unknown policy kind {policy_kind!r}")

    results = train(factory, labels, cfg.ppo, mode=args.mode, seed=cfg.seed,
                    episode_len=episode_len)
    for key, res in results.items():
        ck = os.path.join(args.out_dir, f"{policy_kind}_{key}.ckpt")
        save_checkpoint(ck, res["nets"], cfg.ppo,
                        extra={"group": key, "policy": policy_kind,
                               "config": config_echo(cfg)})
        log_path = os.path.join(args.out_dir, f"train_log_{policy_kind}_{key}.csv")
        _write_log(log_path, res["log"])
        print(f"saved checkpoint {ck} ({len(res['log'])} epochs)")
    return 0


def _ppo_overrides(args) -> dict:
    over: dict = {}
    if getattr(args, "epochs", None) is not None:
        over.setdefault("ppo", {})["epochs"] = args.epochs
    if getattr(args, "seed", None) is not None:
        over["seed"] = args.seed
    return over


def _write_log(path: str, log: list[dict]) -> None:
    if not log:
        return
    with open(path, "w", newline="") as f:
        w = csv.DictWriter(f, fieldnames=list(log[0].keys()))
        w.writeheader()
        w.writerows(log)


def _sample_goals(cfg: RunConfig, label, count: int, salt: int) -> list[Pose]:
    rng = np.random.default_rng(np.random.SeedSequence((cfg.seed, 97, salt)).spawn(1)[0])
    return [cfg.goal_sampler.sample(label.pose_object, rng) for _ in range(count)]


def _parse_goal(text: str, reference: Pose) -> Pose:
    vals = [float(v) for v in text.replace(",", " ").split()]
    if len(vals) != 4:
        raise ConfigError("--goal expects 'x y z yaw'")
    quat = quat_mul(quat_from_rotvec(np.array([0.0, 0.0, vals[3]])), reference.quat)
    return Pose.from_parts(np.array(vals[:3]), quat)


def cmd_rollout(args) -> int:
    cfg = load_run_config(args.config)
    model = cfg.hand_model()
    sim = Simulator(model, cfg.sim)
    labels, _ = _prepared_labels(cfg, args.labels, model)
    if not 0 <= args.label_index < len(labels):
        raise ConfigError(f"label index {args.label_index} out of range")
    label = labels[args.label_index]
    nets, _, _ = load_checkpoint(args.checkpoint)
    goal = (_parse_goal(args.goal, label.pose_object) if args.goal
            else _sample_goals(cfg, label, 1, args.label_index)[0])
    if args.motion_checkpoint:
        m_nets, _, _ = load_checkpoint(args.motion_checkpoint)
        motion = ("policy", m_nets)
    else:
        motion = ("closed-loop", cfg.control["beta"])
    plan = EpisodePlan(label, goal, cfg.control["grasp_steps"],
                       cfg.control["total_steps"])
    rec = run_hierarchical(nets, motion, plan, _grasp_env(cfg, sim, label))
    rec.meta["config"] = config_echo(cfg)
    rec.meta["observation_schema"] = grasp_observation_schema(model)
    rec.save_jsonl(args.out)
    print(f"wrote {len(rec.steps)} steps to {args.out}")
    return 0


def cmd_eval(args) -> int:
    cfg = load_run_config(args.config)
    model = cfg.hand_model()
    sim = Simulator(model, cfg.sim)
    labels, points = _prepared_labels(cfg, args.labels, model)
    controller = args.controller or cfg.control["kind"]
    task = args.task or cfg.eval["task"]
    _echo_config(cfg, args.out_dir)

    records = []
    for li, label in enumerate(labels):
        if controller == "baseline-pd":
            records.append(baseline_pd(sim, label, cfg.object_body()))
        elif controller == "baseline-ik":
            rec, _, _ = baseline_ik(sim, label, points, cfg.object_body())
            records.append(rec)
        elif controller == "flat-rl":
            nets, _, _ = load_checkpoint(args.checkpoint)
            for goal in _sample_goals(cfg, label, cfg.eval["goals_per_label"], li):
                env = flat_rl_env(_grasp_env(cfg, sim, label), cfg.goal_sampler,
                                  cfg.seed + li, cfg.control["grasp_steps"],
                                  cfg.control["total_steps"])
                records.append(run_flat_eval(nets, env, goal))
        else:  # ours-pd / ours-learned
            nets, _, _ = load_checkpoint(args.checkpoint)
            if task == "grasp":
                records.append(run_grasp_eval(nets, _grasp_env(cfg, sim, label),
                                              cfg.control["grasp_steps"],
                                              HOLD_WINDOW_STEPS))
            else:
                if controller == "ours-learned":
                    m_nets, _, _ = load_checkpoint(args.motion_checkpoint)
                    motion = ("policy", m_nets)
                else:
                    motion = ("closed-loop", cfg.control["beta"])
                for goal in _sample_goals(cfg, label, cfg.eval["goals_per_label"], li):
                    plan = EpisodePlan(label, goal, cfg.control["grasp_steps"],
                                       cfg.control["total_steps"])
                    records.append(run_hierarchical(nets, motion, plan,
                                                    _grasp_env(cfg, sim, label)))

    schema = grasp_observation_schema(model)
    for i, rec in enumerate(records):
        rec.meta["config"] = config_echo(cfg)
        rec.meta["observation_schema"] = schema
        rec.save_jsonl(os.path.join(args.out_dir, f"rollout_{i:03d}.jsonl"))
    report = build_report(model, records, cfg.eval["mc_samples"], cfg.seed)
    report.to_csv(os.path.join(args.out_dir, "report.csv"))
    with open(os.path.join(args.out_dir, "report.txt"), "w") as f:
        f.write(report.to_text())
    print(report.to_text())
    return 0


def cmd_report(args) -> int:
    cfg = load_run_config(args.config)
    model = cfg.hand_model()
    records = [RolloutRecord.load_jsonl(p) for p in sorted(args.rollouts)]
    if not records:
        raise ConfigError("no rollout files given")
    os.makedirs(args.out_dir, exist_ok=True)
    report = build_report(model, records, cfg.eval["mc_samples"], cfg.seed)
    report.to_csv(os.path.join(args.out_dir, "report.csv"))
    with open(os.path.join(args.out_dir, "report.txt"), "w") as f:
        f.write(report.to_text())
    print(report.to_text())
    return 0


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="graspsim",
                                description="Desk-scale dynamic grasp synthesis toolkit")
    p.add_argument("--version", action="version", version=f"graspsim {__version__}")
    sub = p.add_subparsers(dest="command", required=True)

    mk = sub.add_parser("make-labels", help="generate heuristic grasp labels")
    mk.add_argument("--config", default=None)
    mk.add_argument("--count", type=int, required=True)
    mk.add_argument("--out", required=True)
    mk.add_argument("--seed", type=int, default=None)
    mk.set_defaults(func=cmd_make_labels)

    tr = sub.add_parser("train", help="train a policy with PPO")
    tr.add_argument("--config", default=None)
    tr.add_argument("--labels", required=True)
    tr.add_argument("--out-dir", required=True)
    tr.add_argument("--policy", choices=("grasp", "motion", "flat"), default="grasp")
    tr.add_argument("--mode", choices=("all-object", "per-object"), default="all-object")
    tr.add_argument("--checkpoint", default=None, help="grasp checkpoint for --policy motion")
    tr.add_argument("--epochs", type=int, default=None)
    tr.add_argument("--seed", type=int, default=None)
    tr.set_defaults(func=cmd_train)

    ro = sub.add_parser("rollout", help="run one full hierarchical episode")
    ro.add_argument("--config", default=None)
    ro.add_argument("--checkpoint", required=True)
    ro.add_argument("--motion-checkpoint", default=None)
    ro.add_argument("--labels", required=True)
    ro.add_argument("--label-index", type=int, default=0)
    ro.add_argument("--goal", default=None, help="'x y z yaw' target pose")
    ro.add_argument("--out", required=True)
    ro.set_defaults(func=cmd_rollout)

    ev = sub.add_parser("eval", help="evaluate a controller over all labels")
    ev.add_argument("--config", default=None)
    ev.add_argument("--labels", required=True)
    ev.add_argument("--out-dir", required=True)
    ev.add_argument("--controller", default=None,
                    choices=("ours-pd", "ours-learned", "baseline-pd",
                             "baseline-ik", "flat-rl"))
    ev.add_argument("--task", default=None, choices=("grasp", "full"))
    ev.add_argument("--checkpoint", default=None)
    ev.add_argument("--motion-checkpoint", default=None)
    ev.set_defaults(func=cmd_eval)

    rp = sub.add_parser("report", help="rebuild a metrics report from rollouts")
    rp.add_argument("--config", default=None)
    rp.add_argument("--rollouts", nargs="+")
    rp.add_argument("--out-dir", required=True)
    rp.set_defaults(func=cmd_report)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except ConfigError as e:
        print(f"config error: {e}", file=sys.stderr)
        return 1
    except Exception as e:  # runtime failure
        print(f"error: {type(e).__name__}: {e}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
