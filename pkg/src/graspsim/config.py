"""Run configuration: one JSON file with sections mirroring the modules.

Every section is optional; omitted keys fall back to the documented defaults.
Unknown keys are rejected with the offending path so typos fail fast, and the
resolved config is echoed verbatim into every output artifact.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field, fields, asdict

import numpy as np

from .envs import ActionScales, GoalSampler
from .hand import HandModel, default_desk_hand, load_hand_config
from .ppo import PpoConfig
from .rewards import RewardWeights
from .sim import ObjectBody, Shape, SimConfig


class ConfigError(ValueError):
    """Invalid run configuration; message names the offending field."""


_SECTIONS = ("seed", "paths", "scene", "sim", "ppo", "rewards", "control",
             "env", "goal_sampler", "eval")


@dataclass
class RunConfig:
    seed: int
    hand_path: str | None
    scene: dict
    sim: SimConfig
    ppo: PpoConfig
    rewards: RewardWeights
    control: dict
    scales: ActionScales
    start_offset: tuple
    goal_sampler: GoalSampler
    eval: dict
    raw: dict = field(repr=False, default_factory=dict)

    def hand_model(self) -> HandModel:
        if self.hand_path:
            return load_hand_config(self.hand_path)
        return default_desk_hand()

    def object_body(self) -> ObjectBody:
        obj = self.scene["object"]
        shape = Shape(obj["kind"], radius=obj.get("radius", 0.0),
                      half_extents=(tuple(obj["half_extents"])
                                    if obj.get("half_extents") else None),
                      half_height=obj.get("half_height", 0.0))
        return ObjectBody(shape, obj["mass"], obj.get("friction", 0.8))


def _build(cls, section: dict, where: str):
    allowed = {f.name for f in fields(cls)}
    bad = set(section) - allowed
    if bad:
        raise ConfigError(f"{where}: unknown key(s) {sorted(bad)}")
    try:
        return cls(**section)
    except (TypeError, ValueError) as e:
        raise ConfigError(f"{where}: {e}") from e


def load_run_config(path: str | None = None, overrides: dict | None = None) -> RunConfig:
    raw: dict = {}
    if path is not None:
        try:
            with open(path) as f:
                raw = json.load(f)
        except FileNotFoundError:
            raise ConfigError(f"config file not found: {path}")
        except json.JSONDecodeError as e:
            raise ConfigError(f"{path} is not valid JSON: {e}")
    if overrides:
        for k, v in overrides.items():
            if isinstance(v, dict):
                raw.setdefault(k, {}).update(v)
            else:
                raw[k] = v
    bad = set(raw) - set(_SECTIONS)
    if bad:
        raise ConfigError(f"unknown section(s) {sorted(bad)}")

    scene = dict(raw.get("scene", {}))
    scene.setdefault("object", {"kind": "sphere", "radius": 0.04,
                                "mass": 0.1, "friction": 0.8})
    scene.setdefault("surface_height", 0.0)
    scene.setdefault("hand_surface_collision", True)

    sim_section = dict(raw.get("sim", {}))
    sim_section.setdefault("surface_height", scene["surface_height"])
    sim_section.setdefault("hand_surface_collision", scene["hand_surface_collision"])
    if "gravity" in sim_section:
        sim_section["gravity"] = tuple(sim_section["gravity"])

    env_section = dict(raw.get("env", {}))
    start_offset = tuple(env_section.pop("start_offset", (0.0, 0.0, 0.10)))

    goal_section = dict(raw.get("goal_sampler", {}))
    if "box" in goal_section:
        goal_section["box"] = tuple(goal_section["box"])

    control = dict(raw.get("control", {}))
    control.setdefault("kind", "ours-pd")
    control.setdefault("beta", 0.05)
    control.setdefault("grasp_steps", 195)
    control.setdefault("total_steps", 300)

    eval_section = dict(raw.get("eval", {}))
    eval_section.setdefault("task", "grasp")
    eval_section.setdefault("goals_per_label", 1)
    eval_section.setdefault("mc_samples", 100_000)

    cfg = RunConfig(
        seed=int(raw.get("seed", 0)),
        hand_path=raw.get("paths", {}).get("hand"),
        scene=scene,
        sim=_build(SimConfig, sim_section, "sim"),
        ppo=_build(PpoConfig, dict(raw.get("ppo", {})), "ppo"),
        rewards=_build(RewardWeights, dict(raw.get("rewards", {})), "rewards"),
        control=control,
        scales=_build(ActionScales, env_section, "env"),
        start_offset=start_offset,
        goal_sampler=_build(GoalSampler, goal_section, "goal_sampler"),
        eval=eval_section,
        raw=raw,
    )
    if control["kind"] not in ("ours-pd", "ours-learned", "baseline-pd",
                               "baseline-ik", "flat-rl"):
        raise ConfigError(f"control.kind: unknown controller {control['kind']!r}")
    return cfg


def config_echo(cfg: RunConfig) -> dict:
    """Fully resolved config as a JSON-ready dict for artifact embedding."""
    from . import __version__
    return {
        "version": __version__,
        "seed": cfg.seed,
        "hand": cfg.hand_path or "default_desk_hand",
        "scene": cfg.scene,
        "sim": asdict(cfg.sim),
        "ppo": asdict(cfg.ppo),
        "rewards": asdict(cfg.rewards),
        "control": cfg.control,
        "env": {**asdict(cfg.scales), "start_offset": list(cfg.start_offset)},
        "goal_sampler": {"box": list(cfg.goal_sampler.box),
                         "yaw_range": cfg.goal_sampler.yaw_range},
        "eval": cfg.eval,
    }
