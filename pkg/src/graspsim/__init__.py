"""Desk-scale dynamic grasp synthesis toolkit: a deterministic articulated-hand
physics micro-simulator, grasp-label goal features, PPO training, hierarchical
grasp-then-move control with baselines, and the evaluation metric suite."""

__version__ = "0.1.0"

from .se3 import Pose, Twist, compose, relative_to, geodesic_distance, scaled_pose_step
from .hand import HandModel, HandState, default_desk_hand, forward_kinematics
from .sim import Action, ObjectBody, Shape, SimConfig, Simulator
from .labels import GraspLabel, SurfacePointSet, derive_target_contacts, sample_surface
from .rewards import RewardWeights, grasp_reward, motion_reward, flat_reward
from .ppo import PpoConfig, gae_advantages, train

__all__ = [
    "Pose", "Twist", "compose", "relative_to", "geodesic_distance",
    "scaled_pose_step", "HandModel", "HandState", "default_desk_hand",
    "forward_kinematics", "Action", "ObjectBody", "Shape", "SimConfig",
    "Simulator", "GraspLabel", "SurfacePointSet", "derive_target_contacts",
    "sample_surface", "RewardWeights", "grasp_reward", "motion_reward",
    "flat_reward", "PpoConfig", "gae_advantages", "train", "__version__",
]
