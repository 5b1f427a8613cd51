"""Synthetic closed-loop driving world."""

from .dataset import DataConfig, Dataset, SceneRecord, build_dataset, load_dataset, make_record
from .episode import (Episode, Observation, PerturbConfig, PlanningContext, make_context, stage1_context,
                      two_stage_episode, two_stage_episodes)
from .expert import expert_is_safe, expert_trajectory, simulate_expert
from .shapes import Polyline, box_corners, boxes_intersect, polygons_intersect_sat
from .world import (N_CLASSES, BEVClass, GridConfig, Kind, Scenario, generate_scenario,
                    in_drivable, rasterize_bev, step_agents)

__all__ = [
    "DataConfig", "Dataset", "SceneRecord", "build_dataset", "load_dataset", "make_record",
    "Episode", "Observation", "PerturbConfig", "PlanningContext", "make_context",
    "stage1_context", "two_stage_episode", "two_stage_episodes", "expert_is_safe", "expert_trajectory", "simulate_expert", "Polyline",
    "box_corners", "boxes_intersect", "polygons_intersect_sat", "N_CLASSES", "BEVClass",
    "GridConfig", "Kind", "Scenario", "generate_scenario", "in_drivable", "rasterize_bev",
    "step_agents",
]
