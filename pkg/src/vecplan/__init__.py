"""vecplan: vectorized belief-tree planner for interactive driving."""

__version__ = "0.1.0"

from .harness import (
    EpisodeResult,
    LaneLayout,
    SceneSpec,
    ThroughputRecord,
    generate_scene,
    run_benchmark,
    run_episode,
    scene_from_json,
    scene_to_json,
)
from .qmdp_search import PlanResult, SearchConfig, SearchTelemetry, plan
from .scenario_model import (
    AgentHypotheses,
    AgentState,
    Belief,
    EgoState,
    IntentionSpec,
    MacroAction,
    ModelParams,
    ReferencePath,
    RewardSpec,
    Scenario,
    Trajectory,
    build_action_set,
    sample_scenarios,
)
from .serial_ref import serial_plan
from .traj_opt import TrajOptResult, optimize_trajectory

__all__ = [
    "AgentHypotheses",
    "AgentState",
    "Belief",
    "EgoState",
    "EpisodeResult",
    "IntentionSpec",
    "LaneLayout",
    "MacroAction",
    "ModelParams",
    "PlanResult",
    "ReferencePath",
    "RewardSpec",
    "Scenario",
    "SceneSpec",
    "SearchConfig",
    "SearchTelemetry",
    "ThroughputRecord",
    "TrajOptResult",
    "Trajectory",
    "build_action_set",
    "generate_scene",
    "optimize_trajectory",
    "plan",
    "run_benchmark",
    "run_episode",
    "sample_scenarios",
    "scene_from_json",
    "scene_to_json",
    "serial_plan",
    "__version__",
]
